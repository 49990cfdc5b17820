"""Low-rank adaptation: rank-r deltas on selected weight matrices.

An adapter holds A (d x r) and B (r x k) for a target weight viewed as a
(d, k) matrix; the effective weight is W + A x B, never materialized during
training (the forward adds x B^T A^T as two skinny products). A starts
Gaussian with variance 1/r and B starts at zero, so the delta is exactly
zero until the first update. Spatial conv kernels are adapted through their
(out, in*kh*kw) 2-D view. There is no alpha/rank output scaling: the delta
is A x B exactly as stored.
"""

import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation, DimensionError
from .rng import stream

DEFAULT_TARGETS = ("den.temb.w", "den.pemb.w", "ctrl.zero.conv.w", "ctrl.zero.sft.w")


@dataclass
class LoraConfig:
    rank: int = 4
    targets: tuple = DEFAULT_TARGETS
    reg_lambda: float = 1e-4
    lr: float = 1e-3

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"lora rank must be >= 1, got {self.rank}")
        if self.reg_lambda < 0:
            raise ConfigurationError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        self.targets = tuple(self.targets)


@dataclass
class LoraAdapter:
    target: str
    A: T.Tensor
    B: T.Tensor
    rank: int
    enabled: bool = True
    _original: np.ndarray = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.A.data @ self.B.data


def _matrix_view_shape(w: T.Tensor, name: str):
    if w.ndim == 2:
        return w.shape
    if w.ndim == 4:
        return (w.shape[0], w.size // w.shape[0])
    raise ConfigurationError(f"lora target {name!r} has rank {w.ndim}; need a 2-D (or conv) weight")


def attach(params, config: LoraConfig, seed: int) -> list:
    """One adapter per matched parameter; matched base weights are frozen."""
    matched = []
    for name in params.names():
        if any(fnmatch.fnmatch(name, pat) for pat in config.targets):
            matched.append(name)
    if not matched:
        raise ConfigurationError(f"lora targets {config.targets} match no parameters")
    adapters = []
    for i, name in enumerate(matched):
        w = params[name]
        d, k = _matrix_view_shape(w, name)
        r = config.rank
        if r > min(d, k):
            raise ConfigurationError(f"lora rank {r} exceeds min dim of {name} ({d}x{k})")
        rng = stream(seed, "lora.init", i)
        A = T.Tensor(rng.normal(0.0, math.sqrt(1.0 / r), size=(d, r)), requires_grad=True)
        B = T.Tensor(np.zeros((r, k)), requires_grad=True)
        w.requires_grad = False
        adapters.append(LoraAdapter(name, A, B, r))
    return adapters


def effective_forward(x: T.Tensor, W: T.Tensor, adapter: LoraAdapter) -> T.Tensor:
    """x @ (W + A B)^T without materializing the sum; W stays out of the tape."""
    d, k = _matrix_view_shape(W, adapter.target)
    if (d, k) != (adapter.d, adapter.k):
        raise DimensionError(
            f"adapter {adapter.target}: W viewed as ({d},{k}) vs A/B ({adapter.d},{adapter.k})"
        )
    w2d = W if W.ndim == 2 else T.reshape(W, (d, k))
    base = T.linear(x, w2d)
    if not adapter.enabled:
        return base
    return T.add(base, T.linear(T.linear(x, adapter.B), adapter.A))


def reg_loss(adapters, lam: float) -> T.Tensor:
    """lam * sum of squared Frobenius norms of every A and B."""
    if lam < 0:
        raise ConfigurationError(f"reg lambda must be >= 0, got {lam}")
    if lam == 0 or not adapters:
        return T.Tensor(0.0)
    total = None
    for a in adapters:
        term = T.add(T.frobenius_norm_sq(a.A), T.frobenius_norm_sq(a.B))
        total = term if total is None else T.add(total, term)
    return T.scale(total, lam)


def merge(params, adapters) -> object:
    """Fold each delta into its target in place; adapters become disabled."""
    for a in adapters:
        if not a.enabled:
            raise ContractViolation(f"adapter {a.target} already merged or disabled")
    for a in adapters:
        w = params[a.target]
        a._original = w.data.copy()
        w.data = w.data + a.delta().reshape(w.shape)
        a.enabled = False
    return params


def unmerge(params, adapters) -> object:
    """Restore the stored pre-merge weights bit-exactly; adapters re-enable."""
    for a in adapters:
        if a.enabled or a._original is None:
            raise ContractViolation(f"adapter {a.target} is not merged")
    for a in adapters:
        params[a.target].data = a._original
        a._original = None
        a.enabled = True
    return params


def lora_step(adapters, grads, lr: float):
    """SGD update A -= lr*gA, B -= lr*gB; grads=None reads the .grad slots."""
    if grads is None:
        grads = [(a.A.grad, a.B.grad) for a in adapters]
    if len(grads) != len(adapters):
        raise ContractViolation(f"lora_step: {len(grads)} grads for {len(adapters)} adapters")
    for a, (gA, gB) in zip(adapters, grads):
        if gA is None or gB is None:
            raise ContractViolation(f"lora_step: missing gradient for {a.target}")
        a.A.data -= lr * np.asarray(gA)
        a.B.data -= lr * np.asarray(gB)


def trainable_param_count(adapters) -> int:
    return sum(a.rank * (a.d + a.k) for a in adapters)


def zero_adapter_grads(adapters):
    for a in adapters:
        a.A.grad = None
        a.B.grad = None
