"""The denoiser and its conditioning paths: encoder, control branch, prompt
embeddings, time embedding, and decoder.

Architecture (default config, 32x32 grayscale):

  encoder    conv3x3 -> silu -> avgpool2 -> conv3x3          image -> 8x16x16
  control    conv3x3(z_enc) + zeroconv1x1(z_enc ++ prompt)   -> z_lq
  denoiser   concat(z_t, z_lq) -> conv3x3 (+ time & prompt channel biases)
             -> silu -> pool -> conv3x3 -> silu
             -> conv3x3 + zeroconv1x1(pool(z_lq)) -> silu
             -> upsample -> concat skip -> conv3x3 -> silu -> conv3x3
  decoder    conv3x3 -> silu -> upsample2 -> conv3x3 -> silu -> conv1x1
             -> sigmoid                                       latent -> image

Every parameter under "ctrl.zero." starts at exactly zero, so at
initialization the control conditioning and the bottleneck skip contribute
nothing and the network behaves as if those paths were absent.

All weight applications route through a single 2-D product site so low-rank
adapters can hook any parameter uniformly (spatial kernels are viewed as
(out, in*kh*kw) matrices). Inputs may carry a leading batch axis.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import FAMILIES
from .errors import ConfigurationError, DimensionError, ParameterError
from .images import Image
from .rng import stream

QUALITY_TOKENS = ("high-quality", "low-quality")
PROMPT_VOCAB = FAMILIES + QUALITY_TOKENS
DOWNSCALE = 2


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    channels: int = 1
    c_lat: int = 8
    c_enc: int = 12
    c_hid: int = 16
    c_mid: int = 24
    prompt_dim: int = 16
    temb_dim: int = 8

    def __post_init__(self):
        if self.image_size % DOWNSCALE:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by {DOWNSCALE}")
        if self.temb_dim % 2:
            raise ConfigurationError(f"temb_dim must be even, got {self.temb_dim}")

    @property
    def latent_size(self) -> int:
        return self.image_size // DOWNSCALE

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "c_lat": self.c_lat,
            "c_enc": self.c_enc,
            "c_hid": self.c_hid,
            "c_mid": self.c_mid,
            "prompt_dim": self.prompt_dim,
            "temb_dim": self.temb_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(**d)


def parameter_plan(cfg: NetConfig) -> list:
    """Fixed creation order of (name, shape, init) triples; init is
    "gauss" (std 1/sqrt(fan_in)), "unit" (std 1), or "zero"."""
    c = cfg
    return [
        ("enc.conv1.w", (c.c_enc, c.channels, 3, 3), "gauss"),
        ("enc.conv1.b", (c.c_enc,), "zero"),
        ("enc.conv2.w", (c.c_lat, c.c_enc, 3, 3), "gauss"),
        ("enc.conv2.b", (c.c_lat,), "zero"),
        ("ctrl.conv.w", (c.c_lat, c.c_lat, 3, 3), "gauss"),
        ("ctrl.conv.b", (c.c_lat,), "zero"),
        ("ctrl.zero.conv.w", (c.c_lat, c.c_lat + c.prompt_dim, 1, 1), "zero"),
        ("ctrl.zero.conv.b", (c.c_lat,), "zero"),
        ("ctrl.zero.sft.w", (c.c_mid, c.c_lat, 1, 1), "zero"),
        ("ctrl.zero.sft.b", (c.c_mid,), "zero"),
        ("den.temb.w", (c.c_hid, c.temb_dim), "gauss"),
        ("den.pemb.w", (c.c_hid, c.prompt_dim), "gauss"),
        ("den.conv_in.w", (c.c_hid, 2 * c.c_lat, 3, 3), "gauss"),
        ("den.conv_in.b", (c.c_hid,), "zero"),
        ("den.down.w", (c.c_mid, c.c_hid, 3, 3), "gauss"),
        ("den.down.b", (c.c_mid,), "zero"),
        ("den.mid.w", (c.c_mid, c.c_mid, 3, 3), "gauss"),
        ("den.mid.b", (c.c_mid,), "zero"),
        ("den.up.w", (c.c_hid, c.c_mid + c.c_hid, 3, 3), "gauss"),
        ("den.up.b", (c.c_hid,), "zero"),
        ("den.conv_out.w", (c.c_lat, c.c_hid, 3, 3), "gauss"),
        ("den.conv_out.b", (c.c_lat,), "zero"),
        ("dec.conv1.w", (c.c_enc, c.c_lat, 3, 3), "gauss"),
        ("dec.conv1.b", (c.c_enc,), "zero"),
        ("dec.conv2.w", (c.c_enc, c.c_enc, 3, 3), "gauss"),
        ("dec.conv2.b", (c.c_enc,), "zero"),
        ("dec.out.w", (c.channels, c.c_enc, 1, 1), "gauss"),
        ("dec.out.b", (c.channels,), "zero"),
        ("prompt.table.w", (len(PROMPT_VOCAB), c.prompt_dim), "unit"),
    ]


class NetParams:
    """Ordered name -> Tensor map; iteration order is the checkpoint order."""

    def __init__(self, config: NetConfig, tensors: dict):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> T.Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ParameterError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list:
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list:
        return list(self._tensors.values())

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def param_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def detach_copy(self) -> "NetParams":
        return NetParams(
            self.config,
            {k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()},
        )


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    rng = stream(seed, "init")
    tensors = {}
    for name, shape, kind in parameter_plan(cfg):
        if kind == "zero":
            data = np.zeros(shape)
        elif kind == "gauss":
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        elif kind == "unit":
            data = rng.normal(0.0, 1.0, size=shape)
        else:
            raise ConfigurationError(f"unknown init kind {kind!r}")
        tensors[name] = T.Tensor(data, requires_grad=True)
    return NetParams(cfg, tensors)


# ---------------------------------------------------------------------------
# adapter routing: every weight application flows through _apply_weight


def _adapter_map(adapters) -> dict:
    by_target = {}
    for a in adapters or ():
        if a.enabled:
            by_target.setdefault(a.target, []).append(a)
    return by_target


def _apply_weight(x2d: T.Tensor, params: NetParams, name: str, adapters: dict) -> T.Tensor:
    """y = x @ W2d.T plus any attached low-rank deltas x @ (A B).T."""
    w = params[name]
    w2d = w if w.ndim == 2 else T.reshape(w, (w.shape[0], w.size // w.shape[0]))
    y = T.linear(x2d, w2d)
    for a in adapters.get(name, ()):
        y = T.add(y, T.linear(T.linear(x2d, a.B), a.A))
    return y


def _conv(x: T.Tensor, params: NetParams, base: str, padding: int, adapters: dict) -> T.Tensor:
    w = params[base + ".w"]
    co, ci, kh, kw = w.shape
    batched = x.ndim == 4
    if x.shape[1 if batched else 0] != ci:
        raise DimensionError(f"{base}: input {x.shape} vs kernel {w.shape}")
    cols = T.im2col(x, kh, kw, padding)
    y2d = _apply_weight(cols, params, base + ".w", adapters)
    if batched:
        n, _, h, wd = x.shape
        lead = (n, h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1)
    else:
        _, h, wd = x.shape
        lead = (h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1)
    out = T.fold_channels_last(y2d, lead)
    return T.channel_bias(out, params[base + ".b"])


# ---------------------------------------------------------------------------
# prompt and time embeddings


def prompt_ids(prompts) -> list:
    if isinstance(prompts, str):
        prompts = [prompts]
    if not prompts:
        raise ParameterError("empty prompt list")
    ids = []
    for p in prompts:
        if p not in PROMPT_VOCAB:
            raise ParameterError(f"unknown prompt token {p!r}; vocabulary: {', '.join(PROMPT_VOCAB)}")
        ids.append(PROMPT_VOCAB.index(p))
    return ids


def prompt_embedding(params: NetParams, prompts) -> T.Tensor:
    """Mean of the table rows named by ``prompts`` (a token or list of tokens)."""
    return T.reshape(prompt_embedding_batch(params, [prompts]), (params.config.prompt_dim,))


def prompt_embedding_batch(params: NetParams, prompt_lists) -> T.Tensor:
    """(n, prompt_dim) embeddings, row i the mean embedding of prompt_lists[i]."""
    table = params["prompt.table.w"]
    weights = np.zeros((len(prompt_lists), table.shape[0]))
    for i, prompts in enumerate(prompt_lists):
        ids = prompt_ids(prompts)
        for j in ids:
            weights[i, j] += 1.0 / len(ids)
    return T.matmul(T.Tensor(weights), table)


def time_embedding(t, dim: int) -> T.Tensor:
    """Sinusoidal embedding of (physical) step indices; t scalar or 1-D array."""
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = tv[:, None] * freqs[None, :]
    return T.Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))


# ---------------------------------------------------------------------------
# encoder / control / denoiser / decoder


@dataclass
class ConditioningBundle:
    z_lq: T.Tensor
    prompt: object = None  # token or list of tokens, kept for provenance
    prompt_embedding: T.Tensor = None


def _as_tensor_image(img) -> T.Tensor:
    if isinstance(img, Image):
        return T.Tensor(img.data)
    if isinstance(img, T.Tensor):
        return img
    return T.Tensor(np.asarray(img, dtype=np.float64))


def encode(img, params: NetParams, adapters=()) -> T.Tensor:
    """Image (or (c,h,w)/(n,c,h,w) tensor) -> latent at half resolution."""
    x = _as_tensor_image(img)
    h, w = x.shape[-2], x.shape[-1]
    if h % DOWNSCALE or w % DOWNSCALE:
        raise ConfigurationError(f"encode: dims {h}x{w} not divisible by {DOWNSCALE}")
    amap = _adapter_map(adapters)
    h1 = T.silu(_conv(x, params, "enc.conv1", 1, amap))
    return _conv(T.avg_pool2(h1), params, "enc.conv2", 1, amap)


def encode_array(params: NetParams, arr: np.ndarray) -> np.ndarray:
    """Latent features as a plain array, no tape (metrics back end)."""
    with T.no_grad():
        return encode(T.Tensor(arr), params).data


def control_features(z_enc: T.Tensor, prompt_emb: T.Tensor, params: NetParams,
                     adapters=(), include_zero: bool = True) -> T.Tensor:
    """z_lq = Conv(z_enc) + ZeroConv(z_enc ++ prompt); the zero path starts at 0.

    ``include_zero=False`` drops the zero-initialized path entirely (used by
    neutrality checks; at init the two variants agree bit-for-bit).
    """
    amap = _adapter_map(adapters)
    plain = _conv(z_enc, params, "ctrl.conv", 1, amap)
    if not include_zero:
        return plain
    hs, ws = z_enc.shape[-2], z_enc.shape[-1]
    if z_enc.ndim == 4:
        if prompt_emb.ndim != 2 or prompt_emb.shape[0] != z_enc.shape[0]:
            raise DimensionError(f"control: prompt {prompt_emb.shape} vs batch {z_enc.shape}")
    elif prompt_emb.ndim != 1:
        raise DimensionError(f"control: prompt embedding must be 1-D, got {prompt_emb.shape}")
    spread = T.broadcast_spatial(prompt_emb, hs, ws)
    zc_in = T.concat_channels(z_enc, spread)
    zero = _conv(zc_in, params, "ctrl.zero.conv", 0, amap)
    return T.add(plain, zero)


def denoise(z_t: T.Tensor, t, cond: ConditioningBundle, params: NetParams,
            adapters=(), include_zero: bool = True) -> T.Tensor:
    """Predicted noise for z_t at physical step(s) t, conditioned on cond.

    t is a scalar for a single latent or a length-n array for a batch.
    """
    cfg = params.config
    batched = z_t.ndim == 4
    x = z_t if batched else T.reshape(z_t, (1,) + z_t.shape)
    z_lq = cond.z_lq if cond.z_lq.ndim == 4 else T.reshape(cond.z_lq, (1,) + cond.z_lq.shape)
    if x.shape[1] != cfg.c_lat or x.shape != z_lq.shape:
        raise DimensionError(f"denoise: z_t {z_t.shape} vs z_lq {cond.z_lq.shape}")
    pemb = cond.prompt_embedding
    if pemb.ndim == 1:
        pemb = T.reshape(pemb, (1, pemb.shape[0]))
    n = x.shape[0]
    if pemb.shape != (n, cfg.prompt_dim):
        raise DimensionError(f"denoise: prompt embedding {pemb.shape}, want ({n}, {cfg.prompt_dim})")
    tv = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if tv.shape == (1,) and n > 1:
        tv = np.repeat(tv, n)
    if tv.shape != (n,):
        raise DimensionError(f"denoise: t has shape {tv.shape}, want ({n},)")

    amap = _adapter_map(adapters)
    h = _conv(T.concat_channels(x, z_lq), params, "den.conv_in", 1, amap)
    tb = _apply_weight(time_embedding(tv, cfg.temb_dim), params, "den.temb.w", amap)
    pb = _apply_weight(pemb, params, "den.pemb.w", amap)
    h1 = T.silu(T.channel_bias(T.channel_bias(h, tb), pb))

    h2 = T.silu(_conv(T.avg_pool2(h1), params, "den.down", 1, amap))
    m = _conv(h2, params, "den.mid", 1, amap)
    if include_zero:
        m = T.add(m, _conv(T.avg_pool2(z_lq), params, "ctrl.zero.sft", 0, amap))
    h3 = T.silu(m)

    cat = T.concat_channels(T.upsample2(h3), h1)
    h4 = T.silu(_conv(cat, params, "den.up", 1, amap))
    out = _conv(h4, params, "den.conv_out", 1, amap)
    return out if batched else T.reshape(out, z_t.shape)


def decode_tensor(z: T.Tensor, params: NetParams, adapters=()) -> T.Tensor:
    """Latent -> image tensor in [0,1] (sigmoid output), differentiable."""
    cfg = params.config
    if z.shape[1 if z.ndim == 4 else 0] != cfg.c_lat:
        raise DimensionError(f"decode: latent {z.shape}, want {cfg.c_lat} channels")
    amap = _adapter_map(adapters)
    h = T.silu(_conv(z, params, "dec.conv1", 1, amap))
    h = T.silu(_conv(T.upsample2(h), params, "dec.conv2", 1, amap))
    return T.sigmoid(_conv(h, params, "dec.out", 0, amap))


def decode(z: T.Tensor, params: NetParams, adapters=()) -> Image:
    with T.no_grad():
        out = decode_tensor(z, params, adapters)
    if out.ndim != 3:
        raise DimensionError(f"decode: expected a single latent, got {z.shape}")
    return Image(out.data)


def make_denoiser(params: NetParams, sched, adapters=()):
    """Denoiser callable net(z_t, t, cond) with t an index into ``sched``.

    Maps schedule indices to physical timesteps via sched.base_t so respaced
    sampling sees the same embeddings as training.
    """

    def net(z_t, t, cond):
        t_phys = sched.base_t[np.asarray(t, dtype=np.int64)]
        return denoise(z_t, t_phys, cond, params, adapters)

    return net
