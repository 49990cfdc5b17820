"""Procedural labeled image corpus and batch iteration.

Eight parametric families of grayscale patterns stand in for a captioned
photo corpus. Items are assigned to families round-robin (item i belongs to
family i % 8), each with per-item parameters drawn from a dedicated seeded
stream, so the dataset is a pure function of (seed, n, size).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError
from .images import Image, save_pnm
from .rng import stream

FAMILIES = (
    "gradient",
    "checkerboard",
    "blobs",
    "stripes",
    "rings",
    "texture",
    "disks",
    "cross",
)

VALID_SIZES = (16, 32, 64)


@dataclass
class DatasetItem:
    clean: Image
    prompt: str
    tags: list = field(default_factory=list)


def _grid(size):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")  # y, x in [0,1]


def _gradient(rng, size):
    y, x = _grid(size)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    t = x * np.cos(theta) + y * np.sin(theta)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return lo + (hi - lo) * t


def _checkerboard(rng, size):
    cell = int(rng.choice([2, 4, 8]))
    phase = int(rng.integers(0, 2))
    i, j = np.indices((size, size))
    mask = ((i // cell + j // cell + phase) % 2).astype(np.float64)
    return 0.1 + 0.8 * mask  # exactly {0.1, 0.9}


def _blobs(rng, size):
    y, x = _grid(size)
    img = np.full((size, size), rng.uniform(0.05, 0.2))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        s = rng.uniform(0.06, 0.18)
        a = rng.uniform(0.3, 0.8)
        img += a * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
    return np.clip(img, 0.0, 1.0)


def _stripes(rng, size):
    y, x = _grid(size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    w = np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    return 0.5 + 0.4 * w


def _rings(rng, size):
    y, x = _grid(size)
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    freq = rng.uniform(3.0, 8.0)
    r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    return 0.5 + 0.4 * np.cos(2 * np.pi * freq * r)


def _texture(rng, size):
    # smooth noise-free texture: a few random low-frequency cosine harmonics
    y, x = _grid(size)
    img = np.full((size, size), 0.5)
    for _ in range(4):
        fy, fx = rng.integers(1, 5, size=2)
        amp = rng.uniform(0.05, 0.15)
        ph = rng.uniform(0.0, 2 * np.pi, size=2)
        img += amp * np.cos(2 * np.pi * fy * y + ph[0]) * np.cos(2 * np.pi * fx * x + ph[1])
    return np.clip(img, 0.0, 1.0)


def _disks(rng, size):
    y, x = _grid(size)
    dark = bool(rng.integers(0, 2))
    img = np.full((size, size), 0.85 if dark else 0.15)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        rad = rng.uniform(0.08, 0.22)
        mask = (y - cy) ** 2 + (x - cx) ** 2 <= rad * rad
        img[mask] = 0.15 if dark else 0.85
    return img


def _cross(rng, size):
    y, x = _grid(size)
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    thick = rng.uniform(0.04, 0.12)
    bg = rng.uniform(0.1, 0.3)
    fg = rng.uniform(0.7, 0.9)
    img = np.full((size, size), bg)
    img[np.abs(y - cy) < thick] = fg
    img[np.abs(x - cx) < thick] = fg
    return img


_GENERATORS = {
    "gradient": _gradient,
    "checkerboard": _checkerboard,
    "blobs": _blobs,
    "stripes": _stripes,
    "rings": _rings,
    "texture": _texture,
    "disks": _disks,
    "cross": _cross,
}


def synth_item(seed: int, index: int, size: int) -> DatasetItem:
    family = FAMILIES[index % len(FAMILIES)]
    rng = stream(seed, "synth." + family, index)
    pix = _GENERATORS[family](rng, size)
    return DatasetItem(Image(pix[None, :, :]), family, ["high-quality"])


def synth_dataset(seed: int, n: int, size: int) -> list:
    if size not in VALID_SIZES:
        raise ParameterError(f"size must be one of {VALID_SIZES}, got {size}")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    return [synth_item(seed, i, size) for i in range(n)]


def batches(data: list, batch: int, seed: int):
    """Yield epoch after epoch of seeded shuffled batches; short final batch kept."""
    if not data:
        raise ConfigurationError("batches: empty dataset")
    if batch < 1 or batch > len(data):
        raise ConfigurationError(f"batches: batch {batch} outside [1, {len(data)}]")
    epoch = 0
    while True:
        order = stream(seed, "batches", epoch).permutation(len(data))
        for lo in range(0, len(data), batch):
            yield [data[i] for i in order[lo : lo + batch]]
        epoch += 1


def epoch_batches(data: list, batch: int, seed: int, epoch: int = 0) -> list:
    """One epoch's batches as a list (non-streaming helper for tests and eval)."""
    if not data:
        raise ConfigurationError("epoch_batches: empty dataset")
    order = stream(seed, "batches", epoch).permutation(len(data))
    return [[data[i] for i in order[lo : lo + batch]] for lo in range(0, len(data), batch)]


def write_dataset(items: list, outdir, prefix: str = "img") -> str:
    """Save items as PGM files plus a JSON manifest; returns the manifest path."""
    import os

    os.makedirs(outdir, exist_ok=True)
    entries = []
    width = max(4, len(str(len(items) - 1)))
    for i, item in enumerate(items):
        name = f"{prefix}_{i:0{width}d}.pgm"
        save_pnm(os.path.join(outdir, name), item.clean)
        entries.append({"file": name, "prompt": item.prompt, "tags": list(item.tags)})
    manifest = os.path.join(outdir, "manifest.json")
    with open(manifest, "w") as f:
        json.dump({"items": entries}, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_manifest(path) -> list:
    """Load (Image, prompt, tags) items listed in a manifest JSON."""
    import os

    from .images import load_pnm

    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    items = []
    for entry in doc["items"]:
        img = load_pnm(os.path.join(base, entry["file"]))
        items.append(DatasetItem(img, entry["prompt"], list(entry.get("tags", []))))
    return items
