"""Synthetic grayscale corpus and the contrast / blur / noise degradations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

KINDS = ("C", "B", "N")

# sampling ranges used for pools and datasets
ALPHA_RANGE = (0.3, 0.7)
BLUR_RANGE = (1.0, 3.0)
NOISE_RANGE = (0.02, 0.10)


@dataclass(frozen=True)
class TaskSpec:
    """A degradation task: which corruptions it composes and which single
    tasks it mines from (empty for single-degradation tasks)."""

    task_id: str
    composition: tuple[str, ...]
    constituents: tuple[str, ...] = ()

    def __post_init__(self):
        comp = tuple(self.composition)
        if not comp or any(k not in KINDS for k in comp) or len(set(comp)) != len(comp):
            raise ValueError(f"invalid composition {comp!r}")
        object.__setattr__(self, "composition", tuple(k for k in KINDS if k in comp))
        object.__setattr__(self, "constituents", tuple(self.constituents))
        if (len(comp) >= 2) != bool(self.constituents):
            raise ValueError("constituents must be given exactly for compound tasks")

    @property
    def is_compound(self) -> bool:
        return len(self.composition) > 1


@dataclass(frozen=True)
class DegradationParams:
    alpha: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be non-negative")


def synth_clean(seed: int, h: int = 32, w: int = 32) -> np.ndarray:
    """Procedural clean patch of shape (1, 1, h, w) with values in [0, 1].

    Smooth gradient background, 2-5 filled shapes and band-limited texture,
    rescaled so the dynamic range is at least 0.5.
    """
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h - 1
    xx /= w - 1
    theta = rng.uniform(0, 2 * math.pi)
    img = 0.3 + 0.3 * (np.cos(theta) * xx + np.sin(theta) * yy)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        level = rng.uniform(-0.45, 0.45)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hy, hx = rng.uniform(0.06, 0.25, size=2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        img = np.where(mask, img + level, img)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5, mode="wrap")
    img = img + 0.08 * texture / (np.abs(texture).max() + 1e-12)
    lo, hi = img.min(), img.max()
    span = max(hi - lo, 1e-12)
    target = rng.uniform(0.6, 0.95)
    img = (img - lo) / span * target + rng.uniform(0.0, 1.0 - target)
    return np.clip(img, 0.0, 1.0)[None, None]


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def contrast(x: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 1.0:
        return x.copy()
    m = x.mean(axis=(-2, -1), keepdims=True)
    return np.clip(alpha * (x - m) + m, 0.0, 1.0)


def blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return x.copy()
    k = _gaussian_kernel1d(sigma)
    # mode="symmetric" (scipy "reflect") mirrors including the edge pixel
    y = ndimage.correlate1d(x, k, axis=-1, mode="reflect")
    y = ndimage.correlate1d(y, k, axis=-2, mode="reflect")
    return np.clip(y, 0.0, 1.0)


def noise(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(x + sigma * rng.standard_normal(x.shape), 0.0, 1.0)


def apply_degradation(x: np.ndarray, spec: TaskSpec, params: DegradationParams) -> np.ndarray:
    """Apply the task's corruptions in the fixed order C, B, N, clamping each step."""
    y = np.asarray(x, dtype=np.float64)
    if "C" in spec.composition:
        y = contrast(y, params.alpha)
    if "B" in spec.composition:
        y = blur(y, params.blur_sigma)
    if "N" in spec.composition:
        y = noise(y, params.noise_sigma, params.seed)
    return y


def sample_params(rng: np.random.Generator) -> DegradationParams:
    return DegradationParams(
        alpha=float(rng.uniform(*ALPHA_RANGE)),
        blur_sigma=float(rng.uniform(*BLUR_RANGE)),
        noise_sigma=float(rng.uniform(*NOISE_RANGE)),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def build_task_sequence() -> list[TaskSpec]:
    """The seven-task incremental sequence C, B, N, CB, CN, BN, CBN."""
    return [
        TaskSpec("C", ("C",)),
        TaskSpec("B", ("B",)),
        TaskSpec("N", ("N",)),
        TaskSpec("CB", ("C", "B"), ("C", "B")),
        TaskSpec("CN", ("C", "N"), ("C", "N")),
        TaskSpec("BN", ("B", "N"), ("B", "N")),
        TaskSpec("CBN", ("C", "B", "N"), ("C", "B", "N")),
    ]


def _task_salt(task_id: str) -> int:
    return sum((i + 1) * ord(ch) for i, ch in enumerate(task_id))


@dataclass
class Dataset:
    """Degraded/clean pairs stacked as (n, 1, H, W) arrays."""

    degraded: np.ndarray
    clean: np.ndarray
    params: list[DegradationParams] = field(default_factory=list)

    def __len__(self) -> int:
        return self.clean.shape[0]


def clean_corpus(n: int, size: int, seed: int) -> np.ndarray:
    return np.concatenate([synth_clean(seed * 100_003 + i, size, size) for i in range(n)])


def degrade_corpus(clean: np.ndarray, task: TaskSpec, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, _task_salt(task.task_id)])
    params = [sample_params(rng) for _ in range(clean.shape[0])]
    degraded = np.concatenate([apply_degradation(clean[i:i + 1], task, p)
                               for i, p in enumerate(params)])
    return Dataset(degraded, clean, params)


class PoolItem(NamedTuple):
    degraded: np.ndarray
    clean: np.ndarray
    params: DegradationParams


def make_sample_pool(task: TaskSpec, n: int, seed: int, size: int = 32,
                     clean: np.ndarray | None = None) -> list[PoolItem]:
    """N deterministic (degraded, clean, params) items, images (1, 1, H, W).

    When ``clean`` is given the pool draws its references from it (the
    training split); otherwise fresh synthetic images are generated.
    """
    if n < 1:
        raise ValueError("pool size must be >= 1")
    rng = np.random.default_rng([seed, _task_salt(task.task_id), 7])
    pool = []
    for k in range(n):
        if clean is not None:
            ref = clean[int(rng.integers(0, clean.shape[0]))][None]
        else:
            ref = synth_clean(int(rng.integers(0, 2**31 - 1)), size, size)
        params = sample_params(rng)
        pool.append(PoolItem(apply_degradation(ref, task, params), ref, params))
    return pool


# ---------------------------------------------------------------------------
# binary PGM


def write_pgm(path, img: np.ndarray, bits: int = 8) -> None:
    arr = np.asarray(img, dtype=np.float64).squeeze()
    if arr.ndim != 2:
        raise ValueError("PGM images must be 2-d")
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(arr, 0, 1) * maxval)
    payload = q.astype(">u1" if bits == 8 else ">u2").tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (1, 1, H, W) float array scaled to [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = ">u1" if maxval < 256 else ">u2"
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return (arr.astype(np.float64) / maxval)[None, None]
