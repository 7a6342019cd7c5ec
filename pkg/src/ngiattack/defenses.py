"""Input purification and smoothing defenses placed in front of a target model.

Defenses are black boxes to the attacker: they expose ``predict`` only.
Random defenses draw from per-image generators keyed by (seed, image index),
so two adversarial batches built from the same images see the same noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from . import tensor as T
from .transforms import image_streams

KINDS = ("bit_red", "jpeg_q", "rand_resize_pad", "rand_smooth")

# JPEG Annex K luminance table
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "bit_red"
    bits: int = 4
    quality: int = 75
    sigma: float = 0.1
    votes: int = 25
    resize_min_ratio: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DefenseConfigError(f"unknown defense {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.bits <= 8:
            raise DefenseConfigError(f"bits must satisfy 1 <= b <= 8, got {self.bits}")
        if not 0 < self.quality <= 100:
            raise DefenseConfigError(f"quality must satisfy 0 < q <= 100, got {self.quality}")
        if self.sigma < 0:
            raise DefenseConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.votes < 1:
            raise DefenseConfigError(f"votes must be >= 1, got {self.votes}")
        if not 0 < self.resize_min_ratio <= 1:
            raise DefenseConfigError(f"resize_min_ratio must lie in (0, 1], got {self.resize_min_ratio}")

    def label(self) -> str:
        return {
            "bit_red": f"bit_red(b={self.bits})",
            "jpeg_q": f"jpeg(q={self.quality})",
            "rand_resize_pad": f"r&p({self.resize_min_ratio:g})",
            "rand_smooth": f"rs(s={self.sigma:g},n={self.votes})",
        }[self.kind]


# ------------------------------------------------------------------ purifiers


def bit_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Round every value to the nearest of ``2**bits`` evenly spaced levels in [0, 1]."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must satisfy 1 <= b <= 8, got {bits}")
    levels = 2**bits - 1
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * levels) / levels, 0.0, 1.0)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the IJG quality formula.

    Entries that scale below 1 are left at 0, meaning "do not quantize";
    at quality 100 every entry is 0 and the codec is lossless.
    """
    if not 0 < quality <= 100:
        raise ValueError(f"quality must satisfy 0 < q <= 100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50.0) / 100.0), 0.0, 255.0)


def jpeg_quantize(x: np.ndarray, quality: int = 75, table: np.ndarray | None = None) -> np.ndarray:
    """8x8 block DCT, quantize, inverse DCT; every channel uses the luminance path.

    Quantization truncates toward zero, so no coefficient grows in magnitude.
    Sides that are not multiples of 8 are edge-padded and cropped back.
    """
    x = np.asarray(x, dtype=np.float64)
    q = quant_table(quality) if table is None else np.asarray(table, dtype=np.float64)
    n, c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    y = np.pad(x * 255.0 - 128.0, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    bh, bw = y.shape[2] // 8, y.shape[3] // 8
    blocks = y.reshape(n, c, bh, 8, bw, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    step = np.where(q > 0, q, 1.0)
    coef = np.where(q > 0, np.trunc(coef / step) * step, coef)
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 1, 2, 4, 3, 5).reshape(y.shape)
    return np.clip((rec[:, :, :h, :w] + 128.0) / 255.0, 0.0, 1.0)


def rand_resize_pad_index(h: int, w: int, rng: np.random.Generator, min_ratio: float = 0.9) -> np.ndarray:
    side_h = int(rng.integers(math.ceil(min_ratio * h), h + 1))
    side_w = side_h if h == w else int(rng.integers(math.ceil(min_ratio * w), w + 1))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    index = np.full((h, w), -1, dtype=np.int64)
    index[top : top + side_h, left : left + side_w] = T.resize_index(h, w, side_h, side_w)
    return index


def rand_resize_pad_defend(x: np.ndarray, rng, min_ratio: float = 0.9) -> np.ndarray:
    """Nearest-resize each image to a random side in [ceil(min_ratio*H), H], zero-pad back at a random offset.

    ``rng`` is one generator (drawn in image order) or one per image.
    """
    x = np.asarray(x, dtype=np.float64)
    n, _, h, w = x.shape
    rngs = [rng] * n if isinstance(rng, np.random.Generator) else rng
    index = np.stack([rand_resize_pad_index(h, w, r, min_ratio) for r in rngs])
    return T.gather(x, index).data


def smoothed_predict(model, x: np.ndarray, sigma: float, n: int, rng, return_counts: bool = False):
    """Majority vote of ``model`` over ``n`` copies of each image with N(0, sigma^2) noise.

    Ties go to the smallest class index. Noisy copies are not clipped.
    """
    if n < 1:
        raise ValueError(f"need at least one vote, got {n}")
    x = np.asarray(x, dtype=np.float64)
    rngs = [rng] * len(x) if isinstance(rng, np.random.Generator) else rng
    classes = model.spec.num_classes
    counts = np.zeros((len(x), classes), dtype=np.int64)
    per_chunk = max(1, 1024 // n)
    for start in range(0, len(x), per_chunk):
        sl = slice(start, start + per_chunk)
        xs = x[sl]
        noise = np.stack([r.standard_normal((n, *x.shape[1:])) for r in rngs[sl]])
        noisy = (xs[:, None] + sigma * noise).reshape(-1, *x.shape[1:])
        votes = model.predict(noisy).reshape(len(xs), n)
        for i, v in enumerate(votes):
            counts[start + i] = np.bincount(v, minlength=classes)
    pred = counts.argmax(axis=1)
    return (pred, counts) if return_counts else pred


# ------------------------------------------------------------------ wrapper


class DefendedModel:
    """A target model behind a defense; prediction only."""

    def __init__(self, model, cfg: DefenseConfig):
        self.model = model
        self.cfg = cfg
        self.spec = model.spec
        self.name = f"{model.name}+{cfg.label()}"

    def __repr__(self):
        return f"DefendedModel({self.name!r})"

    def purify(self, x: np.ndarray, index=None) -> np.ndarray:
        c = self.cfg
        if c.kind == "bit_red":
            return bit_reduce(x, c.bits)
        if c.kind == "jpeg_q":
            return jpeg_quantize(x, c.quality)
        if c.kind == "rand_resize_pad":
            return rand_resize_pad_defend(x, self._streams(x, index), c.resize_min_ratio)
        return np.asarray(x, dtype=np.float64)

    def _streams(self, x, index):
        index = np.arange(len(x)) if index is None else np.asarray(index)
        return image_streams(self.cfg.rng_seed, index)

    def predict(self, x: np.ndarray, index=None) -> np.ndarray:
        if self.cfg.kind == "rand_smooth":
            return smoothed_predict(self.model, x, self.cfg.sigma, self.cfg.votes, self._streams(x, index))
        return self.model.predict(self.purify(x, index))

    def accuracy(self, data) -> float:
        return float((self.predict(data.images) == data.labels).mean())
