"""Input and gradient transformations for the attack pipelines.

Images are NCHW batches. Stochastic transforms take either one
``np.random.Generator`` (shared, drawn in image order) or a list with one
generator per image; the latter is what the attacks use so results do not
depend on how a dataset is split into batches.

Transforms that sit on the gradient path (DI, BSR, SI, Admix) accept a
:class:`~ngiattack.tensor.Tensor` and are built from recorded ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

RngLike = np.random.Generator | Sequence[np.random.Generator]


@dataclass(frozen=True)
class TransformConfig:
    di_prob: float = 0.5
    di_min_ratio: float = 0.86
    ti_kernel_size: int = 7
    ti_sigma: float | None = None
    si_copies: int = 5
    admix_m1: int = 5
    admix_m2: int = 3
    admix_eta: float = 0.2
    bsr_blocks: int = 2
    bsr_tau: float = 24.0
    mask_keep_prob: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.di_prob <= 1:
            raise ValueError(f"di_prob must lie in [0, 1], got {self.di_prob}")
        if not 0 <= self.mask_keep_prob <= 1:
            raise ValueError(f"mask_keep_prob must lie in [0, 1], got {self.mask_keep_prob}")
        if not 0 < self.di_min_ratio <= 1:
            raise ValueError(f"di_min_ratio must lie in (0, 1], got {self.di_min_ratio}")
        if self.ti_kernel_size < 1 or self.ti_kernel_size % 2 == 0:
            raise ValueError(f"ti_kernel_size must be a positive odd integer, got {self.ti_kernel_size}")
        if self.si_copies < 1:
            raise ValueError(f"si_copies must be >= 1, got {self.si_copies}")
        if self.admix_m1 < 1 or self.admix_m2 < 0 or self.admix_eta < 0:
            raise ValueError("admix needs m1 >= 1, m2 >= 0 and eta >= 0")
        if self.bsr_blocks < 1 or self.bsr_tau < 0:
            raise ValueError("bsr needs blocks >= 1 and tau >= 0")


def image_streams(seed: int, index) -> list[np.random.Generator]:
    """One generator per image, keyed by (seed, global image index)."""
    return [np.random.default_rng([int(seed), int(i)]) for i in np.asarray(index).reshape(-1)]


def _streams(rng: RngLike, n: int) -> Sequence[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    if len(rng) != n:
        raise ValueError(f"got {len(rng)} generators for {n} images")
    return rng


# ------------------------------------------------------------------ MaskProcess


def draw_mask(shape, keep_prob: float, rng: RngLike) -> np.ndarray:
    """Bernoulli(keep_prob) keep-mask of shape (N, 1, H, W), shared across channels."""
    n, _, h, w = shape
    rngs = _streams(rng, n)
    return np.stack([(r.random((h, w)) < keep_prob) for r in rngs])[:, None].astype(np.float64)


def mask_process(x: np.ndarray, keep_prob: float, rng: RngLike, return_mask: bool = False):
    """Keep each pixel with probability ``keep_prob``, zero it otherwise."""
    if not 0 <= keep_prob <= 1:
        raise ValueError(f"keep probability must lie in [0, 1], got {keep_prob}")
    x = np.asarray(x, dtype=np.float64)
    mask = draw_mask(x.shape, keep_prob, rng)
    out = x * mask
    return (out, mask) if return_mask else out


# ------------------------------------------------------------------ DI


def diverse_input_index(h: int, w: int, p: float, rng: np.random.Generator, min_ratio: float = 0.86):
    """Flat gather index for one image: resize to a smaller side, pad back at a random offset.

    Four values are drawn every call so the stream position does not depend
    on whether the transform fired.
    """
    fire = rng.random() < p
    lo_h = math.ceil(min_ratio * h)
    sh = int(rng.integers(lo_h, h + 1))
    sw = sh if h == w else int(rng.integers(math.ceil(min_ratio * w), w + 1))
    top = int(rng.integers(0, h - sh + 1))
    left = int(rng.integers(0, w - sw + 1))
    if not fire:
        return np.arange(h * w, dtype=np.int64).reshape(h, w)
    index = np.full((h, w), -1, dtype=np.int64)
    index[top : top + sh, left : left + sw] = T.resize_index(h, w, sh, sw)
    return index


def diverse_input(x, p: float, rng: RngLike, min_ratio: float = 0.86) -> Tensor:
    """With probability ``p`` per image, nearest-resize down and zero-pad back to size."""
    if not 0 <= p <= 1:
        raise ValueError(f"DI probability must lie in [0, 1], got {p}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, _, h, w = x.shape
    index = np.stack([diverse_input_index(h, w, p, r, min_ratio) for r in _streams(rng, n)])
    return T.gather(x, index)


# ------------------------------------------------------------------ TI


def gaussian_kernel(size: int, sigma: float | None = None) -> np.ndarray:
    """Normalised 2-D Gaussian; ``sigma`` defaults to (size - 1) / 6 so the window spans +-3 sigma."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if sigma is None:
        sigma = (size - 1) / 6.0
    r = size // 2
    if sigma <= 0:
        k = np.zeros((size, size))
        k[r, r] = 1.0
        return k
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ti_smooth(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with zero-padded borders, same output shape."""
    grad = np.asarray(grad, dtype=np.float64)
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    h, w = grad.shape[-2:]
    padded = np.pad(grad, [(0, 0)] * (grad.ndim - 2) + [(rh, rh), (rw, rw)])
    out = np.zeros_like(grad)
    for i in range(kh):
        for j in range(kw):
            # convolution, not correlation: the kernel is flipped
            out += kernel[kh - 1 - i, kw - 1 - j] * padded[..., i : i + h, j : j + w]
    return out


# ------------------------------------------------------------------ SI / Admix


def _scale(x, factor):
    return T.mul(x, factor) if isinstance(x, Tensor) else np.asarray(x) * factor


def scale_copies(x, m: int) -> list:
    """``[x / 2**i for i in range(m)]``; recorded on the tape for Tensor input."""
    if m < 1:
        raise ValueError(f"need at least one scale copy, got {m}")
    return [x if i == 0 else _scale(x, 1.0 / 2**i) for i in range(m)]


def admix_gammas(m1: int) -> list[float]:
    return [1.0 / 2**i for i in range(m1)]


def admix_mix(x, others: Sequence, gammas: Sequence[float], eta: float) -> list:
    """All ``gamma_i * (x + eta * others_j)``, ordered with i outer and j inner."""
    if eta < 0:
        raise ValueError(f"admix eta must be >= 0, got {eta}")
    if len(others) == 0:
        raise ValueError("admix needs at least one image from another class")
    out = []
    for g in gammas:
        for o in others:
            mixed = T.add(x, np.asarray(o) * eta) if isinstance(x, Tensor) else np.asarray(x) + eta * np.asarray(o)
            out.append(mixed if g == 1.0 else _scale(mixed, g))
    return out


def sample_admix_partners(labels, pool_images, pool_labels, m2: int, rng: RngLike) -> np.ndarray:
    """Pick ``m2`` pool images per attacked image, each from a different class than its label.

    Returns an array of shape (m2, N, C, H, W).
    """
    labels = np.asarray(labels)
    pool_labels = np.asarray(pool_labels)
    n = len(labels)
    rngs = _streams(rng, n)
    picks = np.empty((m2, n), dtype=np.int64)
    for k, (lab, r) in enumerate(zip(labels, rngs)):
        candidates = np.flatnonzero(pool_labels != lab)
        if len(candidates) == 0:
            raise ValueError(f"admix pool has no image outside class {lab}")
        picks[:, k] = candidates[r.integers(0, len(candidates), size=m2)]
    return np.asarray(pool_images)[picks]


# ------------------------------------------------------------------ BSR


def _reflect(i: np.ndarray, n: int) -> np.ndarray:
    period = 2 * (n - 1) if n > 1 else 1
    i = np.mod(i, period)
    return np.where(i < n, i, period - i)


def bsr_index(h: int, w: int, blocks: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Gather index for block shuffle + per-block rotation of one image.

    Non-divisible sizes are reflect-padded up to a multiple of ``blocks`` and
    cropped back afterwards.
    """
    hp = math.ceil(h / blocks) * blocks
    wp = math.ceil(w / blocks) * blocks
    bh, bw = hp // blocks, wp // blocks
    perm = rng.permutation(blocks * blocks)
    angles = np.deg2rad(rng.uniform(-tau, tau, size=blocks * blocks))
    cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(bh) - cy, np.arange(bw) - cx, indexing="ij")
    src_rows = np.empty((hp, wp), dtype=np.int64)
    src_cols = np.empty((hp, wp), dtype=np.int64)
    valid = np.empty((hp, wp), dtype=bool)
    for b in range(blocks * blocks):
        c, s = math.cos(angles[b]), math.sin(angles[b])
        sx = np.rint(c * dx + s * dy + cx).astype(np.int64)
        sy = np.rint(-s * dx + c * dy + cy).astype(np.int64)
        ok = (sx >= 0) & (sx < bw) & (sy >= 0) & (sy < bh)
        src_b = perm[b]
        r0, c0 = divmod(b, blocks)
        sr0, sc0 = divmod(int(src_b), blocks)
        rows = slice(r0 * bh, (r0 + 1) * bh)
        cols = slice(c0 * bw, (c0 + 1) * bw)
        src_rows[rows, cols] = sr0 * bh + sy
        src_cols[rows, cols] = sc0 * bw + sx
        valid[rows, cols] = ok
    index = _reflect(src_rows, h) * w + _reflect(src_cols, w)
    index = np.where(valid, index, -1)
    return np.ascontiguousarray(index[:h, :w])


def block_shuffle_rotate(x, blocks: int, tau: float, rng: RngLike) -> Tensor:
    """Split into blocks x blocks tiles, permute them, rotate each by U(-tau, tau) degrees."""
    if blocks < 1 or tau < 0:
        raise ValueError(f"BSR needs blocks >= 1 and tau >= 0, got {blocks}, {tau}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, _, h, w = x.shape
    index = np.stack([bsr_index(h, w, blocks, tau, r) for r in _streams(rng, n)])
    return T.gather(x, index)
