"""Iterative sign-gradient attacks under an L-infinity budget.

FGSM, I-FGSM, MI-FGSM, NI-FGSM and VMI-FGSM are here as baselines; ``ngi``
adds example backtracking (reset to the clean image at iteration K while the
momenta are kept) and a second, masked branch with its own momentum.

All randomness comes from per-image generators keyed by (seed, image index),
so an attack on a batch gives the same images as attacking any split of it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from . import transforms as tf
from .models import Classifier, forward
from .tensor import Tape, Tensor
from .transforms import TransformConfig

METHODS = ("fgsm", "ifgsm", "mifgsm", "nifgsm", "vmifgsm", "ngi")
TRANSFORMS = ("di", "ti", "si", "admix", "bsr")
NGI_BRANCHES = ("mask", "clean", "di", "none")
L1_EPS = 1e-12


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters for every attack; ``alpha=None`` means ``eps / steps``."""

    method: str = "mifgsm"
    eps: float = 16 / 255
    steps: int = 10
    alpha: float | None = None
    mu: float = 1.0
    backtrack_step: int = 5
    mask_prob: float = 0.9
    vt_beta: float = 1.5
    vt_samples: int = 20
    transforms: tuple[str, ...] = ()
    transform: TransformConfig = field(default_factory=TransformConfig)
    ngi_branch: str = "mask"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.method not in METHODS:
            raise AttackConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.eps < 0:
            raise AttackConfigError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise AttackConfigError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is not None and self.alpha <= 0:
            raise AttackConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.mu < 0:
            raise AttackConfigError(f"mu must be >= 0, got {self.mu}")
        if not 0 <= self.mask_prob <= 1:
            raise AttackConfigError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.method == "ngi" and not 0 <= self.backtrack_step < self.steps:
            raise AttackConfigError(
                f"backtrack_step must satisfy 0 <= K < steps, got K={self.backtrack_step}, steps={self.steps}"
            )
        if self.vt_samples < 1 or self.vt_beta < 0:
            raise AttackConfigError("variance tuning needs vt_samples >= 1 and vt_beta >= 0")
        if self.ngi_branch not in NGI_BRANCHES:
            raise AttackConfigError(f"ngi_branch must be one of {NGI_BRANCHES}, got {self.ngi_branch!r}")
        validate_stack(self.transforms)

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.eps / self.steps

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transforms"] = list(self.transforms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["transform"] = TransformConfig(**d.get("transform", {}))
        d["transforms"] = tuple(d.get("transforms", ()))
        return cls(**d)

    def label(self) -> str:
        """Short name in the style MI-FGSM, NGI-SI-TI-DIM."""
        base = {
            "fgsm": "FGSM",
            "ifgsm": "I-FGSM",
            "mifgsm": "MI-FGSM",
            "nifgsm": "NI-FGSM",
            "vmifgsm": "VMI-FGSM",
            "ngi": "NGI-MI-FGSM",
        }[self.method]
        if not self.transforms:
            return base
        order = [t for t in ("admix", "si", "ti", "di", "bsr") if t in self.transforms]
        names = {"admix": "Admix", "si": "SI", "ti": "TI", "di": "DI", "bsr": "BSR"}
        prefix = "NGI-" if self.method == "ngi" else ""
        core = "-".join(names[t] for t in order)
        tail = "M" if self.method in ("mifgsm", "ngi") else "-" + base
        if self.method in ("mifgsm", "ngi"):
            return f"{prefix}{core}{tail}"
        return f"{core}{tail}"


def validate_stack(stack: Sequence[str]) -> None:
    unknown = [t for t in stack if t not in TRANSFORMS]
    if unknown:
        raise AttackConfigError(f"unknown transforms {unknown}; expected a subset of {TRANSFORMS}")
    if len(set(stack)) != len(stack):
        raise AttackConfigError(f"duplicate transforms in {list(stack)}")
    if "di" in stack and "bsr" in stack:
        raise AttackConfigError("di and bsr both resample the input; choose one")
    if "admix" in stack and "si" in stack:
        raise AttackConfigError("admix already averages over scale copies; drop si")


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    adv: np.ndarray
    labels: np.ndarray
    config: AttackConfig | None = None
    index: np.ndarray | None = None
    trace: list[dict] | None = None

    def __len__(self):
        return len(self.labels)

    def linf(self) -> np.ndarray:
        return np.abs(self.adv - self.clean).reshape(len(self), -1).max(axis=1)


# ------------------------------------------------------------------ primitives


def clip_project(x_adv: np.ndarray, x_clean: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the eps-ball around ``x_clean``, then onto [0, 1]."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_adv.shape != x_clean.shape:
        raise T.ShapeError(f"clip_project: shapes {x_adv.shape} and {x_clean.shape} differ")
    return np.clip(np.minimum(np.maximum(x_adv, x_clean - eps), x_clean + eps), 0.0, 1.0)


def l1_normalize(grad: np.ndarray) -> np.ndarray:
    """Divide each image's gradient by its L1 norm; all-zero (below 1e-12) gradients stay zero."""
    norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    out = np.zeros_like(grad)
    ok = norms >= L1_EPS
    out[ok] = grad[ok] / norms[ok].reshape((-1,) + (1,) * (grad.ndim - 1))
    return out


def _as_models(models) -> list[Classifier]:
    if isinstance(models, Classifier):
        return [models]
    models = list(models)
    if not models:
        raise ValueError("need at least one surrogate model")
    shape = models[0].spec.input_shape
    for m in models[1:]:
        if m.spec.input_shape != shape:
            raise T.ShapeError(
                f"ensemble members disagree on input shape: {m.name} {m.spec.input_shape} vs {shape}"
            )
    return models


def _input_gradient(models, x, y, variants_of, n_variants: int) -> np.ndarray:
    """Gradient w.r.t. ``x`` of the mean over models and variants of the summed loss.

    ``variants_of(xt, sl)`` maps a tracked chunk to the list of model inputs
    (e.g. scale copies of a DI-transformed image) for image slice ``sl``.
    """
    models = _as_models(models)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    for m in models:
        m._check(x)
    total = np.zeros_like(x)
    chunk = max(16, Classifier.chunk // n_variants)
    for start in range(0, len(x), chunk):
        sl = slice(start, start + chunk)
        for m in models:
            with Tape():
                xt = Tensor(x[sl], requires_grad=True)
                loss = None
                for v in variants_of(xt, sl):
                    term = T.softmax_cross_entropy(forward(m.spec, m._params, v), y[sl], "sum")
                    loss = term if loss is None else T.add(loss, term)
                T.backward(loss)
            total[sl] += xt.grad
    scale = len(models) * n_variants
    return total if scale == 1 else total / scale


def ensemble_gradient(models, x, y) -> np.ndarray:
    """Input gradient of the mean of per-model cross-entropy losses."""
    return _input_gradient(models, x, y, lambda xt, sl: [xt], 1)


# ------------------------------------------------------------------ pipeline


class _Pipeline:
    """Per-iteration gradient with the configured input/gradient transforms."""

    def __init__(self, models, x, y, cfg: AttackConfig, rngs, pool):
        self.models = _as_models(models)
        self.y = np.asarray(y, dtype=np.int64)
        self.cfg = cfg
        self.tc = cfg.transform
        self.stack = set(cfg.transforms)
        self.rngs = rngs
        self.pool = pool
        self.kernel = tf.gaussian_kernel(self.tc.ti_kernel_size, self.tc.ti_sigma) if "ti" in self.stack else None
        h, w = x.shape[2:]
        self.hw = (h, w)

    def _resample_index(self):
        h, w = self.hw
        if "di" in self.stack:
            return np.stack([tf.diverse_input_index(h, w, self.tc.di_prob, r, self.tc.di_min_ratio) for r in self.rngs])
        if "bsr" in self.stack:
            return np.stack([tf.bsr_index(h, w, self.tc.bsr_blocks, self.tc.bsr_tau, r) for r in self.rngs])
        return None

    def raw_gradient(self, x: np.ndarray, input_transforms: bool = True) -> np.ndarray:
        """Transformed, ensemble- and copy-averaged gradient before TI smoothing."""
        if not input_transforms:
            return _input_gradient(self.models, x, self.y, lambda xt, sl: [xt], 1)
        index = self._resample_index()
        partners = None
        if "admix" in self.stack:
            partners = tf.sample_admix_partners(self.y, self.pool[0], self.pool[1], self.tc.admix_m2, self.rngs)
            gammas = tf.admix_gammas(self.tc.admix_m1)
            n_var = len(gammas) * self.tc.admix_m2
        elif "si" in self.stack:
            n_var = self.tc.si_copies
        else:
            n_var = 1

        def variants(xt, sl):
            z = xt if index is None else T.gather(xt, index[sl])
            if partners is not None:
                return tf.admix_mix(z, [p[sl] for p in partners], gammas, self.tc.admix_eta)
            if "si" in self.stack:
                return tf.scale_copies(z, self.tc.si_copies)
            return [z]

        return _input_gradient(self.models, x, self.y, variants, n_var)

    def smooth(self, grad: np.ndarray) -> np.ndarray:
        return grad if self.kernel is None else tf.ti_smooth(grad, self.kernel)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.smooth(self.raw_gradient(x))


def _setup(models, x, y, cfg, index, pool):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise T.ShapeError(f"expected (N, C, H, W) images with N labels, got {x.shape} and {y.shape}")
    index = np.arange(len(x)) if index is None else np.asarray(index)
    if len(index) != len(x):
        raise ValueError(f"{len(index)} image indices for {len(x)} images")
    rngs = tf.image_streams(cfg.seed, index)
    if pool is None:
        pool = (x, y)
    return x, y, index, _Pipeline(models, x, y, cfg, rngs, pool)


def _config(cfg, method: str) -> AttackConfig:
    if isinstance(cfg, (int, float)):
        return AttackConfig(method=method, eps=float(cfg), steps=1, alpha=float(cfg) or None)
    return cfg if cfg.method == method else cfg.replace(method=method)


def fgsm(models, x, y, cfg, *, index=None, pool=None) -> AdversarialBatch:
    """Single step of size eps; ``cfg`` may be an AttackConfig or just eps."""
    cfg = _config(cfg, "fgsm")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    adv = clip_project(x + cfg.eps * np.sign(pipe.gradient(x)), x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index)


def i_fgsm(models, x, y, cfg, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    cfg = _config(cfg, "ifgsm")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    alpha = cfg.step_size
    adv = x.copy()
    log = [] if trace else None
    for t in range(cfg.steps):
        grad = pipe.gradient(adv)
        if log is not None:
            log.append({"t": t, "x": adv.copy(), "sign": np.sign(grad)})
        adv = clip_project(adv + alpha * np.sign(grad), x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index, log)


def mi_fgsm(models, x, y, cfg, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    cfg = _config(cfg, "mifgsm")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    alpha = cfg.step_size
    adv = x.copy()
    g = np.zeros_like(x)
    log = [] if trace else None
    for t in range(cfg.steps):
        g = cfg.mu * g + l1_normalize(pipe.gradient(adv))
        if log is not None:
            log.append({"t": t, "x": adv.copy(), "g": g.copy(), "sign": np.sign(g)})
        adv = clip_project(adv + alpha * np.sign(g), x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index, log)


def ni_fgsm(models, x, y, cfg, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    cfg = _config(cfg, "nifgsm")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    alpha = cfg.step_size
    adv = x.copy()
    g = np.zeros_like(x)
    log = [] if trace else None
    for t in range(cfg.steps):
        x_nes = adv + alpha * cfg.mu * g
        g = cfg.mu * g + l1_normalize(pipe.gradient(x_nes))
        if log is not None:
            log.append({"t": t, "x": adv.copy(), "x_nes": x_nes, "g": g.copy(), "sign": np.sign(g)})
        adv = clip_project(adv + alpha * np.sign(g), x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index, log)


def vmi_fgsm(models, x, y, cfg, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    """MI-FGSM with the gradient corrected by the previous step's variance term.

    The variance is ``mean_i(grad(x + u_i)) - grad(x)`` over ``vt_samples``
    points with ``u_i`` uniform in ``[-beta*eps, beta*eps]`` per coordinate.
    """
    cfg = _config(cfg, "vmifgsm")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    alpha = cfg.step_size
    radius = cfg.vt_beta * cfg.eps
    adv = x.copy()
    g = np.zeros_like(x)
    v = np.zeros_like(x)
    log = [] if trace else None
    for t in range(cfg.steps):
        grad = pipe.raw_gradient(adv)
        g = cfg.mu * g + l1_normalize(pipe.smooth(grad + v))
        diff = np.zeros_like(x)
        for _ in range(cfg.vt_samples):
            u = np.stack([r.uniform(-radius, radius, size=x.shape[1:]) for r in pipe.rngs])
            diff += pipe.raw_gradient(adv + u) - grad
        if log is not None:
            log.append({"t": t, "x": adv.copy(), "g": g.copy(), "v": v.copy(), "sign": np.sign(g)})
        v = diff / cfg.vt_samples
        adv = clip_project(adv + alpha * np.sign(g), x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index, log)


def ngi_attack(models, x, y, cfg, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    """Two-branch momentum attack with a reset to the clean image at iteration K.

    Each iteration masks the current example, accumulates the clean-branch and
    mask-branch momenta, resets the example to ``x`` when ``t == K`` (momenta
    untouched) and steps by ``alpha * (sign(g) + sign(g_mask))``.
    """
    cfg = _config(cfg, "ngi")
    x, y, index, pipe = _setup(models, x, y, cfg, index, pool)
    alpha = cfg.step_size
    adv = x.copy()
    g = np.zeros_like(x)
    g_mask = np.zeros_like(x)
    log = [] if trace else None
    for t in range(cfg.steps):
        x_mask = tf.mask_process(adv, cfg.mask_prob, pipe.rngs)
        x_start = adv
        g = cfg.mu * g + l1_normalize(pipe.gradient(adv))
        if cfg.ngi_branch != "none":
            g_mask = cfg.mu * g_mask + l1_normalize(_second_branch(pipe, cfg, adv, x_mask))
        g_before, gm_before = g.copy(), g_mask.copy()
        if t == cfg.backtrack_step:
            adv = x.copy()
        if cfg.ngi_branch == "none":
            step = 2 * alpha * np.sign(g)
        else:
            step = alpha * np.sign(g) + alpha * np.sign(g_mask)
        if log is not None:
            log.append(
                {
                    "t": t,
                    "x_start": x_start.copy(),
                    "x_mask": x_mask,
                    "x_base": adv.copy(),
                    "g_before_reset": g_before,
                    "g_mask_before_reset": gm_before,
                    "g": g.copy(),
                    "g_mask": g_mask.copy(),
                }
            )
        adv = clip_project(adv + step, x, cfg.eps)
    return AdversarialBatch(x, adv, y, cfg, index, log)


def _second_branch(pipe: _Pipeline, cfg: AttackConfig, adv, x_mask):
    if cfg.ngi_branch == "mask":
        return pipe.smooth(pipe.raw_gradient(x_mask, input_transforms=False))
    if cfg.ngi_branch == "clean":
        return pipe.smooth(pipe.raw_gradient(adv, input_transforms=False))
    # "di": a diverse-input view of the current example
    h, w = pipe.hw
    index = np.stack([tf.diverse_input_index(h, w, pipe.tc.di_prob, r, pipe.tc.di_min_ratio) for r in pipe.rngs])
    grad = _input_gradient(pipe.models, adv, pipe.y, lambda xt, sl: [T.gather(xt, index[sl])], 1)
    return pipe.smooth(grad)


_DISPATCH = {
    "fgsm": fgsm,
    "ifgsm": i_fgsm,
    "mifgsm": mi_fgsm,
    "nifgsm": ni_fgsm,
    "vmifgsm": vmi_fgsm,
    "ngi": ngi_attack,
}


def attack_pipeline(models, x, y, cfg: AttackConfig, *, index=None, pool=None, trace=False) -> AdversarialBatch:
    """Run ``cfg.method`` with ``cfg.transforms`` applied in the fixed order
    (DI | BSR) -> Admix -> SI averaging -> TI smoothing -> momentum."""
    validate_stack(cfg.transforms)
    fn = _DISPATCH[cfg.method]
    if fn is fgsm:
        return fn(models, x, y, cfg, index=index, pool=pool)
    return fn(models, x, y, cfg, index=index, pool=pool, trace=trace)


run_attack = attack_pipeline
