"""Transfer-attack experiments: filtering, success rates, sweeps and reports.

Every experiment runs on a filtered evaluation set (images that every
surrogate and every undefended target classifies correctly). An image keeps
its position in the source test set as its global index, which keys all of
its random streams.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, attack_pipeline
from .defenses import DefendedModel

CSV_HEADER = ("surrogate", "method", "target", "rate", "n", "white_box")
MIN_IMAGES = 50


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSet:
    images: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Cell:
    surrogate: str
    method: str
    target: str
    rate: float
    n: int
    white_box: bool


@dataclass
class TransferMatrix:
    cells: list[Cell] = field(default_factory=list)

    def rate(self, surrogate: str, method: str, target: str) -> float:
        for c in self.cells:
            if (c.surrogate, c.method, c.target) == (surrogate, method, target):
                return c.rate
        raise KeyError((surrogate, method, target))

    def rows(self) -> list[tuple[str, str]]:
        return list(dict.fromkeys((c.surrogate, c.method) for c in self.cells))

    def targets(self) -> list[str]:
        return list(dict.fromkeys(c.target for c in self.cells))

    def mean_rate(self, surrogate: str, method: str, targets: Sequence[str] | None = None) -> float:
        targets = self.targets() if targets is None else targets
        return float(np.mean([self.rate(surrogate, method, t) for t in targets]))


@dataclass
class EvaluationReport:
    matrix: TransferMatrix
    config: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    wall_clock: float = 0.0


# ------------------------------------------------------------------ basics


def _predict(model, x, index) -> np.ndarray:
    if isinstance(model, DefendedModel):
        return model.predict(x, index)
    return model.predict(x)


def attack_success_rate(target, batch: AdversarialBatch) -> float:
    """Fraction of adversarial images the target does not label correctly."""
    if len(batch) == 0:
        raise ValueError("cannot score an empty adversarial batch")
    return float((_predict(target, batch.adv, batch.index) != batch.labels).mean())


def filter_correct(models: Sequence, images, labels, n: int | None = 1000, minimum: int = MIN_IMAGES) -> EvalSet:
    """First ``n`` images (in source order) that every model classifies correctly."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ok = np.ones(len(labels), dtype=bool)
    for m in models:
        ok &= m.predict(images) == labels
    keep = np.flatnonzero(ok)
    if len(keep) < minimum:
        raise FilterError(f"only {len(keep)} images are classified correctly by every model; need at least {minimum}")
    if n is not None:
        keep = keep[:n]
    return EvalSet(images[keep], labels[keep], keep)


def _attack_chunk(args):
    models, x, y, cfg, index, pool = args
    return attack_pipeline(models, x, y, cfg, index=index, pool=pool).adv


def run_attack(models, data: EvalSet, cfg: AttackConfig, workers: int = 1) -> AdversarialBatch:
    """Attack the whole set; ``workers > 1`` shards images across processes with identical results."""
    pool = (data.images, data.labels)
    if workers <= 1 or len(data) < 2 * workers:
        return attack_pipeline(models, data.images, data.labels, cfg, index=data.index, pool=pool)
    bounds = np.linspace(0, len(data), workers + 1).astype(int)
    jobs = [
        (models, data.images[a:b], data.labels[a:b], cfg, data.index[a:b], pool)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    with ProcessPoolExecutor(workers) as ex:
        adv = np.concatenate(list(ex.map(_attack_chunk, jobs)))
    return AdversarialBatch(data.images, adv, data.labels, cfg, data.index)


def is_stochastic(cfg: AttackConfig) -> bool:
    """Whether the seed can change the output (a deterministic config runs once for all seeds)."""
    return cfg.method in ("ngi", "vmifgsm") or bool({"di", "admix", "bsr"} & set(cfg.transforms))


def _as_list(models):
    return list(models) if isinstance(models, (list, tuple)) else [models]


def _fingerprints(surrogates, targets) -> dict:
    out = {}
    for group in surrogates.values():
        for m in _as_list(group):
            out[m.name] = m.weights.fingerprint()
    for t in targets.values():
        base = t.model if isinstance(t, DefendedModel) else t
        out[base.name] = base.weights.fingerprint()
    return dict(sorted(out.items()))


# ------------------------------------------------------------------ experiments


def run_transfer_matrix(
    surrogates: Mapping[str, object],
    targets: Mapping[str, object],
    methods: Mapping[str, AttackConfig] | Sequence[AttackConfig],
    data: EvalSet,
    seeds: Sequence[int] = (0,),
    workers: int = 1,
) -> EvaluationReport:
    """One adversarial batch per (surrogate row, method, seed), scored on every target.

    ``surrogates`` maps a row name to one model or a list (an ensemble).
    Rates are averaged over ``seeds``; ``n`` is the image count per seed.
    """
    if not isinstance(methods, Mapping):
        methods = {cfg.label(): cfg for cfg in methods}
    start = time.perf_counter()
    cells = []
    for row, group in surrogates.items():
        members = _as_list(group)
        names = {m.name for m in members}
        for label, cfg in methods.items():
            per_target = {t: [] for t in targets}
            for seed in seeds if is_stochastic(cfg) else list(seeds)[:1]:
                batch = run_attack(members, data, cfg.replace(seed=seed), workers)
                for tname, target in targets.items():
                    per_target[tname].append(attack_success_rate(target, batch))
            for tname, target in targets.items():
                white = not isinstance(target, DefendedModel) and target.name in names
                cells.append(Cell(row, label, tname, float(np.mean(per_target[tname])), len(data), white))
    return EvaluationReport(
        TransferMatrix(cells),
        config={"methods": {k: v.to_dict() for k, v in methods.items()}},
        fingerprints=_fingerprints(surrogates, targets),
        seeds=list(seeds),
        wall_clock=time.perf_counter() - start,
    )


@dataclass
class SweepResult:
    parameter: str
    values: list
    rates: dict  # target -> list of mean rates aligned with ``values``
    report: EvaluationReport

    def mean(self, value) -> float:
        i = self.values.index(value)
        return float(np.mean([r[i] for r in self.rates.values()]))

    def delta(self, hi, lo) -> float:
        return self.mean(hi) - self.mean(lo)


def run_backtracking_sweep(
    surrogate,
    targets: Mapping[str, object],
    cfg: AttackConfig,
    data: EvalSet,
    k_values: Sequence[int] = (0, 1, 3, 5, 7),
    seeds: Sequence[int] = (0,),
    workers: int = 1,
) -> SweepResult:
    """NGI transfer rate for each backtracking step K (same seeds for every K)."""
    for k in k_values:
        if not 0 <= k < cfg.steps:
            raise ValueError(f"backtrack step {k} must satisfy 0 <= K < steps={cfg.steps}")
    methods = {f"K={k}": cfg.replace(method="ngi", backtrack_step=k) for k in k_values}
    report = run_transfer_matrix({surrogate.name: surrogate}, targets, methods, data, seeds, workers)
    rates = {t: [report.matrix.rate(surrogate.name, f"K={k}", t) for k in k_values] for t in targets}
    return SweepResult("K", list(k_values), rates, report)


@dataclass
class StepScalingResult:
    rates: dict  # arm -> target -> rate
    adversarial: dict  # target -> bool
    report: EvaluationReport

    def group_mean(self, arm: str, adversarial: bool) -> float:
        vals = [r for t, r in self.rates[arm].items() if self.adversarial[t] == adversarial]
        return float(np.mean(vals)) if vals else float("nan")


def step_scaling_arms(cfg: AttackConfig) -> dict[str, AttackConfig]:
    """Baseline MI, MI at double step over half the iterations, and NGI with the baseline step."""
    base = cfg.replace(method="mifgsm")
    alpha = base.step_size
    return {
        "MI-FGSM": base.replace(alpha=alpha),
        "MI-FGSM(2a)": base.replace(alpha=2 * alpha, steps=max(1, base.steps // 2)),
        "NGI-MI-FGSM": cfg.replace(method="ngi", alpha=alpha),
    }


def run_step_scaling_comparison(
    surrogate,
    targets: Mapping[str, object],
    adversarial: Mapping[str, bool],
    cfg: AttackConfig,
    data: EvalSet,
    seeds: Sequence[int] = (0,),
    workers: int = 1,
) -> StepScalingResult:
    arms = step_scaling_arms(cfg)
    report = run_transfer_matrix({surrogate.name: surrogate}, targets, arms, data, seeds, workers)
    rates = {a: {t: report.matrix.rate(surrogate.name, a, t) for t in targets} for a in arms}
    return StepScalingResult(rates, {t: bool(adversarial.get(t, False)) for t in targets}, report)


def component_variants(cfg: AttackConfig) -> dict[str, AttackConfig]:
    """Baseline, each NGI component alone, and the alternative second branches."""
    ngi = cfg.replace(method="ngi")
    return {
        "MI-FGSM": cfg.replace(method="mifgsm"),
        "w/ EB": ngi.replace(ngi_branch="none"),
        "w/ MM": ngi.replace(backtrack_step=0),
        "EB + clean": ngi.replace(ngi_branch="clean"),
        "EB + DI": ngi.replace(ngi_branch="di"),
        "NGI": ngi,
    }


def k_variants(cfg: AttackConfig, ks: Sequence[int] = (1, 3, 5, 7)) -> dict[str, AttackConfig]:
    return {f"K={k}": cfg.replace(method="ngi", backtrack_step=k) for k in ks}


def p_variants(cfg: AttackConfig, ps: Sequence[float] = (0.6, 0.7, 0.8, 0.9, 1.0)) -> dict[str, AttackConfig]:
    return {f"P={p:g}": cfg.replace(method="ngi", mask_prob=p) for p in ps}


# ------------------------------------------------------------------ reports


def _fmt_rate(r: float) -> str:
    return repr(float(r))


def emit_report(report: EvaluationReport | TransferMatrix, fmt: str = "csv") -> str:
    matrix = report.matrix if isinstance(report, EvaluationReport) else report
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in matrix.cells:
            w.writerow([c.surrogate, c.method, c.target, _fmt_rate(c.rate), c.n, "true" if c.white_box else "false"])
        return buf.getvalue()
    if fmt == "markdown":
        return _markdown(matrix, report if isinstance(report, EvaluationReport) else None)
    raise ValueError(f"unknown report format {fmt!r}; expected csv or markdown")


def _markdown(matrix: TransferMatrix, report: EvaluationReport | None) -> str:
    targets = matrix.targets()
    lines = ["| Surrogate | Attack | " + " | ".join(targets) + " |", "|---|---|" + "---|" * len(targets)]
    index = {(c.surrogate, c.method, c.target): c for c in matrix.cells}
    for row, method in matrix.rows():
        cells = []
        for t in targets:
            c = index.get((row, method, t))
            cells.append("" if c is None else f"{100 * c.rate:.1f}" + ("*" if c.white_box else ""))
        lines.append(f"| {row} | {method} | " + " | ".join(cells) + " |")
    out = "\n".join(lines) + "\n"
    if report is not None and matrix.cells:
        n = matrix.cells[0].n
        out += f"\nSuccess rates in percent over {n} images; * marks white-box cells."
        out += f" Seeds: {', '.join(map(str, report.seeds))}. Wall clock: {report.wall_clock:.1f}s.\n"
    return out


def parse_csv(text: str) -> TransferMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"report header must be {','.join(CSV_HEADER)}")
    cells = []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(r)}")
        if r[5] not in ("true", "false"):
            raise ValueError(f"line {lineno}: white_box must be true or false, got {r[5]!r}")
        cells.append(Cell(r[0], r[1], r[2], float(r[3]), int(r[4]), r[5] == "true"))
    return TransferMatrix(cells)
