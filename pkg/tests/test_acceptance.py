"""The eleven acceptance criteria, one test each.

Each test records a ``criterion N: PASS|FAIL`` line that is printed in the
terminal summary, then asserts. Criteria 6 to 10 share one cache of
adversarial batches built on the full filtered evaluation set.
"""

import json
import shutil
import time

import numpy as np
import pytest

import conftest
from ngiattack import attacks as A
from ngiattack import cli
from ngiattack import harness as H
from ngiattack.defenses import DefendedModel, DefenseConfig
from ngiattack.transforms import draw_mask, image_streams
from oracles import central_difference, random_network, reference_mi_fgsm, rel_err
from test_tensor import input_grad, value

EPS = 0.1
SEEDS = (0, 1, 2, 3, 4)
HELD_OUT = ("cnn-b", "cnn-c", "mlp-d", "cnn-a-adv")

pytestmark = pytest.mark.slow


def record(number: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(conftest.ACCEPTANCE[number])


# ------------------------------------------------------------------ exact checks


def test_criterion_01_gradients_match_finite_differences():
    start = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        net, x = random_network(np.random.default_rng(1000 + trial))
        worst = max(worst, rel_err(input_grad(net, x), central_difference(lambda v: value(net, v), x)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    record(1, ok, f"worst relative error {worst:.2e} over 100 networks ({elapsed:.1f}s)")
    assert ok


SMOKE_STACKS = ((), ("di",), ("ti",), ("si",), ("admix", "ti"), ("bsr",))


def test_criterion_02_budget_invariant_smoke_matrix(zoo, mnist):
    x, y = mnist[1].images[:32], mnist[1].labels[:32]
    start = time.perf_counter()
    combos, bad = 0, []
    for method in A.METHODS:
        for stack in SMOKE_STACKS:
            # the neighbourhood sample count does not affect the budget; 4 keeps VMI+Admix inside the time limit
            cfg = A.AttackConfig(method=method, eps=EPS, transforms=stack, vt_samples=4)
            b = A.attack_pipeline(zoo["cnn-a"], x, y, cfg)
            combos += 1
            inside = (np.abs(b.adv - b.clean) <= EPS + 1e-9).all() and b.adv.min() >= 0 and b.adv.max() <= 1
            if not inside:
                bad.append(cfg.label())
    elapsed = time.perf_counter() - start
    ok = combos >= 24 and not bad and elapsed < 120
    record(2, ok, f"{combos} combos x 32 images, violations {bad or 'none'} ({elapsed:.1f}s)")
    assert ok


def test_criterion_03_degenerate_equivalences(zoo, mnist):
    start = time.perf_counter()
    m = zoo["cnn-a"]
    x, y = mnist[1].images[:32], mnist[1].labels[:32]
    grad = lambda a, t: m.loss_and_input_gradient(a, t)[1]  # noqa: E731
    base = A.AttackConfig(eps=EPS, steps=10)

    ngi = A.ngi_attack(m, x, y, base.replace(method="ngi", mask_prob=1.0, backtrack_step=0)).adv
    ref = reference_mi_fgsm(grad, x, y, EPS, 2 * base.step_size, 10, 1.0)
    diff_a = float(np.abs(ngi - ref).max())

    one = A.i_fgsm(m, x, y, A.AttackConfig(method="ifgsm", eps=EPS, steps=1, alpha=EPS)).adv
    same_b = one.tobytes() == A.fgsm(m, x, y, EPS).adv.tobytes()

    vmi = A.vmi_fgsm(m, x, y, base.replace(method="vmifgsm", vt_beta=0.0)).adv
    mi = A.mi_fgsm(m, x, y, base).adv
    same_c = np.array_equal(vmi, mi)

    mi0 = A.mi_fgsm(m, x, y, base.replace(mu=0.0), trace=True).trace
    it = A.i_fgsm(m, x, y, base.replace(method="ifgsm"), trace=True).trace
    same_d = all(np.array_equal(a["sign"], b["sign"]) for a, b in zip(mi0, it)) and len(mi0) == len(it) == 10

    elapsed = time.perf_counter() - start
    ok = diff_a < 1e-9 and same_b and same_c and same_d and elapsed < 60
    record(
        3,
        ok,
        f"(a) NGI(P=1,K=0) vs MI@2a max diff {diff_a:.1e}; (b) {same_b}; (c) {same_c}; (d) {same_d} ({elapsed:.1f}s)",
    )
    assert ok


def test_criterion_04_backtracking_semantics(zoo, mnist):
    x, y = mnist[1].images[:32], mnist[1].labels[:32]
    cfg = A.AttackConfig(method="ngi", eps=EPS)
    K, alpha = cfg.backtrack_step, cfg.step_size
    tr = A.ngi_attack(zoo["cnn-a"], x, y, cfg, trace=True).trace
    at_reset = tr[K]
    # the one update applied to the reset example, step summed first as the attack does
    step = alpha * np.sign(at_reset["g"]) + alpha * np.sign(at_reset["g_mask"])
    expected = A.clip_project(x + step, x, EPS)
    start_next = tr[K + 1]["x_start"]
    fresh = A.l1_normalize(zoo["cnn-a"].loss_and_input_gradient(start_next, y)[1])
    checks = {
        "reset to clean": np.array_equal(at_reset["x_base"], x),
        "next start is one update from clean": np.array_equal(start_next, expected),
        "g kept": at_reset["g"].tobytes() == at_reset["g_before_reset"].tobytes(),
        "g_mask kept": at_reset["g_mask"].tobytes() == at_reset["g_mask_before_reset"].tobytes(),
        "momentum carried into the next step": np.allclose(tr[K + 1]["g"], cfg.mu * at_reset["g"] + fresh, 0, 1e-15),
    }
    ok = all(checks.values()) and not np.array_equal(at_reset["x_start"], x)
    record(4, ok, ", ".join(f"{k}: {v}" for k, v in checks.items()))
    assert ok


def test_criterion_05_mask_statistics():
    n, p = 1000, 0.9
    masks = draw_mask((n, 1, 28, 28), p, image_streams(0, np.arange(n)))
    pixels = masks.size
    frac = float((masks == 0).mean())
    sd = np.sqrt((1 - p) * p / pixels)
    ok = abs(frac - (1 - p)) <= 3 * sd
    record(5, ok, f"zeroed fraction {frac:.5f}, target 0.1 +- {3 * sd:.5f} (3 sd over {pixels} pixels)")
    assert ok


# ------------------------------------------------------------------ desk-scale trends


class Runs:
    """Adversarial batches from cnn-a on the filtered set, computed once per (config, seed)."""

    def __init__(self, zoo, mnist):
        self.zoo = zoo
        test = mnist[1]
        self.data = H.filter_correct([zoo[k] for k in ("cnn-a", *HELD_OUT)], test.images, test.labels, 1000)
        self.batches = {}

    def batch(self, cfg, seed):
        key = (cfg.replace(alpha=cfg.step_size, seed=0), seed if H.is_stochastic(cfg) else 0)
        if key not in self.batches:
            self.batches[key] = H.run_attack([self.zoo["cnn-a"]], self.data, cfg.replace(seed=key[1]))
        return self.batches[key]

    def rate(self, cfg, target) -> float:
        seeds = SEEDS if H.is_stochastic(cfg) else SEEDS[:1]
        return float(np.mean([H.attack_success_rate(target, self.batch(cfg, s)) for s in seeds]))

    def mean_transfer(self, cfg, targets) -> float:
        return float(np.mean([self.rate(cfg, t) for t in targets]))


BASE = A.AttackConfig(method="mifgsm", eps=EPS, steps=10)
MI = BASE
NGI = BASE.replace(method="ngi")


@pytest.fixture(scope="module")
def runs(zoo, mnist):
    return Runs(zoo, mnist)


def _pct(r):
    return f"{100 * r:.2f}%"


def test_criterion_06_ngi_beats_mi_on_transfer(runs):
    start = time.perf_counter()
    targets = [runs.zoo[t] for t in HELD_OUT]
    mi, ngi = runs.mean_transfer(MI, targets), runs.mean_transfer(NGI, targets)
    per = ", ".join(f"{t} {_pct(runs.rate(MI, runs.zoo[t]))}->{_pct(runs.rate(NGI, runs.zoo[t]))}" for t in HELD_OUT)
    elapsed = time.perf_counter() - start
    gain = 100 * (ngi - mi)
    ok = gain >= 2.0 and len(runs.data) == 1000
    record(6, ok, f"MI {_pct(mi)}, NGI {_pct(ngi)}, gain {gain:+.2f} points (need +2.00); {per} ({elapsed:.0f}s)")
    assert ok


def test_criterion_07_backtracking_sweep_direction(runs):
    targets = [runs.zoo[t] for t in HELD_OUT]
    rates = {k: runs.mean_transfer(NGI.replace(backtrack_step=k), targets) for k in (0, 1, 3, 5)}
    ok = rates[5] >= rates[0]
    shown = ", ".join(f"K={k} {_pct(r)}" for k, r in rates.items())
    record(7, ok, f"{shown}; rate(5) - rate(0) = {100 * (rates[5] - rates[0]):+.2f} points")
    assert ok


def test_criterion_08_step_scaling_direction(runs):
    adv = runs.zoo["cnn-a-adv"]
    arms = H.step_scaling_arms(BASE.replace(method="ngi"))
    rates = {name: runs.rate(cfg, adv) for name, cfg in arms.items()}
    base, doubled, ngi = rates["MI-FGSM"], rates["MI-FGSM(2a)"], rates["NGI-MI-FGSM"]
    ok = doubled <= base and ngi > base
    record(8, ok, f"on cnn-a-adv: MI {_pct(base)}, MI 2a/(T/2) {_pct(doubled)}, NGI {_pct(ngi)}")
    assert ok


def test_criterion_09_white_box_success(runs):
    rate = runs.rate(BASE.replace(method="ifgsm"), runs.zoo["cnn-a"])
    ok = rate >= 0.95
    record(9, ok, f"I-FGSM white-box success on cnn-a {_pct(rate)} (need 95%)")
    assert ok


def test_criterion_10_defenses(runs):
    parts, ok = [], True
    for dcfg in (DefenseConfig("bit_red", bits=2), DefenseConfig("rand_smooth", sigma=0.1, votes=25)):
        plain = [runs.zoo[t] for t in HELD_OUT]
        defended = [DefendedModel(m, dcfg) for m in plain]
        mi_plain, mi_def = runs.mean_transfer(MI, plain), runs.mean_transfer(MI, defended)
        ngi_def = runs.mean_transfer(NGI, defended)
        reduces = mi_def < mi_plain
        margin = 100 * (ngi_def - mi_def)
        ok &= reduces and margin >= 2.0
        parts.append(
            f"{dcfg.label()}: MI {_pct(mi_plain)}->{_pct(mi_def)} (reduced: {reduces}), "
            f"NGI {_pct(ngi_def)}, margin {margin:+.2f} points"
        )
    record(10, ok, "; ".join(parts))
    assert ok


def test_criterion_11_eval_rerun_is_byte_identical(tmp_path, zoo_paths):
    zoo_dir = tmp_path / "zoo"
    zoo_dir.mkdir()
    for path in zoo_paths.values():
        shutil.copy(path, zoo_dir / path.name)
    config = tmp_path / "run.ini"
    config.write_text(
        "[models]\ndir = zoo\nsurrogates = cnn-a\ntargets = cnn-b, cnn-a-adv\n"
        "[attack]\nmethods = mifgsm, ngi+di, vmifgsm\neps = 0.1\nvt_samples = 5\n"
        "[defense]\nkinds = rand_smooth, rand_resize_pad\n"
        "[eval]\nn_images = 100\nrepeats = 2\nout_dir = first\n"
    )
    assert cli.main(["eval", str(config)]) == 0
    first = (tmp_path / "first" / "report.csv").read_bytes()
    embedded = json.loads((tmp_path / "first" / "report.json").read_text())["config"]["resolved_config"]
    rerun = tmp_path / "rerun.ini"
    rerun.write_text(embedded.replace(str(tmp_path / "first"), str(tmp_path / "second")))
    assert cli.main(["eval", str(rerun)]) == 0
    second = (tmp_path / "second" / "report.csv").read_bytes()
    ok = first == second and len(first.splitlines()) == 1 + 3 * 6
    record(11, ok, f"rerun from the embedded config: {len(first)} bytes, identical: {first == second}")
    assert ok
