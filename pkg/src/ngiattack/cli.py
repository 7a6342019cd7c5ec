"""Command-line entry point: ``ngiattack {prepare-data,defaults,train,attack,eval,sweep}``.

Each run is described by one INI file (see :mod:`ngiattack.config`). Relative
paths in it resolve against the directory of the config file. ``eval`` and
``sweep`` write the resolved config next to their reports, and rerunning from
that file reproduces the CSV byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import BACKEND, container
from . import data as D
from . import harness as H
from . import models as M
from .attacks import AdversarialBatch, AttackConfig
from .config import RunConfig, default_config_text, load_config, parse_config
from .defenses import DefendedModel

BATCH_MAGIC = b"NGIB"
log = logging.getLogger("ngiattack")


class CliError(RuntimeError):
    pass


def _path(cfg: RunConfig, text: str) -> Path:
    p = Path(text).expanduser()
    if not p.is_absolute() and cfg.path is not None:
        p = Path(cfg.path).resolve().parent / p
    return p


def _out_dir(cfg: RunConfig, text: str) -> Path:
    out = _path(cfg, text)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write(path: Path, payload) -> None:
    try:
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None


# ------------------------------------------------------------------ data and models


def load_dataset(cfg: RunConfig) -> tuple[D.LabeledImages, D.LabeledImages]:
    """Train and test sets from IDX files, the bundled MNIST sample, or synthetic blobs."""
    d = cfg["dataset"]
    if d["source"] == "idx":
        paths = {k: _path(cfg, d[k]) for k in ("train_images", "train_labels", "test_images", "test_labels")}
        for k, p in paths.items():
            if not p.exists():
                raise CliError(f"missing dataset file for {k}: {p}")
        train = D.load_idx_pair(paths["train_images"], paths["train_labels"], d["num_classes"])
        test = D.load_idx_pair(paths["test_images"], paths["test_labels"], d["num_classes"])
        return train, test
    if d["source"] == "synthetic":
        side = d["synthetic_side"]
        full = D.synthetic_blobs(d["synthetic_classes"], d["synthetic_n"], cfg.seed, (1, side, side))
        n_test = int(round(d["synthetic_test_fraction"] * len(full)))
        if not 0 < n_test < len(full):
            raise CliError(f"synthetic_test_fraction leaves {n_test} of {len(full)} images for testing")
        return full.subset(slice(n_test, None)), full.subset(slice(0, n_test))
    return D.mnist_sample(d["n_train"])


def _weight_path(cfg: RunConfig, name: str) -> Path:
    return _path(cfg, cfg["models"]["dir"]) / f"{name}.ngiw"


def _load_model(cfg: RunConfig, name: str, role: str) -> M.Classifier:
    path = _weight_path(cfg, name)
    if not path.exists():
        raise CliError(f"missing weight file for {role} {name!r}: {path} (run `ngiattack train` first)")
    return M.load_classifier(path, name)


def _surrogate_rows(cfg: RunConfig) -> dict[str, list[M.Classifier]]:
    """Each ``surrogates`` entry is one model or a ``+``-joined ensemble."""
    rows = {}
    for entry in cfg["models"]["surrogates"]:
        rows[entry] = [_load_model(cfg, name, "surrogate") for name in entry.split("+")]
    if not rows:
        raise CliError("[models] surrogates is empty")
    return rows


def _targets(cfg: RunConfig) -> dict[str, M.Classifier]:
    return {name: _load_model(cfg, name, "target") for name in cfg["models"]["targets"]}


def _eval_set(cfg: RunConfig, rows, targets) -> H.EvalSet:
    _, test = load_dataset(cfg)
    members = {m.name: m for group in rows.values() for m in group}
    members.update(targets)
    return H.filter_correct(
        list(members.values()), test.images, test.labels, cfg["eval"]["n_images"], cfg["eval"]["min_images"]
    )


def _with_defenses(cfg: RunConfig, targets: dict) -> dict:
    out = dict(targets)
    for dcfg in cfg.defense_configs():
        for model in targets.values():
            defended = DefendedModel(model, dcfg)
            out[defended.name] = defended
    return out


# ------------------------------------------------------------------ batch files


def save_batch(path: Path, batch: AdversarialBatch, row: str, label: str, fingerprints: dict) -> None:
    header = {
        "surrogate": row,
        "method": label,
        "config": batch.config.to_dict(),
        "fingerprints": fingerprints,
    }
    tensors = [batch.adv.astype(np.float64), batch.labels.astype(np.int64), np.asarray(batch.index, dtype=np.int64)]
    _write(path, container.dumps(BATCH_MAGIC, header, tensors))


def load_batch(path, data: H.EvalSet | None = None) -> tuple[dict, AdversarialBatch]:
    """Read a batch file; clean images come from ``data`` when given (matched by index)."""
    header, tensors = container.read(path, BATCH_MAGIC)
    if len(tensors) != 3:
        raise container.ContainerError(f"{path}: batch files hold 3 tensors, found {len(tensors)}")
    adv, labels, index = tensors
    clean = adv
    if data is not None:
        pos = {int(i): k for k, i in enumerate(data.index)}
        missing = [int(i) for i in index if int(i) not in pos]
        if missing:
            raise CliError(f"{path}: image {missing[0]} is not in the current evaluation set")
        clean = data.images[[pos[int(i)] for i in index]]
    return header, AdversarialBatch(clean, adv, labels, AttackConfig.from_dict(header["config"]), index)


def _batch_name(row: str, label: str) -> str:
    return f"{row}__{label}".replace("/", "_") + ".ngib"


# ------------------------------------------------------------------ commands


def cmd_prepare_data(args) -> int:
    paths = D.export_mnist_sample(args.out_dir, args.n_train)
    for k, p in paths.items():
        print(f"{k} = {p}")
    return 0


def cmd_defaults(args) -> int:
    sys.stdout.write(default_config_text())
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train, test = load_dataset(cfg)
    out = _out_dir(cfg, cfg["models"]["dir"])
    records = []
    for name in cfg["models"]["train"]:
        M.parse_model_name(name)
    for name in cfg["models"]["train"]:
        start = time.perf_counter()
        weights = M.train_named(name, train, cfg.train_hyper(), cfg.adv_hyper(), cfg.adv_train_config(), test)
        path = out / f"{name}.ngiw"
        try:
            M.save_weights(weights, path)
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc.strerror}") from None
        train_acc = M.Classifier(weights).accuracy(train)
        records.append(
            {
                "model": name,
                "seed": cfg.seed,
                "train_accuracy": train_acc,
                "test_accuracy": weights.meta["clean_accuracy"],
                "fingerprint": weights.fingerprint(),
                "path": str(path),
            }
        )
        print(
            f"{name}: test accuracy {weights.meta['clean_accuracy']:.4f}, train accuracy {train_acc:.4f} "
            f"({time.perf_counter() - start:.1f}s) -> {path}"
        )
    _write(out / "train.log", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    rows = _surrogate_rows(cfg)
    targets = _targets(cfg)
    data = _eval_set(cfg, rows, targets)
    out = _out_dir(cfg, cfg["eval"]["out_dir"]) / "batches"
    out.mkdir(exist_ok=True)
    fingerprints = H._fingerprints(rows, targets)
    for row, members in rows.items():
        for label, acfg in cfg.attack_configs().items():
            batch = H.run_attack(members, data, acfg, cfg["eval"]["workers"])
            path = out / _batch_name(row, label)
            save_batch(path, batch, row, label, fingerprints)
            rates = ", ".join(f"{m.name} {100 * H.attack_success_rate(m, batch):.1f}%" for m in members)
            print(f"{row} {label}: white-box success {rates} on {len(batch)} images, linf {batch.linf().max():.4f} -> {path}")
    return 0


def _finish_report(cfg: RunConfig, report: H.EvaluationReport, stem: str) -> Path:
    out = _out_dir(cfg, cfg["eval"]["out_dir"])
    resolved = _resolved(cfg)
    report.config = {
        "resolved_config": resolved.to_ini(),
        "attacks": report.config.get("methods", {}),
        "backend": BACKEND,
    }
    _write(out / f"{stem}.csv", H.emit_report(report, "csv"))
    _write(out / f"{stem}.md", H.emit_report(report, "markdown"))
    meta = {
        "config": report.config,
        "fingerprints": report.fingerprints,
        "seeds": report.seeds,
        "wall_clock": report.wall_clock,
        "n_images": report.matrix.cells[0].n if report.matrix.cells else 0,
    }
    _write(out / f"{stem}.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write(out / "resolved.ini", resolved.to_ini())
    return out


def _resolved(cfg: RunConfig) -> RunConfig:
    """The config with every path made absolute, so it can be rerun from anywhere."""
    raw = {s: dict(v) for s, v in cfg.raw.items()}
    for section, key in [("models", "dir"), ("eval", "out_dir")] + [
        ("dataset", k) for k in ("train_images", "train_labels", "test_images", "test_labels")
    ]:
        if raw[section][key]:
            raw[section][key] = str(_path(cfg, raw[section][key]))
    if raw["eval"]["batches"]:
        raw["eval"]["batches"] = ", ".join(str(_path(cfg, b)) for b in cfg["eval"]["batches"])
    text = "\n".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items()) for s, keys in raw.items())
    return parse_config(text)


def _matrix_from_batches(cfg: RunConfig, rows, targets, data) -> H.EvaluationReport:
    start = time.perf_counter()
    fingerprints = H._fingerprints(rows, {k: v for k, v in targets.items() if not isinstance(v, DefendedModel)})
    cells, methods, seeds = [], {}, []
    for text in cfg["eval"]["batches"]:
        path = _path(cfg, text)
        if not path.exists():
            raise CliError(f"missing batch file {path}")
        header, batch = load_batch(path, data)
        for name, fp in header["fingerprints"].items():
            if name in fingerprints and fingerprints[name] != fp:
                raise CliError(f"{path} was crafted against different weights for {name!r}")
        names = set(header["surrogate"].split("+"))
        methods[header["method"]] = header["config"]
        seeds.append(batch.config.seed)
        for tname, target in targets.items():
            white = not isinstance(target, DefendedModel) and target.name in names
            rate = H.attack_success_rate(target, batch)
            cells.append(H.Cell(header["surrogate"], header["method"], tname, rate, len(batch), white))
    return H.EvaluationReport(
        H.TransferMatrix(cells), {"methods": methods}, fingerprints, sorted(set(seeds)), time.perf_counter() - start
    )


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    targets = _targets(cfg)
    rows = _surrogate_rows(cfg)
    data = _eval_set(cfg, rows, targets)
    all_targets = _with_defenses(cfg, targets)
    if cfg["eval"]["batches"]:
        report = _matrix_from_batches(cfg, rows, all_targets, data)
    else:
        report = H.run_transfer_matrix(
            rows, all_targets, cfg.attack_configs(), data, cfg.seeds, cfg["eval"]["workers"]
        )
    out = _finish_report(cfg, report, "report")
    sys.stdout.write(H.emit_report(report, "markdown"))
    print(f"reports written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    kind = cfg["eval"]["sweep"]
    rows = _surrogate_rows(cfg)
    row, members = next(iter(rows.items()))
    if len(members) != 1:
        raise CliError(f"sweeps use a single surrogate model, got the ensemble {row!r}")
    surrogate = members[0]
    targets = _targets(cfg)
    data = _eval_set(cfg, {row: members}, targets)
    targets = _with_defenses(cfg, targets)
    base = next(iter(cfg.attack_configs().values()))
    seeds, workers = cfg.seeds, cfg["eval"]["workers"]
    ev = cfg["eval"]
    if kind == "backtracking":
        res = H.run_backtracking_sweep(surrogate, targets, base, data, ev["k_values"], seeds, workers)
        report = res.report
        lo, hi = min(res.values), max(res.values)
        summary = f"mean rate at K={hi} minus K={lo}: {100 * res.delta(hi, lo):+.2f} points"
    elif kind == "step_scaling":
        flags = {t: isinstance(m, M.Classifier) and M.parse_model_name(t)[1] for t, m in targets.items()}
        res = H.run_step_scaling_comparison(surrogate, targets, flags, base, data, seeds, workers)
        report = res.report
        summary = "; ".join(
            f"{arm}: normal {100 * res.group_mean(arm, False):.1f}%, adversarial {100 * res.group_mean(arm, True):.1f}%"
            for arm in res.rates
        )
    else:
        variants = {
            "components": H.component_variants,
            "k_grid": lambda c: H.k_variants(c, ev["k_values"]),
            "p_grid": lambda c: H.p_variants(c, ev["p_values"]),
        }[kind](base)
        report = H.run_transfer_matrix({row: members}, targets, variants, data, seeds, workers)
        summary = "; ".join(f"{m}: {100 * report.matrix.mean_rate(row, m):.1f}%" for m in variants)
    out = _finish_report(cfg, report, f"sweep-{kind}")
    sys.stdout.write(H.emit_report(report, "markdown"))
    print(summary)
    print(f"reports written to {out}")
    return 0


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngiattack", description="Transfer attacks, defenses and evaluation on small image classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    prep = sub.add_parser("prepare-data", help="export the bundled MNIST sample as IDX files")
    prep.add_argument("out_dir")
    prep.add_argument("--n-train", type=int, default=3500)
    prep.set_defaults(func=cmd_prepare_data)
    sub.add_parser("defaults", help="print every config key with its default").set_defaults(func=cmd_defaults)
    for name, func, text in [
        ("train", cmd_train, "train the models listed in [models] train"),
        ("attack", cmd_attack, "craft adversarial batch files and print white-box success"),
        ("eval", cmd_eval, "write the transfer matrix as csv, markdown and json"),
        ("sweep", cmd_sweep, "run the sweep named by [eval] sweep"),
    ]:
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    # config, dataset, container and filter errors are all ValueErrors
    except (CliError, M.TrainingError, ValueError, OSError) as exc:
        print(f"ngiattack: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
