"""Strict INI run configuration.

Sections are ``[dataset]``, ``[models]``, ``[attack]``, ``[defense]`` and
``[eval]``; ``#`` starts a comment. Every key has a documented default, and
unknown sections or keys are rejected by name. ``[eval] seed`` is the single
global seed: it seeds training, attack streams and random defenses.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .attacks import AttackConfig, AttackConfigError
from .defenses import DefenseConfig, DefenseConfigError
from .models import AdvTrainConfig, TrainHyper
from .transforms import TransformConfig


class ConfigError(ValueError):
    pass


def _float(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text.replace(" ", "")))
    return float(text)


def _opt_float(text: str):
    return None if text.strip() in ("", "none") else _float(text)


def _list(conv):
    def parse(text: str):
        return [conv(p.strip()) for p in text.split(",") if p.strip()]

    parse.__name__ = f"list[{conv.__name__}]"
    return parse


def _str(text: str) -> str:
    return text.strip()


_str_list = _list(_str)

# (parser, default as written in a config file)
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "source": (_str, "mnist-sample"),  # mnist-sample | idx | synthetic
        "n_train": (int, "3500"),
        "train_images": (_str, ""),
        "train_labels": (_str, ""),
        "test_images": (_str, ""),
        "test_labels": (_str, ""),
        "num_classes": (int, "10"),
        "synthetic_classes": (int, "2"),
        "synthetic_n": (int, "500"),
        "synthetic_side": (int, "8"),
        "synthetic_test_fraction": (_float, "0.2"),
    },
    "models": {
        "dir": (_str, "runs/zoo"),
        "train": (_str_list, "cnn-a, cnn-b, cnn-c, mlp-d, cnn-a-adv"),
        "surrogates": (_str_list, "cnn-a"),
        "targets": (_str_list, "cnn-b, cnn-c, mlp-d, cnn-a-adv"),
        "epochs": (int, "3"),
        "lr": (_float, "0.02"),
        "batch_size": (int, "100"),
        "momentum": (_float, "0.9"),
        "adv_epochs": (int, "5"),
        "adv_lr": (_float, "0.005"),
        "adv_eps": (_float, "0.1"),
        "adv_steps": (int, "5"),
        "adv_step_size": (_opt_float, "none"),
    },
    "attack": {
        "methods": (_str_list, "mifgsm, ngi"),
        "eps": (_float, "16/255"),
        "steps": (int, "10"),
        "alpha": (_opt_float, "none"),
        "mu": (_float, "1.0"),
        "backtrack_step": (int, "5"),
        "mask_prob": (_float, "0.9"),
        "vt_beta": (_float, "1.5"),
        "vt_samples": (int, "20"),
        "ngi_branch": (_str, "mask"),
        "di_prob": (_float, "0.5"),
        "di_min_ratio": (_float, "0.86"),
        "ti_kernel_size": (int, "7"),
        "ti_sigma": (_opt_float, "none"),
        "si_copies": (int, "5"),
        "admix_m1": (int, "5"),
        "admix_m2": (int, "3"),
        "admix_eta": (_float, "0.2"),
        "bsr_blocks": (int, "2"),
        "bsr_tau": (_float, "24"),
    },
    "defense": {
        "kinds": (_str_list, ""),
        "bits": (int, "4"),
        "quality": (int, "75"),
        "sigma": (_float, "0.1"),
        "votes": (int, "25"),
        "resize_min_ratio": (_float, "0.9"),
    },
    "eval": {
        "seed": (int, "0"),
        "repeats": (int, "1"),
        "n_images": (int, "1000"),
        "min_images": (int, "50"),
        "workers": (int, "1"),
        "out_dir": (_str, "runs/eval"),
        "batches": (_str_list, ""),
        "sweep": (_str, "backtracking"),  # backtracking | step_scaling | components | k_grid | p_grid
        "k_values": (_list(int), "0, 1, 3, 5, 7"),
        "p_values": (_list(_float), "0.6, 0.7, 0.8, 0.9, 1.0"),
    },
}

DATASET_SOURCES = ("mnist-sample", "idx", "synthetic")
SWEEPS = ("backtracking", "step_scaling", "components", "k_grid", "p_grid")


@dataclass
class RunConfig:
    raw: dict  # section -> key -> text as resolved
    values: dict  # section -> key -> parsed value
    path: Path | None = None

    def __getitem__(self, section):
        return self.values[section]

    # -------------------------------------------------------------- builders

    @property
    def seed(self) -> int:
        return self.values["eval"]["seed"]

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.values["eval"]["repeats"])]

    def train_hyper(self) -> TrainHyper:
        m = self.values["models"]
        return TrainHyper(m["epochs"], m["lr"], m["batch_size"], m["momentum"], self.seed)

    def adv_hyper(self) -> TrainHyper:
        m = self.values["models"]
        return TrainHyper(m["adv_epochs"], m["adv_lr"], m["batch_size"], m["momentum"], self.seed)

    def adv_train_config(self) -> AdvTrainConfig:
        m = self.values["models"]
        return AdvTrainConfig(m["adv_eps"], m["adv_steps"], m["adv_step_size"])

    def transform_config(self) -> TransformConfig:
        a = self.values["attack"]
        return TransformConfig(
            di_prob=a["di_prob"],
            di_min_ratio=a["di_min_ratio"],
            ti_kernel_size=a["ti_kernel_size"],
            ti_sigma=a["ti_sigma"],
            si_copies=a["si_copies"],
            admix_m1=a["admix_m1"],
            admix_m2=a["admix_m2"],
            admix_eta=a["admix_eta"],
            bsr_blocks=a["bsr_blocks"],
            bsr_tau=a["bsr_tau"],
            mask_keep_prob=a["mask_prob"],
            rng_seed=self.seed,
        )

    def base_attack(self, method: str = "mifgsm", transforms=()) -> AttackConfig:
        a = self.values["attack"]
        return AttackConfig(
            method=method,
            eps=a["eps"],
            steps=a["steps"],
            alpha=a["alpha"],
            mu=a["mu"],
            backtrack_step=a["backtrack_step"],
            mask_prob=a["mask_prob"],
            vt_beta=a["vt_beta"],
            vt_samples=a["vt_samples"],
            transforms=tuple(transforms),
            transform=self.transform_config(),
            ngi_branch=a["ngi_branch"],
            seed=self.seed,
        )

    def attack_configs(self) -> dict[str, AttackConfig]:
        """``methods`` entries look like ``ngi`` or ``ngi+si+ti+di``; keys are display labels."""
        out = {}
        for entry in self.values["attack"]["methods"]:
            method, *stack = entry.split("+")
            try:
                cfg = self.base_attack(method, stack)
            except AttackConfigError as exc:
                raise ConfigError(f"[attack] methods entry {entry!r}: {exc}") from None
            if cfg.label() in out:
                raise ConfigError(f"[attack] methods lists {entry!r} twice")
            out[cfg.label()] = cfg
        return out

    def defense_configs(self) -> list[DefenseConfig]:
        d = self.values["defense"]
        out = []
        for kind in d["kinds"]:
            try:
                out.append(
                    DefenseConfig(kind, d["bits"], d["quality"], d["sigma"], d["votes"], d["resize_min_ratio"], self.seed)
                )
            except DefenseConfigError as exc:
                raise ConfigError(f"[defense]: {exc}") from None
        return out

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def _canonical(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_canonical(v) for v in value)
    return str(value)


def parse_config(text: str, path: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None, strict=True
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    raw, values = {}, {}
    for section, keys in SCHEMA.items():
        raw[section], values[section] = {}, {}
        for key, (conv, default) in keys.items():
            text_value = parser.get(section, key, fallback=default) if parser.has_section(section) else default
            try:
                value = conv(text_value)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"[{section}] {key} = {text_value!r}: {exc}") from None
            values[section][key] = value
            raw[section][key] = _canonical(value)
    cfg = RunConfig(raw, values, path)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["dataset"]["source"] not in DATASET_SOURCES:
        raise ConfigError(f"[dataset] source must be one of {DATASET_SOURCES}, got {v['dataset']['source']!r}")
    if v["dataset"]["source"] == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not v["dataset"][k]:
                raise ConfigError(f"[dataset] source = idx needs {k}")
    if v["eval"]["sweep"] not in SWEEPS:
        raise ConfigError(f"[eval] sweep must be one of {SWEEPS}, got {v['eval']['sweep']!r}")
    if v["eval"]["repeats"] < 1 or v["eval"]["workers"] < 1 or v["eval"]["n_images"] < 1:
        raise ConfigError("[eval] repeats, workers and n_images must be >= 1")
    a = v["attack"]
    if a["eps"] < 0:
        raise ConfigError(f"[attack] eps must be >= 0, got {a['eps']}")
    if not 0 <= a["backtrack_step"] < a["steps"] and any(m.split("+")[0] == "ngi" for m in a["methods"]):
        raise ConfigError(
            f"[attack] backtrack_step must satisfy 0 <= K < steps, got K={a['backtrack_step']}, steps={a['steps']}"
        )
    if not 0 <= a["mask_prob"] <= 1:
        raise ConfigError(f"[attack] mask_prob must lie in [0, 1], got {a['mask_prob']}")
    try:
        cfg.transform_config()
        cfg.base_attack()
        cfg.train_hyper()
        cfg.adv_train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.attack_configs()
    cfg.defense_configs()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def default_config_text() -> str:
    buf = io.StringIO()
    for section, keys in SCHEMA.items():
        buf.write(f"[{section}]\n")
        for key, (_, default) in keys.items():
            buf.write(f"# {key} = {default}\n")
        buf.write("\n")
    return buf.getvalue()
