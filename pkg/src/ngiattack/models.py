"""The model zoo: four small classifiers, their training loops and weight files.

``cnn-a`` (two 5x5 conv blocks), ``cnn-b`` (three 3x3 convs), ``cnn-c`` (one
wide 7x7 conv) and ``mlp-d`` (no convolutions) differ in kernel size and depth
so that transfer between them is transfer between genuinely different models.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import tensor as T
from .data import LabeledImages
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

WEIGHT_MAGIC = b"NGIW"


class TrainingError(RuntimeError):
    pass


def _conv(out, k, pad=0):
    return {"type": "conv", "out": out, "kernel": k, "stride": 1, "pad": pad}


_RELU = {"type": "relu"}
_POOL = {"type": "pool", "size": 2}
_FLAT = {"type": "flatten"}


def _dense(out):
    return {"type": "dense", "out": out}


ARCHITECTURES = {
    "cnn-a": [_conv(16, 5), _RELU, _POOL, _conv(32, 5), _RELU, _POOL, _FLAT, _dense(128), _RELU],
    "cnn-b": [_conv(8, 3, 1), _RELU, _POOL, _conv(16, 3, 1), _RELU, _conv(16, 3, 1), _RELU, _POOL, _FLAT],
    "cnn-c": [_conv(12, 7), _RELU, _POOL, _FLAT, _dense(64), _RELU],
    "mlp-d": [_FLAT, _dense(256), _RELU, _dense(128), _RELU],
}


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    layers: tuple
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    # fixed standardization applied before the first layer (MNIST statistics)
    input_mean: float = 0.1307
    input_std: float = 0.3081

    @classmethod
    def from_arch(cls, arch: str, input_shape=(1, 28, 28), num_classes: int = 10) -> "ModelSpec":
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}")
        layers = copy.deepcopy(ARCHITECTURES[arch]) + [_dense(num_classes)]
        spec = cls(arch, tuple(tuple(sorted(l.items())) for l in layers), tuple(input_shape), num_classes)
        spec.param_shapes()  # validates the geometry
        return spec

    def __post_init__(self):
        if not self.input_std > 0:
            raise ValueError(f"{self.arch}: input_std must be > 0, got {self.input_std}")

    def layer_dicts(self) -> list[dict]:
        return [dict(l) for l in self.layers]

    def param_shapes(self) -> list[tuple[int, ...]]:
        c, h, w = self.input_shape
        flat = None
        shapes = []
        for i, layer in enumerate(self.layer_dicts()):
            kind = layer["type"]
            if kind == "conv":
                if flat is not None:
                    raise ValueError(f"{self.arch}: conv layer {i} after flatten")
                k, p, s = layer["kernel"], layer["pad"], layer["stride"]
                h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if h < 1 or w < 1:
                    raise ValueError(f"{self.arch}: layer {i} shrinks input {self.input_shape} to nothing")
                shapes += [(layer["out"], c, k, k), (layer["out"],)]
                c = layer["out"]
            elif kind == "pool":
                h, w = h // layer["size"], w // layer["size"]
                if h < 1 or w < 1:
                    raise ValueError(f"{self.arch}: pool layer {i} on a map smaller than its window")
            elif kind == "flatten":
                flat = c * h * w
            elif kind == "dense":
                if flat is None:
                    raise ValueError(f"{self.arch}: dense layer {i} before flatten")
                shapes += [(flat, layer["out"]), (layer["out"],)]
                flat = layer["out"]
        if flat != self.num_classes:
            raise ValueError(f"{self.arch}: final width {flat} != class count {self.num_classes}")
        return shapes

    def to_json(self) -> dict:
        return {
            "arch": self.arch,
            "layers": self.layer_dicts(),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "input_mean": self.input_mean,
            "input_std": self.input_std,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        layers = tuple(tuple(sorted(l.items())) for l in d["layers"])
        spec = cls(
            d["arch"],
            layers,
            tuple(d["input_shape"]),
            int(d["num_classes"]),
            float(d.get("input_mean", 0.0)),
            float(d.get("input_std", 1.0)),
        )
        spec.param_shapes()
        return spec


@dataclass
class ModelWeights:
    """Parameters (float32, in layer order) plus training metadata."""

    spec: ModelSpec
    params: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if len(expected) != len(self.params):
            raise ValueError(f"{self.spec.arch}: expected {len(expected)} tensors, got {len(self.params)}")
        for i, (shape, p) in enumerate(zip(expected, self.params)):
            if tuple(p.shape) != shape:
                raise ValueError(f"{self.spec.arch}: tensor {i} has shape {p.shape}, spec requires {shape}")
        self.params = [np.asarray(p, dtype=np.float32) for p in self.params]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        return (
            isinstance(other, ModelWeights)
            and self.spec == other.spec
            and self.meta == other.meta
            and len(self.params) == len(other.params)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.params, other.params))
        )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> list[np.ndarray]:
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return params


def forward(spec: ModelSpec, params, x: Tensor) -> Tensor:
    """Logits for a batch; ``params`` may be arrays or Tensors."""
    if spec.input_mean != 0.0 or spec.input_std != 1.0:
        x = T.mul(T.add(x, -spec.input_mean), 1.0 / spec.input_std)
    pi = 0
    for layer in spec.layer_dicts():
        kind = layer["type"]
        if kind == "conv":
            x = T.conv2d(x, params[pi], params[pi + 1], layer["stride"], layer["pad"])
            pi += 2
        elif kind == "dense":
            x = T.dense(x, params[pi], params[pi + 1])
            pi += 2
        elif kind == "relu":
            x = T.relu(x)
        elif kind == "pool":
            x = T.maxpool2d(x, layer["size"])
        elif kind == "flatten":
            x = T.flatten(x)
    return x


class Classifier:
    """Inference and input-gradient wrapper around trained weights."""

    chunk = 256

    def __init__(self, weights: ModelWeights, name: str | None = None):
        self.weights = weights
        self.spec = weights.spec
        self.name = name or weights.spec.arch
        self._params = [p.astype(np.float64) for p in weights.params]

    def __repr__(self):
        return f"Classifier({self.name!r})"

    def _check(self, x):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(
                f"{self.name}: input shape {tuple(x.shape[1:])} does not match {self.spec.input_shape}"
            )

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        outs = [
            forward(self.spec, self._params, Tensor(x[i : i + self.chunk])).data
            for i in range(0, len(x), self.chunk)
        ]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, data: LabeledImages) -> float:
        return float((self.predict(data.images) == data.labels).mean())

    def loss_and_input_gradient(self, x: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-image cross-entropy and its gradient with respect to the input."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self._check(x)
        if len(y) != len(x):
            raise T.ShapeError(f"{self.name}: {len(y)} labels for {len(x)} images")
        losses, grads = [], []
        for i in range(0, len(x), self.chunk):
            with Tape():
                xt = Tensor(x[i : i + self.chunk], requires_grad=True)
                per = T.softmax_cross_entropy(forward(self.spec, self._params, xt), y[i : i + self.chunk], "none")
                T.backward(T.tensor_sum(per))
            losses.append(per.data)
            grads.append(xt.grad)
        if not losses:
            return np.zeros(0), np.zeros_like(x)
        return np.concatenate(losses), np.concatenate(grads)


def loss_and_input_gradient(weights, x, y):
    model = weights if isinstance(weights, Classifier) else Classifier(weights)
    return model.loss_and_input_gradient(x, y)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 3
    lr: float = 0.02
    batch_size: int = 100
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class AdvTrainConfig:
    eps: float = 0.1
    steps: int = 5
    step_size: float | None = None  # default 2.5 * eps / steps

    def __post_init__(self):
        if not 0 <= self.eps <= 1:
            raise ValueError(f"adversarial eps must lie in [0, 1], got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"adversarial steps must be >= 1, got {self.steps}")


def _pgd(spec, params, x, y, adv: AdvTrainConfig, rng) -> np.ndarray:
    step = adv.step_size if adv.step_size is not None else 2.5 * adv.eps / adv.steps
    xa = np.clip(x + rng.uniform(-adv.eps, adv.eps, size=x.shape), 0.0, 1.0)
    for _ in range(adv.steps):
        with Tape():
            xt = Tensor(xa, requires_grad=True)
            T.backward(T.softmax_cross_entropy(forward(spec, params, xt), y, "sum"))
        xa = xa + step * np.sign(xt.grad)
        xa = np.clip(np.minimum(np.maximum(xa, x - adv.eps), x + adv.eps), 0.0, 1.0)
    return xa


def _fit(spec, data, hyper, test, adv: AdvTrainConfig | None) -> ModelWeights:
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if tuple(data.image_shape) != spec.input_shape:
        raise TrainingError(f"dataset images {data.image_shape} do not match spec input {spec.input_shape}")
    if data.labels.max() >= spec.num_classes:
        raise TrainingError(f"label {data.labels.max()} >= class count {spec.num_classes}")
    rng = np.random.default_rng(hyper.seed)
    adv_rng = np.random.default_rng([hyper.seed, 1])
    params = init_params(spec, rng)
    velocity = [np.zeros_like(p) for p in params]
    n = len(data)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            if adv is not None:
                xb = _pgd(spec, params, xb, yb, adv, adv_rng)
            with Tape():
                pts = [Tensor(p, requires_grad=True) for p in params]
                loss = T.softmax_cross_entropy(forward(spec, pts, Tensor(xb)), yb, "mean")
                T.backward(loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"{spec.arch}: non-finite loss at epoch {epoch}, batch offset {start}")
            if not all(np.isfinite(pt.grad).all() for pt in pts):
                raise TrainingError(f"{spec.arch}: non-finite gradient at epoch {epoch}, batch offset {start}")
            total += value * len(idx)
            for p, v, pt in zip(params, velocity, pts):
                v *= hyper.momentum
                v -= hyper.lr * pt.grad
                p += v
        log.info("%s epoch %d loss %.4f", spec.arch, epoch, total / n)
    weights = ModelWeights(spec, [p.astype(np.float32) for p in params])
    eval_set = test if test is not None else data
    acc = Classifier(weights).accuracy(eval_set)
    weights.meta = {
        "seed": hyper.seed,
        "epochs": hyper.epochs,
        "lr": hyper.lr,
        "batch_size": hyper.batch_size,
        "momentum": hyper.momentum,
        "clean_accuracy": acc,
        "adversarial": adv is not None,
    }
    if adv is not None:
        weights.meta.update(adv_eps=adv.eps, adv_steps=adv.steps)
    log.info("%s clean accuracy %.4f", spec.arch, acc)
    return weights


def train(spec: ModelSpec, data: LabeledImages, hyper: TrainHyper = TrainHyper(), test: LabeledImages | None = None):
    """SGD with momentum; fully determined by (spec, data, hyper)."""
    return _fit(spec, data, hyper, test, None)


def adversarial_train(
    spec: ModelSpec,
    data: LabeledImages,
    hyper: TrainHyper = TrainHyper(),
    adv: AdvTrainConfig = AdvTrainConfig(),
    test: LabeledImages | None = None,
):
    """Train on PGD examples crafted against the current parameters each batch.

    The random starts come from a stream separate from shuffling, so ``eps=0``
    reproduces :func:`train` step for step.
    """
    return _fit(spec, data, hyper, test, adv)


# adversarial training from scratch diverges at the normal learning rate
ADV_HYPER = TrainHyper(epochs=5, lr=0.005)


def parse_model_name(name: str) -> tuple[str, bool]:
    """``"cnn-a"`` -> (``"cnn-a"``, False); ``"cnn-a-adv"`` -> (``"cnn-a"``, True)."""
    arch, adv = (name[:-4], True) if name.endswith("-adv") else (name, False)
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown model {name!r}; expected an architecture from {sorted(ARCHITECTURES)}, optionally with -adv")
    return arch, adv


def train_named(
    name: str,
    data: LabeledImages,
    hyper: TrainHyper = TrainHyper(),
    adv_hyper: TrainHyper = ADV_HYPER,
    adv: AdvTrainConfig = AdvTrainConfig(),
    test: LabeledImages | None = None,
) -> ModelWeights:
    arch, is_adv = parse_model_name(name)
    spec = ModelSpec.from_arch(arch, data.image_shape, data.num_classes)
    if is_adv:
        return adversarial_train(spec, data, adv_hyper, adv, test)
    return train(spec, data, hyper, test)


# ------------------------------------------------------------------ persistence


def save_weights(weights: ModelWeights, path) -> None:
    header = {"spec": weights.spec.to_json(), "meta": weights.meta}
    container.write(path, WEIGHT_MAGIC, header, weights.params)


def load_weights(path) -> ModelWeights:
    header, tensors = container.read(path, WEIGHT_MAGIC)
    spec = ModelSpec.from_json(header["spec"])
    expected = spec.param_shapes()
    if len(tensors) != len(expected):
        raise container.ContainerError(f"{path}: {len(tensors)} tensors, spec {spec.arch} needs {len(expected)}")
    for i, (t, shape) in enumerate(zip(tensors, expected)):
        if t.shape != shape or t.dtype != np.float32:
            raise container.ContainerError(
                f"{path}: tensor {i} is {t.dtype}{t.shape}, expected float32{shape}"
            )
    return ModelWeights(spec, tensors, header["meta"])


def load_classifier(path, name: str | None = None) -> Classifier:
    return Classifier(load_weights(path), name or Path(path).stem)
