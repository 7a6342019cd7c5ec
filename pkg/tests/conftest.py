import hashlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ngiattack import data as D  # noqa: E402
from ngiattack import models as M  # noqa: E402

ZOO = ("cnn-a", "cnn-b", "cnn-c", "mlp-d", "cnn-a-adv")
_SRC = Path(M.__file__).parent


def _zoo_key() -> str:
    h = hashlib.sha256()
    for name in ("models.py", "tensor.py", "data.py", "_pykernels.py"):
        h.update((_SRC / name).read_bytes())
    h.update(repr((M.TrainHyper(), M.ADV_HYPER, M.AdvTrainConfig())).encode())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def mnist():
    return D.mnist_sample()


@pytest.fixture(scope="session")
def zoo_paths(mnist, request):
    """Default-recipe zoo, trained once and cached under .pytest_cache."""
    cache = Path(request.config.cache.mkdir(f"ngiattack-zoo-{_zoo_key()}"))
    train, test = mnist
    paths = {}
    for name in ZOO:
        path = cache / f"{name}.ngiw"
        if not path.exists():
            M.save_weights(M.train_named(name, train, test=test), path)
        paths[name] = path
    return paths


@pytest.fixture(scope="session")
def zoo(zoo_paths):
    return {name: M.load_classifier(path, name) for name, path in zoo_paths.items()}


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
