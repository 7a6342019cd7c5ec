import json
import shutil

import numpy as np
import pytest

from ngiattack import cli
from ngiattack import harness as H
from ngiattack.config import load_config

SYNTH = """
[dataset]
source = synthetic
synthetic_classes = 3
synthetic_n = 300
[models]
dir = zoo
train = mlp-d
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_train_one_model_is_byte_identical_on_rerun(tmp_path):
    config = _write(tmp_path, SYNTH)
    assert cli.main(["train", config]) == 0
    files = sorted(p.name for p in (tmp_path / "zoo").iterdir())
    assert files == ["mlp-d.ngiw", "train.log"]
    first = (tmp_path / "zoo" / "mlp-d.ngiw").read_bytes()
    log = json.loads((tmp_path / "zoo" / "train.log").read_text())
    assert log["seed"] == 0 and 0 <= log["test_accuracy"] <= 1 and "train_accuracy" in log
    assert cli.main(["train", config]) == 0
    assert (tmp_path / "zoo" / "mlp-d.ngiw").read_bytes() == first


def test_unknown_key_exits_nonzero_naming_it(tmp_path, capsys):
    config = _write(tmp_path, SYNTH + "[attack]\nepislon = 0.1\n")
    assert cli.main(["train", config]) == 2
    assert "unknown key 'epislon'" in capsys.readouterr().err


def test_negative_eps_and_bad_k_are_rejected(tmp_path, capsys):
    assert cli.main(["attack", _write(tmp_path, "[attack]\neps = -0.1\n")]) == 2
    assert "eps must be >= 0" in capsys.readouterr().err
    assert cli.main(["attack", _write(tmp_path, "[attack]\nbacktrack_step = 10\n")]) == 2
    assert "0 <= K < steps" in capsys.readouterr().err


def test_unknown_model_name_is_rejected(tmp_path, capsys):
    assert cli.main(["train", _write(tmp_path, SYNTH.replace("mlp-d", "vgg"))]) == 2
    assert "unknown model 'vgg'" in capsys.readouterr().err


def test_unwritable_output_dir(tmp_path, capsys):
    (tmp_path / "blocker").write_text("")
    assert cli.main(["train", _write(tmp_path, SYNTH.replace("dir = zoo", "dir = blocker/zoo"))]) == 2
    assert "cannot create output directory" in capsys.readouterr().err


def test_synthetic_dataset_is_deterministic(tmp_path):
    cfg = load_config(_write(tmp_path, SYNTH))
    (a, b), (c, d) = cli.load_dataset(cfg), cli.load_dataset(cfg)
    np.testing.assert_array_equal(a.images, c.images)
    np.testing.assert_array_equal(b.labels, d.labels)
    assert len(a) + len(b) == 300 and a.images.min() >= 0 and a.images.max() <= 1


def test_idx_dataset_via_prepare_data(tmp_path, mnist):
    assert cli.main(["prepare-data", str(tmp_path / "data")]) == 0
    cfg = load_config(
        _write(
            tmp_path,
            "[dataset]\nsource = idx\n"
            "train_images = data/train-images-idx3-ubyte.gz\ntrain_labels = data/train-labels-idx1-ubyte.gz\n"
            "test_images = data/t10k-images-idx3-ubyte.gz\ntest_labels = data/t10k-labels-idx1-ubyte.gz\n",
        )
    )
    train, test = cli.load_dataset(cfg)
    assert test.images.shape == (1500, 1, 28, 28) and len(train) == 3500
    np.testing.assert_array_equal(test.images, mnist[1].images)


def test_missing_dataset_file(tmp_path, capsys):
    text = "[dataset]\nsource = idx\n" + "".join(
        f"{k} = nowhere.gz\n" for k in ("train_images", "train_labels", "test_images", "test_labels")
    )
    assert cli.main(["train", _write(tmp_path, text)]) == 2
    assert "missing dataset file" in capsys.readouterr().err


# ------------------------------------------------------------------ attack / eval on the zoo


@pytest.fixture()
def zoo_dir(tmp_path, zoo_paths):
    d = tmp_path / "zoo"
    d.mkdir()
    for path in zoo_paths.values():
        shutil.copy(path, d / path.name)
    return d


RUN = """
[models]
dir = zoo
surrogates = cnn-a
targets = cnn-b, cnn-c, mlp-d, cnn-a-adv
[attack]
methods = {methods}
eps = {eps}
[eval]
n_images = 60
out_dir = out
"""


def _run(tmp_path, methods="mifgsm", eps="0.1", extra=""):
    return _write(tmp_path, RUN.format(methods=methods, eps=eps) + extra)


def test_attack_zero_budget_reports_zero_success(tmp_path, zoo_dir, capsys):
    assert cli.main(["attack", _run(tmp_path, "mifgsm, ngi", "0")]) == 0
    out = capsys.readouterr().out
    assert out.count("white-box success cnn-a 0.0% on 60 images") == 2


def test_attack_batch_file_is_byte_identical_and_uses_ngi_defaults(tmp_path, zoo_dir):
    config = _run(tmp_path, "ngi")
    assert cli.main(["attack", config]) == 0
    path = tmp_path / "out" / "batches" / "cnn-a__NGI-MI-FGSM.ngib"
    first = path.read_bytes()
    assert cli.main(["attack", config]) == 0
    assert path.read_bytes() == first
    header, batch = cli.load_batch(path)
    assert header["config"]["backtrack_step"] == 5 and header["config"]["mask_prob"] == 0.9
    assert len(batch) == 60 and header["fingerprints"]["cnn-a"]


def test_eval_single_surrogate_four_targets(tmp_path, zoo_dir):
    assert cli.main(["eval", _run(tmp_path)]) == 0
    out = tmp_path / "out"
    m = H.parse_csv((out / "report.csv").read_text())
    assert m.rows() == [("cnn-a", "MI-FGSM")] and m.targets() == ["cnn-b", "cnn-c", "mlp-d", "cnn-a-adv"]
    meta = json.loads((out / "report.json").read_text())
    assert set(meta["fingerprints"]) == {"cnn-a", "cnn-b", "cnn-c", "mlp-d", "cnn-a-adv"}
    assert meta["config"]["resolved_config"] == (out / "resolved.ini").read_text()
    assert "| cnn-a | MI-FGSM |" in (out / "report.md").read_text()


def test_eval_rerun_from_resolved_config_is_byte_identical(tmp_path, zoo_dir):
    assert cli.main(["eval", _run(tmp_path, "mifgsm, ngi+di")]) == 0
    first = (tmp_path / "out" / "report.csv").read_bytes()
    resolved = tmp_path / "elsewhere.ini"
    shutil.copy(tmp_path / "out" / "resolved.ini", resolved)
    assert cli.main(["eval", str(resolved)]) == 0
    assert (tmp_path / "out" / "report.csv").read_bytes() == first


def test_eval_ensemble_and_defense_columns(tmp_path, zoo_dir):
    config = _write(
        tmp_path,
        RUN.format(methods="mifgsm", eps="0.1").replace("surrogates = cnn-a", "surrogates = cnn-a+cnn-b+cnn-c")
        + "[defense]\nkinds = bit_red, rand_smooth\nbits = 2\n",
    )
    assert cli.main(["eval", config]) == 0
    m = H.parse_csv((tmp_path / "out" / "report.csv").read_text())
    assert m.rows() == [("cnn-a+cnn-b+cnn-c", "MI-FGSM")]
    assert m.targets()[4:] == [f"{t}+bit_red(b=2)" for t in ("cnn-b", "cnn-c", "mlp-d", "cnn-a-adv")] + [
        f"{t}+rs(s=0.1,n=25)" for t in ("cnn-b", "cnn-c", "mlp-d", "cnn-a-adv")
    ]
    white = {c.target for c in m.cells if c.white_box}
    assert white == {"cnn-b", "cnn-c"}


def test_eval_from_batch_files_matches_direct_eval(tmp_path, zoo_dir):
    assert cli.main(["eval", _run(tmp_path, "mifgsm, ngi")]) == 0
    direct = (tmp_path / "out" / "report.csv").read_text()
    assert cli.main(["attack", _run(tmp_path, "mifgsm, ngi")]) == 0
    batches = "batches = out/batches/cnn-a__MI-FGSM.ngib, out/batches/cnn-a__NGI-MI-FGSM.ngib\n"
    assert cli.main(["eval", _run(tmp_path, "mifgsm, ngi", extra=batches)]) == 0
    assert (tmp_path / "out" / "report.csv").read_text() == direct


def test_eval_missing_target_exits_nonzero(tmp_path, zoo_dir, capsys):
    (zoo_dir / "cnn-c.ngiw").unlink()
    assert cli.main(["eval", _run(tmp_path)]) == 2
    assert "missing weight file for target 'cnn-c'" in capsys.readouterr().err


@pytest.mark.parametrize("kind", ["backtracking", "step_scaling", "components"])
def test_sweeps_write_reports(tmp_path, zoo_dir, capsys, kind):
    text = RUN.format(methods="ngi", eps="0.1").replace("cnn-b, cnn-c, mlp-d, cnn-a-adv", "cnn-b, cnn-a-adv")
    config = _write(tmp_path, text + f"sweep = {kind}\nk_values = 0, 5\n")
    assert cli.main(["sweep", config]) == 0
    m = H.parse_csv((tmp_path / "out" / f"sweep-{kind}.csv").read_text())
    expected = {"backtracking": 2, "step_scaling": 3, "components": 6}[kind]
    assert len(m.rows()) == expected
    out = capsys.readouterr().out
    assert {"backtracking": "K=5 minus K=0", "step_scaling": "adversarial", "components": "w/ EB"}[kind] in out


def test_defaults_command(capsys):
    assert cli.main(["defaults"]) == 0
    assert "# eps = 16/255" in capsys.readouterr().out
