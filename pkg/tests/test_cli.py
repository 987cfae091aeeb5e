from pathlib import Path

import numpy as np
import pytest

from mtdl import cli
from mtdl.data import generate_synthetic, load_dataset, read_matrix
from mtdl.errors import ValidationError
from mtdl.training import init_model

CONFIG = """
[data]
path = {data}

[model]
head = softmax
prior = l12
atoms_per_class = 2

[hyperparams]
lambda1 = 0.05
rho = {rho}
nu = 1e-6
epochs = 3
batch_size = 20
seed = 3

[unsupervised]
rho = 1.0
epochs = 2
"""


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(path), "--classes", "4", "--train-per-class", "12",
                     "--test-per-class", "6", "--seed", "1"]) == 0
    return path


def write_config(tmp_path, data, rho=0.2, extra=""):
    p = tmp_path / f"cfg_{rho}.ini"
    p.write_text(CONFIG.format(data=data, rho=rho) + extra)
    return p


def test_train_eval_encode(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    log = (tmp_path / "m" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,step,objective") and len(log) == 4
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(tmp_path / "m"), "--data", str(dataset),
                     "--csv", str(tmp_path / "met.csv")]) == 0
    out = capsys.readouterr().out
    assert "accuracy=" in out and "n_test=24" in out
    assert (tmp_path / "met.csv").read_text().startswith("accuracy,")
    assert cli.main(["encode", "--model", str(tmp_path / "m"), "--data", str(dataset),
                     "--out", str(tmp_path / "codes")]) == 0
    codes = read_matrix(tmp_path / "codes" / "codes.bin")
    assert codes.shape == (72, 8 * 3)
    assert "j*S+s" in (tmp_path / "codes" / "manifest.txt").read_text()


def test_training_twice_gives_identical_files(tmp_path, dataset):
    cfg = write_config(tmp_path, dataset)
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_zero_rate_training_saves_init_model(tmp_path, dataset):
    cfg_path = write_config(tmp_path, dataset, rho=0.0)
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 0
    cfg = cli.parse_config(cfg_path.read_text())
    train = load_dataset(dataset).subset("train")
    st = init_model(train.rows(), train.labels, cfg.hp, cfg.head, cfg.prior, n_atoms=8,
                    unsupervised_hp=cfg.unsupervised)
    model = cli.load_model(tmp_path / "m")
    for a, b in zip(model.dictionary.dicts + model.bank.weights, st.dictionary.dicts + st.bank.weights):
        np.testing.assert_array_equal(a, b)


def test_noise_free_eval_is_perfect(tmp_path, capsys):
    data = tmp_path / "clean"
    assert cli.main(["synth", "--out", str(data), "--classes", "4", "--modalities", "2", "--dim", "8",
                     "--atoms-per-class", "1", "--noise", "0", "--one-hot", "--train-per-class", "5",
                     "--test-per-class", "5"]) == 0
    cfg = write_config(tmp_path, data).read_text().replace("atoms_per_class = 2", "atoms_per_class = 1")
    (tmp_path / "c.ini").write_text(cfg)
    assert cli.main(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "m")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(tmp_path / "m"), "--data", str(data)]) == 0
    assert "accuracy=1.000000" in capsys.readouterr().out


def test_baselines(dataset, capsys):
    assert cli.main(["baseline", "--data", str(dataset)]) == 0
    assert cli.main(["baseline", "--data", str(dataset), "--atoms-per-class", "2", "--epochs", "2"]) == 0
    assert capsys.readouterr().out.count("accuracy=") == 2


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--instances", "6", "--seed", "7"]) == 0
    assert "overall = PASS" in capsys.readouterr().out


def test_exit_codes(tmp_path, dataset):
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 1
    bad = write_config(tmp_path, dataset, extra="\n[hyperparams2]\nx = 1\n")
    assert cli.main(["train", "--config", str(bad)]) == 1
    assert cli.main(["eval", "--model", str(tmp_path), "--data", str(dataset)]) == 1
    assert cli.main(["bogus-command"]) == 1
    assert cli.main(["gradcheck", "--eps", "1e-2", "--instances", "1"]) == 1
    huge = write_config(tmp_path, dataset, rho=1e308)
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", str(huge), "--out", str(tmp_path / "h")]) == 2


def test_config_rejects_unknown_keys(dataset):
    text = CONFIG.format(data=dataset, rho=0.1)
    with pytest.raises(ValidationError):
        cli.parse_config(text.replace("seed = 3", "sed = 3"))
    with pytest.raises(ValidationError):
        cli.parse_config(text.replace("head = softmax", "head = hinge"))
    with pytest.raises(ValidationError):
        cli.parse_config(text.replace("[data]\npath", "[data]\nfolder"))


def test_config_with_synthetic_section():
    cfg = cli.parse_config("[synth]\nn_classes = 3\nn_modalities = 2\ndims = 6,7\ncorrelated = yes\n"
                           "[hyperparams]\nlambda1 = 0.05\nt0 = none\n")
    assert cfg.synth.dims == (6, 7) and cfg.synth.correlated and cfg.hp.t0 is None
    ds = cli.load_experiment_data(cfg)
    assert ds.dims == (6, 7)


def test_config_inline_comments():
    cfg = cli.parse_config("[synth]\nn_classes = 3   ; small\n[model]\nhead = quadratic  # squared loss\n")
    assert cfg.synth.n_classes == 3
    assert cfg.head.value == "quadratic"
