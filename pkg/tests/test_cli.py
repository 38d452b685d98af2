import subprocess
import sys

import numpy as np
import pytest

from evuq import cli, data, metrics

TINY_CONF = """\
classifier_hidden=16
generator_hidden=8
critic_hidden=8
latent_dim=4
m=32
pretrain_epochs=3
max_g_iters=5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--n-per-class", "50"]) == 0
    (root / "tiny.conf").write_text(TINY_CONF)
    return root


@pytest.fixture(scope="module")
def enn_run(workdir):
    out = workdir / "enn"
    assert cli.main(["train", "--model", "enn", "--config", str(workdir / "tiny.conf"),
                     "--data", str(workdir / "data"), "--out", str(out)]) == 0
    return out


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "--seed", "3", "--n-per-class", "20"]) == 0
    for f in ("train.csv", "test.csv", "ood_far.csv", "boundary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train = data.load_csv(tmp_path / "a" / "train.csv")
    assert len(train) == 48 and np.bincount(train.labels).tolist() == [16, 16, 16]


def test_gen_data_rejects_empty(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n-per-class", "0"]) == 2


def test_argparse_usage_errors():
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--model", "svm", "--data", "x", "--out", "y"])
    assert info.value.code == 2


@pytest.mark.parametrize("model", ["l2", "wenn"])
def test_train_outputs(workdir, model):
    out = workdir / model
    assert cli.main(["train", "--model", model, "--config", str(workdir / "tiny.conf"),
                     "--data", str(workdir / "data"), "--out", str(out)]) == 0
    header = (out / "trainlog.csv").read_text().splitlines()[0]
    if model == "l2":
        assert "dist" not in header.split(",")
    else:
        assert header.split(",")[:2] == ["iteration", "dist"]
        assert len((out / "trainlog.csv").read_text().splitlines()) == 6
        assert (out / "pretrain.csv").exists()
    manifest = cli.read_manifest(out / "manifest.txt")
    assert manifest["model"] == model
    assert 0 <= float(manifest["metric.test_accuracy"]) <= 1
    assert ("metric.test_mean_vacuity" in manifest) == (model != "l2")


def test_missing_data_is_io_error(workdir, tmp_path):
    assert cli.main(["train", "--model", "enn", "--data", str(tmp_path / "nothing"),
                     "--out", str(tmp_path / "o")]) == 3


def test_bad_config_is_usage_error(workdir, tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("n_d=0\n")
    assert cli.main(["train", "--model", "enn", "--config", str(conf), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(workdir, tmp_path, capsys):
    conf = tmp_path / "wild.conf"
    conf.write_text(TINY_CONF + "lr=1e30\n")
    code = cli.main(["train", "--model", "enn", "--config", str(conf), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "o")])
    assert code == 4
    assert "phase=pretrain" in capsys.readouterr().err


def test_corrupt_checkpoint_is_format_error(tmp_path):
    bad = tmp_path / "model.ckpt"
    bad.write_bytes(b"not a checkpoint\n")
    assert cli.main(["eval-grid", "--checkpoint", str(bad), "--out", str(tmp_path / "g")]) == 5


def test_eval_grid(enn_run, tmp_path):
    out = tmp_path / "grid"
    assert cli.main(["eval-grid", "--checkpoint", str(enn_run / "model.ckpt"), "--out", str(out),
                     "--grid=-5,5,-5,5,12"]) == 0
    for name in ("entropy", "vacuity", "dissonance"):
        _, values = metrics.read_heatmap_csv(out / f"{name}.csv")
        assert values.shape == (12, 12) and np.all((values >= 0) & (values <= 1))
        pgm = (out / f"{name}.pgm").read_bytes()
        assert pgm.startswith(b"P2\n12 12\n255\n")


@pytest.mark.parametrize("grid", ["1,2,3", "5,-5,-5,5,10", "-5,5,-5,5,1"])
def test_eval_grid_bad_spec(enn_run, tmp_path, grid):
    assert cli.main(["eval-grid", "--checkpoint", str(enn_run / "model.ckpt"), "--out", str(tmp_path),
                     f"--grid={grid}"]) == 2


def test_auroc_identical_sets(workdir, enn_run, capsys):
    test_csv = str(workdir / "data" / "test.csv")
    assert cli.main(["auroc", "--checkpoint", str(enn_run / "model.ckpt"), "--id", test_csv,
                     "--ood", test_csv]) == 0
    assert capsys.readouterr().out.strip() == "0.5000"
    assert cli.read_manifest(enn_run / "manifest.txt")["auroc.vac.test_vs_test"] == "0.5000"


def test_auroc_vacuity_needs_evidential_head(workdir):
    test_csv = str(workdir / "data" / "test.csv")
    assert cli.main(["auroc", "--checkpoint", str(workdir / "l2" / "model.ckpt"), "--id", test_csv,
                     "--ood", test_csv, "--score", "vac"]) == 2


def test_fgsm_sweep(workdir, enn_run, tmp_path):
    out = tmp_path / "fgsm.csv"
    assert cli.main(["fgsm-sweep", "--checkpoint", str(enn_run / "model.ckpt"),
                     "--data", str(workdir / "data" / "test.csv"), "--eps", "0,0.25,0.5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("0")


@pytest.mark.parametrize("eps", ["0,abc", "", "0,0.7", "0.3,0.1"])
def test_fgsm_bad_eps(workdir, enn_run, tmp_path, eps):
    assert cli.main(["fgsm-sweep", "--checkpoint", str(enn_run / "model.ckpt"),
                     "--data", str(workdir / "data" / "test.csv"), "--eps", eps,
                     "--out", str(tmp_path / "f.csv")]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "evuq", "gen-data", "--out", str(tmp_path), "--n-per-class", "5"],
                         capture_output=True, text=True, env={"EVUQ_THREADS": "1", "PATH": ""})
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "boundary.csv").exists()
