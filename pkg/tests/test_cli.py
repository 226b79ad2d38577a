import json

import numpy as np
import pytest

import mlsn.autodiff as ad
from mlsn.cli import main
from mlsn.data import load_csv_dataset
from mlsn.gradcheck import LOSS_CHECKS, PRIMITIVES, run_suite

TINY = "epochs=3\nfeature_dim=6\nh_hidden=8\ns_hidden=6\nbatch_size=16\nlabeled_batch_size=8\n"


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--two-moons", "--n", "200", "--noise", "0.15", "--seed", "7",
                 "--out", "moons.csv"]) == 0
    (tmp_path / "run.cfg").write_text("dataset=moons.csv\n" + TINY)
    return tmp_path


def test_gen_data_two_moons(workdir):
    ds = load_csv_dataset(workdir / "moons.csv")
    assert len(ds) == 200 and np.bincount(ds.labels).tolist() == [100, 100]
    first = (workdir / "moons.csv").read_bytes()
    assert main(["gen-data", "--two-moons", "--n", "200", "--noise", "0.15", "--seed", "7",
                 "--out", "moons.csv"]) == 0
    assert (workdir / "moons.csv").read_bytes() == first
    assert (workdir / "moons.csv.manifest.json").is_file()


def test_gen_weak_pairs(workdir):
    assert main(["gen-data", "--weak-pairs", "--dataset", "moons.csv", "--n-pairs", "500",
                 "--seed", "7", "--out", "pairs.csv"]) == 0
    lines = (workdir / "pairs.csv").read_text().splitlines()
    assert lines[0] == "i,j,same" and len(lines) == 501


def test_gen_data_flag_errors(workdir):
    assert main(["gen-data", "--two-moons", "--digits", "--out", "x.csv"]) == 2
    assert main(["gen-data", "--weak-pairs", "--out", "x.csv"]) == 2
    assert main(["gen-data", "--two-moons", "--n", "7", "--out", "x.csv"]) == 2


def test_train_supervised_config_zero_columns(workdir):
    (workdir / "sup.cfg").write_text("dataset=moons.csv\n" + TINY +
                                     "lambda1_max=0\nlambda2_max=0\nlambda3_max=0\n")
    assert main(["train", "--config", "sup.cfg", "--out-dir", "sup"]) == 0
    rows = (workdir / "sup/metrics.csv").read_text().splitlines()[1:]
    assert len(rows) == 3
    for row in rows:
        _, l_c, l_t, l_s, l_sc, *_ = (float(v) for v in row.split(","))
        assert l_t == l_s == l_sc == 0.0


def test_train_deterministic_and_manifest(workdir):
    assert main(["train", "--config", "run.cfg", "--seed", "1", "--out-dir", "a"]) == 0
    assert main(["train", "--config", "run.cfg", "--seed", "1", "--out-dir", "b"]) == 0
    assert (workdir / "a/metrics.csv").read_bytes() == (workdir / "b/metrics.csv").read_bytes()
    man = json.loads((workdir / "a/manifest.json").read_text())
    assert man["seed"] == 1 and man["config"]["tau"] == 0.95 and "moons.csv" in man["inputs"]
    # delete outputs and rerun from the manifest alone
    metrics = (workdir / "a/metrics.csv").read_bytes()
    ckpt = (workdir / "a/model.ckpt").read_bytes()
    (workdir / "a/metrics.csv").unlink()
    (workdir / "a/model.ckpt").unlink()
    assert main(["train", "--config", "a/manifest.json"]) == 0
    assert (workdir / "a/metrics.csv").read_bytes() == metrics
    assert (workdir / "a/model.ckpt").read_bytes() == ckpt


def test_train_validation_errors(workdir, capsys):
    (workdir / "bad.cfg").write_text("epochs=-2\nlearning_rate=0\nbogus=1\n")
    assert main(["train", "--config", "bad.cfg"]) == 2
    err = capsys.readouterr().err
    for name in ("epochs", "learning_rate", "bogus", "dataset"):
        assert f"error: {name}:" in err
    assert not (workdir / "run").exists()
    assert main(["train", "--config", "run.cfg", "--dataset", "missing.csv"]) == 2
    assert "dataset" in capsys.readouterr().err


def test_train_weak_pairs_and_eval(workdir, capsys):
    main(["gen-data", "--weak-pairs", "--dataset", "moons.csv", "--n-pairs", "300", "--out", "p.csv"])
    assert main(["train", "--config", "run.cfg", "--weak-pairs", "p.csv", "--out-dir", "w"]) == 0
    assert main(["eval", "--checkpoint", "w/model.ckpt", "--dataset", "moons.csv"]) == 0
    assert "test error" in capsys.readouterr().out
    (workdir / "oob.csv").write_text("i,j,same\n0,5000,1\n")
    assert main(["train", "--config", "run.cfg", "--weak-pairs", "oob.csv", "--out-dir", "o"]) == 3


def test_experiment_summary(workdir):
    args = ["experiment", "--config", "run.cfg", "--methods", "supervised,mt,mlsn", "--seeds", "2"]
    assert main(args + ["--out-dir", "e1"]) == 0
    assert main(args + ["--out-dir", "e2"]) == 0
    a = (workdir / "e1/summary.txt").read_text()
    assert a == (workdir / "e2/summary.txt").read_text()
    assert (workdir / "e1/summary.json").read_bytes() == (workdir / "e2/summary.json").read_bytes()
    assert [line.split()[0] for line in a.splitlines()[1:]] == ["supervised", "mt", "mlsn"]
    assert main(["experiment", "--config", "run.cfg", "--methods", "mt", "--seeds", "1",
                 "--out-dir", "e3"]) == 0
    assert float((workdir / "e3/summary.txt").read_text().splitlines()[1].split()[2]) == 0.0
    assert main(["experiment", "--config", "run.cfg", "--methods", "nope"]) == 2


def test_export_features(workdir):
    (workdir / "zero.cfg").write_text("dataset=moons.csv\nepochs=0\n")
    assert main(["train", "--config", "zero.cfg", "--out-dir", "z"]) == 0
    assert main(["export-features", "--checkpoint", "z/model.ckpt", "--dataset", "moons.csv",
                 "--out-prefix", "s"]) == 0
    assert main(["export-features", "--checkpoint", "z/model.ckpt", "--dataset", "moons.csv",
                 "--out-prefix", "t", "--use-teacher"]) == 0
    proj = (workdir / "s_pca.csv").read_text().splitlines()
    assert proj[0] == "id,pc1,pc2,label" and len(proj) == 201
    feats = (workdir / "s_features.csv").read_text().splitlines()
    assert feats[0].startswith("id,f1,") and len(feats) == 201
    assert (workdir / "s_pca.csv").read_bytes() == (workdir / "t_pca.csv").read_bytes()
    assert (workdir / "s_features.csv").read_bytes() == (workdir / "t_features.csv").read_bytes()
    main(["export-features", "--checkpoint", "z/model.ckpt", "--dataset", "moons.csv", "--out-prefix", "s"])
    assert (workdir / "s_pca.csv").read_text().splitlines() == proj


def test_export_dimension_mismatch(workdir):
    (workdir / "zero.cfg").write_text("dataset=moons.csv\nepochs=0\n")
    main(["train", "--config", "zero.cfg", "--out-dir", "z"])
    (workdir / "wide.csv").write_text("f1,f2,f3,label\n1,2,3,0\n4,5,6,1\n")
    assert main(["export-features", "--checkpoint", "z/model.ckpt", "--dataset", "wide.csv",
                 "--out-prefix", "x"]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    names = [line.split("  ")[0].strip() for line in out[1:]]
    assert names == list(PRIMITIVES) + list(LOSS_CHECKS)
    assert all(line.endswith("PASS") for line in out[1:])


def test_gradcheck_detects_sign_error(monkeypatch, capsys):
    original = ad.Graph.sigmoid

    def broken(self, a):
        out = original(self, a)
        good = out._backward

        def flipped(g):
            return tuple(-pg for pg in good(g))

        out._backward = flipped
        return out

    monkeypatch.setattr(ad.Graph, "sigmoid", broken)
    assert not all(r.passed for r in run_suite())
    assert main(["gradcheck"]) != 0
    assert "FAIL" in capsys.readouterr().out
