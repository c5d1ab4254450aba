"""End-to-end command-line runs on tiny synthetic data."""

import json

import numpy as np
import pytest

from steglab import cli, data, dctnet, fusion, gfr, jpeg
from steglab.manifest import read_manifest


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", root / "pgm", "--count", 8, "--size", 40, "--seed", 1) == 0
    assert run("prepare", root / "pgm", root / "covers", "--size", 32) == 0
    assert run("embed", root / "covers", root / "stegos", "--payload-bpnzac", 0.8,
               "--val-fraction", 0.25, "--seed", 2) == 0
    return root


def test_synth_and_prepare(workspace):
    pgms = sorted((workspace / "pgm").glob("*.pgm"))
    covers = sorted((workspace / "covers").glob("*.stgc"))
    assert len(pgms) == len(covers) == 8
    ci = jpeg.load_coefficients(covers[0])
    assert (ci.h, ci.w) == (32, 32)
    np.testing.assert_array_equal(ci.qtable, jpeg.quality_to_qtable(75))
    # prepared covers are recompression fixpoints
    np.testing.assert_array_equal(jpeg.recompress(ci).coeffs, ci.coeffs)
    m = read_manifest(workspace / "covers" / "manifest.txt")
    assert m["command"] == "prepare" and m["config.quality_factor"] == "75"


def test_embed_outputs(workspace):
    rows = data.read_pair_manifest(workspace / "stegos" / "pairs.csv")
    assert len(rows) == 8
    assert sum(r[2] == "val" for r in rows) == 2
    m = read_manifest(workspace / "stegos" / "manifest.txt")
    assert float(m["config.beta"]) == pytest.approx(0.16168, abs=1e-4)
    assert "J-UNIWARD" in m["config.note"]
    changes = json.loads(m["output.changes"])
    assert len(changes) == 8 and sum(changes.values()) > 0


def test_zero_payload_byte_identical(workspace, tmp_path):
    assert run("embed", workspace / "covers", tmp_path / "zero", "--payload-bpnzac", 0) == 0
    for c in sorted((workspace / "covers").glob("*.stgc")):
        assert (tmp_path / "zero" / c.name).read_bytes() == c.read_bytes()


def test_embed_deterministic(workspace, tmp_path):
    assert run("embed", workspace / "covers", tmp_path / "again", "--payload-bpnzac", 0.8, "--seed", 2) == 0
    for s in sorted((workspace / "stegos").glob("*.stgc")):
        assert (tmp_path / "again" / s.name).read_bytes() == s.read_bytes()
    assert (tmp_path / "again" / "pairs.csv").read_text() == (workspace / "stegos" / "pairs.csv").read_text()


def test_prepare_bad_inputs(tmp_path, capsys):
    (tmp_path / "src").mkdir()
    (tmp_path / "src" / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    assert run("prepare", tmp_path / "src", tmp_path / "out") == 1
    assert "every input failed" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    assert run("train", workspace / "stegos" / "pairs.csv", out, "--max-iters", 6, "--batch-pairs", 2,
               "--checkpoint-every", 2, "--seed", 3) == 0
    return out


def test_train_outputs(trained):
    ckpts = sorted(trained.glob("ckpt_*.stgn"))
    assert [c.name for c in ckpts] == ["ckpt_0000002.stgn", "ckpt_0000004.stgn", "ckpt_0000006.stgn"]
    log = (trained / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("# scale=5e-05")
    assert log[1] == "iter,lr,loss,val_error"
    m = read_manifest(trained / "manifest.txt")
    assert m["command"] == "train" and m["seed.seed"] == "3"


def test_train_deterministic(workspace, trained, tmp_path):
    assert run("train", workspace / "stegos" / "pairs.csv", tmp_path / "t", "--max-iters", 6,
               "--batch-pairs", 2, "--checkpoint-every", 2, "--seed", 3) == 0
    assert (tmp_path / "t" / "ckpt_0000006.stgn").read_bytes() == (trained / "ckpt_0000006.stgn").read_bytes()


def test_train_variant(workspace, tmp_path):
    assert run("train", workspace / "stegos" / "pairs.csv", tmp_path / "v4", "--variant", 4,
               "--max-iters", 2, "--batch-pairs", 2) == 0
    g = dctnet.build_variant(4, 32, 32)
    meta = dctnet.load_checkpoint(g, tmp_path / "v4" / "ckpt_0000002.stgn")
    assert meta["variant"] == 4
    np.testing.assert_array_equal(g.params["g1.dct.weight"][:, 0], dctnet.init_dct_kernels().astype(np.float32))


def test_eval(workspace, trained, tmp_path, capsys):
    ckpts = sorted(trained.glob("ckpt_*.stgn"))
    assert run("eval", workspace / "stegos" / "pairs.csv", tmp_path, "--checkpoints", *ckpts) == 0
    lines = (tmp_path / "errors.csv").read_text().splitlines()
    assert lines[0] == "model,iteration,error"
    assert lines[-1].startswith("ensemble(3)")
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 4
    assert "J-UNIWARD" in capsys.readouterr().out


def test_features_and_fuse(workspace, trained, tmp_path):
    pairs = workspace / "stegos" / "pairs.csv"
    ckpts = sorted(trained.glob("ckpt_*.stgn"))
    for split in ("train", "val"):
        assert run("features", pairs, tmp_path / f"cnn_{split}.stgf", "--kind", "cnn", "--split", split,
                   "--checkpoints", *ckpts) == 0
        assert run("features", pairs, tmp_path / f"gfr_{split}.stgf", "--kind", "gfr", "--split", split,
                   "--scales", 1.0, "--orientations", 2, "--sca", "--payload-bpnzac", 0.8) == 0
    feats, _ = gfr.load_features(tmp_path / "cnn_train.stgf")
    assert feats.shape == (12, 3 * 160)
    labels = gfr.load_labels(tmp_path / "cnn_train.labels")
    np.testing.assert_array_equal(labels, [0] * 6 + [1] * 6)
    cls, _ = gfr.load_features(tmp_path / "gfr_val.stgf")
    assert cls.shape == (4, 2 * 25 * 9)

    out = tmp_path / "fused"
    assert run("fuse", out, "--train-cnn", tmp_path / "cnn_train.stgf",
               "--train-classical", tmp_path / "gfr_train.stgf",
               "--test-cnn", tmp_path / "cnn_val.stgf", "--test-classical", tmp_path / "gfr_val.stgf",
               "--n-cnn-models", 3, "--d-sub", 20, "--learners", 5) == 0
    fm = fusion.load_fusion(out / "fusion.stgu")
    assert fm.cfg.n_probabilities == 7
    report = (out / "report.csv").read_text().splitlines()
    assert report[0] == "sample,P0,P1,P2,P3,P4,P5,P6,fused,label"
    assert len(report) == 5


def test_features_cnn_needs_checkpoints(workspace, tmp_path, capsys):
    assert run("features", workspace / "stegos" / "pairs.csv", tmp_path / "x.stgf", "--kind", "cnn") == 1
    assert "--checkpoints" in capsys.readouterr().err
