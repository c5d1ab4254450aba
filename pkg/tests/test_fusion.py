import numpy as np
import pytest

from steglab import fld, fusion
from steglab.fusion import FusionConfig
from steglab.ndtensor import ContractError


def synthetic(rng, n=60, sep=4.0, cls_dim=40):
    y = np.repeat([0, 1], n // 2)
    cnn = rng.normal(size=(n, 1440))
    cnn[:, :20] += sep * (2 * y[:, None] - 1)
    cls = rng.normal(size=(n, cls_dim))
    cls[:, :5] += sep * (2 * y[:, None] - 1)
    return cnn, cls, y


SMALL = FusionConfig(d_sub=30, L=5)


class TestConcat:
    def test_length_and_offsets(self, rng):
        parts = [rng.normal(size=160) for _ in range(9)]
        v = fusion.concat_cnn_features(parts)
        assert v.shape == (1440,)
        for j in range(9):
            np.testing.assert_array_equal(v[160 * j : 160 * (j + 1)], parts[j])

    def test_permutation(self, rng):
        parts = [rng.normal(size=(3, 160)) for _ in range(9)]
        perm = rng.permutation(9)
        a = fusion.concat_cnn_features(parts)
        b = fusion.concat_cnn_features([parts[j] for j in perm])
        for slot, j in enumerate(perm):
            np.testing.assert_array_equal(b[:, 160 * slot : 160 * (slot + 1)], a[:, 160 * j : 160 * (j + 1)])

    def test_wrong_count(self, rng):
        with pytest.raises(ContractError):
            fusion.concat_cnn_features([rng.normal(size=160)] * 8)

    def test_wrong_length(self, rng):
        with pytest.raises(ContractError):
            fusion.concat_cnn_features([rng.normal(size=160)] * 8 + [rng.normal(size=150)])


class TestTrainPredict:
    def test_seven_probabilities(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL, seed=0)
        p = fusion.probabilities(fm, cnn, cls)
        assert p.shape == (len(y), 7)
        assert p.min() >= 0 and p.max() <= 1

    def test_forced_seeds_identical(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL, seeds=[5] * 7)
        for m in fm.cnn_models[1:]:
            np.testing.assert_array_equal(m.subsets, fm.cnn_models[0].subsets)
            np.testing.assert_array_equal(m.weights, fm.cnn_models[0].weights)

    def test_derived_seeds_distinct(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL, seed=1)
        subsets = {m.subsets.tobytes() for m in fm.cnn_models}
        assert len(subsets) == 6

    def test_separable_zero_error(self, rng):
        cnn, cls, y = synthetic(rng, sep=10.0)
        fm = fusion.train_fusion(cnn, cls, y, SMALL, seed=0)
        _, labels = fusion.predict(fm, cnn, cls)
        assert np.mean(labels != y) == 0.0

    def test_misaligned(self, rng):
        cnn, cls, y = synthetic(rng)
        with pytest.raises(ContractError):
            fusion.train_fusion(cnn[:-1], cls, y, SMALL)

    def test_wrong_cnn_dim(self, rng):
        cnn, cls, y = synthetic(rng)
        with pytest.raises(ContractError):
            fusion.train_fusion(cnn[:, :1000], cls, y, SMALL)

    def test_predict_dim_mismatch(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL)
        with pytest.raises(ContractError):
            fusion.predict(fm, cnn[0], cls[0, :10])

    def test_single_sample(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL)
        p, label = fusion.predict(fm, cnn[0], cls[0])
        assert isinstance(p, float) and label in (0, 1)

    def test_dropping_classical(self, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL)
        p_all = fusion.probabilities(fm, cnn, cls)
        p_cnn, _ = fusion.predict(fm, cnn, cls, include_classical=False)
        np.testing.assert_allclose(p_cnn, p_all[:, :6].mean(axis=1))
        manual = np.mean([fld.predict_proba(m, cnn) for m in fm.cnn_models], axis=0)
        np.testing.assert_allclose(p_cnn, manual)


class TestFuseRule:
    def test_tie_is_cover(self):
        p, label = fusion.fuse(np.full((1, 7), 0.5))
        assert p[0] == 0.5 and label[0] == 0

    def test_six_of_seven(self):
        p, label = fusion.fuse(np.array([[1, 1, 1, 1, 1, 1, 0.0]]))
        assert p[0] == pytest.approx(6 / 7)
        assert label[0] == 1

    def test_order_invariant(self, rng):
        probs = rng.random((10, 7))
        a, _ = fusion.fuse(probs)
        b, _ = fusion.fuse(probs[:, rng.permutation(7)])
        np.testing.assert_allclose(a, b, atol=1e-15)


class TestFiles:
    def test_round_trip(self, tmp_path, rng):
        cnn, cls, y = synthetic(rng)
        fm = fusion.train_fusion(cnn, cls, y, SMALL, seed=2)
        fusion.save_fusion(tmp_path / "f.stgu", fm)
        fm2 = fusion.load_fusion(tmp_path / "f.stgu")
        np.testing.assert_array_equal(fusion.probabilities(fm, cnn, cls), fusion.probabilities(fm2, cnn, cls))
        assert fm2.cfg.n_probabilities == 7
        assert (tmp_path / "f.stgu").read_bytes()[:4] == b"STGU"

    def test_report(self, tmp_path):
        probs = np.array([[1, 1, 1, 1, 1, 1, 0.0], [0.5] * 7])
        fusion.write_report(tmp_path / "r.csv", ["a", "b"], probs)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "sample,P0,P1,P2,P3,P4,P5,P6,fused,label"
        assert lines[1].endswith(",1") and lines[2].endswith(",0")
