import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hykey.data import write_dataset
from hykey.estimator import HyKeyDetector
from hykey.synth import EpipolarSceneDataset, PairSpec, PlanarPairDataset

TINY = dict(bands=4, channels=(8, 12, 16), descriptor_dim=8,
            train_detected=8, train_random=8, max_keypoints=16,
            batch_size=2, epoch_frames=4, warmup_steps=2, max_steps=2,
            random_state=3)


def tiny_pairs(n=4):
    return PlanarPairDataset(n, spec=PairSpec(seed=7), bands=4, height=16, width=16)


class TestEstimatorContract:
    def test_get_set_params_roundtrip(self):
        est = HyKeyDetector(**TINY)
        params = est.get_params()
        assert params["descriptor_dim"] == 8
        assert params["random_state"] == 3
        est.set_params(max_keypoints=32)
        assert est.get_params()["max_keypoints"] == 32

    def test_clone_preserves_params(self):
        est = HyKeyDetector(**TINY)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_transform_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            HyKeyDetector(**TINY).transform([np.zeros((4, 16, 16), dtype=np.float32)])


@pytest.fixture(scope="module")
def fitted():
    return HyKeyDetector(**TINY).fit(tiny_pairs())


class TestFitTransform:

    def test_fit_trains_and_records(self, fitted):
        assert fitted.n_steps_ == 2
        assert len(fitted.history_) == 2
        assert all(np.isfinite(r["loss_total"]) for r in fitted.history_)

    def test_transform_shapes(self, fitted):
        pair = tiny_pairs()[0]
        results = fitted.transform([pair.cube0, pair.cube1.data])
        assert len(results) == 2
        for r in results:
            n = len(r["keypoints"])
            assert r["keypoints"].shape == (n, 2)
            assert r["scores"].shape == (n,)
            assert r["descriptors"].shape == (n, 8)
            np.testing.assert_allclose(np.linalg.norm(r["descriptors"], axis=1),
                                       1.0, atol=1e-5)

    def test_predict_returns_keypoints(self, fitted):
        pair = tiny_pairs()[0]
        kpts = fitted.predict([pair.cube0])
        assert len(kpts) == 1
        assert kpts[0].shape[1] == 2

    def test_same_seed_reproducible(self):
        a = HyKeyDetector(**TINY).fit(tiny_pairs())
        b = HyKeyDetector(**TINY).fit(tiny_pairs())
        assert a.history_[-1]["loss_total"] == b.history_[-1]["loss_total"]


class TestDatasetAdapters:
    def test_fit_from_directory(self, tmp_path):
        write_dataset(tmp_path / "ds", "planar", 2, seed=5, bands=4, height=16, width=16)
        est = HyKeyDetector(**{**TINY, "max_steps": 1}).fit(str(tmp_path / "ds"))
        assert est.n_steps_ == 1

    def test_fit_mixed_datasets(self):
        planar = tiny_pairs(2)
        scenes = EpipolarSceneDataset(2, spec=PairSpec(mode="epipolar", seed=9),
                                      bands=4, height=16, width=16)
        est = HyKeyDetector(**{**TINY, "max_steps": 1}).fit([planar, scenes])
        assert est.n_steps_ == 1

    def test_rejects_unknown_items(self):
        with pytest.raises(TypeError, match="dataset items"):
            HyKeyDetector(**TINY).fit([[1, 2, 3]])
