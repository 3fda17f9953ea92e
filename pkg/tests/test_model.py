import numpy as np
import pytest

from hykey import autodiff as ad
from hykey.autodiff import Tape, Tensor
from hykey.model import (
    CheckpointError,
    HyKeyConfig,
    HyKeyNetwork,
    UnsupportedInputError,
    _eval_centers,
    load_checkpoint,
    nms_mask,
    save_checkpoint,
    soft_argmax_refine,
)

from helpers import gradcheck

TOY = HyKeyConfig(bands=16, descriptor_dim=16)


@pytest.fixture(scope="module")
def toy_net():
    return HyKeyNetwork(TOY, seed=11)


@pytest.fixture(scope="module")
def toy_cube():
    rng = np.random.default_rng(5)
    return rng.uniform(0.05, 0.95, (16, 32, 32)).astype(np.float32)


class TestConfig:
    def test_defaults_valid(self):
        cfg = HyKeyConfig()
        assert cfg.channels == (32, 64, 128)
        assert cfg.descriptor_dim == 64

    @pytest.mark.parametrize("kwargs", [
        {"descriptor_dim": 7},
        {"dkd_radius": 0},
        {"dkd_temperature": 0.0},
        {"dkd_temperature": -1.0},
        {"channels": (32, 64)},
        {"channels": (32, 0, 64)},
        {"max_keypoints": 0},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            HyKeyConfig(**kwargs)


class TestEncoder:
    def test_toy_shapes(self, toy_net):
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 16, 32, 32)).astype(np.float32))
        f1, f2, f3 = toy_net.encoder_forward(x)
        assert f1.shape == (32, 4, 16, 16)
        assert f2.shape == (64, 1, 8, 8)
        assert f3.shape == (128, 1, 4, 4)

    @pytest.mark.parametrize("bands,h,w", [(4, 32, 32), (5, 40, 64), (16, 48, 32)])
    def test_shape_formula(self, bands, h, w):
        net = HyKeyNetwork(HyKeyConfig(bands=bands), seed=0)
        x = Tensor(np.zeros((1, bands, h, w), dtype=np.float32))
        feats = net.encoder_forward(x)

        def conv_s(s):
            return (s - 1) // 2 + 1

        s, hh, ww = bands, h, w
        for f, c in zip(feats, (32, 64, 128)):
            s = conv_s(conv_s(s))
            hh, ww = hh // 2, ww // 2
            assert f.shape == (c, s, hh, ww)

    def test_too_few_bands_rejected(self, toy_net):
        with pytest.raises(UnsupportedInputError, match="at least 4"):
            toy_net.encoder_forward(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))

    def test_band_count_mismatch_rejected(self, toy_net):
        with pytest.raises(UnsupportedInputError, match="configured for 16"):
            toy_net.encoder_forward(Tensor(np.zeros((1, 8, 32, 32), dtype=np.float32)))

    def test_zero_input_gives_zero_features(self, toy_net):
        # conv biases start at zero, so zero input stays zero everywhere
        feats = toy_net.encoder_forward(Tensor(np.zeros((1, 16, 32, 32), dtype=np.float32)))
        for f in feats:
            assert np.all(f.data == 0.0)


class TestAggregateAndHead:
    def test_aggregate_constant_blocks(self, toy_net):
        feats = [
            Tensor(np.full((32, 4, 8, 8), 0.3, dtype=np.float32)),
            Tensor(np.full((64, 1, 4, 4), -1.2, dtype=np.float32)),
            Tensor(np.full((128, 1, 2, 2), 0.7, dtype=np.float32)),
        ]
        agg = toy_net.aggregate(feats, (16, 16))
        assert agg.shape == (224, 16, 16)
        assert np.allclose(agg.data[:32], 0.3, atol=1e-6)
        assert np.allclose(agg.data[32:96], -1.2, atol=1e-6)
        assert np.allclose(agg.data[96:], 0.7, atol=1e-6)

    def test_head_split_and_norms(self, toy_net):
        agg = Tensor(np.random.default_rng(1).normal(size=(224, 8, 8)).astype(np.float32))
        score, desc = toy_net.head_forward(agg)
        assert score.shape == (8, 8)
        assert np.all(score.data > 0.0) and np.all(score.data < 1.0)
        assert desc.shape == (16, 8, 8)
        norms = np.sqrt((desc.data.astype(np.float64) ** 2).sum(axis=0))
        assert np.max(np.abs(norms - 1.0)) < 1e-5

    def test_dense_forward_pads_and_crops(self, toy_net):
        cube = np.random.default_rng(2).uniform(size=(16, 30, 44)).astype(np.float32)
        score, desc = toy_net.dense_forward(cube)
        assert score.shape == (30, 44)
        assert desc.shape == (16, 30, 44)

    def test_batchnorm_modes(self, toy_cube):
        net = HyKeyNetwork(TOY, seed=3)
        before = net.buffers["head.bn.running_mean"].copy()
        net.dense_forward(toy_cube, train=True)
        after = net.buffers["head.bn.running_mean"].copy()
        assert not np.array_equal(before, after)
        s1, _ = net.dense_forward(toy_cube, train=False)
        s2, _ = net.dense_forward(toy_cube, train=False)
        assert np.array_equal(s1.data, s2.data)


def brute_force_nms(score, radius):
    h, w = score.shape
    keep = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            ok = True
            for ny in range(max(0, y - radius), min(h, y + radius + 1)):
                for nx in range(max(0, x - radius), min(w, x + radius + 1)):
                    if (ny, nx) == (y, x):
                        continue
                    if score[ny, nx] > score[y, x]:
                        ok = False
                    elif score[ny, nx] == score[y, x] and ny * w + nx < y * w + x:
                        ok = False
            keep[y, x] = ok
    return keep


class TestDetection:
    def test_single_peak_survives(self):
        score = np.zeros((16, 16), dtype=np.float32)
        score[8, 5] = 1.0
        keep = nms_mask(score, 2)
        ys, xs = np.nonzero(keep & (score > 0.1))
        assert (ys.tolist(), xs.tolist()) == ([8], [5])

    def test_equal_maxima_tie_break(self):
        score = np.zeros((16, 16), dtype=np.float32)
        score[5, 5] = 0.9
        score[5, 6] = 0.9
        keep = nms_mask(score, 2) & (score > 0.1)
        ys, xs = np.nonzero(keep)
        assert (ys.tolist(), xs.tolist()) == ([5], [5])

    def test_constant_map_keeps_first_pixel_only(self):
        keep = nms_mask(np.full((10, 10), 0.5, dtype=np.float32), 2)
        ys, xs = np.nonzero(keep)
        assert (ys.tolist(), xs.tolist()) == ([0], [0])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        score = rng.uniform(size=(12, 12)).astype(np.float32)
        # sprinkle exact ties to exercise the lexicographic rule
        score[3, 3] = score[3, 5] = score[7, 7]
        assert np.array_equal(nms_mask(score, 2), brute_force_nms(score, 2))

    def test_strict_maxima_invariant(self):
        rng = np.random.default_rng(9)
        score = rng.uniform(size=(24, 24))
        keep = nms_mask(score, 2)
        padded = np.pad(score, 1, constant_values=-np.inf)
        for y, x in zip(*np.nonzero(keep)):
            window = padded[y : y + 3, x : x + 3]
            assert not np.any(window > score[y, x])

    def test_eval_centers_threshold_and_cap(self):
        score = np.zeros((20, 20), dtype=np.float32)
        peaks = [(3, 3, 0.9), (3, 9, 0.8), (9, 3, 0.7), (9, 9, 0.05)]
        for y, x, v in peaks:
            score[y, x] = v
        cfg = HyKeyConfig(max_keypoints=2)
        pts = _eval_centers(score, cfg)
        # below-threshold peak dropped, top-2 by score kept, (x, y) order
        assert pts.tolist() == [[3, 3], [9, 3]]

    def test_eval_centers_empty(self):
        cfg = HyKeyConfig()
        pts = _eval_centers(np.full((16, 16), 0.05, dtype=np.float32), cfg)
        assert pts.shape == (0, 2)


class TestSoftArgmax:
    def test_symmetric_peak_refines_to_centre(self):
        score = np.zeros((16, 16), dtype=np.float32)
        score[8, 5] = 1.0
        pts = soft_argmax_refine(Tensor(score), np.array([[5, 8]]), 2, 0.1)
        assert np.allclose(pts.data, [[5.0, 8.0]], atol=1e-6)

    def test_ramp_matches_brute_force_expectation(self):
        xs, ys = np.meshgrid(np.arange(16), np.arange(16))
        score = (0.01 * xs + 0.002 * ys).astype(np.float64)
        t = 0.05
        pts = soft_argmax_refine(Tensor(score), np.array([[8, 8]]), 2, t)

        window = score[6:11, 6:11]
        w = np.exp((window - window.max()) / t)
        w /= w.sum()
        ex = (w * np.arange(-2, 3)[None, :]).sum()
        ey = (w * np.arange(-2, 3)[:, None]).sum()
        assert np.allclose(pts.data, [[8 + ex, 8 + ey]], atol=1e-9)

    def test_sharp_temperature_approaches_max_corner(self):
        xs, ys = np.meshgrid(np.arange(16), np.arange(16))
        score = (0.01 * xs + 0.002 * ys).astype(np.float64)
        pts = soft_argmax_refine(Tensor(score), np.array([[8, 8]]), 2, 0.0005)
        assert pts.data[0, 0] > 9.9  # approaches x offset +2
        assert pts.data[0, 1] > 9.9

    def test_border_refinement_stays_in_bounds(self):
        score = np.zeros((12, 12), dtype=np.float32)
        score[0, 0] = 1.0
        score[0, 1] = 0.9
        pts = soft_argmax_refine(Tensor(score), np.array([[0, 0]]), 2, 0.5)
        assert np.all(pts.data >= 0.0)
        assert pts.data[0, 0] <= 11 and pts.data[0, 1] <= 11

    def test_gradcheck_through_refinement(self):
        rng = np.random.default_rng(4)
        score = rng.uniform(size=(10, 10))
        centers = np.array([[4, 4], [6, 3], [2, 7]])
        proj = rng.normal(size=(3, 2))

        def fn(s):
            pts = soft_argmax_refine(s, centers, 2, 0.1)
            return (pts * proj).sum()

        gradcheck(fn, score)

    def test_fd_sign_agreement(self):
        rng = np.random.default_rng(12)
        score = rng.uniform(size=(12, 12))
        centers = np.array([[5, 5], [8, 4]])
        proj = rng.normal(size=(2, 2))

        t = Tensor(score.copy(), requires_grad=True)
        with Tape() as tape:
            pts = soft_argmax_refine(t, centers, 2, 0.1)
            loss = (pts * proj).sum()
        tape.backward(loss)
        analytic = t.grad.copy()

        h = 1e-5
        cells = [(y, x) for y in range(3, 8) for x in range(2, 8)]
        agree = total = 0
        for y, x in cells:
            t.data[y, x] = score[y, x] + h
            up = (soft_argmax_refine(t, centers, 2, 0.1).data * proj).sum()
            t.data[y, x] = score[y, x] - h
            dn = (soft_argmax_refine(t, centers, 2, 0.1).data * proj).sum()
            t.data[y, x] = score[y, x]
            fd = (up - dn) / (2 * h)
            if abs(fd) > 1e-8:
                total += 1
                agree += np.sign(fd) == np.sign(analytic[y, x])
        assert total > 10
        assert agree / total >= 0.99


class TestForward:
    def test_eval_output_contract(self, toy_net, toy_cube):
        out = toy_net.forward(toy_cube, mode="eval")
        n = out.keypoints.shape[0]
        assert 0 < n <= TOY.max_keypoints
        assert out.scores.shape == (n,)
        assert out.descriptors.shape == (n, 16)
        pts = out.keypoints.data
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= 31)
        assert np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= 31)
        norms = np.linalg.norm(out.descriptors.data.astype(np.float64), axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-5

    def test_eval_deterministic(self, toy_net, toy_cube):
        a = toy_net.forward(toy_cube, mode="eval")
        b = toy_net.forward(toy_cube, mode="eval")
        assert np.array_equal(a.score_map.data, b.score_map.data)
        assert np.array_equal(a.keypoints.data, b.keypoints.data)
        assert np.array_equal(a.descriptors.data, b.descriptors.data)

    def test_train_keypoint_budget_and_border(self, toy_cube):
        cfg = HyKeyConfig(bands=16, descriptor_dim=16, train_detected=50, train_random=60)
        net = HyKeyNetwork(cfg, seed=2)
        out = net.forward(toy_cube, mode="train", rng=np.random.default_rng(0))
        n = out.keypoints.shape[0]
        assert n <= 50 + 60
        rand = out.keypoints.data[n - 60 :]
        # random centres sit in [4, 27]; refinement can shift at most the radius
        assert np.all(rand >= 2.0) and np.all(rand <= 29.0)

    def test_train_seeded_deterministic(self, toy_net, toy_cube):
        a = toy_net.forward(toy_cube, mode="train", rng=np.random.default_rng(7))
        b = toy_net.forward(toy_cube, mode="train", rng=np.random.default_rng(7))
        assert np.array_equal(a.keypoints.data, b.keypoints.data)

    def test_bad_mode_rejected(self, toy_net, toy_cube):
        with pytest.raises(ValueError, match="mode"):
            toy_net.forward(toy_cube, mode="test")

    def test_high_threshold_gives_empty_output(self, toy_cube):
        cfg = HyKeyConfig(bands=16, descriptor_dim=16, score_threshold=1.0)
        net = HyKeyNetwork(cfg, seed=2)
        out = net.forward(toy_cube, mode="eval")
        assert out.keypoints.shape == (0, 2)
        assert out.scores.shape == (0,)
        assert out.descriptors.shape == (0, 16)

    def test_train_backward_finite_grads(self, toy_cube):
        cfg = HyKeyConfig(bands=16, descriptor_dim=16, train_detected=30, train_random=30)
        net = HyKeyNetwork(cfg, seed=4)
        rng = np.random.default_rng(1)
        with Tape() as tape:
            out = net.forward(toy_cube, mode="train", rng=rng)
            pk = (out.keypoints * rng.normal(size=out.keypoints.shape).astype(np.float32)).sum()
            ds = (out.descriptors * rng.normal(size=out.descriptors.shape).astype(np.float32)).sum()
            loss = out.scores.sum() + pk + ds
        tape.backward(loss)
        for name, p in net.params.items():
            assert p.grad is not None, name
            assert np.all(np.isfinite(p.grad)), name
        assert np.any(net.params["enc1.conv1.w"].grad != 0)
        assert np.any(net.params["head.conv2.w"].grad != 0)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        net = HyKeyNetwork(TOY, seed=8)
        net.buffers["head.bn.running_mean"] += 0.25
        extra = {"adam.m.head.conv1.w": np.random.default_rng(0).normal(
            size=net.params["head.conv1.w"].shape).astype(np.float32)}
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, epoch=3, step=1200, extra_arrays=extra,
                        extra_meta={"note": "x"})
        loaded, meta, rest = load_checkpoint(path)
        assert meta["epoch"] == 3 and meta["step"] == 1200 and meta["note"] == "x"
        assert loaded.config == TOY
        for name, p in net.params.items():
            assert np.array_equal(loaded.params[name].data, p.data), name
        for name, b in net.buffers.items():
            assert np.array_equal(loaded.buffers[name], b), name
        assert np.array_equal(rest["adam.m.head.conv1.w"], extra["adam.m.head.conv1.w"])

    def test_config_mismatch_refused(self, tmp_path):
        net = HyKeyNetwork(TOY, seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, epoch=0, step=0)
        other = HyKeyConfig(bands=16, descriptor_dim=32)
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, expected_config=other)

    def test_truncated_file_refused(self, tmp_path):
        net = HyKeyNetwork(TOY, seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, epoch=0, step=0)
        raw = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_trailing_bytes_refused(self, tmp_path):
        net = HyKeyNetwork(TOY, seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, epoch=0, step=0)
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_garbage_metadata_refused(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x08\x00\x00\x00notjson!")
        with pytest.raises(CheckpointError, match="JSON"):
            load_checkpoint(path)

    def test_short_file_refused(self, tmp_path):
        path = tmp_path / "tiny.ckpt"
        path.write_bytes(b"\x01")
        with pytest.raises(CheckpointError, match="too short"):
            load_checkpoint(path)
