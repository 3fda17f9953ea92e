"""The spectral-spatial keypoint network and its differentiable detector.

The network runs a cube ``(bands, H, W)`` through three volumetric
encoder blocks (each: two stride-(2,1,1) 3-D convs with ReLU, then 2x2
spatial max pooling), averages each block over its remaining spectral
extent, upsamples the three maps back to input resolution, concatenates
them, and applies a small 2-D head that emits one detection logit plus
a unit-norm descriptor per pixel.

Keypoints come from the detection head in two modes. Eval mode keeps
strict local maxima above a score threshold and refines each to
sub-pixel accuracy with a soft-argmax. Train mode instead keeps the
top-scoring maxima plus uniform random locations and routes gradients
through the soft-argmax refinement and through bilinear sampling of
scores and descriptors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tape, Tensor

__all__ = [
    "HyKeyConfig",
    "HyKeyNetwork",
    "NetworkOutput",
    "UnsupportedInputError",
    "CheckpointError",
    "nms_mask",
    "soft_argmax_refine",
    "save_checkpoint",
    "load_checkpoint",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class UnsupportedInputError(ValueError):
    """The input cube cannot be processed by this architecture."""


class CheckpointError(ValueError):
    """A checkpoint file disagrees with the expected format or config."""


@dataclass(frozen=True)
class HyKeyConfig:
    """Architecture and detection hyper-parameters."""

    bands: int = 16
    channels: tuple[int, int, int] = (32, 64, 128)
    descriptor_dim: int = 64
    dkd_radius: int = 2
    dkd_temperature: float = 0.1
    score_threshold: float = 0.1
    train_detected: int = 400
    train_random: int = 400
    max_keypoints: int = 1024
    border: int = 4

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be three positive counts, got {self.channels}")
        if self.descriptor_dim < 8:
            raise ValueError(f"descriptor_dim must be >= 8, got {self.descriptor_dim}")
        if self.dkd_radius < 1:
            raise ValueError("dkd_radius must be >= 1")
        if self.dkd_temperature <= 0:
            raise ValueError("dkd_temperature must be > 0")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if min(self.train_detected, self.train_random) < 0:
            raise ValueError("keypoint budgets must be >= 0")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


@dataclass
class NetworkOutput:
    """Dense maps plus the sparse keypoint set extracted from them."""

    score_map: Tensor  # (H, W), values in (0, 1)
    descriptor_map: Tensor  # (D, H, W), unit columns
    keypoints: Tensor  # (N, 2) sub-pixel (x, y)
    scores: Tensor  # (N,)
    descriptors: Tensor  # (N, D), unit rows


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class HyKeyNetwork:
    """Parameter container and forward pass; one sample at a time."""

    def __init__(self, config: HyKeyConfig | None = None, seed: int = 0):
        self.config = config or HyKeyConfig()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = self.config.channels
        d = self.config.descriptor_dim
        self.params: dict[str, Tensor] = {}
        chans = [(1, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c3), (c3, c3)]
        for i, (cin, cout) in enumerate(chans):
            block, k = divmod(i, 2)
            self.params[f"enc{block + 1}.conv{k + 1}.w"] = Tensor(
                _kaiming_uniform(rng, (cout, cin, 3, 3, 3)), requires_grad=True)
            self.params[f"enc{block + 1}.conv{k + 1}.b"] = Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=True)
        agg = c1 + c2 + c3
        self.params["head.conv1.w"] = Tensor(_kaiming_uniform(rng, (d, agg, 3, 3)), requires_grad=True)
        self.params["head.conv1.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.params["head.bn.gamma"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.params["head.bn.beta"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.params["head.conv2.w"] = Tensor(_kaiming_uniform(rng, (d + 1, d, 3, 3)), requires_grad=True)
        self.params["head.conv2.b"] = Tensor(np.zeros(d + 1, dtype=np.float32), requires_grad=True)
        # batchnorm running statistics: buffers, not optimised
        self.buffers: dict[str, np.ndarray] = {
            "head.bn.running_mean": np.zeros(d, dtype=np.float32),
            "head.bn.running_var": np.ones(d, dtype=np.float32),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- stages ---------------------------------------------------------
    def encoder_forward(self, x: Tensor) -> list[Tensor]:
        """Three feature volumes from a (1, bands, H, W) input."""
        if x.ndim != 4 or x.shape[0] != 1:
            raise UnsupportedInputError(f"expected (1, bands, H, W), got {x.shape}")
        if x.shape[1] < 4:
            raise UnsupportedInputError(f"need at least 4 spectral bands, got {x.shape[1]}")
        if x.shape[1] != self.config.bands:
            raise UnsupportedInputError(
                f"network configured for {self.config.bands} bands, got {x.shape[1]}")
        feats = []
        for block in (1, 2, 3):
            x = ad.relu(nnops.conv3d(x, self.params[f"enc{block}.conv1.w"],
                                     self.params[f"enc{block}.conv1.b"], stride=(2, 1, 1)))
            x = ad.relu(nnops.conv3d(x, self.params[f"enc{block}.conv2.w"],
                                     self.params[f"enc{block}.conv2.b"], stride=(2, 1, 1)))
            x = nnops.maxpool_spatial(x)
            feats.append(x)
        return feats

    def aggregate(self, feats: list[Tensor], out_hw: tuple[int, int]) -> Tensor:
        maps = []
        for f in feats:
            planar = f.mean(axis=1)  # average the remaining spectral extent
            maps.append(nnops.upsample_bilinear(planar, out_hw))
        return ad.concat(maps, axis=0)

    def head_forward(self, agg: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
        x = nnops.conv2d(agg, self.params["head.conv1.w"], self.params["head.conv1.b"])
        x = self._batchnorm(x, train)
        x = ad.relu(x)
        x = nnops.conv2d(x, self.params["head.conv2.w"], self.params["head.conv2.b"])
        score_map = ad.sigmoid(x[0])
        descriptor_map = ad.l2_normalize(x[1:], axis=0, warn_on_zero=False)
        return score_map, descriptor_map

    def _batchnorm(self, x: Tensor, train: bool) -> Tensor:
        gamma = self.params["head.bn.gamma"].reshape(-1, 1, 1)
        beta = self.params["head.bn.beta"].reshape(-1, 1, 1)
        if train:
            mean = x.mean(axis=(1, 2), keepdims=True)
            var = ((x - mean) ** 2).mean(axis=(1, 2), keepdims=True)
            m = BN_MOMENTUM
            self.buffers["head.bn.running_mean"] = (
                (1 - m) * self.buffers["head.bn.running_mean"] + m * mean.data.reshape(-1)
            ).astype(np.float32)
            self.buffers["head.bn.running_var"] = (
                (1 - m) * self.buffers["head.bn.running_var"] + m * var.data.reshape(-1)
            ).astype(np.float32)
            xhat = (x - mean) / ad.sqrt(var + BN_EPS)
        else:
            mean = self.buffers["head.bn.running_mean"].reshape(-1, 1, 1)
            var = self.buffers["head.bn.running_var"].reshape(-1, 1, 1)
            xhat = (x - mean) / np.sqrt(var + BN_EPS)
        return gamma * xhat + beta

    def dense_forward(self, cube: np.ndarray, train: bool = False) -> tuple[Tensor, Tensor]:
        """Score and descriptor maps for a (bands, H, W) cube in [0, 1]."""
        cube = np.asarray(cube, dtype=np.float32)
        if cube.ndim != 3:
            raise UnsupportedInputError(f"expected (bands, H, W), got {cube.shape}")
        bands, h, w = cube.shape
        hp = -(-h // 8) * 8
        wp = -(-w // 8) * 8
        if (hp, wp) != (h, w):
            cube = np.pad(cube, ((0, 0), (0, hp - h), (0, wp - w)), mode="reflect")
        x = Tensor(cube[None])
        feats = self.encoder_forward(x)
        agg = self.aggregate(feats, (hp, wp))
        score_map, descriptor_map = self.head_forward(agg, train=train)
        if (hp, wp) != (h, w):
            score_map = score_map[:h, :w]
            descriptor_map = descriptor_map[:, :h, :w]
        return score_map, descriptor_map

    def forward(self, cube: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None) -> NetworkOutput:
        if mode not in ("eval", "train"):
            raise ValueError(f"mode must be eval or train, got {mode!r}")
        train = mode == "train"
        score_map, descriptor_map = self.dense_forward(cube, train=train)
        cfg = self.config
        if train:
            if rng is None:
                rng = np.random.default_rng(0)
            centers = _train_centers(score_map.data, cfg, rng)
        else:
            centers = _eval_centers(score_map.data, cfg)
        keypoints = soft_argmax_refine(score_map, centers, cfg.dkd_radius, cfg.dkd_temperature)
        if len(centers):
            scores = nnops.grid_sample(score_map.reshape(1, *score_map.shape), keypoints)[:, 0]
            desc = nnops.grid_sample(descriptor_map, keypoints)
            desc = ad.l2_normalize(desc, axis=1, warn_on_zero=False)
        else:
            scores = Tensor(np.zeros(0, dtype=np.float32))
            desc = Tensor(np.zeros((0, cfg.descriptor_dim), dtype=np.float32))
        return NetworkOutput(score_map=score_map, descriptor_map=descriptor_map,
                             keypoints=keypoints, scores=scores, descriptors=desc)


def nms_mask(score: np.ndarray, radius: int) -> np.ndarray:
    """Strict local maxima of a 2-D map inside a (2r+1)^2 window.

    A pixel survives only if every window neighbour has a strictly lower
    score, except that an equal-scoring neighbour later in row-major
    order does not disqualify it. Exactly one member of any tied plateau
    survives: the lowest row-major index.
    """
    score = np.asarray(score)
    h, w = score.shape
    keep = np.ones((h, w), dtype=bool)
    padded = np.pad(score, radius, mode="constant", constant_values=-np.inf)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            if dy < 0 or (dy == 0 and dx < 0):
                keep &= nb < score  # earlier neighbour must be strictly lower
            else:
                keep &= nb <= score  # later neighbour may tie
    return keep


def _eval_centers(score: np.ndarray, cfg: HyKeyConfig) -> np.ndarray:
    keep = nms_mask(score, cfg.dkd_radius) & (score > cfg.score_threshold)
    ys, xs = np.nonzero(keep)
    if len(ys) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(-score[ys, xs], kind="stable")[: cfg.max_keypoints]
    return np.stack([xs[order], ys[order]], axis=1)


def _train_centers(score: np.ndarray, cfg: HyKeyConfig, rng: np.random.Generator) -> np.ndarray:
    keep = nms_mask(score, cfg.dkd_radius)
    ys, xs = np.nonzero(keep)
    order = np.argsort(-score[ys, xs], kind="stable")[: cfg.train_detected]
    detected = np.stack([xs[order], ys[order]], axis=1)
    h, w = score.shape
    b = cfg.border
    lo = (b, b)
    hi = (w - b, h - b)
    if hi[0] <= lo[0] or hi[1] <= lo[1]:
        rand = np.zeros((0, 2), dtype=np.int64)
    else:
        rand = np.stack([
            rng.integers(lo[0], hi[0], cfg.train_random),
            rng.integers(lo[1], hi[1], cfg.train_random),
        ], axis=1)
    return np.concatenate([detected, rand], axis=0)


def soft_argmax_refine(score_map: Tensor, centers: np.ndarray, radius: int,
                       temperature: float) -> Tensor:
    """Sub-pixel refinement: expected window offset under softmax(score/T).

    Differentiable with respect to the score map; integer centres act as
    constants. Refined coordinates are clamped to the image bounds.
    """
    h, w = score_map.shape
    if len(centers) == 0:
        return Tensor(np.zeros((0, 2), dtype=np.float32))
    windows = nnops.extract_windows(score_map, centers, radius)
    weights = ad.softmax(windows / float(temperature), axis=1)
    k = 2 * radius + 1
    off = np.arange(-radius, radius + 1, dtype=np.float32)
    grid = np.stack([np.tile(off, k), np.repeat(off, k)], axis=1)  # (k*k, 2) of (dx, dy)
    delta = ad.matmul(weights, Tensor(grid))
    pts = delta + centers.astype(np.float32)
    return _clip_xy(pts, w, h)


def _clip_xy(pts: Tensor, w: int, h: int) -> Tensor:
    hi = np.array([w - 1, h - 1], dtype=np.float32)
    lo = ad.relu(pts)  # clamp below at 0
    return hi - ad.relu(hi - lo)


def save_checkpoint(path, network: HyKeyNetwork, epoch: int, step: int,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None) -> None:
    """Length-prefixed JSON metadata followed by named f32 little-endian blobs."""
    arrays: dict[str, np.ndarray] = {name: t.data for name, t in network.params.items()}
    arrays.update(network.buffers)
    if extra_arrays:
        for name, arr in extra_arrays.items():
            if name in arrays:
                raise ValueError(f"duplicate checkpoint tensor name {name!r}")
            arrays[name] = arr
    meta = {
        "format": 1,
        "config": asdict(network.config),
        "epoch": int(epoch),
        "step": int(step),
        "tensors": [{"name": n, "shape": list(np.asarray(a).shape)} for n, a in arrays.items()],
    }
    if extra_meta:
        meta.update(extra_meta)
    blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected_config: HyKeyConfig | None = None):
    """Restore a network plus any extra arrays; validates shapes against config.

    Returns (network, meta, extra_arrays)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise CheckpointError("file too short for a checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + hlen:
        raise CheckpointError("metadata length exceeds file size")
    try:
        meta = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from exc
    if meta.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    cfg_dict = dict(meta["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    config = HyKeyConfig(**cfg_dict)
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expected_config}")
    off = 4 + hlen
    arrays = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"checkpoint truncated inside tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off = end
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after final tensor")

    network = HyKeyNetwork(config)
    for name, t in network.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arrays[name].shape}, expected {t.data.shape}")
        t.data = arrays.pop(name)
    for name in list(network.buffers):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing buffer {name!r}")
        if arrays[name].shape != network.buffers[name].shape:
            raise CheckpointError(f"buffer {name!r} shape mismatch")
        network.buffers[name] = arrays.pop(name)
    return network, meta, arrays
