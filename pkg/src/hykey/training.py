"""Adam optimiser, linear warmup, and the sequential triplet epoch loop.

Every random decision is keyed on (seed, purpose, step) tuples rather
than on a mutable generator, so a run resumed from a checkpoint replays
the exact same batches, random keypoints, and updates as an
uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .geometry import fundamental_from_pose
from .losses import (
    LossWeights,
    correspondence_labels,
    loss_desc,
    loss_epi,
    loss_pk,
    loss_rel,
    loss_rp,
    total_loss,
)
from .matching import similarity
from .model import CheckpointError, HyKeyConfig, HyKeyNetwork, load_checkpoint, save_checkpoint
from .synth import PairSpec, generate_planar_pair

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingConfigError",
    "TrainConfig",
    "AdamState",
    "TrainingTriplet",
    "PlanarTriplets",
    "EpipolarTriplets",
    "Trainer",
    "lr_schedule",
    "adam_step",
    "clip_gradients",
    "train_epoch",
    "effective_seed",
]


class TrainingConfigError(ValueError):
    """Invalid training setup, detected before any optimisation step."""


def effective_seed(config: "TrainConfig") -> int:
    """Config seed unless the HYKEY_SEED environment variable overrides it."""
    env = os.environ.get("HYKEY_SEED")
    if env is None or env == "":
        return config.seed
    try:
        return int(env)
    except ValueError as exc:
        raise TrainingConfigError(f"HYKEY_SEED must be an integer, got {env!r}") from exc


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, batching, and gating knobs for one training run."""

    learning_rate: float = 3e-4
    warmup_steps: int = 500
    batch_size: int = 6
    epoch_frames: int = 10_000
    epochs: int = 1
    epi_epoch: int = 5  # epipolar term joins after this many epochs
    seed: int = 0
    no_pe: bool = False
    grad_clip: float = 10.0
    max_steps: int | None = None  # truncate the run, for toy experiments
    weights: LossWeights = field(default_factory=LossWeights)
    model: HyKeyConfig = field(default_factory=HyKeyConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.warmup_steps < 0:
            raise TrainingConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise TrainingConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epoch_frames < 1:
            raise TrainingConfigError(f"epoch_frames must be >= 1, got {self.epoch_frames}")
        if self.epochs < 1:
            raise TrainingConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.epi_epoch < 0:
            raise TrainingConfigError(f"epi_epoch must be >= 0, got {self.epi_epoch}")
        if self.grad_clip <= 0:
            raise TrainingConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.max_steps is not None and self.max_steps < 1:
            raise TrainingConfigError(f"max_steps must be >= 1, got {self.max_steps}")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the base rate, constant afterwards."""
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> bool:
    """Bias-corrected Adam update in place.

    Returns False and leaves parameters and moments untouched when any
    gradient is non-finite; the caller logs and moves on.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            logger.warning("non-finite gradient for %s; skipping update", name)
            return False
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = np.asarray(grads[name], dtype=t.data.dtype)
        m, v = state.m[name], state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global norm stays under the cap."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if not math.isfinite(norm) or norm <= max_norm:
        return norm, False
    scale = float(max_norm / norm)
    for g in grads.values():
        g *= scale
    logger.info("gradient norm %.3f clipped to %.1f", norm, max_norm)
    return norm, True


@dataclass
class TrainingTriplet:
    """Anchor cube, its warped twin with the pixel map, and optionally a
    posed second view with calibration (x2 = R02 x0 + t02)."""

    cube0: np.ndarray
    cube1: np.ndarray
    h01: np.ndarray
    cube2: np.ndarray | None = None
    k0: np.ndarray | None = None
    k2: np.ndarray | None = None
    r02: np.ndarray | None = None
    t02: np.ndarray | None = None

    def __post_init__(self):
        posed = (self.cube2, self.k0, self.k2, self.r02, self.t02)
        have = [x is not None for x in posed]
        if any(have) and not all(have):
            raise ValueError("a posed view needs cube2, k0, k2, r02 and t02 together")
        if self.r02 is not None:
            r = np.asarray(self.r02, dtype=np.float64)
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
                raise ValueError("r02 must be a rotation matrix")

    @property
    def has_pose(self) -> bool:
        return self.cube2 is not None


class PlanarTriplets:
    """Triplet adapter over a planar pair dataset (no posed view)."""

    def __init__(self, pairs):
        self.pairs = pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> TrainingTriplet:
        p = self.pairs[i]
        return TrainingTriplet(cube0=p.cube0.data, cube1=p.cube1.data, h01=p.homography)


class EpipolarTriplets:
    """Triplet adapter over rendered scenes; each item also gets a
    homography-warped twin of its anchor view, sampled per index."""

    def __init__(self, scenes, warp_spec: PairSpec | None = None):
        self.scenes = scenes
        self.spec = warp_spec or PairSpec()

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i: int) -> TrainingTriplet:
        s = self.scenes[i]
        rng = np.random.default_rng((self.spec.seed, 23, i))
        pair = generate_planar_pair(
            s.cube0, replace(self.spec, mode="planar", seed=int(rng.integers(2**31))))
        return TrainingTriplet(cube0=s.cube0.data, cube1=pair.cube1.data,
                               h01=pair.homography, cube2=s.cube1.data,
                               k0=s.K0, k2=s.K1, r02=s.R, t02=s.t)


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


class Trainer:
    """Sequential training driver with JSONL step logs and resumable state.

    With two datasets the first supplies the leading half of every batch
    and the second the rest; a dataset exhausted mid-epoch is resampled
    with replacement (logged once per epoch).
    """

    def __init__(self, network: HyKeyNetwork, datasets, config: TrainConfig,
                 log_path=None):
        if not isinstance(datasets, (list, tuple)):
            datasets = [datasets]
        datasets = list(datasets)
        if not 1 <= len(datasets) <= 2:
            raise TrainingConfigError(f"expected one or two datasets, got {len(datasets)}")
        for k, d in enumerate(datasets):
            if len(d) == 0:
                raise TrainingConfigError(f"dataset {k} is empty")
        if network.config != config.model:
            raise TrainingConfigError(
                f"network config {network.config} differs from configured model {config.model}")
        self.network = network
        self.datasets = datasets
        self.config = config
        self.seed = effective_seed(config)
        self.state = AdamState.for_params(network.params)
        self.global_step = 0
        self.epoch = 1  # next epoch to run, 1-indexed
        self.step_in_epoch = 0  # completed steps inside the current epoch
        self.records: list[dict] = []
        self._log_path = Path(log_path) if log_path else None

    # -- logging ---------------------------------------------------------
    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self._log_path is not None:
            with open(self._log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    # -- batch plan --------------------------------------------------------
    def _epoch_plan(self, epoch: int) -> list[tuple[int, int]]:
        """Complete (dataset, index) sequence for one epoch; pure function
        of sizes, config, and seed, so resuming mid-epoch replays it."""
        sizes = [len(d) for d in self.datasets]
        total = min(self.config.epoch_frames, sum(sizes))
        perms = [np.random.default_rng((self.seed, 17, epoch, k)).permutation(n)
                 for k, n in enumerate(sizes)]
        refill = np.random.default_rng((self.seed, 19, epoch))
        cursors = [0] * len(sizes)
        warned = [False] * len(sizes)
        lead = (self.config.batch_size + 1) // 2
        plan = []
        for j in range(total):
            if len(sizes) == 1:
                k = 0
            else:
                k = 0 if (j % self.config.batch_size) < lead else 1
            if cursors[k] < sizes[k]:
                idx = int(perms[k][cursors[k]])
                cursors[k] += 1
            else:
                idx = int(refill.integers(sizes[k]))
                if not warned[k]:
                    logger.info("dataset %d exhausted in epoch %d; resampling with replacement",
                                k, epoch)
                    warned[k] = True
            plan.append((k, idx))
        return plan

    # -- one optimiser step ------------------------------------------------
    def run_step(self, triplets: list[TrainingTriplet], epoch: int) -> dict:
        cfg = self.config
        mcfg = self.network.config
        net = self.network
        epi_active = (not cfg.no_pe) and epoch > cfg.epi_epoch
        rng = np.random.default_rng((self.seed, 3, self.global_step))
        terms: dict[str, list[Tensor]] = {"pk": [], "rp": [], "rel": [], "desc": []}
        epis: list[Tensor] = []
        kpts_total = 0
        views = 0
        ad.zero_grads(net.params.values())
        with Tape():
            for trip in triplets:
                out0 = net.forward(trip.cube0, mode="train", rng=rng)
                out1 = net.forward(trip.cube1, mode="train", rng=rng)
                kpts_total += out0.keypoints.shape[0] + out1.keypoints.shape[0]
                views += 2
                terms["pk"].append(0.5 * (loss_pk(out0.score_map, out0.keypoints, mcfg)
                                          + loss_pk(out1.score_map, out1.keypoints, mcfg)))
                terms["rp"].append(loss_rp(out0.keypoints, out0.scores,
                                           out1.keypoints, out1.scores, trip.h01,
                                           score_threshold=mcfg.score_threshold))
                labels = correspondence_labels(out0.keypoints.data, out1.keypoints.data,
                                               trip.h01)
                sim = similarity(out0.descriptors.data, out1.descriptors.data)
                terms["rel"].append(loss_rel(out0.scores, out1.scores, sim, labels))
                terms["desc"].append(loss_desc(out0.descriptors, out1.descriptors, labels))
                if epi_active and trip.has_pose:
                    out2 = net.forward(trip.cube2, mode="train", rng=rng)
                    kpts_total += out2.keypoints.shape[0]
                    views += 1
                    f02 = fundamental_from_pose(trip.k0, trip.k2, trip.r02, trip.t02)
                    epis.append(loss_epi(out0.keypoints, out2.keypoints,
                                         out0.descriptors, out2.descriptors, f02))
            breakdown = total_loss(_mean(terms["pk"]), _mean(terms["rp"]),
                                   _mean(terms["rel"]), _mean(terms["desc"]),
                                   _mean(epis) if epis else None,
                                   cfg.weights, epoch, no_pe=cfg.no_pe,
                                   activation_epoch=cfg.epi_epoch)
            if breakdown.tensor.requires_grad:
                breakdown.tensor.backward()
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in net.params.items()}
        norm, clipped = clip_gradients(grads, cfg.grad_clip)
        lr = lr_schedule(self.global_step, cfg)
        applied = adam_step(net.params, grads, self.state, lr)
        record = {
            "step": self.global_step,
            "epoch": epoch,
            "lr": lr,
            **breakdown.as_dict(),
            "keypoints": kpts_total / max(views, 1),
            "grad_norm": norm,
            "clipped": clipped,
            "skipped": not applied,
            "frames": len(triplets),
        }
        self.global_step += 1
        self._emit(record)
        return record

    # -- epoch and run loops -------------------------------------------------
    def _budget_exhausted(self) -> bool:
        return self.config.max_steps is not None and self.global_step >= self.config.max_steps

    def run_epoch(self, epoch: int) -> list[dict]:
        plan = self._epoch_plan(epoch)
        bs = self.config.batch_size
        n_steps = math.ceil(len(plan) / bs)
        first = len(self.records)
        s = self.step_in_epoch
        while s < n_steps and not self._budget_exhausted():
            batch = [self.datasets[k][i] for k, i in plan[s * bs:(s + 1) * bs]]
            self.run_step(batch, epoch)
            s += 1
            self.step_in_epoch = s
        if s >= n_steps:
            self.epoch = epoch + 1
            self.step_in_epoch = 0
        return self.records[first:]

    def run(self) -> list[dict]:
        while self.epoch <= self.config.epochs and not self._budget_exhausted():
            self.run_epoch(self.epoch)
        return self.records

    # -- checkpointing -------------------------------------------------------
    def save(self, path) -> None:
        extra: dict[str, np.ndarray] = {}
        for name, arr in self.state.m.items():
            extra[f"optim.m.{name}"] = arr
        for name, arr in self.state.v.items():
            extra[f"optim.v.{name}"] = arr
        save_checkpoint(path, self.network, epoch=self.epoch, step=self.global_step,
                        extra_arrays=extra,
                        extra_meta={"optim_step": self.state.step,
                                    "step_in_epoch": self.step_in_epoch,
                                    "seed": self.seed})

    @classmethod
    def resume(cls, path, datasets, config: TrainConfig, log_path=None) -> "Trainer":
        network, meta, extras = load_checkpoint(path, expected_config=config.model)
        trainer = cls(network, datasets, config, log_path=log_path)
        if "seed" in meta and int(meta["seed"]) != trainer.seed:
            raise TrainingConfigError(
                f"checkpoint was trained with seed {meta['seed']}, resume requested {trainer.seed}")
        for name in trainer.state.m:
            mk, vk = f"optim.m.{name}", f"optim.v.{name}"
            if mk not in extras or vk not in extras:
                raise CheckpointError(f"optimizer state missing for {name!r}")
            trainer.state.m[name] = extras[mk]
            trainer.state.v[name] = extras[vk]
        trainer.state.step = int(meta.get("optim_step", 0))
        trainer.global_step = int(meta["step"])
        trainer.epoch = int(meta["epoch"])
        trainer.step_in_epoch = int(meta.get("step_in_epoch", 0))
        return trainer


def train_epoch(network: HyKeyNetwork, datasets, config: TrainConfig, epoch: int,
                state: AdamState | None = None, log_path=None) -> list[dict]:
    """One epoch over fresh driver state; returns the step records."""
    trainer = Trainer(network, datasets, config, log_path=log_path)
    if state is not None:
        trainer.state = state
    trainer.epoch = epoch
    return trainer.run_epoch(epoch)
