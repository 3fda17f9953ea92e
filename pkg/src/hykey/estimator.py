"""Scikit-learn style facade over the detector/descriptor network.

``HyKeyDetector`` follows the estimator contract: constructor arguments
are stored verbatim, ``fit`` trains a fresh network on a dataset of cube
pairs, and ``transform``/``predict`` run detection on new cubes. The
lower-level ``Trainer``/``HyKeyNetwork`` API remains available for runs
that need checkpointing or custom logging.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cube import Cube
from .losses import LossWeights
from .model import HyKeyConfig, HyKeyNetwork
from .training import (
    EpipolarTriplets,
    PlanarTriplets,
    TrainConfig,
    Trainer,
    TrainingTriplet,
    effective_seed,
)

__all__ = ["HyKeyDetector"]


class HyKeyDetector(BaseEstimator):
    """Keypoint detector and descriptor with a fit/transform interface.

    ``fit(X)`` accepts a pair dataset (in memory or a dataset directory),
    ``transform(X)`` maps an iterable of cubes to per-cube detection
    dicts, and ``predict(X)`` returns just the keypoint arrays.
    """

    def __init__(self, bands=16, channels=(32, 64, 128), descriptor_dim=64,
                 dkd_radius=2, dkd_temperature=0.1, score_threshold=0.1,
                 train_detected=400, train_random=400, max_keypoints=1024,
                 border=4, learning_rate=3e-4, warmup_steps=500, batch_size=6,
                 epoch_frames=10_000, epochs=1, epi_epoch=5, no_pe=False,
                 grad_clip=10.0, max_steps=None, weights=None, random_state=0):
        self.bands = bands
        self.channels = channels
        self.descriptor_dim = descriptor_dim
        self.dkd_radius = dkd_radius
        self.dkd_temperature = dkd_temperature
        self.score_threshold = score_threshold
        self.train_detected = train_detected
        self.train_random = train_random
        self.max_keypoints = max_keypoints
        self.border = border
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.epoch_frames = epoch_frames
        self.epochs = epochs
        self.epi_epoch = epi_epoch
        self.no_pe = no_pe
        self.grad_clip = grad_clip
        self.max_steps = max_steps
        self.weights = weights
        self.random_state = random_state

    # -- configuration -----------------------------------------------------
    def _model_config(self) -> HyKeyConfig:
        return HyKeyConfig(
            bands=self.bands, channels=tuple(self.channels),
            descriptor_dim=self.descriptor_dim, dkd_radius=self.dkd_radius,
            dkd_temperature=self.dkd_temperature, score_threshold=self.score_threshold,
            train_detected=self.train_detected, train_random=self.train_random,
            max_keypoints=self.max_keypoints, border=self.border,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
            batch_size=self.batch_size, epoch_frames=self.epoch_frames,
            epochs=self.epochs, epi_epoch=self.epi_epoch, seed=self.random_state,
            no_pe=self.no_pe, grad_clip=self.grad_clip, max_steps=self.max_steps,
            weights=self.weights if self.weights is not None else LossWeights(),
            model=self._model_config(),
        )

    @staticmethod
    def _as_triplets(dataset):
        """Wrap one dataset of pairs/scenes/triplets as a triplet source."""
        if isinstance(dataset, (str, Path)):
            from .data import DiskEpipolarScenes, DiskPlanarPairs, load_manifest

            mode = load_manifest(dataset)["mode"]
            dataset = (DiskPlanarPairs(dataset) if mode == "planar"
                       else DiskEpipolarScenes(dataset))
        if len(dataset) == 0:
            return dataset  # the trainer rejects it with a config error
        first = dataset[0]
        if isinstance(first, TrainingTriplet):
            return dataset
        if hasattr(first, "homography"):
            return PlanarTriplets(dataset)
        if hasattr(first, "R") and hasattr(first, "K0"):
            return EpipolarTriplets(dataset)
        raise TypeError(f"cannot interpret dataset items of type {type(first).__name__}")

    # -- estimator API -------------------------------------------------------
    def fit(self, X, y=None):
        """Train a new network on ``X``.

        ``X`` may be a pair dataset, a dataset directory, or a list of one
        or two of those (trained with mixed batches). ``y`` is ignored.
        """
        config = self._train_config()
        if isinstance(X, (list, tuple)) and not isinstance(X, str):
            datasets = [self._as_triplets(d) for d in X]
        else:
            datasets = [self._as_triplets(X)]
        network = HyKeyNetwork(config.model, seed=effective_seed(config))
        trainer = Trainer(network, datasets, config)
        trainer.run()
        self.network_ = network
        self.history_ = trainer.records
        self.n_steps_ = trainer.global_step
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "this HyKeyDetector is not fitted yet; call fit first")

    def transform(self, X) -> list[dict]:
        """Detect on each cube in ``X``; returns one dict per cube with
        ``keypoints`` (N, 2), ``scores`` (N,), and ``descriptors`` (N, D)."""
        self._check_fitted()
        out = []
        for item in X:
            data = item.data if isinstance(item, Cube) else np.asarray(item)
            result = self.network_.forward(data)
            out.append({
                "keypoints": result.keypoints.data.copy(),
                "scores": result.scores.data.copy(),
                "descriptors": result.descriptors.data.copy(),
            })
        return out

    def predict(self, X) -> list[np.ndarray]:
        """Keypoint arrays only, one (N, 2) array per cube."""
        return [r["keypoints"] for r in self.transform(X)]
