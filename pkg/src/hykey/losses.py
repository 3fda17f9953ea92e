"""Training losses for keypoint pairs under planar and epipolar supervision.

Five terms, combined by fixed weights:

- peakiness: penalises diffuse score windows around each keypoint,
- reprojection: Huber penalty on the re-detection error under a known
  homography, weighted by both views' detection confidences,
- reliability: binary cross-entropy between the detection score and a
  soft matchability target derived from descriptor similarities,
- descriptor: symmetric cross-entropy over the similarity matrix with
  ground-truth correspondences as labels,
- epipolar: expected Sampson error of soft correspondences under a
  known fundamental matrix, active only once enabled by the schedule.

Term values are scalars on the active tape; associations and targets
are computed outside the tape so gradients flow only through scores,
descriptors, and keypoint coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor
from .geometry import apply_homography

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "LossWarning",
    "correspondence_labels",
    "loss_pk",
    "loss_rp",
    "loss_rel",
    "loss_desc",
    "loss_epi",
    "total_loss",
]


class LossWarning(UserWarning):
    """A loss term degenerated to zero (no usable supervision)."""


@dataclass(frozen=True)
class LossWeights:
    pk: float = 0.5
    rp: float = 1.0
    rel: float = 1.0
    desc: float = 5.0
    epi: float = 0.25

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Per-term scalar values plus the weighted total.

    ``tensor`` carries the differentiable total for the backward pass
    and is excluded from serialisation.
    """

    pk: float
    rp: float
    rel: float
    desc: float
    epi: float
    total: float
    tensor: Tensor | None = None
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "loss_pk": self.pk,
            "loss_rp": self.rp,
            "loss_rel": self.rel,
            "loss_desc": self.desc,
            "loss_epi": self.epi,
            "loss_total": self.total,
        }


def _zero() -> Tensor:
    return Tensor(np.float64(0.0))


def _as_np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def correspondence_labels(kpts0, kpts1, h01: np.ndarray, radius: float = 3.0):
    """Mutual-nearest ground-truth pairs under a known homography.

    Projects view-0 keypoints into view 1; (i, j) is a label when each
    is the other's nearest neighbour there and they sit within
    ``radius`` pixels. Returns (idx0, idx1) int arrays.
    """
    k0 = _as_np(kpts0)
    k1 = _as_np(kpts1)
    if len(k0) == 0 or len(k1) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    proj = apply_homography(h01, k0)
    d = np.linalg.norm(proj[:, None, :] - k1[None, :, :], axis=2)
    best1 = d.argmin(axis=1)
    best0 = d.argmin(axis=0)
    rows = np.arange(len(k0))
    mutual = (best0[best1] == rows) & (d[rows, best1] <= radius)
    return rows[mutual].astype(np.int64), best1[mutual].astype(np.int64)


def _nearest_pairs(proj: np.ndarray, detected: np.ndarray, radius: float):
    """Indices (ia, ib) pairing each projected point with its nearest
    detection when that lies within ``radius`` pixels."""
    if len(proj) == 0 or len(detected) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    d = np.linalg.norm(proj[:, None, :] - detected[None, :, :], axis=2)
    best = d.argmin(axis=1)
    rows = np.arange(len(proj))
    ok = d[rows, best] <= radius
    return rows[ok].astype(np.int64), best[ok].astype(np.int64)


def _transform_points(h: np.ndarray, pts: Tensor) -> Tensor:
    """Differentiable homography application to an (N, 2) tensor."""
    n = pts.shape[0]
    ones = Tensor(np.ones((n, 1), dtype=pts.dtype))
    hom = ad.matmul(ad.concat([pts, ones], axis=1), Tensor(np.asarray(h, dtype=np.float64).T))
    return hom[:, :2] / hom[:, 2:3]


def _distance_huber(d2: Tensor, delta: float) -> Tensor:
    """huber(sqrt(d2), delta) written to stay differentiable at d2 = 0."""
    quad = (d2.data <= delta * delta).astype(d2.dtype)
    lin = 1.0 - quad
    # the masked +quad keeps sqrt away from zero on the quadratic branch
    dist = ad.sqrt(d2 + quad * (delta * delta))
    return quad * (0.5 * d2) + lin * (delta * dist - 0.5 * delta * delta)


def loss_pk(score_map: Tensor, keypoints: Tensor, config) -> Tensor:
    """Mean confidence-weighted dispersion of score windows."""
    if keypoints.shape[0] == 0:
        return _zero()
    r = config.dkd_radius
    t = config.dkd_temperature
    h, w = score_map.shape
    centers = np.rint(_as_np(keypoints)).astype(np.int64)
    centers[:, 0] = np.clip(centers[:, 0], 0, w - 1)
    centers[:, 1] = np.clip(centers[:, 1], 0, h - 1)
    windows = nnops.extract_windows(score_map, centers, r)
    p = ad.softmax(windows / t, axis=1)
    k = 2 * r + 1
    off = np.arange(-r, r + 1, dtype=np.float64)
    norms = np.hypot(np.tile(off, k), np.repeat(off, k)).reshape(-1, 1)
    dispersion = ad.matmul(p, Tensor(norms))[:, 0]
    scores = nnops.grid_sample(score_map.reshape(1, h, w), keypoints)[:, 0]
    weight = ad.sigmoid((scores - config.score_threshold) / 0.1)
    return (dispersion * weight).mean()


def loss_rp(kpts0: Tensor, scores0: Tensor, kpts1: Tensor, scores1: Tensor,
            h01: np.ndarray, radius: float = 5.0, delta: float = 1.0,
            score_threshold: float = 0.1) -> Tensor:
    """Symmetrised confidence-weighted Huber reprojection error."""
    h01 = np.asarray(h01, dtype=np.float64)
    directions = (
        (kpts0, scores0, kpts1, scores1, h01),
        (kpts1, scores1, kpts0, scores0, np.linalg.inv(h01)),
    )
    terms = []
    for ka, sa, kb, sb, h in directions:
        if ka.shape[0] == 0 or kb.shape[0] == 0:
            continue
        ia, ib = _nearest_pairs(apply_homography(h, _as_np(ka)), _as_np(kb), radius)
        if len(ia) == 0:
            continue
        proj = _transform_points(h, ka[ia])
        diff = proj - kb[ib]
        d2 = (diff * diff).sum(axis=1)
        pen = _distance_huber(d2, delta)
        wa = ad.sigmoid((sa[ia] - score_threshold) / 0.1)
        wb = ad.sigmoid((sb[ib] - score_threshold) / 0.1)
        terms.append((pen * wa * wb).mean())
    if not terms:
        warnings.warn("no reprojection pairs within radius; term is 0", LossWarning)
        return _zero()
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def _bce(score: Tensor, target: np.ndarray) -> Tensor:
    s = ad.clip(score, 1e-7, 1.0 - 1e-7)
    return -(target * ad.log(s) + (1.0 - target) * ad.log(1.0 - s))


def loss_rel(scores0: Tensor, scores1: Tensor, m, labels,
             temperature: float = 0.02) -> Tensor:
    """BCE between detection scores and soft matchability targets.

    The target for a labelled keypoint is the softmax probability mass
    its similarity row (resp. column) places on the true partner; the
    target is treated as a constant.
    """
    idx0, idx1 = labels
    if len(idx0) == 0:
        warnings.warn("no labelled correspondences; reliability term is 0", LossWarning)
        return _zero()
    sim = _as_np(m) / temperature
    rows = sim[idx0]
    rows = np.exp(rows - rows.max(axis=1, keepdims=True))
    r0 = rows[np.arange(len(idx0)), idx1] / rows.sum(axis=1)
    cols = sim[:, idx1].T
    cols = np.exp(cols - cols.max(axis=1, keepdims=True))
    r1 = cols[np.arange(len(idx1)), idx0] / cols.sum(axis=1)
    side0 = _bce(scores0[idx0], r0).mean()
    side1 = _bce(scores1[idx1], r1).mean()
    return 0.5 * (side0 + side1)


def _cross_entropy_rows(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean of -log softmax(logits)[i, target_i], underflow-safe."""
    shift = logits.data.max(axis=1, keepdims=True)
    lse = ad.log(ad.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    return (lse - targets).mean()


def loss_desc(d0: Tensor, d1: Tensor, labels, temperature: float = 0.02) -> Tensor:
    """Symmetric cross-entropy over the descriptor similarity matrix.

    Unlabelled keypoints still appear as competitors in each softmax,
    which is what makes the random keypoints useful negatives.
    """
    idx0, idx1 = labels
    if len(idx0) == 0:
        warnings.warn("no descriptor labels; descriptor term is 0", LossWarning)
        return _zero()
    m = ad.matmul(d0, d1.transpose()) / temperature
    pos = m[(idx0, idx1)]
    row_ce = _cross_entropy_rows(m[idx0], pos)
    col_ce = _cross_entropy_rows(m.transpose()[idx1], pos)
    return 0.5 * (row_ce + col_ce)


def sampson_grid(f: np.ndarray, kpts0: Tensor, kpts2: Tensor) -> Tensor:
    """Differentiable (N0, N2) matrix of pairwise Sampson errors."""
    f = np.asarray(f, dtype=np.float64)
    n0, n2 = kpts0.shape[0], kpts2.shape[0]
    hom0 = ad.concat([kpts0, Tensor(np.ones((n0, 1), dtype=kpts0.dtype))], axis=1)
    hom2 = ad.concat([kpts2, Tensor(np.ones((n2, 1), dtype=kpts2.dtype))], axis=1)
    fp0 = ad.matmul(hom0, Tensor(f.T))  # rows: F p0
    ftp2 = ad.matmul(hom2, Tensor(f))  # rows: F^T p2
    g = ad.matmul(hom0, ftp2.transpose())  # g[i, j] = p2_j^T F p0_i
    num = g * g
    den0 = (fp0[:, 0] * fp0[:, 0] + fp0[:, 1] * fp0[:, 1]).reshape(-1, 1)
    den2 = (ftp2[:, 0] * ftp2[:, 0] + ftp2[:, 1] * ftp2[:, 1]).reshape(1, -1)
    return num / (den0 + den2 + 1e-15)


def loss_epi(kpts0: Tensor, kpts2: Tensor, d0: Tensor, d2: Tensor,
             f02: np.ndarray, temperature: float = 0.02,
             delta: float = 1.0) -> Tensor:
    """Expected Huber-Sampson error of soft correspondences, both directions."""
    f02 = np.asarray(f02, dtype=np.float64)
    if not np.all(np.isfinite(f02)) or np.abs(f02).max() < 1e-12:
        warnings.warn("degenerate fundamental matrix; epipolar term is 0", LossWarning)
        return _zero()
    if kpts0.shape[0] == 0 or kpts2.shape[0] == 0:
        warnings.warn("no keypoints for the epipolar term; term is 0", LossWarning)
        return _zero()
    m = ad.matmul(d0, d2.transpose()) / temperature
    pen = ad.huber(sampson_grid(f02, kpts0, kpts2), delta)
    row = (ad.softmax(m, axis=1) * pen).sum(axis=1).mean()
    col = (ad.softmax(m, axis=0) * pen).sum(axis=0).mean()
    return 0.5 * (row + col)


def total_loss(pk: Tensor, rp: Tensor, rel: Tensor, desc: Tensor,
               epi: Tensor | None, weights: LossWeights, epoch: int,
               no_pe: bool = False, activation_epoch: int = 5) -> LossBreakdown:
    """Weighted combination; the epipolar term joins after the first
    ``activation_epoch`` epochs (1-indexed) and never in the noPE
    configuration."""
    total = weights.pk * pk + weights.rp * rp + weights.rel * rel + weights.desc * desc
    use_epi = (not no_pe) and epoch > activation_epoch and epi is not None
    if use_epi:
        total = total + weights.epi * epi
    return LossBreakdown(
        pk=float(pk.data),
        rp=float(rp.data),
        rel=float(rel.data),
        desc=float(desc.data),
        epi=float(epi.data) if use_epi else 0.0,
        total=float(total.data),
        tensor=total,
    )
