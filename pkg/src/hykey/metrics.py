"""Planar and pose evaluation metrics with threshold-curve aggregation.

All planar metrics take keypoints as (N, 2) float arrays of (x, y)
pixel coordinates and a ground-truth homography mapping view-0 pixels
into view 1. Pairs that provide no evidence for a metric (no covisible
keypoints, no matches) yield ``None`` and are excluded from aggregate
means; the exclusion counts are part of the report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import DegenerateGeometryError, apply_homography, fit_homography

__all__ = [
    "THRESHOLDS_PX",
    "MAA_THRESHOLDS_DEG",
    "ThresholdCurve",
    "EvalReport",
    "repeatability",
    "matching_score",
    "mma",
    "mha",
    "auc",
    "maa",
    "make_curve",
]

THRESHOLDS_PX = (1.0, 3.0, 5.0, 10.0, 20.0)
MAA_THRESHOLDS_DEG = (5.0, 10.0, 20.0)

PLANAR_METRICS = ("repeatability", "matching_score", "mma", "mha")


@dataclass(frozen=True)
class ThresholdCurve:
    thresholds: tuple[float, ...]
    values: tuple[float, ...]
    auc: float

    def __post_init__(self):
        if len(self.thresholds) != len(self.values):
            raise ValueError("thresholds and values must have equal length")
        if any(v < 0 or v > 1 for v in self.values):
            raise ValueError(f"curve values must lie in [0, 1], got {self.values}")


def auc(values, thresholds=THRESHOLDS_PX) -> float:
    """Normalised trapezoidal area under the metric-vs-threshold curve.

    Integrates the piecewise-linear curve over the threshold span with
    no extrapolation below the first threshold.
    """
    values = np.asarray(values, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if values.shape != t.shape:
        raise ValueError(f"expected {t.shape[0]} values, got {values.shape}")
    area = float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(t)))
    return area / float(t[-1] - t[0])


def make_curve(values, thresholds=THRESHOLDS_PX) -> ThresholdCurve:
    return ThresholdCurve(tuple(float(t) for t in thresholds),
                          tuple(float(v) for v in values),
                          auc(values, thresholds))


def _inside(pts: np.ndarray, shape: tuple[int, int], mask: np.ndarray | None) -> np.ndarray:
    h, w = shape
    x, y = pts[:, 0], pts[:, 1]
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if mask is not None:
        xi = np.clip(np.rint(x), 0, w - 1).astype(np.int64)
        yi = np.clip(np.rint(y), 0, h - 1).astype(np.int64)
        ok &= mask[yi, xi]
    return ok


def _nearest_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.full(len(a), np.inf)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return d.min(axis=1)


def _covisibility(kpts0, kpts1, h01, shape0, shape1, mask0, mask1):
    kpts0 = np.asarray(kpts0, dtype=np.float64).reshape(-1, 2)
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    h01 = np.asarray(h01, dtype=np.float64)
    proj0 = apply_homography(h01, kpts0) if len(kpts0) else kpts0
    proj1 = apply_homography(np.linalg.inv(h01), kpts1) if len(kpts1) else kpts1
    covis0 = _inside(proj0, shape1, mask1) if len(kpts0) else np.zeros(0, bool)
    covis1 = _inside(proj1, shape0, mask0) if len(kpts1) else np.zeros(0, bool)
    return proj0, proj1, covis0, covis1


def repeatability(kpts0, kpts1, h01, shape0, shape1, tau,
                  mask0=None, mask1=None, denominator: str = "sum") -> float | None:
    """Fraction of covisible keypoints re-detected within ``tau`` pixels.

    ``denominator="sum"`` counts both directions against the summed
    covisible counts; ``"min"`` counts mutual within-tau pairs against
    the smaller covisible count.
    """
    if denominator not in ("sum", "min"):
        raise ValueError(f"denominator must be 'sum' or 'min', got {denominator!r}")
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    kpts0 = np.asarray(kpts0, dtype=np.float64).reshape(-1, 2)
    proj0, proj1, covis0, covis1 = _covisibility(
        kpts0, kpts1, h01, shape0, shape1, mask0, mask1)
    c0, c1 = int(covis0.sum()), int(covis1.sum())
    if denominator == "sum":
        if c0 + c1 == 0:
            return None
        n0 = int((_nearest_dist(proj0[covis0], kpts1) <= tau).sum())
        n1 = int((_nearest_dist(proj1[covis1], kpts0) <= tau).sum())
        return (n0 + n1) / (c0 + c1)
    if min(c0, c1) == 0:
        return None
    d = np.linalg.norm(proj0[:, None, :] - kpts1[None, :, :], axis=2)
    best1 = d.argmin(axis=1)
    best0 = d.argmin(axis=0)
    rows = np.arange(len(kpts0))
    mutual = (best0[best1] == rows) & (d[rows, best1] <= tau)
    mutual &= covis0 & covis1[best1]
    return int(mutual.sum()) / min(c0, c1)


def matching_score(kpts0, kpts1, matches, h01, shape0, shape1, tau,
                   mask0=None, mask1=None) -> float | None:
    """Correct matches divided by the smaller covisible keypoint count."""
    proj0, _, covis0, covis1 = _covisibility(
        kpts0, kpts1, h01, shape0, shape1, mask0, mask1)
    denom = min(int(covis0.sum()), int(covis1.sum()))
    if denom == 0:
        return None
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) == 0:
        return 0.0
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    err = np.linalg.norm(proj0[matches[:, 0]] - kpts1[matches[:, 1]], axis=1)
    correct = (err <= tau) & covis0[matches[:, 0]] & covis1[matches[:, 1]]
    return int(correct.sum()) / denom


def mma(kpts0, kpts1, matches, h01, tau) -> float | None:
    """Fraction of matches with reprojection error within ``tau``."""
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) == 0:
        return None
    kpts0 = np.asarray(kpts0, dtype=np.float64).reshape(-1, 2)
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    proj = apply_homography(h01, kpts0[matches[:, 0]])
    err = np.linalg.norm(proj - kpts1[matches[:, 1]], axis=1)
    return float((err <= tau).mean())


def mha(kpts0, kpts1, matches, h_gt, shape0, tau,
        rng: np.random.Generator | None = None) -> float:
    """Binary homography accuracy: 1 when the robustly estimated H maps
    the image corners within ``tau`` pixels (mean over 4 corners) of the
    ground-truth mapping, else 0."""
    err = mha_corner_error(kpts0, kpts1, matches, h_gt, shape0, rng=rng)
    return 1.0 if err < tau else 0.0


def mha_corner_error(kpts0, kpts1, matches, h_gt, shape0,
                     rng: np.random.Generator | None = None) -> float:
    """Mean 4-corner displacement of the estimated vs true homography;
    infinite when estimation is impossible or fails."""
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) < 4:
        return np.inf
    kpts0 = np.asarray(kpts0, dtype=np.float64).reshape(-1, 2)
    kpts1 = np.asarray(kpts1, dtype=np.float64).reshape(-1, 2)
    try:
        fit = fit_homography(kpts0[matches[:, 0]], kpts1[matches[:, 1]],
                             rng=rng or np.random.default_rng(0))
    except DegenerateGeometryError:
        return np.inf
    if not np.all(np.isfinite(fit.model)):
        return np.inf
    h, w = shape0
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    est = apply_homography(fit.model, corners)
    true = apply_homography(np.asarray(h_gt, dtype=np.float64), corners)
    return float(np.linalg.norm(est - true, axis=1).mean())


def maa(errors_deg, thresholds=MAA_THRESHOLDS_DEG) -> dict[float, float | None]:
    """Fraction of pairs with angular pose error below each threshold.

    Failures must be encoded as ``np.inf``; an empty input yields None
    entries (nothing to aggregate)."""
    errors = np.asarray(errors_deg, dtype=np.float64)
    if errors.size == 0:
        return {float(t): None for t in thresholds}
    return {float(t): float((errors < t).mean()) for t in thresholds}


class EvalReport:
    """Per-pair metric records plus aggregate curves, with file writers."""

    def __init__(self, config: dict, thresholds=THRESHOLDS_PX):
        self.config = dict(config)
        self.thresholds = tuple(float(t) for t in thresholds)
        self.pairs: list[dict] = []

    def add_pair(self, pair_id: str, metrics: dict[str, list | None],
                 counts: dict[str, int] | None = None,
                 pose_error_deg: float | None = None) -> None:
        for name, values in metrics.items():
            if values is not None and len(values) != len(self.thresholds):
                raise ValueError(f"metric {name!r} needs {len(self.thresholds)} values")
        record = {
            "pair": str(pair_id),
            "metrics": {k: (None if v is None else [float(x) for x in v])
                        for k, v in metrics.items()},
            "counts": dict(counts or {}),
        }
        if pose_error_deg is not None:
            record["pose_error_deg"] = float(pose_error_deg)
        self.pairs.append(record)

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for rec in self.pairs:
            for name in rec["metrics"]:
                if name not in names:
                    names.append(name)
        return names

    def aggregate(self) -> dict:
        out: dict = {"num_pairs": len(self.pairs), "metrics": {}, "exclusions": {}}
        for name in self.metric_names():
            rows = [rec["metrics"][name] for rec in self.pairs
                    if rec["metrics"].get(name) is not None]
            out["exclusions"][name] = len(self.pairs) - len(rows)
            if not rows:
                out["metrics"][name] = None
                continue
            values = np.asarray(rows, dtype=np.float64).mean(axis=0)
            out["metrics"][name] = {
                "thresholds": list(self.thresholds),
                "values": [float(v) for v in values],
                "auc": auc(values, self.thresholds),
            }
        if any("pose_error_deg" in rec for rec in self.pairs):
            errors = np.array([rec.get("pose_error_deg", np.inf) for rec in self.pairs])
            out["maa"] = {f"{t:g}": v for t, v in maa(errors).items()}
        return out

    def as_dict(self) -> dict:
        def clean(rec):
            rec = dict(rec)
            if "pose_error_deg" in rec and not np.isfinite(rec["pose_error_deg"]):
                rec["pose_error_deg"] = None
                rec["pose_failed"] = True
            return rec

        return {
            "config": self.config,
            "thresholds": list(self.thresholds),
            "pairs": [clean(r) for r in self.pairs],
            "aggregate": self.aggregate(),
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, allow_nan=False) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        names = self.metric_names()
        count_keys: list[str] = []
        for rec in self.pairs:
            for k in rec["counts"]:
                if k not in count_keys:
                    count_keys.append(k)
        header = ["pair"]
        for name in names:
            header += [f"{name}@{t:g}" for t in self.thresholds]
        header += count_keys + ["pose_error_deg"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for rec in self.pairs:
                row: list = [rec["pair"]]
                for name in names:
                    vals = rec["metrics"].get(name)
                    row += ["" for _ in self.thresholds] if vals is None else [f"{v:.10g}" for v in vals]
                row += [rec["counts"].get(k, "") for k in count_keys]
                err = rec.get("pose_error_deg")
                row.append("" if err is None or not np.isfinite(err) else f"{err:.10g}")
                writer.writerow(row)
        return path

    def write_svgs(self, directory, stem: str = "curve") -> list[Path]:
        from .viz import line_plot_svg

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        agg = self.aggregate()
        paths = []
        for name, curve in agg["metrics"].items():
            if curve is None:
                continue
            svg = line_plot_svg(
                x=curve["thresholds"],
                series={name: curve["values"]},
                title=f"{name} vs threshold (AUC {curve['auc']:.3f})",
                xlabel="threshold [px]",
                ylabel=name,
                ylim=(0.0, 1.0),
            )
            path = directory / f"{stem}_{name}.svg"
            path.write_text(svg)
            paths.append(path)
        return paths
