"""Disk-backed datasets: generated cube pairs plus a JSON manifest.

Layout under a dataset root:

    manifest.json
    pair_0000/view0.cube
    pair_0000/view1.cube      (planar mode; view2.cube in epipolar mode)
    ...

The manifest carries one frame record per cube (path, intrinsics, and in
epipolar mode a camera pose as unit quaternion + translation in mm) and
one item record per pair tying frames together, alongside the fully
resolved generation config so a dataset can be regenerated from its own
manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cube import Cube, load_cube, save_cube
from .geometry import apply_homography, quaternion_from_rotation, rotation_from_quaternion
from .synth import (
    EpipolarSceneDataset,
    PairSpec,
    PlanarPair,
    PlanarPairDataset,
)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "hykey-dataset-v1"


class ManifestError(ValueError):
    """Raised when a dataset manifest is missing, malformed, or inconsistent."""


@dataclass
class PosePair:
    """Cube pair with calibrated relative pose (x1 = R x0 + t, t in scene units)."""

    cube0: Cube
    cube1: Cube
    K0: np.ndarray
    K1: np.ndarray
    R: np.ndarray
    t: np.ndarray


def _nominal_intrinsics(height: int, width: int) -> np.ndarray:
    # same convention as the epipolar renderer's pinhole
    f = 1.2 * max(height, width)
    return np.array([[f, 0.0, (width - 1) / 2.0],
                     [0.0, f, (height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def _mat(rows) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(rows)]


def _frame_record(cube_path: str, sequence: int, frame: int, K: np.ndarray,
                  pose: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    rec = {
        "cube_path": cube_path,
        "sequence": int(sequence),
        "frame": int(frame),
        "intrinsics": _mat(K),
    }
    if pose is not None:
        R, t = pose
        rec["pose"] = {
            "quaternion": [float(v) for v in quaternion_from_rotation(R)],
            "translation_mm": [float(v) * 1000.0 for v in np.asarray(t, dtype=np.float64)],
        }
    return rec


def write_dataset(out_dir, mode: str, count: int, seed: int,
                  spec: PairSpec | None = None, bands: int = 16,
                  height: int = 64, width: int = 64, force: bool = False) -> dict:
    """Generate ``count`` pairs to ``out_dir`` and return the manifest dict.

    Refuses to write into an existing non-empty directory unless ``force``.
    Output bytes are a pure function of the arguments.
    """
    if mode not in ("planar", "epipolar"):
        raise ValueError(f"mode must be planar or epipolar, got {mode!r}")
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)

    spec = replace(spec or PairSpec(), mode=mode, seed=int(seed))
    if mode == "planar":
        source = PlanarPairDataset(count, spec=spec, bands=bands, height=height, width=width)
        other_view = "view1"
    else:
        source = EpipolarSceneDataset(count, spec=spec, bands=bands, height=height, width=width)
        other_view = "view2"

    frames: list[dict] = []
    items: list[dict] = []
    for i in range(count):
        pair_dir = root / f"pair_{i:04d}"
        pair_dir.mkdir(exist_ok=True)
        sample = source[i]
        save_cube(pair_dir / "view0.cube", sample.cube0)
        save_cube(pair_dir / f"{other_view}.cube", sample.cube1)
        f0 = len(frames)
        if mode == "planar":
            K = _nominal_intrinsics(sample.cube0.height, sample.cube0.width)
            frames.append(_frame_record(f"pair_{i:04d}/view0.cube", i, 0, K))
            frames.append(_frame_record(f"pair_{i:04d}/view1.cube", i, 1, K))
            items.append({"pair": i, "view0": f0, "view1": f0 + 1,
                          "h01": _mat(sample.homography)})
        else:
            frames.append(_frame_record(f"pair_{i:04d}/view0.cube", i, 0, sample.K0,
                                        pose=(np.eye(3), np.zeros(3))))
            frames.append(_frame_record(f"pair_{i:04d}/view2.cube", i, 1, sample.K1,
                                        pose=(sample.R, sample.t)))
            items.append({"pair": i, "view0": f0, "view2": f0 + 1})

    manifest = {
        "format": DATASET_FORMAT,
        "mode": mode,
        "count": count,
        "config": {
            "mode": mode, "count": count, "seed": int(seed),
            "bands": bands, "height": height, "width": width,
            "spec": asdict(spec),
        },
        "frames": frames,
        "items": items,
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    """Read and validate a dataset manifest from a dataset directory."""
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise ManifestError(f"unrecognized manifest format {manifest.get('format')!r}"
                            if isinstance(manifest, dict) else "manifest must be a JSON object")
    if manifest.get("mode") not in ("planar", "epipolar"):
        raise ManifestError(f"bad manifest mode {manifest.get('mode')!r}")
    frames = manifest.get("frames")
    items = manifest.get("items")
    if not isinstance(frames, list) or not isinstance(items, list):
        raise ManifestError("manifest requires 'frames' and 'items' lists")
    for k, rec in enumerate(frames):
        K = np.asarray(rec.get("intrinsics", []), dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ManifestError(f"frame {k}: intrinsics must be 3x3 with positive focals")
        if "pose" in rec:
            q = np.asarray(rec["pose"].get("quaternion", []), dtype=np.float64)
            if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ManifestError(f"frame {k}: pose quaternion must be unit norm within 1e-6")
            t = rec["pose"].get("translation_mm", [])
            if len(t) != 3:
                raise ManifestError(f"frame {k}: pose needs a 3-vector translation_mm")
        if not isinstance(rec.get("cube_path"), str):
            raise ManifestError(f"frame {k}: missing cube_path")
    for k, item in enumerate(items):
        for key in ("view0", "view1" if manifest["mode"] == "planar" else "view2"):
            idx = item.get(key)
            if not isinstance(idx, int) or not 0 <= idx < len(frames):
                raise ManifestError(f"item {k}: bad frame reference {key}={idx!r}")
        if manifest["mode"] == "planar" and np.asarray(item.get("h01", []), dtype=np.float64).shape != (3, 3):
            raise ManifestError(f"item {k}: planar items need a 3x3 h01")
    return manifest


def _valid_mask(h01: np.ndarray, shape0: tuple[int, int], shape1: tuple[int, int]) -> np.ndarray:
    """View-1 pixels whose source under h01^-1 lies inside view 0."""
    h0, w0 = shape0
    h1, w1 = shape1
    ys, xs = np.mgrid[0:h1, 0:w1]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = apply_homography(np.linalg.inv(h01), pts)
    sx = src[:, 0].reshape(h1, w1)
    sy = src[:, 1].reshape(h1, w1)
    return (sx >= 0) & (sx <= w0 - 1) & (sy >= 0) & (sy <= h0 - 1)


class DiskPlanarPairs:
    """Index-addressable planar pairs read back from a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        if self.manifest["mode"] != "planar":
            raise ManifestError(f"expected a planar dataset, found mode {self.manifest['mode']!r}")

    def __len__(self) -> int:
        return len(self.manifest["items"])

    def __getitem__(self, i: int) -> PlanarPair:
        item = self.manifest["items"][i]
        frames = self.manifest["frames"]
        cube0 = load_cube(self.root / frames[item["view0"]]["cube_path"])
        cube1 = load_cube(self.root / frames[item["view1"]]["cube_path"])
        h01 = np.asarray(item["h01"], dtype=np.float64)
        valid1 = _valid_mask(h01, (cube0.height, cube0.width), (cube1.height, cube1.width))
        return PlanarPair(cube0=cube0, cube1=cube1, homography=h01, valid1=valid1)


class DiskEpipolarScenes:
    """Index-addressable posed cube pairs read back from a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        if self.manifest["mode"] != "epipolar":
            raise ManifestError(f"expected an epipolar dataset, found mode {self.manifest['mode']!r}")

    def __len__(self) -> int:
        return len(self.manifest["items"])

    def __getitem__(self, i: int) -> PosePair:
        item = self.manifest["items"][i]
        frames = self.manifest["frames"]
        rec0 = frames[item["view0"]]
        rec2 = frames[item["view2"]]
        cube0 = load_cube(self.root / rec0["cube_path"])
        cube2 = load_cube(self.root / rec2["cube_path"])

        def pose_of(rec):
            if "pose" not in rec:
                raise ManifestError(f"frame {rec['cube_path']} lacks a pose")
            R = rotation_from_quaternion(np.asarray(rec["pose"]["quaternion"], dtype=np.float64))
            t = np.asarray(rec["pose"]["translation_mm"], dtype=np.float64) / 1000.0
            return R, t

        R0, t0 = pose_of(rec0)
        R2, t2 = pose_of(rec2)
        # relative pose of view2 w.r.t. view0 from the two world-to-camera poses
        R = R2 @ R0.T
        t = t2 - R @ t0
        return PosePair(
            cube0=cube0, cube1=cube2,
            K0=np.asarray(rec0["intrinsics"], dtype=np.float64),
            K1=np.asarray(rec2["intrinsics"], dtype=np.float64),
            R=R, t=t,
        )
