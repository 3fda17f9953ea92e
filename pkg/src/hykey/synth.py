"""Synthetic two-view data: warped planar pairs and rendered epipolar scenes.

Planar pairs warp a base cube by a randomly sampled homography and
apply photometric jitter (one gain/gamma/noise draw per pair times a
smooth per-band gain). Epipolar pairs render a textured height-field
surface from two pinhole cameras with a known relative pose, so dense
ground-truth correspondence is available for free.

Every generator takes an explicit seed and is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .cube import DEFAULT_WAVELENGTHS_NM, Cube
from .geometry import apply_homography, relative_pose, rotation_from_axis_angle

__all__ = [
    "PairSpec",
    "PlanarPair",
    "EpipolarScene",
    "sample_homography",
    "warp_cube",
    "photometric_jitter",
    "random_cube",
    "generate_planar_pair",
    "generate_epipolar_pair",
    "PlanarPairDataset",
    "EpipolarSceneDataset",
]


@dataclass(frozen=True)
class PairSpec:
    """Sampling ranges for synthetic pair generation.

    Geometric ranges are half-widths around the identity; ``scale_max``
    bounds a log-symmetric interval [1/scale_max, scale_max]. Setting
    every range to its identity value (zeros, scale_max=1) makes the
    generator a no-op pass-through.
    """

    mode: str = "planar"
    seed: int = 0
    rotation_deg: float = 15.0
    scale_max: float = 1.25
    translation_frac: float = 0.10
    perspective: float = 1e-4
    gain_jitter: float = 0.3
    gamma_jitter: float = 0.2
    noise_std: float = 0.01
    band_gain_jitter: float = 0.1

    def __post_init__(self):
        if self.mode not in ("planar", "epipolar"):
            raise ValueError(f"mode must be planar or epipolar, got {self.mode!r}")
        for name in ("rotation_deg", "translation_frac", "perspective",
                     "gain_jitter", "gamma_jitter", "noise_std", "band_gain_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.scale_max < 1.0:
            raise ValueError("scale_max must be >= 1 (log-symmetric range)")


@dataclass
class PlanarPair:
    """Anchor cube, its warped twin, and the pixel map between them.

    ``homography`` sends view-0 pixels to view-1 pixels; ``valid1``
    marks view-1 pixels whose source landed inside view 0.
    """

    cube0: Cube
    cube1: Cube
    homography: np.ndarray
    valid1: np.ndarray


@dataclass
class EpipolarScene:
    """Two rendered views with calibrated relative pose (x1 = R x0 + t).

    ``corr`` holds, for every view-0 pixel, its ground-truth position
    in view 1 (x, y); ``valid`` marks pixels whose correspondence lands
    inside view 1.
    """

    cube0: Cube
    cube1: Cube
    K0: np.ndarray
    K1: np.ndarray
    R: np.ndarray
    t: np.ndarray
    corr: np.ndarray
    valid: np.ndarray


def sample_homography(rng: np.random.Generator, shape: tuple[int, int], spec: PairSpec) -> np.ndarray:
    """Random in-plane rotation/scale/translation/perspective about the centre.

    Degenerate draws (|det| < 1e-8) are resampled; callers never see one.
    """
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    center_inv = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    for _ in range(64):
        ang = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
        log_s = rng.uniform(-np.log(spec.scale_max), np.log(spec.scale_max)) if spec.scale_max > 1 else 0.0
        s = float(np.exp(log_s))
        tx = rng.uniform(-spec.translation_frac, spec.translation_frac) * w
        ty = rng.uniform(-spec.translation_frac, spec.translation_frac) * h
        px, py = rng.uniform(-spec.perspective, spec.perspective, 2)
        rot = np.array([
            [s * np.cos(ang), -s * np.sin(ang), 0.0],
            [s * np.sin(ang), s * np.cos(ang), 0.0],
            [px, py, 1.0],
        ])
        H = center @ rot @ center_inv
        H[0, 2] += tx
        H[1, 2] += ty
        if abs(np.linalg.det(H)) >= 1e-8:
            return H / H[2, 2]
    raise RuntimeError("could not sample a non-degenerate homography")


def _bilinear_sample_plane(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Clamped bilinear lookup of a 2-D array at float coordinates."""
    h, w = plane.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    return (
        plane[y0i, x0i] * (1 - fy) * (1 - fx)
        + plane[y0i, x1i] * (1 - fy) * fx
        + plane[y1i, x0i] * fy * (1 - fx)
        + plane[y1i, x1i] * fy * fx
    )


def warp_cube(data: np.ndarray, H: np.ndarray, out_shape: tuple[int, int] | None = None):
    """Inverse-warp a (bands, H, W) array so output pixel p holds data[H^-1 p].

    Returns the warped array plus a validity mask of output pixels whose
    source coordinate fell inside the input frame.
    """
    data = np.asarray(data)
    bands, h, w = data.shape
    ho, wo = out_shape if out_shape is not None else (h, w)
    ys, xs = np.mgrid[0:ho, 0:wo]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = apply_homography(np.linalg.inv(H), pts)
    sx = src[:, 0].reshape(ho, wo)
    sy = src[:, 1].reshape(ho, wo)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = np.stack([_bilinear_sample_plane(data[b], sx, sy) for b in range(bands)])
    out *= valid[None]
    return out.astype(np.float32), valid


def photometric_jitter(rng: np.random.Generator, data: np.ndarray, spec: PairSpec) -> np.ndarray:
    """One gain/gamma/noise draw shared by all bands times a smooth per-band gain."""
    data = np.asarray(data, dtype=np.float64)
    bands = data.shape[0]
    gain = rng.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter)
    gamma = rng.uniform(1.0 - spec.gamma_jitter, 1.0 + spec.gamma_jitter)
    out = gain * np.power(np.clip(data, 0.0, None), gamma)
    if spec.band_gain_jitter > 0:
        # a few spline knots across the spectrum keep the gain curve smooth
        knots = np.linspace(0, bands - 1, 4)
        vals = rng.uniform(1.0 - spec.band_gain_jitter, 1.0 + spec.band_gain_jitter, 4)
        band_gain = CubicSpline(knots, vals)(np.arange(bands))
        out *= band_gain[:, None, None]
    if spec.noise_std > 0:
        out += rng.normal(0.0, spec.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _region_spectra(rng: np.random.Generator, n_regions: int, bands: int) -> np.ndarray:
    """Smooth positive spectral signatures, one per region."""
    knots = np.linspace(0, bands - 1, 5)
    out = np.zeros((n_regions, bands))
    grid = np.arange(bands)
    for k in range(n_regions):
        out[k] = CubicSpline(knots, rng.uniform(0.15, 1.0, 5))(grid)
    return np.clip(out, 0.02, None)


def random_cube(rng: np.random.Generator, bands: int = 16, height: int = 64, width: int = 64,
                n_regions: int = 6, wavelengths_nm=None) -> Cube:
    """Spatially structured random cube: blob-mixed spectra times Fourier albedo."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    weights = np.zeros((n_regions, height, width))
    for k in range(n_regions):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        sig = rng.uniform(0.1, 0.35) * max(height, width)
        weights[k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig * sig))
    weights /= weights.sum(axis=0, keepdims=True) + 1e-12
    spectra = _region_spectra(rng, n_regions, bands)
    cube = np.einsum("kb,khw->bhw", spectra, weights)

    albedo = np.ones((height, width))
    for _ in range(6):
        fx, fy = rng.uniform(-0.35, 0.35, 2)
        phase = rng.uniform(0, 2 * np.pi)
        albedo += 0.22 * np.cos(2 * np.pi * (fx * xs + fy * ys) + phase)
    albedo += 0.35 * gaussian_filter(rng.standard_normal((height, width)), 3.0)
    cube *= np.clip(albedo, 0.15, None)[None]

    lo, hi = cube.min(), cube.max()
    cube = (cube - lo) / (hi - lo) if hi > lo else np.zeros_like(cube)
    cube = 0.05 + 0.9 * cube  # keep headroom for photometric jitter
    if wavelengths_nm is None:
        wavelengths_nm = (DEFAULT_WAVELENGTHS_NM if bands == 16
                          else tuple(float(v) for v in np.linspace(460.0, 600.0, bands)))
    return Cube(cube.astype(np.float32), wavelengths_nm)


def generate_planar_pair(base: Cube, spec: PairSpec) -> PlanarPair:
    """Warp ``base`` by a sampled homography and jitter the copy's photometry."""
    if spec.mode != "planar":
        raise ValueError(f"planar generator got mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    H = sample_homography(rng, (base.height, base.width), spec)
    warped, valid = warp_cube(base.data, H)
    warped = photometric_jitter(rng, warped, spec)
    warped *= valid[None]
    cube1 = Cube(warped, base.wavelengths_nm)
    return PlanarPair(cube0=base, cube1=cube1, homography=H, valid1=valid)


class _HeightField:
    """Smooth surface z = g(x, y) over a square patch, bilinearly interpolated."""

    def __init__(self, rng: np.random.Generator, base_depth: float, amplitude: float,
                 extent: float = 6.0, res: int = 96):
        self.extent = extent
        self.res = res
        relief = gaussian_filter(rng.standard_normal((res, res)), 5.0)
        span = relief.max() - relief.min()
        relief = (relief - relief.min()) / span if span > 0 else np.zeros_like(relief)
        self.grid = base_depth + amplitude * (relief - 0.5)

    def depth(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        gx = (np.asarray(x) + self.extent) / (2 * self.extent) * (self.res - 1)
        gy = (np.asarray(y) + self.extent) / (2 * self.extent) * (self.res - 1)
        return _bilinear_sample_plane(self.grid, np.clip(gx, 0, self.res - 1), np.clip(gy, 0, self.res - 1))


def _intersect_rays(surface: _HeightField, origin: np.ndarray, dirs: np.ndarray, iters: int = 40) -> np.ndarray:
    """Fixed-point ray/height-field intersection; dirs must have positive z."""
    s = (surface.grid.mean() - origin[2]) / dirs[:, 2]
    for _ in range(iters):
        x = origin[0] + s * dirs[:, 0]
        y = origin[1] + s * dirs[:, 1]
        s = (surface.depth(x, y) - origin[2]) / dirs[:, 2]
    return origin[None, :] + s[:, None] * dirs


def _spectral_texture(rng: np.random.Generator, bands: int, n_regions: int = 6):
    """World-anchored reflectance: blob-mixed region spectra times Fourier albedo."""
    spectra = _region_spectra(rng, n_regions, bands)
    centers = rng.uniform(-4.0, 4.0, (n_regions, 2))
    sigmas = rng.uniform(0.8, 2.4, n_regions)
    waves = rng.uniform(-0.9, 0.9, (5, 2))
    phases = rng.uniform(0, 2 * np.pi, 5)

    def sample(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        w = np.stack([
            np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / (2 * s * s))
            for c, s in zip(centers, sigmas)
        ])
        w /= w.sum(axis=0, keepdims=True) + 1e-12
        alb = np.ones_like(x)
        for (fx, fy), ph in zip(waves, phases):
            alb += 0.18 * np.cos(2 * np.pi * (fx * x + fy * y) + ph)
        return np.einsum("kb,kn->bn", spectra, w) * np.clip(alb, 0.2, None)[None]

    return sample


def generate_epipolar_pair(spec: PairSpec, bands: int = 16, height: int = 64, width: int = 64,
                           flat: bool = False, baseline_frac: float | None = None) -> EpipolarScene:
    """Render a height-field scene from two calibrated views.

    The second camera sits a fraction of the scene depth to the side
    (baseline/depth drawn from [0.05, 0.3] unless given) and yaws back
    toward the surface so the fields of view overlap.
    """
    if spec.mode != "epipolar":
        raise ValueError(f"epipolar generator got mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    base_depth = 5.0
    amplitude = 0.0 if flat else rng.uniform(0.5, 1.1)
    surface = _HeightField(rng, base_depth, amplitude)
    texture = _spectral_texture(rng, bands)

    f = 1.2 * max(height, width)
    K = np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    if baseline_frac is None:
        baseline_frac = rng.uniform(0.05, 0.3)
    b = baseline_frac * base_depth
    phi = rng.uniform(0, 2 * np.pi)
    # lateral offset plus a small along-axis component, all proportional to
    # the baseline so a zero baseline reproduces the reference view exactly
    c1 = np.array([b * np.cos(phi), b * np.sin(phi), rng.uniform(-0.15, 0.15) * b])
    # yaw/pitch the second camera so both frustums meet at the surface centre
    look = np.array([0.0, 0.0, base_depth]) - c1
    look /= np.linalg.norm(look)
    axis = np.cross(np.array([0.0, 0.0, 1.0]), look)
    ang = np.arccos(np.clip(look[2], -1.0, 1.0))
    R1w = rotation_from_axis_angle(axis, ang).T  # world -> cam1
    t1 = -R1w @ c1
    R0w, t0 = np.eye(3), np.zeros(3)

    def render(Rw, tw):
        cam_center = -Rw.T @ tw
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        pix = np.stack([xs.ravel(), ys.ravel(), np.ones(height * width)])
        dirs = (Rw.T @ np.linalg.inv(K) @ pix).T
        X = _intersect_rays(surface, cam_center, dirs)
        vals = texture(X[:, 0], X[:, 1])
        return X, vals.reshape(-1, height, width)

    X0, img0 = render(R0w, t0)
    _, img1 = render(R1w, t1)

    # shared normalization keeps both views photometrically comparable
    lo = min(img0.min(), img1.min())
    hi = max(img0.max(), img1.max())
    scale = (hi - lo) if hi > lo else 1.0
    img0 = 0.02 + 0.96 * (img0 - lo) / scale
    img1 = 0.02 + 0.96 * (img1 - lo) / scale

    wl = (DEFAULT_WAVELENGTHS_NM if bands == 16
          else tuple(float(v) for v in np.linspace(460.0, 600.0, bands)))
    R, t = relative_pose(R0w, t0, R1w, t1)

    cam1 = X0 @ R1w.T + t1
    proj = cam1 @ K.T
    corr = (proj[:, :2] / proj[:, 2:3]).reshape(height, width, 2)
    valid = ((corr[..., 0] >= 0) & (corr[..., 0] <= width - 1)
             & (corr[..., 1] >= 0) & (corr[..., 1] <= height - 1) & (cam1[:, 2] > 0).reshape(height, width))

    return EpipolarScene(
        cube0=Cube(img0.astype(np.float32), wl),
        cube1=Cube(img1.astype(np.float32), wl),
        K0=K.copy(), K1=K.copy(), R=R, t=t, corr=corr, valid=valid,
    )


class PlanarPairDataset:
    """Deterministic, index-addressable stream of planar pairs.

    Each index derives its own seed from (base seed, index), so any
    element can be regenerated in isolation.
    """

    def __init__(self, size: int, spec: PairSpec | None = None, bands: int = 16,
                 height: int = 64, width: int = 64):
        self.size = int(size)
        self.spec = spec or PairSpec()
        self.bands, self.height, self.width = bands, height, width

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i: int) -> PlanarPair:
        if not 0 <= i < self.size:
            raise IndexError(i)
        rng = np.random.default_rng((self.spec.seed, 1, i))
        base = random_cube(rng, self.bands, self.height, self.width)
        return generate_planar_pair(base, replace(self.spec, mode="planar", seed=int(rng.integers(2**31))))


class EpipolarSceneDataset:
    """Deterministic, index-addressable stream of rendered two-view scenes."""

    def __init__(self, size: int, spec: PairSpec | None = None, bands: int = 16,
                 height: int = 64, width: int = 64):
        self.size = int(size)
        self.spec = spec or PairSpec(mode="epipolar")
        self.bands, self.height, self.width = bands, height, width

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i: int) -> EpipolarScene:
        if not 0 <= i < self.size:
            raise IndexError(i)
        rng = np.random.default_rng((self.spec.seed, 2, i))
        return generate_epipolar_pair(
            replace(self.spec, mode="epipolar", seed=int(rng.integers(2**31))),
            bands=self.bands, height=self.height, width=self.width,
        )
