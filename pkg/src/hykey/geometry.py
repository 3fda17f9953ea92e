"""Projective geometry: homographies, epipolar algebra, robust estimation.

Points are float64 arrays of shape (N, 2) in ``(x, y)`` pixel order.
Cameras follow ``x_cam = R @ x_world + t`` with intrinsics ``K``
mapping camera rays to pixels.

Robust fitting is a MSAC loop whose per-point cost is marginalized
over a small ladder of noise scales (a truncated-quadratic stand-in
for full sigma marginalization), followed by local optimization that
refits on inliers and only ever accepts a model with at least as many
inliers as the incumbent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "to_homogeneous",
    "from_homogeneous",
    "apply_homography",
    "homography_dlt",
    "fit_homography",
    "sampson_error",
    "eight_point",
    "fit_fundamental",
    "fundamental_from_pose",
    "essential_from_fundamental",
    "normalized_points",
    "decompose_essential",
    "triangulate",
    "relative_pose",
    "rotation_from_axis_angle",
    "quaternion_from_rotation",
    "rotation_from_quaternion",
    "rotation_angle_deg",
    "translation_angle_deg",
    "pose_error_deg",
    "RobustFit",
]

SIGMA_LADDER = (0.25, 0.5, 1.0, 2.0)


class DegenerateGeometryError(RuntimeError):
    """The point configuration does not determine the requested model."""


def to_homogeneous(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)


def from_homogeneous(pts: np.ndarray) -> np.ndarray:
    return pts[:, :2] / pts[:, 2:3]


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = to_homogeneous(pts) @ np.asarray(H, dtype=np.float64).T
    return from_homogeneous(q)


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity T placing the centroid at the origin with mean norm sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d <= 1e-12:
        raise DegenerateGeometryError("coincident points cannot be normalized")
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    q = (to_homogeneous(pts) @ T.T)[:, :2]
    return q, T


def homography_dlt(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Direct linear transform mapping p0 to p1, with Hartley normalization.

    Needs at least 4 correspondences; extra rows turn it into a total
    least squares fit. The result is scaled so H[2, 2] is 1 when that
    entry is not vanishingly small.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if len(p0) < 4 or len(p0) != len(p1):
        raise DegenerateGeometryError(f"homography needs >=4 pairs, got {len(p0)}/{len(p1)}")
    q0, T0 = _hartley_normalization(p0)
    q1, T1 = _hartley_normalization(p1)
    n = len(q0)
    a = np.zeros((2 * n, 9))
    x, y = q0[:, 0], q0[:, 1]
    u, v = q1[:, 0], q1[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    _, s, vt = np.linalg.svd(a)
    if s[-2] <= 1e-10 * max(s[0], 1.0):
        raise DegenerateGeometryError("homography system is rank deficient")
    h = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T1) @ h @ T0
    if abs(H[2, 2]) > 1e-8:
        H = H / H[2, 2]
    return H


def sampson_error(F: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """First-order squared geometric distance to the epipolar constraint."""
    F = np.asarray(F, dtype=np.float64)
    h0 = to_homogeneous(p0)
    h1 = to_homogeneous(p1)
    Fp0 = h0 @ F.T
    Ftp1 = h1 @ F
    num = np.einsum("ij,ij->i", h1, Fp0) ** 2
    den = Fp0[:, 0] ** 2 + Fp0[:, 1] ** 2 + Ftp1[:, 0] ** 2 + Ftp1[:, 1] ** 2
    return num / np.maximum(den, 1e-15)


def eight_point(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Normalized eight-point fundamental estimate with rank-2 projection."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if len(p0) < 8 or len(p0) != len(p1):
        raise DegenerateGeometryError(f"fundamental needs >=8 pairs, got {len(p0)}/{len(p1)}")
    q0, T0 = _hartley_normalization(p0)
    q1, T1 = _hartley_normalization(p1)
    x, y = q0[:, 0], q0[:, 1]
    u, v = q1[:, 0], q1[:, 1]
    a = np.stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones_like(x)], axis=1)
    _, s, vt = np.linalg.svd(a)
    if s[-2] <= 1e-10 * max(s[0], 1.0):
        raise DegenerateGeometryError("eight-point system is rank deficient")
    f = vt[-1].reshape(3, 3)
    uf, sf, vft = np.linalg.svd(f)
    f = uf @ np.diag([sf[0], sf[1], 0.0]) @ vft
    F = T1.T @ f @ T0
    norm = np.linalg.norm(F)
    if norm <= 1e-12:
        raise DegenerateGeometryError("fundamental collapsed to zero")
    return F / norm


@dataclass
class RobustFit:
    """Result of a robust model search."""

    model: np.ndarray
    inliers: np.ndarray  # boolean mask over input pairs
    iterations: int

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def _marginalized_cost(d2: np.ndarray, threshold: float) -> float:
    """Truncated-quadratic cost averaged over a ladder of noise scales."""
    total = 0.0
    for s in SIGMA_LADDER:
        t2 = (s * threshold) ** 2
        total += float(np.minimum(d2 / t2, 1.0).sum())
    return total / len(SIGMA_LADDER)


def _msac(p0, p1, solver, residual, sample_size, threshold, confidence, rng, max_iters, lo_rounds=3):
    n = len(p0)
    if n < sample_size:
        raise DegenerateGeometryError(f"need at least {sample_size} pairs, got {n}")
    t2 = threshold * threshold
    best_model = None
    best_cost = np.inf
    best_inliers = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=sample_size, replace=False)
        try:
            model = solver(p0[idx], p1[idx])
        except DegenerateGeometryError:
            continue
        d2 = residual(model, p0, p1)
        cost = _marginalized_cost(d2, threshold)
        if cost >= best_cost:
            continue
        inliers = d2 <= t2
        # local optimization: refit on inliers, keep only non-regressing models
        for _ in range(lo_rounds):
            if inliers.sum() < sample_size:
                break
            try:
                refined = solver(p0[inliers], p1[inliers])
            except DegenerateGeometryError:
                break
            d2r = residual(refined, p0, p1)
            inl_r = d2r <= t2
            cost_r = _marginalized_cost(d2r, threshold)
            if inl_r.sum() >= inliers.sum() and cost_r < cost:
                model, d2, cost, inliers = refined, d2r, cost_r, inl_r
            else:
                break
        best_model, best_cost, best_inliers = model, cost, inliers
        ratio = inliers.sum() / n
        if ratio > 0:
            denom = np.log1p(-min(ratio**sample_size, 1 - 1e-12))
            needed = int(np.ceil(np.log(1 - confidence) / denom)) if denom < 0 else max_iters
    if best_model is None:
        raise DegenerateGeometryError("no valid minimal sample found")
    return RobustFit(model=best_model, inliers=best_inliers, iterations=it)


def fit_homography(p0, p1, threshold: float = 3.0, confidence: float = 0.99999,
                   rng: np.random.Generator | None = None, max_iters: int = 2000) -> RobustFit:
    """Robust homography from noisy correspondences (symmetric transfer residual)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    rng = rng or np.random.default_rng(0)

    def residual(H, a, b):
        try:
            Hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            return np.full(len(a), np.inf)
        with np.errstate(all="ignore"):
            fwd = ((apply_homography(H, a) - b) ** 2).sum(axis=1)
            bwd = ((apply_homography(Hinv, b) - a) ** 2).sum(axis=1)
            d2 = 0.5 * (fwd + bwd)
        return np.where(np.isfinite(d2), d2, np.inf)

    return _msac(p0, p1, homography_dlt, residual, 4, threshold, confidence, rng, max_iters)


def fit_fundamental(p0, p1, threshold: float = 1.0, confidence: float = 0.99999,
                    rng: np.random.Generator | None = None, max_iters: int = 2000) -> RobustFit:
    """Robust fundamental matrix using the Sampson residual."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    rng = rng or np.random.default_rng(0)

    def residual(F, a, b):
        return sampson_error(F, a, b)

    return _msac(p0, p1, eight_point, residual, 8, threshold, confidence, rng, max_iters)


def _cross_matrix(t: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def fundamental_from_pose(K0: np.ndarray, K1: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Ground-truth F for a relative pose (x1 = R x0 + t), Frobenius normalized."""
    K0 = np.asarray(K0, dtype=np.float64)
    K1 = np.asarray(K1, dtype=np.float64)
    F = np.linalg.inv(K1).T @ _cross_matrix(np.asarray(t, dtype=np.float64)) @ np.asarray(R, dtype=np.float64) @ np.linalg.inv(K0)
    n = np.linalg.norm(F)
    # zero baseline composes to the zero matrix; leave it for callers to treat
    # as the degenerate (trivially satisfied) case
    return F / n if n > 0 else F


def essential_from_fundamental(F: np.ndarray, K0: np.ndarray, K1: np.ndarray) -> np.ndarray:
    return np.asarray(K1, dtype=np.float64).T @ np.asarray(F, dtype=np.float64) @ np.asarray(K0, dtype=np.float64)


def normalized_points(pts: np.ndarray, K: np.ndarray, focal_scale: float = 1.0) -> np.ndarray:
    """Apply K^-1 and optionally rescale by a focal length to keep pixel-like units."""
    Kinv = np.linalg.inv(np.asarray(K, dtype=np.float64))
    q = to_homogeneous(pts) @ Kinv.T
    return from_homogeneous(q) * focal_scale


def triangulate(P0: np.ndarray, P1: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Linear triangulation of (N,2)+(N,2) pixel pairs into (N,3) world points."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    out = np.zeros((len(p0), 3))
    for i in range(len(p0)):
        a = np.stack([
            p0[i, 0] * P0[2] - P0[0],
            p0[i, 1] * P0[2] - P0[1],
            p1[i, 0] * P1[2] - P1[0],
            p1[i, 1] * P1[2] - P1[1],
        ])
        _, _, vt = np.linalg.svd(a)
        X = vt[-1]
        out[i] = X[:3] / X[3] if abs(X[3]) > 1e-12 else np.full(3, np.inf)
    return out


def decompose_essential(E: np.ndarray, K0: np.ndarray, K1: np.ndarray,
                        p0: np.ndarray, p1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (R, t) from an essential matrix by the cheirality vote.

    Projects E to the (1, 1, 0) singular spectrum, enumerates the four
    pose candidates, and returns the one placing the most triangulated
    points in front of both cameras. ``t`` comes back unit-norm.
    """
    E = np.asarray(E, dtype=np.float64)
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R in (u @ w @ vt, u @ w.T @ vt):
        for tsign in (1.0, -1.0):
            candidates.append((R, tsign * u[:, 2]))
    K0 = np.asarray(K0, dtype=np.float64)
    K1 = np.asarray(K1, dtype=np.float64)
    P0 = K0 @ np.hstack([np.eye(3), np.zeros((3, 1))])
    best = None
    best_votes = -1
    for R, t in candidates:
        P1 = K1 @ np.hstack([R, t.reshape(3, 1)])
        X = triangulate(P0, P1, p0, p1)
        z0 = X[:, 2]
        z1 = (X @ R.T + t)[:, 2]
        votes = int(((z0 > 0) & (z1 > 0) & np.isfinite(z0)).sum())
        if votes > best_votes:
            best_votes = votes
            best = (R, t / np.linalg.norm(t))
    return best


def relative_pose(R0, t0, R1, t1) -> tuple[np.ndarray, np.ndarray]:
    """Pose of camera 1 in camera 0 coordinates (x1 = R x0 + t)."""
    R0 = np.asarray(R0, dtype=np.float64)
    R1 = np.asarray(R1, dtype=np.float64)
    R = R1 @ R0.T
    t = np.asarray(t1, dtype=np.float64) - R @ np.asarray(t0, dtype=np.float64)
    return R, t


def estimate_relative_pose(p0, p1, K0, K1, threshold: float = 1.0,
                           confidence: float = 0.99999, rng=None,
                           max_iters: int = 2000):
    """Robust (R, unit t) between two calibrated views from pixel matches.

    Fits a fundamental matrix in focal-rescaled normalized coordinates,
    where ``threshold`` keeps its meaning in (average-focal) pixels, then
    upgrades to an essential matrix and resolves the pose by cheirality
    over the inlier set. Returns (R, t, inlier_mask).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    K0 = np.asarray(K0, dtype=np.float64)
    K1 = np.asarray(K1, dtype=np.float64)
    # shared scale so residuals from both views are commensurable
    f = float(np.mean([K0[0, 0], K0[1, 1], K1[0, 0], K1[1, 1]]))
    q0 = normalized_points(p0, K0, focal_scale=f)
    q1 = normalized_points(p1, K1, focal_scale=f)
    fit = fit_fundamental(q0, q1, threshold=threshold, confidence=confidence,
                          rng=rng, max_iters=max_iters)
    S = np.diag([f, f, 1.0])
    E = essential_from_fundamental(fit.model, S, S)
    if int(fit.inliers.sum()) < 8:
        raise DegenerateGeometryError("fewer than 8 inliers for pose recovery")
    R, t = decompose_essential(E, S, S, q0[fit.inliers], q1[fit.inliers])
    return R, t, fit.inliers


def rotation_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n <= 1e-15:
        return np.eye(3)
    k = _cross_matrix(axis / n)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with non-negative scalar part."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q = np.zeros(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"quaternion must be unit norm within 1e-6, |q| = {n:.8f}")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle_deg(R: np.ndarray) -> float:
    tr = np.clip((np.trace(np.asarray(R, dtype=np.float64)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(tr)))


def translation_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-15 or nb <= 1e-15:
        return 0.0
    return float(np.degrees(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0))))


def pose_error_deg(R_est, t_est, R_gt, t_gt) -> float:
    """Single pose error figure: the worse of rotation and translation angles."""
    r_err = rotation_angle_deg(np.asarray(R_est) @ np.asarray(R_gt).T)
    t_err = translation_angle_deg(t_est, t_gt)
    return max(r_err, t_err)
