"""Pose recovery from 2D-3D correspondences.

Three entry points:

* :func:`solve_p3p_minimal` -- the minimal 3-point solver (Grunert's quartic
  in the ratio of ray distances, followed by absolute orientation). Returns
  every geometrically valid candidate; disambiguation is the caller's job.
* :func:`refine_pose` -- damped least-squares (Levenberg-Marquardt)
  minimization of the weighted reprojection error from an initial pose.
* :func:`solve_pnp` -- the full pipeline: minimal solver for n == 3, linear
  initialization plus refinement for n >= 4.

Image points are undistorted up front; all solving happens in ideal pinhole
coordinates. Reported per-point errors are in real (distorted) pixel space.

There is deliberately no RANSAC here: the pipelines feed small fixed keypoint
sets. Outlier rejection is the caller's concern via correspondence weights
(weight 0 excludes a point exactly), which is the extension point a robust
front end would drive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DivergedBehindCamera,
    NoValidCandidate,
    TooFewPoints,
)
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    Pose,
    project_points,
    quat_from_matrix,
    transform_points,
)

_COLLINEAR_TOL = 1e-9
_P3P_REPROJ_TOL = 1e-6  # px; candidates must interpolate the 3 inputs


@dataclass(frozen=True)
class Correspondence:
    """One 2D-3D match: an object-frame point and where it was seen."""

    model_point: np.ndarray
    image_point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        mp = np.asarray(self.model_point, dtype=float).reshape(3)
        ip = np.asarray(self.image_point, dtype=float).reshape(2)
        mp.flags.writeable = False
        ip.flags.writeable = False
        object.__setattr__(self, "model_point", mp)
        object.__setattr__(self, "image_point", ip)
        if self.weight < 0:
            raise ValueError(f"correspondence weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class PnPOptions:
    max_iterations: int = 100
    cost_change_tol: float = 1e-12
    step_tol: float = 1e-12
    damping_init: float = 1e-3
    damping_max: float = 1e12


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    rms_reprojection_error: float
    per_point_errors: list[float] = field(default_factory=list)
    candidates_considered: int = 1


def undistort_pixels(pixels: np.ndarray, k: CameraIntrinsics,
                     max_iterations: int = 20, tol_px: float = 1e-10) -> np.ndarray:
    """Invert radial distortion by fixed-point iteration.

    Returns ideal pinhole pixel coordinates; identity when the camera
    carries no distortion.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if not k.has_distortion:
        return pixels.copy()
    xd = (pixels[:, 0] - k.cx) / k.fx
    yd = (pixels[:, 1] - k.cy) / k.fy
    xn, yn = xd.copy(), yd.copy()
    for _ in range(max_iterations):
        r2 = xn * xn + yn * yn
        d = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
        xn_new = xd / d
        yn_new = yd / d
        change = max(np.max(np.abs(xn_new - xn)) * k.fx,
                     np.max(np.abs(yn_new - yn)) * k.fy)
        xn, yn = xn_new, yn_new
        if change < tol_px:
            break
    return np.column_stack([k.cx + k.fx * xn, k.cy + k.fy * yn])


def _check_not_collinear(model_points: np.ndarray):
    centered = model_points - model_points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] < 1e-15 or s[1] <= _COLLINEAR_TOL * s[0]:
        raise DegenerateConfiguration("model points are collinear (or coincident)")


def _pixel_errors(pose: Pose, corrs: list[Correspondence], k: CameraIntrinsics) -> np.ndarray:
    pts = np.array([c.model_point for c in corrs])
    obs = np.array([c.image_point for c in corrs])
    proj = project_points(pts, pose, k)
    return np.linalg.norm(proj - obs, axis=1)


def _result(pose: Pose, corrs: list[Correspondence], k: CameraIntrinsics,
            candidates: int) -> PnPResult:
    errs = _pixel_errors(pose, corrs, k)
    return PnPResult(
        pose=pose,
        rms_reprojection_error=float(np.sqrt(np.mean(errs ** 2))),
        per_point_errors=[float(e) for e in errs],
        candidates_considered=candidates,
    )


# --- Levenberg-Marquardt refinement ------------------------------------------


def _residuals_and_jacobian(r_mat: np.ndarray, t: np.ndarray, pts: np.ndarray,
                            obs_ideal: np.ndarray, sqrt_w: np.ndarray,
                            k: CameraIntrinsics):
    """Weighted pinhole residuals and their Jacobian w.r.t. a left SE(3) update.

    The update is x_cam' = exp([w]x) @ x_cam + dt, so
    d(x_cam)/dw = -[x_cam]x and d(x_cam)/dt = I.
    Returns None when any point falls at or behind the camera plane.
    """
    cam = pts @ r_mat.T + t
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        return None
    x, y = cam[:, 0], cam[:, 1]
    inv_z = 1.0 / z
    xn = x * inv_z
    yn = y * inv_z
    n = len(pts)
    res = np.empty(2 * n)
    res[0::2] = (k.cx + k.fx * xn - obs_ideal[:, 0]) * sqrt_w
    res[1::2] = (k.cy + k.fy * yn - obs_ideal[:, 1]) * sqrt_w

    # d(pix)/d(x_cam) chained with d(x_cam)/d(w, dt) = [-skew(x_cam) | I]
    fx_z = k.fx * inv_z * sqrt_w
    fy_z = k.fy * inv_z * sqrt_w
    jac = np.empty((2 * n, 6))
    ju = jac[0::2]
    jv = jac[1::2]
    ju[:, 0] = -fx_z * xn * y
    ju[:, 1] = fx_z * (z + xn * x)
    ju[:, 2] = -fx_z * y
    ju[:, 3] = fx_z
    ju[:, 4] = 0.0
    ju[:, 5] = -fx_z * xn
    jv[:, 0] = -fy_z * (z + yn * y)
    jv[:, 1] = fy_z * yn * x
    jv[:, 2] = fy_z * x
    jv[:, 3] = 0.0
    jv[:, 4] = fy_z
    jv[:, 5] = -fy_z * yn
    return res, jac


def _exp_so3(w: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        wx = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
        return np.eye(3) + wx + 0.5 * (wx @ wx)
    axis = w / angle
    wx = np.array([[0.0, -axis[2], axis[1]],
                   [axis[2], 0.0, -axis[0]],
                   [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * wx + (1.0 - math.cos(angle)) * (wx @ wx)


def _levenberg_marquardt(initial: Pose, pts: np.ndarray, obs_ideal: np.ndarray,
                         sqrt_w: np.ndarray, k: CameraIntrinsics,
                         opts: PnPOptions) -> Pose:
    r_mat = initial.rotation_matrix
    t = initial.t.copy()
    evaluated = _residuals_and_jacobian(r_mat, t, pts, obs_ideal, sqrt_w, k)
    if evaluated is None:
        raise DivergedBehindCamera("initial pose places model points behind the camera")
    res, jac = evaluated
    cost = float(res @ res)
    damping = opts.damping_init

    for _ in range(opts.max_iterations):
        jtj = jac.T @ jac
        jtr = jac.T @ res
        diag = np.clip(np.diag(jtj), 1e-12, None)
        improved = False
        while damping <= opts.damping_max:
            try:
                delta = np.linalg.solve(jtj + damping * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            step_rot = _exp_so3(delta[:3])
            trial_r = step_rot @ r_mat
            trial_t = step_rot @ t + delta[3:]
            trial_eval = _residuals_and_jacobian(trial_r, trial_t, pts, obs_ideal,
                                                 sqrt_w, k)
            if trial_eval is None:
                # step pushed points behind the camera; treat as a failed step
                damping *= 10.0
                continue
            trial_res, trial_jac = trial_eval
            trial_cost = float(trial_res @ trial_res)
            if trial_cost <= cost:
                improved = True
                step_norm = float(np.linalg.norm(delta))
                cost_change = cost - trial_cost
                r_mat, t, res, jac, cost = trial_r, trial_t, trial_res, trial_jac, trial_cost
                damping = max(damping / 3.0, 1e-15)
                if cost_change < opts.cost_change_tol or step_norm < opts.step_tol:
                    return Pose(q=quat_from_matrix(r_mat), t=t)
                break
            damping *= 10.0
        if not improved:
            break
    return Pose(q=quat_from_matrix(r_mat), t=t)


def refine_pose(initial: Pose, corrs: list[Correspondence], k: CameraIntrinsics,
                opts: PnPOptions | None = None) -> PnPResult:
    """Minimize weighted squared reprojection error starting from ``initial``.

    Only cost-decreasing steps are accepted, so the final cost never exceeds
    the initial one. Zero-weight correspondences do not influence the pose
    (they still appear in per_point_errors).

    Raises:
        DivergedBehindCamera: the initial pose puts a positive-weight model
            point at or behind the camera plane.
    """
    opts = opts or PnPOptions()
    if not corrs:
        raise TooFewPoints("refine_pose needs at least one correspondence")
    active = [c for c in corrs if c.weight > 0]
    if not active:
        raise TooFewPoints("all correspondence weights are zero")
    pts = np.array([c.model_point for c in active])
    obs = np.array([c.image_point for c in active])
    sqrt_w = np.sqrt(np.array([c.weight for c in active]))
    obs_ideal = undistort_pixels(obs, k)
    pose = _levenberg_marquardt(initial, pts, obs_ideal, sqrt_w, k, opts)
    return _result(pose, corrs, k, candidates=1)


# --- minimal (3-point) solver -------------------------------------------------


def _grunert_distances(a2: float, b2: float, c2: float,
                       ca: float, cb: float, cg: float) -> list[tuple[float, float, float]]:
    """Distances from camera center to three points via Grunert's quartic.

    Sides: a = |P2-P3|, b = |P1-P3|, c = |P1-P2| (squared inputs); ca, cb, cg
    are cosines of the angles between viewing rays (f2,f3), (f1,f3), (f1,f2).
    Solves for v = s3/s1, then u = s2/s1 linearly from the pair of
    law-of-cosines constraints.
    """
    A = a2 / b2
    B = c2 / b2
    coeffs = np.array([
        A * A - 2 * A * B - 2 * A + B * B - 4 * B * ca * ca + 2 * B + 1,
        -4 * (A * A * cb - A * ca * cg - A * cb - 2 * A * B * cb + ca * cg
              - 2 * B * ca * ca * cb - B * ca * cg + B * cb + B * B * cb),
        2 * (2 * A * A * cb * cb + A * A - 4 * A * ca * cb * cg - 2 * A * cg * cg
             - 4 * A * B * cb * cb - 2 * A * B + 2 * ca * ca + 2 * cg * cg - 1
             - 2 * B * ca * ca - 4 * B * ca * cb * cg + 2 * B * B * cb * cb + B * B),
        -4 * (A * A * cb - A * ca * cg - 2 * A * cb * cg * cg + A * cb - 2 * A * B * cb
              + ca * cg - B * ca * cg - B * cb + B * B * cb),
        A * A - 4 * A * cg * cg + 2 * A - 2 * A * B + 1 - 2 * B + B * B,
    ])

    scale = np.max(np.abs(coeffs))
    if scale == 0:
        return []
    coeffs = coeffs / scale
    if abs(coeffs[0]) < 1e-14:
        nz = np.flatnonzero(np.abs(coeffs) > 1e-14)
        if len(nz) == 0 or nz[0] >= 4:
            return []
        roots = np.roots(coeffs[nz[0]:])
    else:
        roots = np.roots(coeffs)

    def poly(x):
        return (((coeffs[0] * x + coeffs[1]) * x + coeffs[2]) * x + coeffs[3]) * x + coeffs[4]

    def dpoly(x):
        return ((4 * coeffs[0] * x + 3 * coeffs[1]) * x + 2 * coeffs[2]) * x + coeffs[3]

    sols = []
    seen: list[float] = []
    for root in roots:
        if abs(root.imag) > 1e-4 * (1.0 + abs(root.real)):
            continue
        v = float(root.real)
        for _ in range(8):  # Newton polish to machine precision
            d = dpoly(v)
            if abs(d) < 1e-300:
                break
            step = poly(v) / d
            v -= step
            if abs(step) < 1e-15 * max(1.0, abs(v)):
                break
        if v <= 0 or any(abs(v - s) < 1e-9 * max(1.0, abs(v)) for s in seen):
            continue
        seen.append(v)
        rad = 1.0 + v * v - 2.0 * v * cb
        if rad <= 0:
            continue
        s1 = math.sqrt(b2 / rad)
        den = 2.0 * (cg - v * ca)
        if abs(den) > 1e-9:
            u_candidates = [(1.0 - v * v + (A - B) * rad) / den]
        else:
            disc = cg * cg - (1.0 - B * rad)
            if disc < 0:
                continue
            r = math.sqrt(disc)
            u_candidates = [cg + r, cg - r]
        for u in u_candidates:
            if u <= 0:
                continue
            res_a = A * rad - (u * u + v * v - 2.0 * u * v * ca)
            if abs(res_a) > 1e-4 * max(1.0, A):
                continue
            sols.append((s1, u * s1, v * s1))
    return sols


def _absolute_orientation(model: np.ndarray, camera: np.ndarray) -> Pose:
    """Rigid transform mapping model points onto camera points (Kabsch)."""
    mc = model.mean(axis=0)
    cc = camera.mean(axis=0)
    h = (model - mc).T @ (camera - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(q=quat_from_matrix(r), t=cc - r @ mc)


def _polish_candidate(pose: Pose, pts: np.ndarray, obs_ideal: np.ndarray,
                      k: CameraIntrinsics) -> Pose:
    # quadratic convergence: an interpolating 3-point solution reaches
    # machine precision within a handful of iterations
    opts = PnPOptions(max_iterations=10, cost_change_tol=1e-30, step_tol=1e-16)
    try:
        return _levenberg_marquardt(pose, pts, obs_ideal, np.ones(len(pts)), k, opts)
    except DivergedBehindCamera:
        return pose


def solve_p3p_minimal(corrs: list[Correspondence], k: CameraIntrinsics) -> list[Pose]:
    """All candidate poses for exactly 3 correspondences (up to 4).

    Every returned candidate reprojects the three input points exactly (rms
    below 1e-6 px) and keeps them in front of the camera. An empty list means
    no candidate survived the cheirality filter.

    Raises:
        TooFewPoints: fewer than 3 correspondences.
        DegenerateConfiguration: collinear model points.
    """
    if len(corrs) < 3:
        raise TooFewPoints(f"minimal solver needs exactly 3 points, got {len(corrs)}")
    if len(corrs) != 3:
        raise ValueError(f"minimal solver takes exactly 3 correspondences, got {len(corrs)}")
    pts = np.array([c.model_point for c in corrs])
    _check_not_collinear(pts)
    obs_ideal = undistort_pixels(np.array([c.image_point for c in corrs]), k)

    # unit viewing rays through the (undistorted) pixels
    xn = (obs_ideal[:, 0] - k.cx) / k.fx
    yn = (obs_ideal[:, 1] - k.cy) / k.fy
    rays = np.column_stack([xn, yn, np.ones(3)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    a2 = float(np.sum((pts[1] - pts[2]) ** 2))
    b2 = float(np.sum((pts[0] - pts[2]) ** 2))
    c2 = float(np.sum((pts[0] - pts[1]) ** 2))
    if min(a2, b2, c2) <= 0:
        raise DegenerateConfiguration("model points are not distinct")
    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])

    candidates: list[Pose] = []
    for s in _grunert_distances(a2, b2, c2, ca, cb, cg):
        cam_pts = rays * np.asarray(s)[:, None]
        pose = _polish_candidate(_absolute_orientation(pts, cam_pts), pts, obs_ideal, k)
        cam = transform_points(pose, pts)
        if np.any(cam[:, 2] <= MIN_DEPTH):
            continue
        proj = np.column_stack([k.cx + k.fx * cam[:, 0] / cam[:, 2],
                                k.cy + k.fy * cam[:, 1] / cam[:, 2]])
        rms = float(np.sqrt(np.mean(np.sum((proj - obs_ideal) ** 2, axis=1))))
        if rms > _P3P_REPROJ_TOL:
            continue
        if any(pose.rotation_angle_to(c) < 1e-9 and pose.translation_distance_to(c) < 1e-9
               for c in candidates):
            continue
        candidates.append(pose)
    return candidates


# --- linear initialization for n >= 4 ----------------------------------------


def _dlt_initialize(pts: np.ndarray, obs_ideal: np.ndarray,
                    k: CameraIntrinsics) -> Pose | None:
    """Direct linear transform on normalized coordinates; None if unusable."""
    n = len(pts)
    xn = (obs_ideal[:, 0] - k.cx) / k.fx
    yn = (obs_ideal[:, 1] - k.cy) / k.fy
    a = np.zeros((2 * n, 12))
    xh = np.column_stack([pts, np.ones(n)])
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, None] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -yn[:, None] * xh
    _, s, vt = np.linalg.svd(a)
    if s[0] < 1e-15 or s[-2] < 1e-10 * s[0]:
        return None  # rank-deficient system (e.g. coplanar points)
    p = vt[-1].reshape(3, 4)
    m = p[:, :3]
    det = np.linalg.det(m)
    if abs(det) < 1e-15:
        return None
    sigma = 1.0 if det > 0 else -1.0
    u, sv, vt2 = np.linalg.svd(sigma * m)
    r = u @ vt2
    scale = np.sum(sv) / 3.0
    t = sigma * p[:, 3] / scale
    pose = Pose(q=quat_from_matrix(r), t=t)
    cam = transform_points(pose, pts)
    if np.any(cam[:, 2] <= MIN_DEPTH):
        return None
    return pose


def _best_spread_triples(pts: np.ndarray, limit: int = 5) -> list[tuple[int, int, int]]:
    """Index triples ordered by triangle area, largest first."""
    scored = []
    for i, j, l in combinations(range(len(pts)), 3):
        area = 0.5 * np.linalg.norm(np.cross(pts[j] - pts[i], pts[l] - pts[i]))
        scored.append((area, (i, j, l)))
    scored.sort(key=lambda x: -x[0])
    return [t for area, t in scored[:limit] if area > 0]


def _p3p_subset_initialize(corrs: list[Correspondence], k: CameraIntrinsics,
                           weights: np.ndarray) -> tuple[Pose, int]:
    """Initial pose from P3P on a well-spread triple, scored on all points."""
    pts = np.array([c.model_point for c in corrs])
    considered = 0
    best: tuple[float, Pose] | None = None
    for triple in _best_spread_triples(pts):
        try:
            cands = solve_p3p_minimal([corrs[i] for i in triple], k)
        except DegenerateConfiguration:
            continue
        considered += len(cands)
        for cand in cands:
            cam = transform_points(cand, pts)
            if np.any(cam[:, 2] <= MIN_DEPTH):
                continue
            errs = _pixel_errors(cand, corrs, k)
            score = float(np.sqrt(np.sum(weights * errs ** 2) / max(np.sum(weights), 1e-12)))
            if best is None or score < best[0]:
                best = (score, cand)
        if best is not None and best[0] < 1e-6:
            break  # an exact interpolant; no point scanning more triples
    if best is None:
        raise NoValidCandidate("no minimal-solver candidate keeps all points in front of the camera")
    return best[1], max(considered, 1)


def solve_pnp(corrs: list[Correspondence], k: CameraIntrinsics,
              opts: PnPOptions | None = None) -> PnPResult:
    """Recover a pose from n >= 3 correspondences.

    n == 3 runs the minimal solver and picks the lowest-rms candidate
    (candidates_considered reports the ambiguity). n >= 4 runs a linear
    initialization (DLT on normalized coordinates when the system has full
    rank, otherwise P3P on the best-spread triple scored against the held-out
    points) followed by Levenberg-Marquardt refinement.

    Raises:
        TooFewPoints: fewer than 3 usable correspondences.
        DegenerateConfiguration: collinear model points.
        NoValidCandidate: every candidate places points behind the camera.
    """
    opts = opts or PnPOptions()
    if len(corrs) < 3:
        raise TooFewPoints(f"need at least 3 correspondences, got {len(corrs)}")
    active = [c for c in corrs if c.weight > 0]
    if len(active) < 3:
        raise TooFewPoints(
            f"need at least 3 positive-weight correspondences, got {len(active)}")

    pts = np.array([c.model_point for c in active])
    _check_not_collinear(pts)

    if len(active) == 3:
        candidates = solve_p3p_minimal(active, k)
        if not candidates:
            raise NoValidCandidate("all minimal-solver candidates failed the cheirality check")
        errs = [(float(np.sqrt(np.mean(_pixel_errors(c, active, k) ** 2))), c)
                for c in candidates]
        errs.sort(key=lambda x: x[0])
        return _result(errs[0][1], corrs, k, candidates=len(candidates))

    weights = np.array([c.weight for c in active])
    obs_ideal = undistort_pixels(np.array([c.image_point for c in active]), k)

    initial = None
    considered = 1
    if len(active) >= 6:
        initial = _dlt_initialize(pts, obs_ideal, k)
    if initial is None:
        initial, considered = _p3p_subset_initialize(active, k, weights)

    refined = refine_pose(initial, active, k, opts)
    final = _result(refined.pose, corrs, k, candidates=considered)
    return final
