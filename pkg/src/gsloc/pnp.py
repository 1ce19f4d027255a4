"""Perspective-n-point pose solvers and a deterministic RANSAC loop.

The minimal solver recovers the three camera-to-point distances from the
two law-of-cosines ratios (a quartic in the distance ratio, assembled by
polynomial composition rather than hand-expanded coefficients), then
aligns the lifted camera-frame points to the world points.  RANSAC
scores 4-point hypotheses (3-point solve + 1 disambiguation point) by
inlier count and refines the best model with Levenberg-Marquardt over
its inliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import InsufficientMatches, NoConsensus
from .geometry import CameraIntrinsics, Pose


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray            # indices into the match list
    mean_reprojection_error: float
    converged: bool = True
    iterations: int = 0


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Rigid transform R, t with dst ~= R @ src + t (proper rotation)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def p3p_solutions(world: np.ndarray, bearings: np.ndarray):
    """All world-to-camera (R, t) candidates for 3 points and unit bearings.

    Solves the two distance-ratio equations by eliminating one unknown
    and rooting the resulting quartic; each admissible root yields the
    camera-frame point distances and a rigid alignment.
    """
    P1, P2, P3 = world
    f1, f2, f3 = bearings
    a2 = float(np.sum((P2 - P3) ** 2))
    b2 = float(np.sum((P1 - P3) ** 2))
    c2 = float(np.sum((P1 - P2) ** 2))
    if min(a2, b2, c2) < 1e-16:
        return []
    cos_a = float(f2 @ f3)
    cos_b = float(f1 @ f3)
    cos_g = float(f1 @ f2)

    # u = s2/s1, v = s3/s1 with s_i the camera-to-point distances:
    #   (I)  a2*(1 + v^2 - 2 v cos_b) = b2*(u^2 + v^2 - 2 u v cos_a)
    #   (II) c2*(1 + v^2 - 2 v cos_b) = b2*(1 + u^2 - 2 u cos_g)
    # (I) - (II) is linear in u: u = num(v) / den(v).
    num = np.array([a2 - b2 - c2, 2.0 * (c2 - a2) * cos_b, a2 + b2 - c2])
    den = np.array([-2.0 * b2 * cos_a, 2.0 * b2 * cos_g])
    # substitute into (II): b2*num^2 - 2 b2 cos_g num den + C2(v) den^2 = 0
    c2v = np.array([-c2, 2.0 * c2 * cos_b, b2 - c2])

    def _pad(p, deg):
        return np.concatenate([np.zeros(deg + 1 - p.size), p])

    quartic = _pad(b2 * np.polymul(num, num), 4) \
        - _pad(2.0 * b2 * cos_g * np.polymul(num, den), 4) \
        + _pad(np.polymul(c2v, np.polymul(den, den)), 4)

    quartic = np.trim_zeros(quartic, "f")
    if quartic.size <= 1:
        return []
    roots = np.roots(quartic)
    solutions = []
    for v in roots:
        if abs(v.imag) > 1e-9 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        den_v = float(np.polyval(den, v))
        if abs(den_v) < 1e-12:
            continue
        u = float(np.polyval(num, v)) / den_v
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        cam = np.stack([s1 * f1, s1 * u * f2, s1 * v * f3])
        R, t = _kabsch(world, cam)
        solutions.append((R, t))
    return solutions


def pnp_dlt(world: np.ndarray, normalized: np.ndarray):
    """Direct linear transform pose from >= 6 correspondences.

    ``normalized`` are camera-plane coordinates ((u-cx)/fx, (v-cy)/fy).
    Returns (R, t) world-to-camera or None when degenerate.
    """
    n = world.shape[0]
    if n < 6:
        return None
    Xh = np.concatenate([world, np.ones((n, 1))], axis=1)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -normalized[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -normalized[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    if S.min() < 1e-12:
        return None
    R = U @ Vt2
    scale = S.mean()
    t = P[:, 3] / scale
    # cheirality: most points should land in front of the camera
    z = (world @ R.T + t)[:, 2]
    if np.median(z) < 0:
        return None
    return R, t


def _reproject_errors(world: np.ndarray, pixels: np.ndarray, R: np.ndarray,
                      t: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    cam = world @ R.T + t
    z = cam[:, 2]
    bad = z <= 1e-9
    zs = np.where(bad, 1.0, z)
    u = K.fx * cam[:, 0] / zs + K.cx
    v = K.fy * cam[:, 1] / zs + K.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    err[bad] = np.inf
    return err


def _refine_lm(world: np.ndarray, pixels: np.ndarray, R: np.ndarray,
               t: np.ndarray, K: CameraIntrinsics):
    """Levenberg-Marquardt reprojection refinement from an initial pose."""
    x0 = np.concatenate([Rotation.from_matrix(R).as_rotvec(), t])

    def residuals(x):
        Rm = Rotation.from_rotvec(x[:3]).as_matrix()
        cam = world @ Rm.T + x[3:]
        z = np.where(np.abs(cam[:, 2]) < 1e-9, 1e-9, cam[:, 2])
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
        return np.concatenate([u - pixels[:, 0], v - pixels[:, 1]])

    res = least_squares(residuals, x0, method="lm", max_nfev=200)
    return Rotation.from_rotvec(res.x[:3]).as_matrix(), res.x[3:]


def solve_pnp_ransac(pixels: np.ndarray, world: np.ndarray, K: CameraIntrinsics,
                     iters: int = 2000, threshold_px: float = 3.0,
                     seed: int = 0, min_inliers: int = 6,
                     min_inlier_fraction: float = 0.3,
                     confidence: float = 0.999) -> PoseEstimate:
    """Robust pose from 2D-3D correspondences.

    Raises InsufficientMatches below 4 correspondences and NoConsensus
    when the best support is under max(min_inliers, fraction of matches).
    Deterministic for a fixed seed.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    n = pixels.shape[0]
    if n < 4:
        raise InsufficientMatches(f"{n} matches, need at least 4")

    normalized = np.stack([(pixels[:, 0] - K.cx) / K.fx,
                           (pixels[:, 1] - K.cy) / K.fy], axis=1)
    bearings = np.concatenate([normalized, np.ones((n, 1))], axis=1)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    rng = np.random.default_rng(seed)
    best_count = 0
    best_err = np.inf
    best_Rt = None
    max_iters = iters
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        tri, check = sample[:3], sample[3]
        sols = p3p_solutions(world[tri], bearings[tri])
        if not sols:
            continue
        check_errs = [
            _reproject_errors(world[check:check + 1], pixels[check:check + 1],
                              R, t, K)[0] for (R, t) in sols]
        R, t = sols[int(np.argmin(check_errs))]
        errs = _reproject_errors(world, pixels, R, t, K)
        inl = errs < threshold_px
        count = int(inl.sum())
        mean_err = float(errs[inl].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_err = mean_err
            best_Rt = (R, t)
            ratio = count / n
            if 0 < ratio < 1:
                denom = np.log(max(1e-12, 1.0 - ratio**4))
                if denom < 0:
                    needed = int(np.ceil(np.log(1.0 - confidence) / denom))
                    max_iters = min(max_iters, max(it, needed))
            elif ratio >= 1:
                break

    required = max(min_inliers, int(np.ceil(min_inlier_fraction * n)))
    if best_Rt is None or best_count < required:
        # last resort: a linear solve over all matches may still expose consensus
        fallback = pnp_dlt(world, normalized)
        if fallback is not None:
            errs = _reproject_errors(world, pixels, *fallback, K)
            count = int((errs < threshold_px).sum())
            if count > best_count:
                best_Rt = fallback
                best_count = count
        if best_Rt is None or best_count < required:
            raise NoConsensus(
                f"best support {best_count}/{n}, required {required}")

    R, t = best_Rt
    errs = _reproject_errors(world, pixels, R, t, K)
    inl = errs < threshold_px
    pre_mean = float(errs[inl].mean())

    R_ref, t_ref = _refine_lm(world[inl], pixels[inl], R, t, K)
    errs_ref = _reproject_errors(world, pixels, R_ref, t_ref, K)
    post_mean = float(errs_ref[inl].mean())
    if post_mean <= pre_mean:
        R, t, errs = R_ref, t_ref, errs_ref

    final_inl = np.nonzero(errs < threshold_px)[0]
    mean_err = float(errs[final_inl].mean()) if final_inl.size else np.inf
    pose = Pose(q=_rot_to_quat_safe(R.T), t=-R.T @ t)
    return PoseEstimate(pose=pose, inliers=final_inl,
                        mean_reprojection_error=mean_err, converged=True,
                        iterations=it)


def _rot_to_quat_safe(R: np.ndarray) -> np.ndarray:
    from .geometry import rot_to_quat
    # guard against slight non-orthonormality after LM
    U, _, Vt = np.linalg.svd(R)
    return rot_to_quat(U @ Vt)
