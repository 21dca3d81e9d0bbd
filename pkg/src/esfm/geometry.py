"""Camera parameterization, projection, triangulation, alignment and metrics.

Quaternions are ``(w, x, y, z)`` with the Hamilton product; ``R(q) v``
rotates ``v``. A calibrated camera is ``[R | t]`` mapping world points to
camera coordinates, so its center is ``-R^T t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateQuaternion,
    DegenerateSystem,
    MissingGroundTruth,
    PointAtInfinity,
    SingularCameraBlock,
    TooFewPoints,
    TooFewViews,
)

CALIBRATED = "calibrated"
PROJECTIVE = "projective"
MODES = (CALIBRATED, PROJECTIVE)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion.

    Accepts shape ``(4,)`` or ``(k, 4)``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norm <= 1e-12).any():
        raise DegenerateQuaternion("quaternion norm too small")
    return unit_quat_to_rotation(q / norm)


def unit_quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def unit_quat_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit-quaternion inputs, shape ``(..., 3, 3, 4)``."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)
    dw = [[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]]
    dx = [[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    dy = [[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]]
    dz = [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]]
    J = np.stack([np.array(d) for d in (dw, dx, dy, dz)], axis=-1)  # 3,3,...,4
    return np.moveaxis(J, (0, 1), (-3, -2))


def rotation_to_quat(R) -> np.ndarray:
    """Unit quaternion with non-negative ``w`` for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    out = np.empty((len(R), 4))
    for k, M in enumerate(R):
        tr = np.trace(M)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[k] = q if q[0] >= 0 else -q
    return out[0] if single else out


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_to_quat(v) -> np.ndarray:
    """Quaternion of the rotation by ``|v|`` radians about ``v``."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(half)/theta -> 1/2 as theta -> 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 0, theta, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def rotation_angle_deg(R) -> np.ndarray:
    """Rotation angle in degrees; atan2 keeps small angles accurate."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    axis = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(axis, axis=-1) / 2.0
    return np.degrees(np.arctan2(s, c))


def normalize_projective_camera(P) -> np.ndarray:
    """Scale ``P`` so its left block has positive determinant and unit third row.

    Works on one ``3x4`` matrix or a stack of them.
    """
    P = np.asarray(P, dtype=np.float64)
    A = P[..., :3]
    det = np.linalg.det(A)
    row = np.linalg.norm(A[..., 2, :], axis=-1)
    if (np.abs(det) <= 1e-300).any() or (row == 0).any():
        raise SingularCameraBlock("camera left 3x3 block is singular")
    s = np.sign(det) / row
    return P * s[..., None, None]


def project(P, X):
    """Project inhomogeneous point(s) ``X`` with camera(s) ``P``.

    Returns ``(point2, depth, valid)``; ``point2`` is NaN where
    ``|depth| <= 1e-15``.
    """
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    u = np.einsum("...ab,...b->...a", P[..., :3], X) + P[..., 3]
    depth = u[..., 2]
    valid = np.abs(depth) > 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        pt = u[..., :2] / np.where(valid, depth, np.nan)[..., None]
    return pt, depth, valid


def triangulate_dlt(cameras: Sequence, points2: Sequence) -> np.ndarray:
    """Linear triangulation from two DLT rows per view, solved by SVD."""
    cameras = np.asarray(cameras, dtype=np.float64).reshape(-1, 3, 4)
    points2 = np.asarray(points2, dtype=np.float64).reshape(-1, 2)
    if len(cameras) < 2 or len(points2) != len(cameras):
        raise TooFewViews(f"need >= 2 matching views, got {len(cameras)}")
    A = np.concatenate([
        points2[:, :1] * cameras[:, 2] - cameras[:, 0],
        points2[:, 1:] * cameras[:, 2] - cameras[:, 1],
    ])
    _, s, Vt = np.linalg.svd(A)
    if s[2] <= 1e-10 * s[0]:
        raise DegenerateSystem("DLT system has rank < 3")
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise PointAtInfinity("triangulated point is at infinity")
    return Xh[:3] / Xh[3]


def triangulate_tracks(cameras: np.ndarray, t, fallback: Optional[np.ndarray] = None):
    """Triangulate every track of tensor ``t``.

    Tracks whose DLT fails use ``fallback[j]`` when given. Returns
    ``(points, failed_track_ids)``.
    """
    cameras = np.asarray(cameras, dtype=np.float64)
    pts = np.zeros((t.n, 3))
    failed = []
    o = t.track_order
    bounds = np.concatenate([[0], np.cumsum(t.track_counts)])
    for j in range(t.n):
        idx = o[bounds[j]:bounds[j + 1]]
        try:
            pts[j] = triangulate_dlt(cameras[t.cam[idx]], t.points[idx])
        except (DegenerateSystem, PointAtInfinity):
            if fallback is None:
                raise
            pts[j] = fallback[j]
            failed.append(j)
    return pts, failed


def similarity_align(source, target):
    """Least-squares ``(s, R, t)`` with ``s R src + t ~ tgt`` (Umeyama)."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(src) != len(tgt):
        raise TooFewPoints(f"need >= 3 correspondences, got {len(src)}")
    mu_s, mu_t = src.mean(0), tgt.mean(0)
    a, b = src - mu_s, tgt - mu_t
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear")
    U, D, Vt = np.linalg.svd(b.T @ a / len(src))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var = (a * a).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var)
    t = mu_t - s * R @ mu_s
    return s, R, t


@dataclass
class CameraSet:
    """Stack of ``m`` camera matrices (``m x 3 x 4``) and their setting."""

    matrices: np.ndarray
    mode: str = PROJECTIVE

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64).reshape(-1, 3, 4)

    def __len__(self):
        return len(self.matrices)

    @classmethod
    def from_poses(cls, quats, translations) -> "CameraSet":
        R = quat_to_rotation(np.asarray(quats).reshape(-1, 4))
        t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        return cls(np.concatenate([R, t[:, :, None]], axis=2), CALIBRATED)

    @property
    def rotations(self) -> np.ndarray:
        return self.matrices[:, :, :3]

    @property
    def translations(self) -> np.ndarray:
        return self.matrices[:, :, 3]

    def quaternions(self) -> np.ndarray:
        return rotation_to_quat(self.rotations)

    def centers(self) -> np.ndarray:
        if self.mode == CALIBRATED:
            return -np.einsum("kba,kb->ka", self.rotations, self.translations)
        out = []
        for P in self.matrices:
            c = np.linalg.svd(P)[2][-1]
            out.append(c[:3] / c[3])
        return np.array(out)

    def take(self, idx) -> "CameraSet":
        return CameraSet(self.matrices[np.asarray(idx)], self.mode)

    def transformed(self, s, R, t) -> "CameraSet":
        """Cameras after mapping the world by ``X -> s R X + t``.

        Calibrated cameras stay in ``[R|t]`` form (the scale lands on t).
        """
        Rc, tc = self.rotations, self.translations
        newR = Rc @ R.T
        newt = s * tc - np.einsum("kab,b->ka", newR, t)
        return CameraSet(np.concatenate([newR, newt[:, :, None]], axis=2), self.mode)


@dataclass
class Metrics:
    mean_reprojection_px: float
    rotation_error_deg: Optional[float] = None
    location_error: Optional[float] = None

    def as_dict(self):
        return {
            "mean_reprojection_px": self.mean_reprojection_px,
            "rotation_error_deg": self.rotation_error_deg,
            "location_error": self.location_error,
        }


def reprojection_px(cams: CameraSet, pts: np.ndarray, tensor, denorm=None) -> float:
    """Mean per-measurement l2 reprojection error, mapped to pixels by ``denorm``."""
    P = cams.matrices[tensor.cam]
    X = np.asarray(pts)[tensor.track]
    pred, _, _ = project(P, X)
    obs = tensor.points
    if denorm is not None:
        pred_px = np.empty_like(pred)
        obs_px = np.empty_like(obs)
        for i, tr in enumerate(denorm):
            sel = tensor.cam == i
            pred_px[sel] = tr.unapply(pred[sel])
            obs_px[sel] = tr.unapply(obs[sel])
        pred, obs = pred_px, obs_px
    err = np.linalg.norm(obs - pred, axis=1)
    err = np.where(np.isfinite(err), err, np.inf)
    return float(err.mean())


def evaluate_metrics(pred_cams: CameraSet, pred_pts, gt_cams: Optional[CameraSet],
                     tensor, denorm=None, require_gt=False) -> Metrics:
    """Reprojection error in pixels and, for calibrated cameras with ground
    truth, gauge-aligned rotation and location errors.

    The gauge is fixed by aligning predicted camera centers to the ground
    truth centers with a similarity transform; its rotation also aligns the
    orientations.
    """
    metrics = Metrics(reprojection_px(pred_cams, pred_pts, tensor, denorm))
    if gt_cams is None:
        if require_gt:
            raise MissingGroundTruth("rotation/location errors need ground-truth cameras")
        return metrics
    if pred_cams.mode != CALIBRATED:
        if require_gt:
            raise MissingGroundTruth("rotation/location errors need calibrated cameras")
        return metrics
    c_pred, c_gt = pred_cams.centers(), gt_cams.centers()
    s, Ra, ta = similarity_align(c_pred, c_gt)
    aligned = (s * c_pred @ Ra.T) + ta
    metrics.location_error = float(np.linalg.norm(aligned - c_gt, axis=1).mean())
    # camera-to-world orientation of a prediction after alignment is Ra R_i^T
    rel = np.einsum("kab,bc,kdc->kad", gt_cams.rotations, Ra, pred_cams.rotations)
    metrics.rotation_error_deg = float(rotation_angle_deg(rel).mean())
    return metrics
