"""Levenberg-Marquardt bundle adjustment with a Huber-robustified cost.

Point blocks are eliminated with the Schur complement, so the dense solve is
only over camera parameters. Calibrated cameras are updated on the rotation
manifold (``R <- Exp(w) R``, stored as unit quaternions); projective cameras
have all twelve entries free and are normalized once at the end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.sparse as sp

from .geometry import (
    CALIBRATED,
    CameraSet,
    axis_angle_to_quat,
    normalize_projective_camera,
    quat_multiply,
    quat_to_rotation,
    skew,
)
from .measurements import MeasurementTensor

log = logging.getLogger(__name__)


@dataclass
class BAConfig:
    huber_delta: float = 0.1
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    tolerance: float = 1e-10
    max_rejections: int = 10
    grad_tolerance: float = 1e-14


@dataclass
class BAResult:
    cameras: CameraSet
    points: np.ndarray
    cost_history: List[float]
    iterations: int
    excluded_measurements: np.ndarray
    excluded_points: np.ndarray
    termination: str = ""
    rejections: int = 0


def huber_rho(r, delta):
    """Huber value and derivative at ``r >= 0``: quadratic up to ``delta``,
    linear beyond."""
    r = np.asarray(r, dtype=np.float64)
    quad = r <= delta
    value = np.where(quad, 0.5 * r * r, delta * (r - 0.5 * delta))
    deriv = np.where(quad, r, delta)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


class _Problem:
    """Residuals and Jacobians over the included measurements."""

    def __init__(self, cams: CameraSet, pts, t: MeasurementTensor, sel):
        self.calibrated = cams.mode == CALIBRATED
        self.dc = 6 if self.calibrated else 12
        self.m, self.n = t.m, t.n
        self.cam = t.cam[sel]
        self.track = t.track[sel]
        self.obs = t.points[sel]
        k = len(self.cam)
        self.cam_inc = sp.csr_matrix((np.ones(k), (self.cam, np.arange(k))), shape=(t.m, k))
        self.track_inc = sp.csr_matrix((np.ones(k), (self.track, np.arange(k))), shape=(t.n, k))

    def camera_matrices(self, state):
        if self.calibrated:
            q, tr = state[0], state[1]
            return np.concatenate([quat_to_rotation(q), tr[:, :, None]], axis=2)
        return state[0].reshape(-1, 3, 4)

    def residuals(self, state):
        P = self.camera_matrices(state)[self.cam]
        X = state[-1][self.track]
        u = np.einsum("kab,kb->ka", P[:, :, :3], X) + P[:, :, 3]
        return self.obs - u[:, :2] / u[:, 2:3], u, P, X

    def jacobians(self, state):
        r, u, P, X = self.residuals(state)
        z = u[:, 2]
        dproj = np.zeros((len(z), 2, 3))
        dproj[:, 0, 0] = 1.0 / z
        dproj[:, 1, 1] = 1.0 / z
        dproj[:, :, 2] = -u[:, :2] / (z * z)[:, None]
        if self.calibrated:
            RX = np.einsum("kab,kb->ka", P[:, :, :3], X)
            du_dc = np.concatenate([-skew(RX), np.broadcast_to(np.eye(3), (len(z), 3, 3))], axis=2)
        else:
            Xh = np.concatenate([X, np.ones((len(z), 1))], axis=1)
            du_dc = np.zeros((len(z), 3, 12))
            for a in range(3):
                du_dc[:, a, 4 * a:4 * a + 4] = Xh
        Jc = -dproj @ du_dc
        Jp = -dproj @ P[:, :, :3]
        return r, Jc, Jp

    def step(self, state, dc, dp):
        dc = dc.reshape(self.m, self.dc)
        X = state[-1] + dp.reshape(self.n, 3)
        if self.calibrated:
            q = quat_multiply(axis_angle_to_quat(dc[:, :3]), state[0])
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            return (q, state[1] + dc[:, 3:], X)
        return (state[0] + dc, X)


def robust_cost(r, delta) -> float:
    return float(huber_rho(np.linalg.norm(r, axis=1), delta)[0].sum())


def _blocks(inc, A, shape):
    return (inc @ A.reshape(A.shape[0], -1)).reshape(shape)


def run_bundle_adjustment(cams: CameraSet, pts, t: MeasurementTensor, cfg: BAConfig = None) -> BAResult:
    """Refine cameras and points by minimizing the Huber cost of per-measurement
    reprojection-error norms.

    Measurements with non-positive initial depth are left out, as are points
    that keep fewer than two measurements; both are reported in the result.
    Accepted steps strictly decrease the cost.
    """
    cfg = cfg or BAConfig()
    pts = np.array(pts, dtype=np.float64)
    P0 = cams.matrices
    if cams.mode != CALIBRATED:
        P0 = normalize_projective_camera(P0)
    u0 = np.einsum("kab,kb->ka", P0[t.cam][:, :, :3], pts[t.track]) + P0[t.cam][:, :, 3]
    good = u0[:, 2] > 0
    counts = np.bincount(t.track[good], minlength=t.n)
    bad_points = np.flatnonzero(counts < 2)
    good &= counts[t.track] >= 2
    excluded = np.flatnonzero(~good)
    if len(excluded):
        log.info("bundle adjustment: excluding %d measurements, %d points",
                 len(excluded), len(bad_points))

    prob = _Problem(cams, pts, t, good)
    if prob.calibrated:
        state = (cams.quaternions(), cams.translations.copy(), pts)
    else:
        state = (P0.reshape(t.m, 12).copy(), pts)

    delta = cfg.huber_delta
    r = prob.residuals(state)[0]
    cost = robust_cost(r, delta)
    history = [cost]
    lam = cfg.initial_damping
    dc, m, n = prob.dc, t.m, t.n
    it = 0
    termination = "max_iterations"
    total_rejections = 0
    while it < cfg.max_iterations:
        if cost == 0.0:
            termination = "zero_cost"
            break
        r, Jc, Jp = prob.jacobians(state)
        norm = np.linalg.norm(r, axis=1)
        w = np.where(norm > 0, huber_rho(norm, delta)[1] / np.where(norm > 0, norm, 1.0), 1.0)
        wJc = Jc * w[:, None, None]
        wJp = Jp * w[:, None, None]
        U = _blocks(prob.cam_inc, np.einsum("kai,kaj->kij", wJc, Jc), (m, dc, dc))
        V = _blocks(prob.track_inc, np.einsum("kai,kaj->kij", wJp, Jp), (n, 3, 3))
        Wk = np.einsum("kai,kaj->kij", wJc, Jp)
        gc = _blocks(prob.cam_inc, np.einsum("kai,ka->ki", wJc, r), (m, dc))
        gp = _blocks(prob.track_inc, np.einsum("kai,ka->ki", wJp, r), (n, 3))
        if max(np.abs(gc).max(), np.abs(gp).max()) < cfg.grad_tolerance:
            termination = "gradient"
            break
        # sparse block layout of W (camera rows x point columns)
        rows = (prob.cam[:, None, None] * dc + np.arange(dc)[None, :, None]).repeat(3, axis=2)
        cols = (prob.track[:, None, None] * 3 + np.arange(3)[None, None, :]).repeat(dc, axis=1)
        Wmat = sp.csr_matrix((Wk.ravel(), (rows.ravel(), cols.ravel())), shape=(m * dc, n * 3))
        Ud = sp.block_diag(list(U)).toarray() if m else np.zeros((0, 0))

        accepted = False
        rejections = 0
        while rejections < cfg.max_rejections:
            Vd = V + lam * np.eye(3)
            Vinv = np.linalg.inv(Vd)
            Vinv_mat = sp.block_diag(list(Vinv), format="csr")
            Y = Wmat @ Vinv_mat
            S = Ud + lam * np.eye(m * dc) - (Y @ Wmat.T).toarray()
            rhs = -gc.ravel() + Y @ gp.ravel()
            try:
                d_cam = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                d_cam = None
            if d_cam is not None and np.isfinite(d_cam).all():
                d_pt = Vinv_mat @ (-gp.ravel() - Wmat.T @ d_cam)
                cand = prob.step(state, d_cam, d_pt)
                new_cost = robust_cost(prob.residuals(cand)[0], delta)
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    break
            lam *= cfg.damping_up
            rejections += 1
            total_rejections += 1
        it += 1
        if not accepted:
            termination = "rejections"
            break
        rel = (cost - new_cost) / cost
        state, cost = cand, new_cost
        history.append(cost)
        lam *= cfg.damping_down
        if rel < cfg.tolerance:
            termination = "tolerance"
            break

    P = prob.camera_matrices(state)
    if prob.calibrated:
        out = CameraSet(P, CALIBRATED)
    else:
        out = CameraSet(normalize_projective_camera(P), cams.mode)
    return BAResult(out, state[-1], history, it, excluded, bad_points, termination, total_rejections)
