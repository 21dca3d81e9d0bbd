"""Reprojection + depth-hinge objective averaged over observed measurements."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .autograd import OPS, Tape, residual_terms
from .geometry import PROJECTIVE, CameraSet, normalize_projective_camera
from .measurements import MeasurementTensor

DEFAULT_H = 1e-4

REPROJECTION = "reprojection"
HINGE = "hinge"


@dataclass
class LossBreakdown:
    total: float
    mean_reprojection: float
    hinge_count: int
    per_measurement: Optional[Dict[Tuple[int, int], float]] = None


def measurement_residual(P, X, x_obs, h: float = DEFAULT_H):
    """``(s, branch, depth)`` for one measurement.

    At ``depth >= h`` the value is the plain l2 reprojection error, below it
    the hinge ``h - depth``.
    """
    P = np.asarray(P, dtype=np.float64)
    u = P[:, :3] @ np.asarray(X, dtype=np.float64) + P[:, 3]
    s, reproj, _ = residual_terms(u[None], np.asarray(x_obs, dtype=np.float64)[None], h)
    return float(s[0]), REPROJECTION if reproj[0] else HINGE, float(u[2])


def _terms(cams: CameraSet, pts, t: MeasurementTensor, h):
    P = cams.matrices
    if cams.mode == PROJECTIVE:
        # depth is only meaningful for the normalized representative
        P = normalize_projective_camera(P)
    u = OPS["project"][0](P, np.asarray(pts, dtype=np.float64), t.cam, t.track,
                          None, None)
    return residual_terms(u, t.points, h)


def compute_loss(cams: CameraSet, pts, t: MeasurementTensor, h: float = DEFAULT_H,
                 per_measurement: bool = False) -> LossBreakdown:
    if h <= 0:
        raise ValueError("depth threshold h must be positive")
    s, reproj, _ = _terms(cams, pts, t, h)
    total = float(OPS["mean"][0](s))
    mean_r = float(s[reproj].mean()) if reproj.any() else float("nan")
    per = None
    if per_measurement:
        per = {(int(i), int(j)): float(v) for i, j, v in zip(t.cam, t.track, s)}
    return LossBreakdown(total, mean_r, int((~reproj).sum()), per)


def attach_loss(tape: Tape, t: MeasurementTensor, h: float = DEFAULT_H):
    """Append projection, residual and mean nodes to a forward tape."""
    P, X = tape.outputs["cameras"], tape.outputs["points"]
    u = tape.apply("project", P, X, cam=t.cam, track=t.track,
                   cam_inc=t.cam_incidence, track_inc=t.track_incidence)
    s = tape.apply("residual", u, obs=t.points, h=h)
    tape.loss = tape.apply("mean", s)
    tape.outputs["projections"] = u
    return tape.loss
