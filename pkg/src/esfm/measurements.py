"""Sparse measurement tensor of point tracks and per-image normalization."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DuplicateObservation,
    EmptyCamera,
    IndexOutOfRange,
    NonUpperTriangular,
    SingularIntrinsics,
    TrackTooShort,
)


class Observation(NamedTuple):
    camera_index: int
    track_index: int
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class MeasurementTensor:
    """Observed 2D points of ``n`` tracks in ``m`` cameras.

    Storage is canonical camera-major order: observation ``k`` belongs to
    camera ``cam[k]`` and track ``track[k]``, sorted by ``(cam, track)``.
    ``track_order`` is the permutation giving track-major order.
    """

    m: int
    n: int
    cam: np.ndarray
    track: np.ndarray
    points: np.ndarray

    @property
    def p(self) -> int:
        return len(self.cam)

    @cached_property
    def track_order(self) -> np.ndarray:
        return np.lexsort((self.cam, self.track))

    @cached_property
    def camera_counts(self) -> np.ndarray:
        return np.bincount(self.cam, minlength=self.m)

    @cached_property
    def track_counts(self) -> np.ndarray:
        return np.bincount(self.track, minlength=self.n)

    def camera_major(self):
        return list(zip(self.cam.tolist(), self.track.tolist()))

    def track_major(self):
        o = self.track_order
        return list(zip(self.cam[o].tolist(), self.track[o].tolist()))

    def observations(self) -> list[Observation]:
        return [Observation(int(i), int(j), float(x), float(y))
                for i, j, (x, y) in zip(self.cam, self.track, self.points)]

    def visibility(self) -> np.ndarray:
        mask = np.zeros((self.m, self.n), dtype=bool)
        mask[self.cam, self.track] = True
        return mask

    def dense(self) -> np.ndarray:
        """m x n x 2 array, NaN where unobserved."""
        out = np.full((self.m, self.n, 2), np.nan)
        out[self.cam, self.track] = self.points
        return out

    # Sparse incidence matrices used for masked means and their adjoints.
    @cached_property
    def cam_incidence(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.p), (self.cam, np.arange(self.p))),
                             shape=(self.m, self.p))

    @cached_property
    def track_incidence(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.p), (self.track, np.arange(self.p))),
                             shape=(self.n, self.p))

    @cached_property
    def cam_mean_op(self) -> sp.csr_matrix:
        w = 1.0 / np.maximum(self.camera_counts, 1)[self.cam]
        return sp.csr_matrix((w, (self.cam, np.arange(self.p))), shape=(self.m, self.p))

    @cached_property
    def track_mean_op(self) -> sp.csr_matrix:
        w = 1.0 / np.maximum(self.track_counts, 1)[self.track]
        return sp.csr_matrix((w, (self.track, np.arange(self.p))), shape=(self.n, self.p))

    def with_points(self, points: np.ndarray) -> "MeasurementTensor":
        points = np.asarray(points, dtype=np.float64)
        if points.shape != self.points.shape:
            raise ValueError("point array shape mismatch")
        return MeasurementTensor(self.m, self.n, self.cam, self.track, points)

    def permuted(self, cam_perm: np.ndarray, track_perm: np.ndarray) -> "MeasurementTensor":
        """Relabel camera ``i`` as ``cam_perm[i]`` and track ``j`` as ``track_perm[j]``."""
        cam_perm = np.asarray(cam_perm)
        track_perm = np.asarray(track_perm)
        return _from_arrays(self.m, self.n, cam_perm[self.cam], track_perm[self.track],
                            self.points)

    def restrict(self, cameras: Sequence[int]):
        """Sub-tensor on the given cameras, dropping tracks left with < 2 views.

        Returns ``(tensor, camera_ids, track_ids)`` where the id arrays map new
        indices back to the original ones. Raises ``EmptyCamera`` if a kept
        camera ends up with no observations.
        """
        cameras = np.asarray(sorted(set(int(c) for c in cameras)), dtype=np.int64)
        keep_cam = np.zeros(self.m, dtype=bool)
        keep_cam[cameras] = True
        sel = keep_cam[self.cam]
        counts = np.bincount(self.track[sel], minlength=self.n)
        track_ids = np.flatnonzero(counts >= 2)
        keep_track = np.zeros(self.n, dtype=bool)
        keep_track[track_ids] = True
        sel &= keep_track[self.track]
        cam_map = np.full(self.m, -1)
        cam_map[cameras] = np.arange(len(cameras))
        track_map = np.full(self.n, -1)
        track_map[track_ids] = np.arange(len(track_ids))
        sub = _from_arrays(len(cameras), len(track_ids), cam_map[self.cam[sel]],
                           track_map[self.track[sel]], self.points[sel])
        return sub, cameras, track_ids


def _from_arrays(m, n, cam, track, points) -> MeasurementTensor:
    cam = np.asarray(cam, dtype=np.int64)
    track = np.asarray(track, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if m <= 0 or n <= 0:
        raise IndexOutOfRange(f"m and n must be positive, got m={m}, n={n}")
    if len(cam) == 0:
        raise IndexOutOfRange("no observations")
    if cam.min() < 0 or cam.max() >= m:
        bad = int(cam[(cam < 0) | (cam >= m)][0])
        raise IndexOutOfRange(f"camera index {bad} outside [0, {m})")
    if track.min() < 0 or track.max() >= n:
        bad = int(track[(track < 0) | (track >= n)][0])
        raise IndexOutOfRange(f"track index {bad} outside [0, {n})")
    order = np.lexsort((track, cam))
    cam, track, points = cam[order], track[order], points[order]
    dup = (np.diff(cam) == 0) & (np.diff(track) == 0)
    if dup.any():
        k = int(np.flatnonzero(dup)[0])
        raise DuplicateObservation(int(cam[k]), int(track[k]))
    tc = np.bincount(track, minlength=n)
    if (tc < 2).any():
        j = int(np.flatnonzero(tc < 2)[0])
        raise TrackTooShort(j, int(tc[j]))
    cc = np.bincount(cam, minlength=m)
    if (cc == 0).any():
        raise EmptyCamera(int(np.flatnonzero(cc == 0)[0]))
    cam.flags.writeable = False
    track.flags.writeable = False
    points.flags.writeable = False
    return MeasurementTensor(int(m), int(n), cam, track, points)


def build_measurements(observations: Iterable, m: int, n: int) -> MeasurementTensor:
    """Validate observations ``(i, j, x, y)`` and build the tensor.

    Invalid tracks or cameras are rejected, never dropped.
    """
    obs = list(observations)
    if not obs:
        raise IndexOutOfRange("no observations")
    arr = np.array([(o[0], o[1]) for o in obs], dtype=np.int64)
    pts = np.array([(o[2], o[3]) for o in obs], dtype=np.float64)
    return _from_arrays(m, n, arr[:, 0], arr[:, 1], pts)


@dataclass(frozen=True)
class NormalizationTransform:
    matrix: np.ndarray
    inverse: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return _apply_h(self.matrix, pts)

    def unapply(self, pts: np.ndarray) -> np.ndarray:
        return _apply_h(self.inverse, pts)


def _apply_h(H, pts):
    pts = np.asarray(pts, dtype=np.float64)
    xh = pts @ H[:, :2].T + H[:, 2]
    return xh[..., :2] / xh[..., 2:3]


def hartley_normalize(t: MeasurementTensor):
    """Per camera: centroid to the origin, mean distance from it to sqrt(2).

    A camera whose points all coincide keeps scale 1.
    """
    transforms = []
    new = np.empty_like(t.points)
    for i in range(t.m):
        sel = t.cam == i
        pts = t.points[sel]
        c = pts.mean(axis=0)
        d = np.linalg.norm(pts - c, axis=1).mean()
        s = np.sqrt(2.0) / d if d > 0 else 1.0
        N = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
        Ninv = np.array([[1.0 / s, 0.0, c[0]], [0.0, 1.0 / s, c[1]], [0.0, 0.0, 1.0]])
        new[sel] = s * (pts - c)
        transforms.append(NormalizationTransform(N, Ninv))
    return t.with_points(new), transforms


def check_intrinsics(K, i=0) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (3, 3):
        raise SingularIntrinsics(f"camera {i}: intrinsics must be 3x3")
    if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
        raise NonUpperTriangular(f"camera {i}: intrinsics not upper-triangular")
    if not (np.diag(K) > 0).all():
        raise SingularIntrinsics(f"camera {i}: intrinsics diagonal must be positive")
    return K


def intrinsics_normalize(t: MeasurementTensor, intrinsics: Sequence):
    """Replace pixel points by ``K_i^-1 (x, y, 1)``, dehomogenized."""
    if len(intrinsics) != t.m:
        raise SingularIntrinsics(f"expected {t.m} intrinsic matrices, got {len(intrinsics)}")
    transforms = []
    new = np.empty_like(t.points)
    for i, K in enumerate(intrinsics):
        K = check_intrinsics(K, i)
        Kinv = np.linalg.inv(K)
        tr = NormalizationTransform(Kinv, K.copy())
        sel = t.cam == i
        new[sel] = tr.apply(t.points[sel])
        transforms.append(tr)
    return t.with_points(new), transforms
