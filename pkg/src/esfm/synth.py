"""Synthetic multi-view scenes with known cameras and points."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleConfig
from .geometry import CALIBRATED, MODES, CameraSet
from .measurements import MeasurementTensor, _from_arrays

MAX_ATTEMPTS = 100


@dataclass
class SynthConfig:
    m: int = 10
    n: int = 200
    camera_radius: float = 6.0
    look_at_jitter: float = 0.2
    point_radius: float = 2.0
    visibility: float = 0.7
    noise_px: float = 0.0
    image_size: float = 1000.0
    seed: int = 0
    mode: str = CALIBRATED

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InfeasibleConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    """Pixel-space tracks plus whatever is known about the cameras."""

    tensor: MeasurementTensor
    mode: str = CALIBRATED
    intrinsics: Optional[list] = None
    gt_cameras: Optional[CameraSet] = None
    gt_points: Optional[np.ndarray] = None
    # (qw, qx, qy, qz, tx, ty, tz) rows as read from a file, kept so that
    # rewriting a parsed file reproduces it exactly
    gt_poses: Optional[np.ndarray] = None


def look_at(center, target, rng) -> np.ndarray:
    """World-to-camera rotation whose optical axis points at ``target``."""
    z = target - center
    z /= np.linalg.norm(z)
    up = rng.normal(size=3)
    x = np.cross(up, z)
    while np.linalg.norm(x) < 1e-6:
        x = np.cross(rng.normal(size=3), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _unit(rng, k):
    v = rng.normal(size=(k, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_cameras(rng, m, radius, jitter):
    centers = radius * _unit(rng, m)
    R = np.stack([look_at(c, jitter * rng.normal(size=3), rng) for c in centers])
    t = -np.einsum("kab,kb->ka", R, centers)
    return CameraSet(np.concatenate([R, t[:, :, None]], axis=2), CALIBRATED)


def random_points(rng, n, radius):
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return _unit(rng, n) * r[:, None]


def sample_visibility(rng, m, n, fraction):
    """Bernoulli mask, columns and rows redrawn until every track has two
    views and every camera one track."""
    mask = rng.random((m, n)) < fraction
    for _ in range(MAX_ATTEMPTS):
        short = mask.sum(0) < 2
        empty = mask.sum(1) == 0
        if not short.any() and not empty.any():
            return mask
        mask[:, short] = rng.random((m, int(short.sum()))) < fraction
        if empty.any():
            mask[empty] = rng.random((int(empty.sum()), n)) < fraction
    raise InfeasibleConfig(f"visibility {fraction} cannot give 2 views per track "
                           f"after {MAX_ATTEMPTS} attempts")


def intrinsics_matrix(image_size: float) -> np.ndarray:
    f = float(image_size)
    c = image_size / 2.0
    return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])


def generate_scene(cfg: SynthConfig) -> Scene:
    """Cameras on a sphere around a ball of points, exact (or noisy) pixels."""
    if cfg.m < 2 or cfg.n < 8:
        raise InfeasibleConfig("need m >= 2 and n >= 8")
    if not 0 < cfg.visibility <= 1:
        raise InfeasibleConfig("visibility must lie in (0, 1]")
    if cfg.camera_radius <= cfg.point_radius + cfg.look_at_jitter:
        raise InfeasibleConfig("cameras must lie outside the point cloud")
    if cfg.mode not in MODES:
        raise InfeasibleConfig(f"unknown mode {cfg.mode!r}")
    return _generate(cfg)


def _generate(cfg: SynthConfig) -> Scene:
    rng = np.random.default_rng(cfg.seed)
    cams = random_cameras(rng, cfg.m, cfg.camera_radius, cfg.look_at_jitter)
    pts = random_points(rng, cfg.n, cfg.point_radius)
    mask = sample_visibility(rng, cfg.m, cfg.n, cfg.visibility)
    K = intrinsics_matrix(cfg.image_size)
    cam_idx, track_idx = np.nonzero(mask)
    pc = np.einsum("kab,kb->ka", cams.rotations[cam_idx], pts[track_idx]) + cams.translations[cam_idx]
    if (pc[:, 2] <= 0).any():
        raise InfeasibleConfig("a point landed behind a camera")
    uv = pc[:, :2] / pc[:, 2:3]
    pix = uv * K[0, 0] + K[:2, 2]
    if cfg.noise_px > 0:
        pix = pix + cfg.noise_px * rng.normal(size=pix.shape)
    tensor = _from_arrays(cfg.m, cfg.n, cam_idx, track_idx, pix)
    return Scene(tensor, cfg.mode, [K.copy() for _ in range(cfg.m)], cams, pts)


def tiny_scene(seed: int, m: int = 4, n: int = 6, visibility: float = 0.6,
               noise: float = 0.01) -> MeasurementTensor:
    """Small normalized-coordinate scene whose observations are noisy so no
    residual is exactly zero; used by gradient checks."""
    rng = np.random.default_rng(seed)
    cams = random_cameras(rng, m, 6.0, 0.2)
    pts = random_points(rng, n, 2.0)
    mask = sample_visibility(rng, m, n, visibility)
    ci, tj = np.nonzero(mask)
    pc = np.einsum("kab,kb->ka", cams.rotations[ci], pts[tj]) + cams.translations[ci]
    uv = pc[:, :2] / pc[:, 2:3] + noise * rng.normal(size=(len(ci), 2))
    return _from_arrays(m, n, ci, tj, uv)
