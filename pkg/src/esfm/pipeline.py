"""End-to-end reconstruction: normalize, optimize, triangulate, adjust, score."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional


from .ba import BAConfig, BAResult, run_bundle_adjustment
from .equinet import ModelParams
from .errors import DataError, ModeMismatch
from .geometry import CALIBRATED, MODES, Metrics, evaluate_metrics
from .measurements import hartley_normalize, intrinsics_normalize
from .optim import SceneFit, TrainConfig, fine_tune, optimize_single_scene, sequential_schedule
from .synth import Scene


@dataclass
class PreparedScene:
    scene: Scene
    mode: str
    tensor: object
    transforms: list


def prepare(scene: Scene, mode: Optional[str] = None) -> PreparedScene:
    """Normalized tensor for the chosen setting: ``K^-1`` for calibrated
    cameras, per-image Hartley normalization for projective ones."""
    mode = mode or scene.mode
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}")
    if mode == CALIBRATED:
        if scene.intrinsics is None:
            raise ModeMismatch("calibrated reconstruction needs intrinsics")
        t, tr = intrinsics_normalize(scene.tensor, scene.intrinsics)
    else:
        t, tr = hartley_normalize(scene.tensor)
    return PreparedScene(scene, mode, t, tr)


@dataclass
class Reconstruction:
    fit: SceneFit
    before_ba: Metrics
    after_ba: Optional[Metrics]
    ba: Optional[BAResult]
    timings: dict = field(default_factory=dict)

    @property
    def cameras(self):
        return self.ba.cameras if self.ba is not None else self.fit.cameras

    @property
    def points(self):
        return self.ba.points if self.ba is not None else self.fit.points


def _gt(prep: PreparedScene):
    # ground truth lives in the K^-1 frame, so it only scores calibrated runs
    return prep.scene.gt_cameras if prep.mode == CALIBRATED else None


def finalize(prep: PreparedScene, fit: SceneFit, run_ba: bool = True,
             ba_cfg: Optional[BAConfig] = None, timings: Optional[dict] = None) -> Reconstruction:
    timings = {} if timings is None else timings
    gt = _gt(prep)
    before = evaluate_metrics(fit.cameras, fit.points, gt, prep.tensor, prep.transforms)
    ba = after = None
    if run_ba:
        t0 = time.perf_counter()
        ba = run_bundle_adjustment(fit.cameras, fit.points, prep.tensor, ba_cfg)
        timings["bundle_adjustment"] = time.perf_counter() - t0
        after = evaluate_metrics(ba.cameras, ba.points, gt, prep.tensor, prep.transforms)
    return Reconstruction(fit, before, after, ba, timings)


def reconstruct(prep: PreparedScene, cfg: TrainConfig, seed: Optional[int] = None,
                sequential: bool = False, run_ba: bool = True,
                ba_cfg: Optional[BAConfig] = None) -> Reconstruction:
    if cfg.mode != prep.mode:
        raise ModeMismatch(f"config mode {cfg.mode} != scene mode {prep.mode}")
    t0 = time.perf_counter()
    if sequential:
        fit = sequential_schedule(prep.tensor, cfg, seed)
    else:
        fit = optimize_single_scene(prep.tensor, cfg, seed)
    timings = {"optimize": time.perf_counter() - t0}
    return finalize(prep, fit, run_ba, ba_cfg, timings)


def refine(prep: PreparedScene, params: ModelParams, epochs: int, cfg: TrainConfig,
           run_ba: bool = True, ba_cfg: Optional[BAConfig] = None) -> Reconstruction:
    """Fine-tune a trained model on one scene, then finish as ``reconstruct``."""
    t0 = time.perf_counter()
    fit = fine_tune(params, prep.tensor, epochs, cfg, prep.mode)
    timings = {"fine_tune": time.perf_counter() - t0}
    return finalize(prep, fit, run_ba, ba_cfg, timings)
