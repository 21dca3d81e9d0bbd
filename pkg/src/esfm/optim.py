"""Adam, single-scene optimization, multi-scene training, fine-tuning and the
greedy sequential schedule."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import backward
from .equinet import ModelParams, init_params, model_forward
from .errors import DisconnectedScene, EmptyCamera, EmptySubset, ModeMismatch, NonFiniteLoss, ShapeMismatch
from .geometry import CALIBRATED, CameraSet, triangulate_tracks
from .loss import DEFAULT_H, attach_loss, compute_loss
from .measurements import MeasurementTensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20000
    lr: float = 1e-3
    h: float = DEFAULT_H
    mode: str = CALIBRATED
    encoder_widths: Tuple[int, ...] = (256, 256, 256)
    head_widths: Tuple[int, ...] = (256,)
    std_normalize: bool = False
    normalize_projection_grads: bool = True
    global_normalize: bool = True
    subset_range: Tuple[int, int] = (10, 20)
    val_period: int = 100
    patience: Optional[int] = None
    stage_epochs: int = 500
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("encoder_widths", "head_widths", "subset_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ModelParams, grads: Dict[str, np.ndarray],
              global_normalize: bool = True):
    """One bias-corrected Adam update, applied to ``params`` in place.

    With ``global_normalize`` the whole gradient is first scaled to unit
    l2 norm. Returns ``(params, state)``.
    """
    names = params.names()
    if set(grads) != set(names):
        raise ShapeMismatch("gradient names do not match the parameters")
    for name in names:
        if grads[name].shape != params[name].shape:
            raise ShapeMismatch(f"{name}: gradient shape {grads[name].shape} "
                                f"!= parameter shape {params[name].shape}")
    scale = 1.0
    if global_normalize:
        norm = np.sqrt(sum(float((grads[k] ** 2).sum()) for k in names))
        scale = 1.0 / (norm + 1e-8)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    k1 = (1.0 - b1) * scale
    k2 = (1.0 - b2) * scale * scale
    step = state.lr / c1
    for name in names:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        tmp = np.multiply(g, k1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= k2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        params[name][...] -= tmp
    return params, state


@dataclass
class SceneFit:
    params: ModelParams
    cameras: CameraSet
    points: np.ndarray
    network_points: np.ndarray
    history: List[float]
    best_loss: float
    failed_tracks: List[int] = field(default_factory=list)
    adam: Optional[AdamState] = None

    @property
    def best_history(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.history)) if self.history else np.array([])


def loss_and_grads(params: ModelParams, t: MeasurementTensor, cfg: TrainConfig):
    fwd = model_forward(params, t)
    loss = float(attach_loss(fwd.tape, t, cfg.h).value)
    if not np.isfinite(loss):
        return loss, None
    return loss, backward(fwd.tape, cfg.normalize_projection_grads)


def _descend(params, t, epochs, cfg, state, history, best, stage="optimize"):
    """Run ``epochs`` full-tensor Adam steps; ``best`` is ``[loss, params]``."""
    for _ in range(epochs):
        loss, grads = loss_and_grads(params, t, cfg)
        if grads is None:
            raise NonFiniteLoss(len(history), loss, stage)
        history.append(loss)
        if best is not None and loss < best[0]:
            best[0], best[1] = loss, params.copy()
        adam_step(state, params, grads, cfg.global_normalize)
    return params


def finish(params: ModelParams, t: MeasurementTensor, cfg: TrainConfig, history, adam=None) -> SceneFit:
    """Cameras from the model, points by triangulation with those cameras."""
    cams, net_pts = model_forward(params, t, record=False)
    pts, failed = triangulate_tracks(cams.matrices, t, fallback=net_pts)
    best = min(history) if history else compute_loss(cams, net_pts, t, cfg.h).total
    return SceneFit(params, cams, pts, net_pts, list(history), best, failed, adam)


def _fresh(cfg: TrainConfig, seed) -> ModelParams:
    return init_params(cfg.mode, cfg.encoder_widths, cfg.head_widths,
                       cfg.seed if seed is None else seed, cfg.std_normalize)


def optimize_single_scene(t: MeasurementTensor, cfg: TrainConfig, seed: Optional[int] = None,
                          params: Optional[ModelParams] = None, epochs: Optional[int] = None) -> SceneFit:
    """Fit a randomly initialized network to one scene; keeps the best epoch."""
    params = _fresh(cfg, seed) if params is None else params.copy()
    epochs = cfg.epochs if epochs is None else epochs
    state = AdamState(lr=cfg.lr)
    history: List[float] = []
    best = [np.inf, params.copy()]
    _descend(params, t, epochs, cfg, state, history, best)
    return finish(best[1] if history else params, t, cfg, history, state)


def fine_tune(params: ModelParams, t: MeasurementTensor, epochs: int = 500,
              cfg: Optional[TrainConfig] = None, mode: Optional[str] = None) -> SceneFit:
    cfg = cfg or TrainConfig(mode=params.mode)
    if (mode or cfg.mode) != params.mode:
        raise ModeMismatch(f"model is {params.mode}, scene is {mode or cfg.mode}")
    return optimize_single_scene(t, cfg, params=params, epochs=epochs)


# ---------------------------------------------------------------------------
# learning from several scenes

def _tensor(scene) -> MeasurementTensor:
    return getattr(scene, "tensor", scene)


def sample_subset(t: MeasurementTensor, rng, subset_range=(10, 20), attempts: int = 100):
    """Random image subset of size uniform in ``[lo, min(hi, m)]``, restricted
    to tracks still seen twice. Returns ``(tensor, camera_ids, track_ids)``."""
    lo, hi = subset_range
    hi = min(hi, t.m)
    lo = max(2, min(lo, hi))
    for _ in range(attempts):
        k = int(rng.integers(lo, hi + 1))
        cams = np.sort(rng.choice(t.m, size=k, replace=False))
        try:
            return t.restrict(cams)
        except (EmptyCamera, EmptySubset):
            continue
        except Exception as exc:  # IndexOutOfRange when no track survives
            log.debug("subset rejected: %s", exc)
            continue
    raise EmptySubset(f"no valid image subset after {attempts} attempts")


def validation_error(params: ModelParams, scenes, h: float) -> float:
    """Unweighted mean over scenes of the full-scene loss."""
    vals = []
    for s in scenes:
        t = _tensor(s)
        cams, pts = model_forward(params, t, record=False)
        vals.append(compute_loss(cams, pts, t, h).total)
    return float(np.mean(vals))


def train_multi_scene(train: Sequence, val: Sequence, cfg: TrainConfig,
                      params: Optional[ModelParams] = None,
                      history: Optional[list] = None) -> ModelParams:
    """Alternate over training scenes on random image subsets; return the
    parameters with the best validation error (early stopping).

    ``history``, if given, receives ``(epoch, validation_error)`` records.
    """
    if not train or not val:
        raise ValueError("need at least one training and one validation scene")
    modes = {getattr(s, "mode", cfg.mode) for s in list(train) + list(val)}
    if len(modes) > 1 or cfg.mode not in modes:
        raise ModeMismatch(f"scenes mix modes {sorted(modes)} (config: {cfg.mode})")
    rng = np.random.default_rng(cfg.seed)
    params = _fresh(cfg, None) if params is None else params.copy()
    state = AdamState(lr=cfg.lr)
    history = [] if history is None else history

    best_val = validation_error(params, val, cfg.h)
    best = params.copy()
    history.append((0, best_val))
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        for k in rng.permutation(len(train)):
            sub, _, _ = sample_subset(_tensor(train[k]), rng, cfg.subset_range)
            loss, grads = loss_and_grads(params, sub, cfg)
            if grads is None:
                raise NonFiniteLoss(epoch, loss, "train")
            adam_step(state, params, grads, cfg.global_normalize)
        if epoch % cfg.val_period == 0 or epoch == cfg.epochs:
            err = validation_error(params, val, cfg.h)
            history.append((epoch, err))
            if err < best_val:
                best_val, best, since_best = err, params.copy(), 0
            else:
                since_best += 1
                if cfg.patience is not None and since_best >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    return best


# ---------------------------------------------------------------------------
# sequential schedule

def greedy_image_order(t: MeasurementTensor) -> List[int]:
    """Start from the pair sharing most tracks, then repeatedly add the image
    sharing most tracks with those already chosen (lowest index on ties)."""
    if t.m < 2:
        raise DisconnectedScene("need at least two images")
    vis = t.visibility().astype(np.int64)
    shared = vis @ vis.T
    np.fill_diagonal(shared, -1)
    flat = int(np.argmax(shared))  # row-major argmax gives the lowest (i, j)
    i, j = divmod(flat, t.m)
    order = [min(i, j), max(i, j)]
    if shared[i, j] <= 0:
        raise DisconnectedScene("no two images share a track")
    seen = vis[order].any(0)
    remaining = [k for k in range(t.m) if k not in order]
    while remaining:
        counts = [(int((vis[k].astype(bool) & seen).sum()), -k) for k in remaining]
        c, neg = max(counts)
        if c == 0:
            raise DisconnectedScene(f"images {sorted(remaining)} share no tracks with the rest")
        k = -neg
        order.append(k)
        remaining.remove(k)
        seen |= vis[k].astype(bool)
    return order


def sequential_schedule(t: MeasurementTensor, cfg: TrainConfig, seed: Optional[int] = None) -> SceneFit:
    """Grow the optimized image set one image per ``cfg.stage_epochs`` epochs
    along the greedy order, then optimize the full scene for the rest of the
    ``cfg.epochs`` budget (at least one more stage)."""
    order = greedy_image_order(t)
    params = _fresh(cfg, seed)
    state = AdamState(lr=cfg.lr)
    staged: List[float] = []
    for k in range(2, t.m):
        sub, _, _ = t.restrict(order[:k])
        _descend(params, sub, cfg.stage_epochs, cfg, state, staged, None, "sequential")
    remaining = max(cfg.epochs - len(staged), cfg.stage_epochs)
    history: List[float] = []
    best = [np.inf, params.copy()]
    _descend(params, t, remaining, cfg, state, history, best, "sequential")
    fit = finish(best[1], t, cfg, history, state)
    fit.history = staged + history
    return fit


# ---------------------------------------------------------------------------
# gradient check at a smooth point

def smooth_gradient_check(seed: int = 0, mode: str = CALIBRATED, width: int = 16,
                          warmup: int = 3000, attempts: int = 5, epsilon: float = 1e-6,
                          n_samples: int = 200) -> Tuple[float, dict]:
    """Finite-difference check of a width-``width`` model on a 4-camera,
    6-track scene.

    At random initialization many depths sit below the hinge threshold,
    where the loss has a kink. The model is first trained with Adam
    until every depth is clear of it, then checked. A point still too close
    to a kink moves on to the next seed offset. Returns
    ``(max_relative_error, info)``.
    """
    from .autograd import finite_diff_check
    from .errors import NonSmoothPoint
    from .synth import tiny_scene

    cfg = TrainConfig(mode=mode, encoder_widths=(width,) * 3, head_widths=(width,), lr=1e-3)
    margin = cfg.h + 100 * epsilon
    last = None
    for k in range(attempts):
        s = seed + 1000 * k
        t = tiny_scene(s)
        params = init_params(mode, cfg.encoder_widths, cfg.head_widths, s)
        state = AdamState(lr=cfg.lr)
        for epoch in range(warmup + 1):
            cams, pts = model_forward(params, t, record=False)
            pc = np.einsum("kab,kb->ka", cams.matrices[t.cam][:, :, :3], pts[t.track]) \
                + cams.matrices[t.cam][:, :, 3]
            if (pc[:, 2] > margin).all():
                break
            _, grads = loss_and_grads(params, t, cfg)
            adam_step(state, params, grads, cfg.global_normalize)
        else:
            last = f"seed {s}: depths still below threshold after {warmup} epochs"
            continue
        try:
            err = finite_diff_check(params, t, epsilon, cfg.h, n_samples, seed=s)
        except NonSmoothPoint as exc:
            last = f"seed {s}: {exc}"
            continue
        return err, {"seed": s, "warmup_epochs": epoch, "mode": mode}
    raise NonSmoothPoint(f"no smooth point found ({last})")
