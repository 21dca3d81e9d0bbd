"""Permutation-equivariant encoder over sparse track tensors and its heads.

Each encoder layer combines four shared linear maps of the entry itself,
its column mean, its row mean and the global mean, where means run over
observed entries only. Camera and point heads are per-row MLPs applied to
masked row / column averages of the encoder output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .autograd import Tape, Var
from .errors import InvalidWidths, WidthMismatch
from .geometry import CALIBRATED, MODES, PROJECTIVE, CameraSet
from .measurements import MeasurementTensor

CAMERA_WIDTH = {CALIBRATED: 7, PROJECTIVE: 12}


@dataclass
class EquivariantLayerParams:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray
    b: np.ndarray

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W1.shape[0]


@dataclass
class ModelParams:
    encoder: List[EquivariantLayerParams]
    cam_head: List[Tuple[np.ndarray, np.ndarray]]
    pt_head: List[Tuple[np.ndarray, np.ndarray]]
    mode: str = CALIBRATED
    std_normalize: bool = False

    def names(self) -> List[str]:
        out = []
        for k in range(len(self.encoder)):
            out += [f"encoder.{k}.{w}" for w in ("W1", "W2", "W3", "W4", "b")]
        for head in ("cam_head", "pt_head"):
            for k in range(len(getattr(self, head))):
                out += [f"{head}.{k}.W", f"{head}.{k}.b"]
        return out

    def inert_names(self) -> List[str]:
        """Parameters that cannot affect the output.

        Every encoder layer is followed by per-channel mean subtraction,
        which cancels the spatially constant term ``W4 * mean + b``.
        """
        return [f"encoder.{k}.{w}" for k in range(len(self.encoder)) for w in ("W4", "b")]

    def __getitem__(self, name: str) -> np.ndarray:
        part, k, w = name.split(".")
        k = int(k)
        if part == "encoder":
            return getattr(self.encoder[k], w)
        return getattr(self, part)[k][0 if w == "W" else 1]

    def items(self):
        return [(name, self[name]) for name in self.names()]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [EquivariantLayerParams(*(getattr(layer, w).copy() for w in ("W1", "W2", "W3", "W4", "b")))
             for layer in self.encoder],
            [(W.copy(), b.copy()) for W, b in self.cam_head],
            [(W.copy(), b.copy()) for W, b in self.pt_head],
            self.mode, self.std_normalize)

    @property
    def widths(self) -> dict:
        return {
            "encoder": [layer.d_out for layer in self.encoder],
            "cam_head": [W.shape[0] for W, _ in self.cam_head[:-1]],
            "pt_head": [W.shape[0] for W, _ in self.pt_head[:-1]],
        }

    def num_parameters(self) -> int:
        return sum(a.size for _, a in self.items())


def init_params(mode: str = CALIBRATED, encoder_widths: Sequence[int] = (256, 256, 256),
                head_widths: Sequence[int] = (256,), seed: int = 0,
                std_normalize: bool = False) -> ModelParams:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases, from ``seed``.

    ``head_widths`` lists the hidden widths of both heads (one hidden layer
    gives the default two-layer heads).
    """
    if mode not in MODES:
        raise InvalidWidths(f"unknown mode {mode!r}")
    widths = list(encoder_widths) + list(head_widths)
    if not encoder_widths or any(int(w) != w or w <= 0 for w in widths):
        raise InvalidWidths(f"invalid widths {encoder_widths}, {head_widths}")
    rng = np.random.default_rng(seed)

    def weight(d_out, d_in):
        bound = np.sqrt(6.0 / d_in)
        return rng.uniform(-bound, bound, size=(d_out, d_in))

    encoder = []
    d = 2
    for w in encoder_widths:
        Ws = [weight(w, d) for _ in range(4)]
        encoder.append(EquivariantLayerParams(*Ws, np.zeros(w)))
        d = w

    def head(d_out):
        layers, d_in = [], d
        for w in list(head_widths) + [d_out]:
            layers.append((weight(w, d_in), np.zeros(w)))
            d_in = w
        return layers

    return ModelParams(encoder, head(CAMERA_WIDTH[mode]), head(3), mode, std_normalize)


@dataclass
class SparseFeatureMap:
    """Per-observation features following the tensor's sparsity pattern."""

    values: np.ndarray
    tensor: MeasurementTensor

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _layer(tape: Tape, x: Var, W: Sequence[Var], t: MeasurementTensor) -> Var:
    return tape.apply("equivariant_affine", x, *W, t=t)


def _layer_composed(tape: Tape, x: Var, W: Sequence[Var], t: MeasurementTensor) -> Var:
    """The same layer spelled out with the elementary mean / gather ops."""
    W1, W2, W3, W4, b = W
    own = tape.apply("affine", x, W1, b)
    col = tape.apply("matmul", tape.apply("segment_mean", x, op=t.track_mean_op), W2)
    row = tape.apply("matmul", tape.apply("segment_mean", x, op=t.cam_mean_op), W3)
    glob = tape.apply("matmul", tape.apply("global_mean", x), W4)
    return tape.apply(
        "add", own,
        tape.apply("gather", col, index=t.track, incidence=t.track_incidence),
        tape.apply("gather", row, index=t.cam, incidence=t.cam_incidence),
        glob)


def equivariant_layer_forward(params: EquivariantLayerParams, f: SparseFeatureMap) -> SparseFeatureMap:
    if f.width != params.d_in:
        raise WidthMismatch(f"layer expects width {params.d_in}, got {f.width}")
    tape = Tape()
    W = [tape.param(k, getattr(params, k)) for k in ("W1", "W2", "W3", "W4", "b")]
    out = _layer(tape, tape.constant(f.values), W, f.tensor)
    return SparseFeatureMap(out.value, f.tensor)


def _head(tape: Tape, x: Var, name: str, layers) -> Var:
    for k, _ in enumerate(layers):
        x = tape.apply("affine", x, tape.params[f"{name}.{k}.W"], tape.params[f"{name}.{k}.b"])
        if k < len(layers) - 1:
            x = tape.apply("relu", x)
    return x


class ForwardResult(NamedTuple):
    cameras: CameraSet
    points: np.ndarray
    tape: Tape


def model_forward(params: ModelParams, t: MeasurementTensor, record: bool = True):
    """Cameras and points predicted for tensor ``t``.

    Returns a ``ForwardResult`` whose tape holds every intermediate, or just
    ``(cameras, points)`` when ``record`` is False.
    """
    if params.encoder[0].d_in != 2:
        raise WidthMismatch("encoder input width must be 2")
    tape = Tape()
    for name, value in params.items():
        tape.param(name, value)
    x = tape.constant(t.points)
    last = len(params.encoder) - 1
    for k in range(len(params.encoder)):
        W = [tape.params[f"encoder.{k}.{w}"] for w in ("W1", "W2", "W3", "W4", "b")]
        x = _layer(tape, x, W, t)
        x = tape.apply("center", x)
        if params.std_normalize:
            x = tape.apply("std_scale", x)
        if k < last:
            x = tape.apply("relu", x)

    cam_raw = _head(tape, tape.apply("segment_mean", x, op=t.cam_mean_op), "cam_head", params.cam_head)
    pts = _head(tape, tape.apply("segment_mean", x, op=t.track_mean_op), "pt_head", params.pt_head)
    if params.mode == CALIBRATED:
        q = tape.apply("quat_normalize", tape.apply("columns", cam_raw, start=0, stop=4))
        R = tape.apply("quat_rotation", q)
        P = tape.apply("pose", R, tape.apply("columns", cam_raw, start=4, stop=7))
    else:
        P = tape.apply("camera_normalize", tape.apply("reshape", cam_raw, shape=(t.m, 3, 4)))
    tape.outputs.update(cameras=P, points=pts, camera_features=cam_raw)
    cams = CameraSet(P.value, params.mode)
    if not record:
        return cams, pts.value
    return ForwardResult(cams, pts.value, tape)
