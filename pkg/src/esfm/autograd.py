"""Minimal reverse-mode differentiation over a recorded tape of array ops.

The tape is a Wengert list: each node stores the primitive name, its input
variables and static attributes, so it can be replayed forward or walked
backward. Only the primitives needed by the network, the camera
construction and the loss are provided.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .errors import IncompleteTape, NonSmoothPoint

PROJECTION_GRAD_EPS = 1e-8


class Var:
    __slots__ = ("value", "node", "name")

    def __init__(self, value, node=None, name=None):
        self.value = value
        self.node = node
        self.name = name

    @property
    def shape(self):
        return self.value.shape


class Node:
    __slots__ = ("op", "inputs", "attrs", "output")

    def __init__(self, op, inputs, attrs):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.output = None


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: Dict[str, Var] = {}
        self.outputs: Dict[str, Var] = {}
        self.loss: Optional[Var] = None

    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(value, name=name)
        self.params[name] = v
        return v

    def constant(self, value) -> Var:
        return Var(np.asarray(value))

    def apply(self, opname: str, *inputs: Var, **attrs) -> Var:
        node = Node(opname, inputs, attrs)
        fwd = OPS[opname][0]
        node.output = Var(fwd(*[v.value for v in inputs], **attrs), node)
        self.nodes.append(node)
        return node.output

    def replay(self) -> list:
        """Re-run every node from the current leaf values; returns the outputs."""
        fresh = {}
        outs = []
        for node in self.nodes:
            vals = [fresh.get(id(v), v.value) for v in node.inputs]
            out = OPS[node.op][0](*vals, **node.attrs)
            fresh[id(node.output)] = out
            outs.append(out)
        return outs


def _needs_grad(v: Var) -> bool:
    return v.node is not None or v.name is not None


def backward(tape: Tape, normalize_projection_grads: bool = True,
             inspect: Optional[Callable] = None) -> Dict[str, np.ndarray]:
    """Gradient of ``tape.loss`` with respect to every tape parameter.

    With ``normalize_projection_grads`` the adjoint of each projected
    homogeneous point ``P_i (X_j, 1)`` is rescaled to unit length before it
    propagates further. ``inspect(node, adjoint)`` is called for every node
    reached, after any rescaling.
    """
    loss = tape.loss
    if loss is None or loss.node is None or not tape.nodes or tape.nodes[-1] is not loss.node:
        raise IncompleteTape("tape has no loss reduction as its last node")
    if np.size(loss.value) != 1:
        raise IncompleteTape("loss must be a scalar")
    adj: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        if normalize_projection_grads and node.op == "project":
            g = g / (np.linalg.norm(g, axis=-1, keepdims=True) + PROJECTION_GRAD_EPS)
        if inspect is not None:
            inspect(node, g)
        vals = [v.value for v in node.inputs]
        grads = OPS[node.op][1](g, node.output.value, *vals, **node.attrs)
        for v, gv in zip(node.inputs, grads):
            if gv is None or not _needs_grad(v):
                continue
            key = id(v)
            if key in adj:
                adj[key] = adj[key] + gv
            else:
                adj[key] = gv
    return {name: adj.get(id(v), np.zeros_like(v.value)) for name, v in tape.params.items()}


# ---------------------------------------------------------------------------
# primitives: name -> (forward(*vals, **attrs), backward(g, out, *vals, **attrs))

def _affine_f(x, W, b):
    return x @ W.T + b


def _affine_b(g, out, x, W, b):
    return g @ W, g.T @ x, g.sum(0)


def _equi_f(x, W1, W2, W3, W4, b, t):
    out = x @ W1.T
    out += ((t.track_mean_op @ x) @ W2.T)[t.track]
    out += ((t.cam_mean_op @ x) @ W3.T)[t.cam]
    out += x.mean(axis=0) @ W4.T + b
    return out


def _equi_b(g, out, x, W1, W2, W3, W4, b, t):
    # mean_op.T @ y == (y / counts)[index]
    col = t.track_mean_op @ x
    row = t.cam_mean_op @ x
    gcol = t.track_incidence @ g
    grow = t.cam_incidence @ g
    gsum = g.sum(axis=0)
    gx = g @ W1
    gx += ((gcol @ W2) / t.track_counts[:, None])[t.track]
    gx += ((grow @ W3) / t.camera_counts[:, None])[t.cam]
    gx += (gsum @ W4) / len(x)
    return (gx, g.T @ x, gcol.T @ col, grow.T @ row,
            np.outer(gsum, x.mean(axis=0)), gsum)


def _matmul_f(x, W):
    return x @ W.T


def _matmul_b(g, out, x, W):
    return g @ W, g.T @ x


def _segmean_f(x, op):
    return op @ x


def _segmean_b(g, out, x, op):
    return (op.T @ g,)


def _gather_f(x, index, incidence):
    return x[index]


def _gather_b(g, out, x, index, incidence):
    return ((incidence @ g.reshape(len(g), -1)).reshape(x.shape),)


def _gmean_f(x):
    return x.mean(axis=0, keepdims=True)


def _gmean_b(g, out, x):
    return (np.broadcast_to(g / len(x), x.shape).copy(),)


def _sum_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True).reshape(shape)


def _add_f(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


def _add_b(g, out, *xs):
    return tuple(_sum_to(g, x.shape) for x in xs)


def _center_f(x):
    out = x - x.mean(axis=0)
    return out


def _center_b(g, out, x):
    return (g - g.mean(axis=0, keepdims=True),)


STD_EPS = 1e-8


def _stdscale_f(x):
    sd = np.sqrt((x * x).mean(axis=0, keepdims=True))
    return x / (sd + STD_EPS)


def _stdscale_b(g, out, x):
    n = len(x)
    sd = np.sqrt((x * x).mean(axis=0, keepdims=True))
    inv = 1.0 / (sd + STD_EPS)
    dsd = np.where(sd > 0, (g * x).sum(0, keepdims=True) / (n * np.where(sd > 0, sd, 1.0)), 0.0)
    return (g * inv - x * dsd * inv * inv,)


def _relu_f(x):
    return np.maximum(x, 0.0)


def _relu_b(g, out, x):
    return (g * (x > 0),)


def _cols_f(x, start, stop):
    return x[:, start:stop]


def _cols_b(g, out, x, start, stop):
    gx = np.zeros_like(x)
    gx[:, start:stop] = g
    return (gx,)


def _reshape_f(x, shape):
    return x.reshape(shape)


def _reshape_b(g, out, x, shape):
    return (g.reshape(x.shape),)


QUAT_EPS = 1e-12


def _qnorm_f(v):
    return v / (np.linalg.norm(v, axis=1, keepdims=True) + QUAT_EPS)


def _qnorm_b(g, out, v):
    n = np.linalg.norm(v, axis=1, keepdims=True)
    d = n + QUAT_EPS
    vg = (v * g).sum(1, keepdims=True)
    return (g / d - v * vg / (d * d * np.where(n > 0, n, 1.0)),)


def _qrot_f(q):
    from .geometry import unit_quat_to_rotation
    return unit_quat_to_rotation(q)


def _qrot_b(g, out, q):
    from .geometry import unit_quat_rotation_jacobian
    J = unit_quat_rotation_jacobian(q)
    return (np.einsum("kab,kabc->kc", g, J),)


def _pose_f(R, t):
    return np.concatenate([R, t[:, :, None]], axis=2)


def _pose_b(g, out, R, t):
    return g[:, :, :3], g[:, :, 3]


def _camnorm_f(P):
    det = np.linalg.det(P[:, :, :3])
    row = np.linalg.norm(P[:, 2, :3], axis=1)
    return P * (np.sign(det) / row)[:, None, None]


def _camnorm_b(g, out, P):
    # the determinant sign is locally constant
    det = np.linalg.det(P[:, :, :3])
    row = np.linalg.norm(P[:, 2, :3], axis=1)
    sg = np.sign(det)
    gP = g * (sg / row)[:, None, None]
    c = -(g * P).sum(axis=(1, 2)) * sg / row ** 3
    gP[:, 2, :3] += c[:, None] * P[:, 2, :3]
    return (gP,)


def _project_f(P, X, cam, track, cam_inc, track_inc):
    Pk = P[cam]
    return np.einsum("kab,kb->ka", Pk[:, :, :3], X[track]) + Pk[:, :, 3]


def _project_b(g, out, P, X, cam, track, cam_inc, track_inc):
    Xh = np.concatenate([X[track], np.ones((len(track), 1))], axis=1)
    gPk = g[:, :, None] * Xh[:, None, :]
    gP = (cam_inc @ gPk.reshape(len(g), 12)).reshape(P.shape)
    gXk = np.einsum("kab,ka->kb", P[cam][:, :, :3], g)
    gX = track_inc @ gXk
    return gP, gX


def residual_terms(u, obs, h):
    """Per-measurement ``s`` and the reprojection-branch mask."""
    depth = u[:, 2]
    reproj = depth >= h
    safe = np.where(reproj, depth, 1.0)
    r = obs - u[:, :2] / safe[:, None]
    s = np.where(reproj, np.linalg.norm(r, axis=1), h - depth)
    return s, reproj, r


def _residual_f(u, obs, h):
    return residual_terms(u, obs, h)[0]


def _residual_b(g, out, u, obs, h):
    s, reproj, r = residual_terms(u, obs, h)
    depth = np.where(reproj, u[:, 2], 1.0)
    nz = reproj & (s > 0)
    unit = np.where(nz[:, None], r / np.where(nz, s, 1.0)[:, None], 0.0)
    gu = np.zeros_like(u)
    gu[:, :2] = -unit / depth[:, None]
    gu[:, 2] = np.where(reproj, (unit * u[:, :2]).sum(1) / depth ** 2, -1.0)
    return (gu * g[:, None],)


def _mean_f(s):
    return np.asarray(s.sum() / len(s))


def _mean_b(g, out, s):
    return (np.full_like(s, g / len(s)),)


OPS = {
    "affine": (_affine_f, _affine_b),
    "equivariant_affine": (_equi_f, _equi_b),
    "matmul": (_matmul_f, _matmul_b),
    "segment_mean": (_segmean_f, _segmean_b),
    "gather": (_gather_f, _gather_b),
    "global_mean": (_gmean_f, _gmean_b),
    "add": (_add_f, _add_b),
    "center": (_center_f, _center_b),
    "std_scale": (_stdscale_f, _stdscale_b),
    "relu": (_relu_f, _relu_b),
    "columns": (_cols_f, _cols_b),
    "reshape": (_reshape_f, _reshape_b),
    "quat_normalize": (_qnorm_f, _qnorm_b),
    "quat_rotation": (_qrot_f, _qrot_b),
    "pose": (_pose_f, _pose_b),
    "camera_normalize": (_camnorm_f, _camnorm_b),
    "project": (_project_f, _project_b),
    "residual": (_residual_f, _residual_b),
    "mean": (_mean_f, _mean_b),
}


def finite_diff_check(params, t, epsilon: float = 1e-6, h: float = 1e-4,
                      n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between ``backward`` and central differences.

    Gradient normalization is off here: it is not a true gradient. Raises
    ``NonSmoothPoint`` if a depth or ReLU pre-activation sits within
    ``10 * epsilon`` of its kink.

    The encoder's global-mean weights and biases are not sampled: they only
    shift each channel by a constant that the mean subtraction removes, so
    their true gradient is zero and the quotient would measure rounding
    noise alone (see ``ModelParams.inert_names``).
    """
    from .equinet import model_forward
    from .loss import attach_loss, compute_loss

    fwd = model_forward(params, t)
    attach_loss(fwd.tape, t, h)
    margin = 10 * epsilon
    for node in fwd.tape.nodes:
        if node.op == "relu" and (np.abs(node.inputs[0].value) < margin).any():
            raise NonSmoothPoint("ReLU pre-activation near zero")
        if node.op == "residual":
            depth = node.inputs[0].value[:, 2]
            if (depth <= h + margin).any():
                raise NonSmoothPoint("a depth is at or below the hinge threshold")
    grads = backward(fwd.tape, normalize_projection_grads=False)

    inert = set(params.inert_names())
    names = [name for name in params.names() if name not in inert]
    sizes = np.array([params[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)

    def loss_at(p):
        cams, pts = model_forward(p, t, record=False)
        return compute_loss(cams, pts, t, h).total

    worst = 0.0
    for flat in sorted(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        base = params[name].reshape(-1)[idx]
        plus, minus = params.copy(), params.copy()
        plus[name].reshape(-1)[idx] = base + epsilon
        minus[name].reshape(-1)[idx] = base - epsilon
        numeric = (loss_at(plus) - loss_at(minus)) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[idx]
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
