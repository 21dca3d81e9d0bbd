"""Track files, reconstruction export, checkpoints and config loading.

Track file layout (text, ``#`` starts a comment)::

    ESFM-TRACKS 1
    <m> <n> <p> <CALIBRATED|PROJECTIVE>
    K <fx> <fy> <cx> <cy> <skew>          m lines, calibrated only
    O <i> <j> <x> <y>                     p lines, 0-based indices
    GT <qw> <qx> <qy> <qz> <tx> <ty> <tz> optional, m lines
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .equinet import EquivariantLayerParams, ModelParams
from .errors import (
    CorruptCheckpoint,
    CountMismatch,
    DataError,
    HeaderMismatch,
    ParseError,
    ShapeMismatch,
    VersionMismatch,
)
from .geometry import CALIBRATED, MODES, PROJECTIVE, CameraSet
from .measurements import build_measurements, Observation
from .optim import AdamState
from .synth import Scene

TRACKS_TAG = "ESFM-TRACKS"
TRACKS_VERSION = 1
CKPT_MAGIC = b"ESFMCKPT"
CKPT_VERSION = 1


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# tracks

def _lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield no, line.split()


def _reals(no, fields, count):
    if len(fields) != count:
        raise ParseError(no, f"expected {count} values, got {len(fields)}")
    try:
        vals = [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(no, str(exc)) from None
    if not all(np.isfinite(vals)):
        raise ParseError(no, "non-finite value")
    return vals


def _ints(no, fields):
    try:
        return [int(f) for f in fields]
    except ValueError as exc:
        raise ParseError(no, str(exc)) from None


def read_tracks(path) -> Scene:
    """Parse a track file into a ``Scene`` (tensor, intrinsics, GT cameras)."""
    lines = list(_lines(path))
    if not lines:
        raise HeaderMismatch(f"{path}: empty file")
    no, head = lines[0]
    if len(head) != 2 or head[0] != TRACKS_TAG:
        raise HeaderMismatch(f"line {no}: expected '{TRACKS_TAG} {TRACKS_VERSION}'")
    if head[1] != str(TRACKS_VERSION):
        raise VersionMismatch(f"line {no}: unsupported version {head[1]}")
    if len(lines) < 2:
        raise HeaderMismatch("missing size line")
    no, size = lines[1]
    if len(size) != 4:
        raise ParseError(no, "expected '<m> <n> <p> <mode>'")
    m, n, p = _ints(no, size[:3])
    if min(m, n, p) < 0:
        raise ParseError(no, "negative size")
    mode = size[3].lower()
    if mode not in MODES:
        raise ParseError(no, f"unknown mode {size[3]!r}")

    Ks, obs, gts = [], [], []
    for no, f in lines[2:]:
        tag = f[0]
        if tag == "K":
            if obs or gts:
                raise ParseError(no, "K lines must precede observations")
            fx, fy, cx, cy, s = _reals(no, f[1:], 5)
            Ks.append(np.array([[fx, s, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))
        elif tag == "O":
            if gts:
                raise ParseError(no, "O lines must precede GT lines")
            if len(f) != 5:
                raise ParseError(no, "expected 'O <i> <j> <x> <y>'")
            i, j = _ints(no, f[1:3])
            x, y = _reals(no, f[3:], 2)
            if not (0 <= i < m and 0 <= j < n):
                raise ParseError(no, f"index ({i}, {j}) outside {m} x {n}")
            obs.append(Observation(i, j, x, y))
        elif tag == "GT":
            gts.append(_reals(no, f[1:], 7))
        else:
            raise ParseError(no, f"unknown record {tag!r}")

    if mode == CALIBRATED and len(Ks) != m:
        raise CountMismatch(f"{len(Ks)} K lines for {m} cameras")
    if mode == PROJECTIVE and Ks:
        raise HeaderMismatch("projective files carry no K lines")
    if len(obs) != p:
        raise CountMismatch(f"header declares p={p}, found {len(obs)} observations")
    if gts and len(gts) != m:
        raise CountMismatch(f"{len(gts)} GT lines for {m} cameras")
    tensor = build_measurements(obs, m, n)
    gt = None
    if gts:
        g = np.array(gts)
        gt = CameraSet.from_poses(g[:, :4], g[:, 4:])
    return Scene(tensor, mode, Ks or None, gt, None, np.array(gts) if gts else None)


def write_tracks(scene: Scene, path) -> None:
    t = scene.tensor
    out = [f"{TRACKS_TAG} {TRACKS_VERSION}", f"{t.m} {t.n} {t.p} {scene.mode.upper()}"]
    if scene.mode == CALIBRATED:
        if scene.intrinsics is None or len(scene.intrinsics) != t.m:
            raise DataError("calibrated scenes need one intrinsics matrix per camera")
        for K in scene.intrinsics:
            out.append("K " + " ".join(_fmt(v) for v in (K[0, 0], K[1, 1], K[0, 2], K[1, 2], K[0, 1])))
    for i, j, (x, y) in zip(t.cam, t.track, t.points):
        out.append(f"O {i} {j} {_fmt(x)} {_fmt(y)}")
    poses = scene.gt_poses
    if poses is None and scene.gt_cameras is not None:
        poses = np.concatenate([scene.gt_cameras.quaternions(), scene.gt_cameras.translations], axis=1)
    if poses is not None:
        for row in poses:
            out.append("GT " + " ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# PLY export

def write_ply(points, cams: Optional[CameraSet], path) -> None:
    """ASCII PLY: points in white, camera centers in red."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = cams.centers() if cams is not None else np.zeros((0, 3))
    if not (np.isfinite(pts).all() and np.isfinite(centers).all()):
        raise DataError("cannot export non-finite coordinates")
    rows = [(p, (255, 255, 255)) for p in pts] + [(c, (255, 0, 0)) for c in centers]
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(rows)}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    body = [" ".join(_fmt(v) for v in p) + " %d %d %d" % c for p, c in rows]
    Path(path).write_text("\n".join(header + body) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic | u32 version | u64 header length | JSON header | float64
# arrays in header order | sha256 of everything before it

def _arrays(params: ModelParams, adam: Optional[AdamState]):
    arrays = list(params.items())
    if adam is not None:
        for name in params.names():
            if name in adam.m:
                arrays.append((f"adam.m.{name}", adam.m[name]))
                arrays.append((f"adam.v.{name}", adam.v[name]))
    return arrays


def save_checkpoint(params: ModelParams, path, adam: Optional[AdamState] = None,
                    seed: Optional[int] = None) -> None:
    arrays = _arrays(params, adam)
    header = {
        "mode": params.mode,
        "std_normalize": params.std_normalize,
        "widths": params.widths,
        "seed": seed,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hdr)) + hdr
    blob += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    Path(path).write_bytes(blob + hashlib.sha256(blob).digest())


def read_checkpoint_header(path) -> dict:
    return _decode(Path(path).read_bytes())[0]


def _decode(data: bytes):
    if len(data) < len(CKPT_MAGIC) + 12 + 32 or not data.startswith(CKPT_MAGIC):
        raise CorruptCheckpoint("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", body, off)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off += 12
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CorruptCheckpoint(f"bad header: {exc}") from None
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) * 8
        if off + size > len(body):
            raise CorruptCheckpoint("array data shorter than the shape table")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    if off != len(body):
        raise CorruptCheckpoint("trailing bytes after array data")
    return header, arrays


def load_checkpoint(path, expect_widths: Optional[dict] = None, expect_mode: Optional[str] = None):
    """Returns ``(params, adam_state_or_None, header)``.

    ``expect_widths`` / ``expect_mode`` reject checkpoints from a different
    architecture before any array is used.
    """
    header, arrays = _decode(Path(path).read_bytes())
    widths = header["widths"]
    if expect_widths is not None:
        for key, want in expect_widths.items():
            if list(widths.get(key, [])) != list(want):
                raise ShapeMismatch(f"checkpoint {key} widths {widths.get(key)} != expected {list(want)}")
    if expect_mode is not None and header["mode"] != expect_mode:
        raise ShapeMismatch(f"checkpoint mode {header['mode']} != expected {expect_mode}")
    try:
        enc = []
        k = 0
        while f"encoder.{k}.W1" in arrays:
            enc.append(EquivariantLayerParams(*(arrays[f"encoder.{k}.{w}"]
                                                for w in ("W1", "W2", "W3", "W4", "b"))))
            k += 1

        def head(name):
            out, k = [], 0
            while f"{name}.{k}.W" in arrays:
                out.append((arrays[f"{name}.{k}.W"], arrays[f"{name}.{k}.b"]))
                k += 1
            return out

        params = ModelParams(enc, head("cam_head"), head("pt_head"), header["mode"],
                             bool(header["std_normalize"]))
    except KeyError as exc:
        raise CorruptCheckpoint(f"missing array {exc}") from None
    if params.widths != {k: list(v) for k, v in widths.items()}:
        raise ShapeMismatch("array shapes disagree with the declared widths")
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        for name in params.names():
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"]
                adam.v[name] = arrays[f"adam.v.{name}"]
    return params, adam, header


# ---------------------------------------------------------------------------
# config

def load_config(path) -> dict:
    """JSON config file as a dict (empty file gives ``{}``)."""
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return {}
    try:
        cfg = json.loads(text)
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return cfg
