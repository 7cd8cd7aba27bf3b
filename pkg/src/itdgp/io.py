"""Binary rasters, model checkpoints and voxel-matrix archives.

Raster layout (little-endian): ``b"TDGP"``, u16 version, u8 kind, four u32
dims ``X, Y, Z, T`` (``T = 1`` for 3D kinds), three f64 spacings in mm,
then the row-major payload.

Checkpoint layout: ``b"TDGPCKPT"``, u16 version, u32 header length, a UTF-8
JSON header, then every parameter as f64 in the header's declared order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .kernel import ArdRbfKernel
from .model import DgpModel
from .preprocess import VoxelMatrix
from .svgp import SvgpLayer

RASTER_MAGIC = b"TDGP"
RASTER_VERSION = 1
CKPT_MAGIC = b"TDGPCKPT"
CKPT_VERSION = 1

SERIES, LABELS, MASK, PROB = 0, 1, 2, 3
KIND_DTYPES = {SERIES: "<f4", LABELS: "u1", MASK: "u1", PROB: "<f8"}
KIND_NAMES = {SERIES: "series", LABELS: "labels", MASK: "mask", PROB: "prob"}

_RASTER_HEAD = struct.Struct("<4sHB4I3d")
_CKPT_HEAD = struct.Struct("<8sHI")


class FormatError(ValueError):
    """Malformed file contents."""


class VersionError(FormatError):
    """Well-formed file with an unsupported version."""


@dataclass
class Raster:
    kind: int
    data: np.ndarray  # 4D for series, 3D otherwise
    spacing: tuple[float, float, float]


def encode_raster(r: Raster) -> bytes:
    if r.kind not in KIND_DTYPES:
        raise FormatError(f"unknown raster kind {r.kind}")
    data = np.asarray(r.data)
    want = 4 if r.kind == SERIES else 3
    if data.ndim != want:
        raise FormatError(f"{KIND_NAMES[r.kind]} raster must be {want}D, got shape {data.shape}")
    dims = data.shape + (1,) * (4 - data.ndim)
    head = _RASTER_HEAD.pack(RASTER_MAGIC, RASTER_VERSION, r.kind, *dims, *map(float, r.spacing))
    return head + np.ascontiguousarray(data, dtype=KIND_DTYPES[r.kind]).tobytes(order="C")


def decode_raster(buf: bytes) -> Raster:
    if len(buf) < _RASTER_HEAD.size:
        raise FormatError("truncated raster header")
    magic, version, kind, x, y, z, t, *spacing = _RASTER_HEAD.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad raster magic {magic!r}")
    if version != RASTER_VERSION:
        raise VersionError(f"raster version {version} unsupported (expected {RASTER_VERSION})")
    if kind not in KIND_DTYPES:
        raise FormatError(f"unknown raster kind {kind}")
    dt = np.dtype(KIND_DTYPES[kind])
    payload = buf[_RASTER_HEAD.size:]
    if len(payload) != x * y * z * t * dt.itemsize:
        raise FormatError(f"payload is {len(payload)} bytes, expected {x * y * z * t * dt.itemsize}")
    shape = (x, y, z, t) if kind == SERIES else (x, y, z)
    data = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return Raster(kind, data, tuple(spacing))


def write_raster(path, r: Raster) -> None:
    Path(path).write_bytes(encode_raster(r))


def read_raster(path) -> Raster:
    return decode_raster(Path(path).read_bytes())


# checkpoints

def _descriptor(model: DgpModel) -> dict:
    return {
        "layers": len(model.layers),
        "widths": model.widths,
        "num_inducing": model.layers[0].num_inducing,
        "ard": [l.kernel.ard for l in model.layers],
        "mean_fn": [l.mean_fn for l in model.layers],
        "jitter": [l.kernel.jitter for l in model.layers],
    }


def encode_checkpoint(model: DgpModel, config: dict | None = None, seed: int = 0,
                      iteration: int = 0) -> bytes:
    params = model.params()
    order = [[h, name, list(np.shape(v))] for (h, name), v in params.items()]
    header = {"descriptor": _descriptor(model), "params": order, "config": config or {},
              "seed": int(seed), "iteration": int(iteration)}
    js = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(params[(h, n)], dtype="<f8").tobytes() for h, n, _ in order)
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(js)) + js + body


def decode_checkpoint(buf: bytes) -> tuple[DgpModel, dict]:
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint header")
    magic, version, n = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    start = _CKPT_HEAD.size
    try:
        header = json.loads(buf[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    off = start + n
    values: dict[tuple[int, str], np.ndarray] = {}
    for h, name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        if off + size > len(buf):
            raise FormatError("truncated checkpoint payload")
        values[(h, name)] = np.frombuffer(buf[off:off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    d = header["descriptor"]
    layers = []
    for h in range(d["layers"]):
        lo = values[(h, "log_omega")]
        kern = ArdRbfKernel(values[(h, "log_variance")], lo, d["widths"][h], d["ard"][h], d["jitter"][h])
        layers.append(SvgpLayer(values[(h, "Z")], values[(h, "q_mu")], values[(h, "q_sqrt")], kern,
                                d["mean_fn"][h]))
    return DgpModel(tuple(layers)), header


def save_checkpoint(path, model: DgpModel, **kw) -> None:
    Path(path).write_bytes(encode_checkpoint(model, **kw))


def load_checkpoint(path) -> tuple[DgpModel, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# voxel matrices

def save_matrix(path, vm: VoxelMatrix) -> None:
    """``.npz`` archive plus an ``<name>.index.csv`` row map sidecar."""
    path = Path(path)
    arrays = {"X": vm.X, "y": vm.y, "index": vm.index, "offsets": vm.offsets,
              "patient_ids": np.array(vm.patient_ids), "shapes": np.array(vm.shapes, dtype=np.int64),
              "spacings": np.array(vm.spacings, dtype=np.float64)}
    # np.savez stamps wall-clock times into the zip; fixed entry times keep output byte-stable
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    with open(index_path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "patient_id", "x", "y", "z"])
        for r, (p, x, y, z) in enumerate(vm.index):
            w.writerow([r, vm.patient_ids[p], x, y, z])


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".index.csv")


def load_matrix(path) -> VoxelMatrix:
    try:
        with np.load(path, allow_pickle=False) as z:
            return VoxelMatrix(z["X"], z["y"], z["index"], [str(s) for s in z["patient_ids"]], z["offsets"],
                               [tuple(int(v) for v in s) for s in z["shapes"]],
                               [tuple(float(v) for v in s) for s in z["spacings"]])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a voxel-matrix archive ({exc})") from None


def config_echo(obj) -> dict:
    return asdict(obj)
