"""On-disk formats: binary grids, checkpoint containers, manifests, traces.

Binary grid ("XMGR"): magic, u16 version, u8 dtype tag (1 = float32,
2 = float64), three u32 dims (depth, height, width), then little-endian
IEEE-754 payload, row-major within a slice, slice-major across depth.
Round-trips are bit-exact.

Checkpoint container: magic ("XDNP" diffusion prior / "XTRN" translator),
u16 version, u32 header length, canonical-JSON header (architecture,
schedule/training echo, named array sizes), then the named float32 arrays in
header order as raw little-endian bytes.

Traces and manifests are JSON-lines text with sorted keys, so reruns with
identical inputs produce byte-identical files.
"""

import json
import struct

import numpy as np

from .diffusion import DenoiserParams
from .errors import ConfigError, ShapeError
from .xmodal import TranslationModel

GRID_MAGIC = b"XMGR"
GRID_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2}

PRIOR_MAGIC = b"XDNP"
XMODAL_MAGIC = b"XTRN"
CKPT_VERSION = 1


def write_grid(path, array, dtype=np.float32):
    """Write a 2D image or 3D volume; 2D is stored with depth 1."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"grid files hold 2D/3D arrays, got shape {arr.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _TAG_FOR:
        raise ConfigError(f"unsupported grid dtype {dtype}")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<HB", GRID_VERSION, _TAG_FOR[dtype]))
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())


def read_grid(path):
    """Returns the stored array; depth-1 files come back as 2D images."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRID_MAGIC:
            raise ConfigError(f"{path}: not a grid file (magic {magic!r})")
        version, tag = struct.unpack("<HB", fh.read(3))
        if version != GRID_VERSION:
            raise ConfigError(f"{path}: unsupported grid version {version}")
        if tag not in _DTYPE_TAGS:
            raise ConfigError(f"{path}: unknown dtype tag {tag}")
        dims = struct.unpack("<III", fh.read(12))
        dtype = _DTYPE_TAGS[tag]
        count = dims[0] * dims[1] * dims[2]
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ConfigError(f"{path}: truncated grid payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr[0] if dims[0] == 1 else arr


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path, magic, header, arrays):
    named = [(name, np.asarray(a, dtype="<f4")) for name, a in arrays]
    header = dict(header)
    header["arrays"] = [[name, int(a.size)] for name, a in named]
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in named:
            fh.write(a.tobytes())


def _read_container(path, magic):
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ConfigError(f"{path}: expected checkpoint magic {magic!r}, got {got!r}")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for name, size in header["arrays"]:
            payload = fh.read(size * 4)
            if len(payload) != size * 4:
                raise ConfigError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").copy()
    return header, arrays


def write_prior_checkpoint(path, params: DenoiserParams, schedule_desc,
                           steps=0, optimizer_state=None):
    header = {"arch": params.arch, "schedule": schedule_desc, "steps": int(steps)}
    arrays = [("theta", params.theta)]
    if optimizer_state is not None:
        arrays.append(("momentum", optimizer_state))
    _write_container(path, PRIOR_MAGIC, header, arrays)


def read_prior_checkpoint(path):
    """Returns (DenoiserParams, schedule descriptor dict, steps, momentum|None)."""
    header, arrays = _read_container(path, PRIOR_MAGIC)
    params = DenoiserParams(arch=header["arch"], theta=arrays["theta"])
    return params, header["schedule"], header["steps"], arrays.get("momentum")


def write_xmodal_checkpoint(path, model: TranslationModel, steps=0,
                            optimizer_state=None):
    header = {"arch": model.arch, "resolution": model.resolution,
              "train_echo": model.train_echo, "steps": int(steps)}
    arrays = [("theta", model.theta)]
    if optimizer_state is not None:
        arrays.append(("momentum", optimizer_state))
    _write_container(path, XMODAL_MAGIC, header, arrays)


def read_xmodal_checkpoint(path):
    """Returns (TranslationModel, steps, momentum|None)."""
    header, arrays = _read_container(path, XMODAL_MAGIC)
    model = TranslationModel(arch=header["arch"], theta=arrays["theta"],
                             resolution=header["resolution"],
                             train_echo=header.get("train_echo", {}))
    return model, header["steps"], arrays.get("momentum")


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_jsonl(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def trace_records(state):
    """Solver trace as JSON-able dicts, one per step."""
    return [{
        "step": r.step,
        "t": r.t,
        "sched_index": r.sched_index,
        "adapt_losses": [float(v) for v in r.adapt_losses],
        "refine_step": bool(r.refine_step),
        "psnr": None if r.psnr is None else float(r.psnr),
    } for r in state.trace]


def write_pgm(path, image):
    """8-bit binary PGM with fixed [0, 1] windowing."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM dump needs a 2D image, got {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_triptych_pgm(path, panels, pad=2):
    """Side-by-side panels (e.g. unimodal / cross-modal / ground truth)."""
    panels = [np.asarray(p, dtype=np.float64) for p in panels]
    h = panels[0].shape[0]
    if any(p.ndim != 2 or p.shape[0] != h for p in panels):
        raise ShapeError("triptych panels must be 2D with equal heights")
    spacer = np.ones((h, pad))
    cols = []
    for i, p in enumerate(panels):
        if i:
            cols.append(spacer)
        cols.append(p)
    write_pgm(path, np.hstack(cols))
