"""Binary formats: the k-t data container and reconstruction checkpoints.

Container layout (all little-endian)::

    magic      4s   b"MCSD"
    version    u16  CONTAINER_VERSION
    ndim       u16  2
    H, W       u32, u32
    M          u32  frames
    C          u32  coils
    spokes     u32  spokes per frame
    samples    u32  samples per spoke
    flags      u32  bit0 template, bit1 motion, bit2 respiratory signal,
                    bit3 coil maps, bit4 metadata
    coords     f64[M, P, 2]       (kx, ky), P = spokes * samples
    samples    f64[M, C, P, 2]    re/im interleaved
    template   f64[H, W, 2]       if bit0
    motion     f64[M, 2, H, W]    if bit1
    resp       f64[M]             if bit2
    coil maps  f64[C, H, W, 2]    if bit3
    metadata   u32 length + UTF-8 JSON   if bit4

Checkpoints use a self-describing layout: ``b"MCCK"``, u16 version, u32
header length, a JSON header listing every array (name, dtype, shape) plus
scalar fields, then the raw arrays in header order. Writing is byte-for-byte
deterministic.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset
from .engine import AdamMoments, ReconConfig, ReconState
from .generator import GeneratorParams
from .nudft import SpokeFrame
from .phantom import GroundTruth

MAGIC = b"MCSD"
CONTAINER_VERSION = 1
CKPT_MAGIC = b"MCCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIIII")

F_TEMPLATE, F_MOTION, F_RESP, F_COILS, F_META = 1, 2, 4, 8, 16


class FormatError(ValueError):
    pass


def _c2r(a):
    a = np.ascontiguousarray(a, dtype=np.complex128)
    return a.view(np.float64).reshape(a.shape + (2,))


def _r2c(a):
    return np.ascontiguousarray(a).view(np.complex128).reshape(a.shape[:-1])


def write_container(path, dataset: Dataset, truth: GroundTruth | None = None, meta: dict | None = None):
    H, W = dataset.shape
    M, C = dataset.num_frames, dataset.num_coils
    P = dataset.spokes_per_frame * dataset.samples_per_spoke
    for fr in dataset.frames:
        if fr.num_points != P:
            raise FormatError(f"frame {fr.frame_index} has {fr.num_points} points, expected {P}")
    flags = F_COILS
    sections = [
        np.stack([fr.coords for fr in dataset.frames]),
        _c2r(np.stack([fr.samples for fr in dataset.frames])),
    ]
    if truth is not None:
        if truth.template is not None:
            flags |= F_TEMPLATE
            sections.append(_c2r(truth.template))
        if truth.motion is not None:
            flags |= F_MOTION
            sections.append(np.asarray(truth.motion, dtype=np.float64))
        if truth.respiratory_signal is not None:
            flags |= F_RESP
            sections.append(np.asarray(truth.respiratory_signal, dtype=np.float64))
    sections.append(_c2r(dataset.coil_maps))
    if meta is not None:
        flags |= F_META
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, 2, H, W, M, C,
                              dataset.spokes_per_frame, dataset.samples_per_spoke, flags))
        for sec in sections:
            fh.write(np.ascontiguousarray(sec, dtype="<f8").tobytes())
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_container(path):
    """Returns ``(dataset, truth_or_None, meta_or_None)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for a container header")
    magic, version, ndim, H, W, M, C, spf, sps, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise FormatError(f"container version {version} unsupported (expected {CONTAINER_VERSION})")
    if ndim != 2:
        raise FormatError(f"only 2-D containers are supported, got ndim={ndim}")
    P = spf * sps
    pos = _HEADER.size

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 8
        if pos + n > len(raw):
            raise FormatError("container truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += n
        return arr

    coords = take((M, P, 2))
    samples = _r2c(take((M, C, P, 2)))
    template = _r2c(take((H, W, 2))) if flags & F_TEMPLATE else None
    motion = take((M, 2, H, W)) if flags & F_MOTION else None
    resp = take((M,)) if flags & F_RESP else None
    if not flags & F_COILS:
        raise FormatError("container lacks coil maps")
    coil_maps = _r2c(take((C, H, W, 2)))
    meta = None
    if flags & F_META:
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + n].decode("utf-8"))
        pos += n
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after the declared sections")
    frames = [SpokeFrame(coords[t], samples[t], t) for t in range(M)]
    dataset = Dataset(frames, coil_maps, spf, sps)
    truth = None
    if flags & (F_TEMPLATE | F_MOTION | F_RESP):
        truth = GroundTruth(template, motion, resp, coil_maps)
    return dataset, truth, meta


# -- checkpoints -------------------------------------------------------------

def save_arrays(path, arrays: dict, fields: dict):
    """Write named arrays plus JSON-able ``fields`` in the checkpoint layout."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"arrays": entries, "fields": fields}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_arrays(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    if len(raw) < 10:
        raise FormatError(f"{path} is truncated")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    pos = 10
    header = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"]))
        if pos + count * dt.itemsize > len(raw):
            raise FormatError(f"{path} is truncated")
        arrays[e["name"]] = np.frombuffer(raw, dt, count, pos).reshape(e["shape"]).copy()
        pos += count * dt.itemsize
    return arrays, header["fields"]


def save_checkpoint(path, state: ReconState, config: ReconConfig):
    arrays = {
        "f": state.f,
        "theta": state.gen.theta,
        "Z": state.Z,
        "loss_history": np.array(state.loss_history, dtype=np.float64).reshape(-1, 2),
    }
    steps = {}
    for name, mom in sorted(state.moments.items()):
        arrays[f"m_{name}"] = mom.m
        arrays[f"v_{name}"] = mom.v
        steps[name] = mom.step
    fields = {
        "epoch": state.epoch,
        "stage": state.stage,
        "adam_steps": steps,
        "generator": {"latent_dim": state.gen.latent_dim, "grid": state.gen.grid, "arch": state.gen.arch},
        "config": config.to_dict(),
        "config_hash": config.digest(),
    }
    save_arrays(path, arrays, fields)


def load_checkpoint(path) -> tuple[ReconState, ReconConfig]:
    arrays, fields = load_arrays(path)
    g = fields["generator"]
    gen = GeneratorParams(arrays["theta"], g["latent_dim"], g["grid"], g["arch"])
    moments = {
        name: AdamMoments(arrays[f"m_{name}"], arrays[f"v_{name}"], int(step))
        for name, step in fields["adam_steps"].items()
    }
    history = [(int(s), float(v)) for s, v in arrays["loss_history"]]
    state = ReconState(arrays["f"], gen, arrays["Z"], moments, int(fields["stage"]),
                       int(fields["epoch"]), history)
    config = ReconConfig(**fields["config"])
    if config.digest() != fields["config_hash"]:
        raise FormatError("checkpoint config hash mismatch")
    return state, config
