"""Versioned binary checkpoints.

Layout: magic "MD3D", u32 version, length-prefixed UTF-8 config echo, then
a sorted sequence of length-prefixed named fp64 little-endian blobs covering
parameters, per-dataset normalization statistics and optimizer state.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, RegistryError
from .model import Model
from .optim import Adam

MAGIC = b"MD3D"
VERSION = 1


def _collect_blobs(model: Model, opt: Adam | None) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        blobs[f"param/{name}"] = p.data
    for layer, state in model.norms.items():
        for d in sorted(state.running_mean):
            blobs[f"norm/{layer}/mean/{d}"] = state.running_mean[d]
            blobs[f"norm/{layer}/var/{d}"] = state.running_var[d]
    if opt is not None:
        blobs["opt/step"] = np.array([float(opt.step_count)])
        for name in opt.params:
            blobs[f"opt/m/{name}"] = opt.m[name]
            blobs[f"opt/v/{name}"] = opt.v[name]
    return blobs


def serialize(model: Model, opt: Adam | None = None, config_text: str = "") -> bytes:
    blobs = _collect_blobs(model, opt)
    cfg = config_text.encode()
    out = [MAGIC, struct.pack("<I I", VERSION, len(cfg)), cfg, struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", arr.nbytes))
        out.append(arr.tobytes())
    return b"".join(out)


def deserialize_blobs(raw: bytes) -> tuple[str, dict[str, np.ndarray]]:
    try:
        if raw[:4] != MAGIC:
            raise FormatError("bad checkpoint magic")
        version, cfg_len = struct.unpack_from("<I I", raw, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 12
        config_text = raw[off : off + cfg_len].decode()
        off += cfg_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            if off + nbytes > len(raw):
                raise FormatError("truncated checkpoint blob")
            blobs[name] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
            off += nbytes
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise FormatError(f"truncated or corrupt checkpoint: {e}") from e
    return config_text, blobs


def restore(model: Model, raw: bytes, opt: Adam | None = None) -> str:
    """Load blobs into an already-constructed model; returns the config echo."""
    config_text, blobs = deserialize_blobs(raw)
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in blobs:
            raise FormatError(f"checkpoint missing parameter {name}")
        if blobs[key].shape != p.data.shape:
            raise FormatError(f"parameter {name} shape mismatch")
        p.data = blobs[key].copy()
    for layer, state in model.norms.items():
        for d in sorted(state.running_mean):
            mk, vk = f"norm/{layer}/mean/{d}", f"norm/{layer}/var/{d}"
            if mk not in blobs or vk not in blobs:
                raise RegistryError(f"checkpoint missing norm state for dataset {d} ({layer})")
            state.running_mean[d] = blobs[mk].copy()
            state.running_var[d] = blobs[vk].copy()
    if opt is not None:
        if "opt/step" not in blobs:
            raise FormatError("checkpoint has no optimizer state")
        opt.step_count = int(blobs["opt/step"][0])
        for name in opt.params:
            opt.m[name] = blobs[f"opt/m/{name}"].copy()
            opt.v[name] = blobs[f"opt/v/{name}"].copy()
    return config_text


def save_checkpoint(model: Model, path, opt: Adam | None = None, config_text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model, opt, config_text))


def load_checkpoint(model: Model, path, opt: Adam | None = None) -> str:
    with open(path, "rb") as fh:
        return restore(model, fh.read(), opt)
