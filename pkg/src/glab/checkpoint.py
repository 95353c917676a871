"""Binary model checkpoints.

Layout: an 8-byte magic, a little-endian uint32 format version, a
little-endian uint64 header length, a JSON header (model and corruption
configuration, a name/shape manifest, training metadata), then the weight
tensors as little-endian 32-bit floats concatenated in manifest order.
Loading verifies the magic, the version, and that the manifest shapes
account for every remaining byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionConfig
from .errors import IoError

MAGIC = b"GLABCKPT"
VERSION = 1


def save_checkpoint(path, model: Denoiser, dcfg: DiffusionConfig, train_meta: dict) -> None:
    names = sorted(model.params)
    manifest = [{"name": n, "shape": list(model.params[n].shape)} for n in names]
    header = {
        "denoiser": asdict(model.cfg),
        "diffusion": asdict(dcfg),
        "manifest": manifest,
        "train": dict(train_meta),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(blob))
    out += blob
    for n in names:
        out += np.ascontiguousarray(model.params[n], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _read_header(path) -> tuple[dict, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise IoError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    if version != VERSION:
        raise IoError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, off + 4)
    start = off + 12
    if start + hlen > len(blob):
        raise IoError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoError(f"{path}: corrupt header: {exc}") from exc
    return header, blob[start + hlen:]


def load_checkpoint(path) -> tuple[Denoiser, DiffusionConfig, dict]:
    header, payload = _read_header(path)
    dn = dict(header["denoiser"])
    dn["input_shape"] = tuple(dn["input_shape"])
    cfg = DenoiserConfig(**dn)
    dcfg = DiffusionConfig(**header["diffusion"])
    manifest = header["manifest"]
    expected = sum(int(np.prod(e["shape"])) for e in manifest) * 4
    if len(payload) != expected:
        raise IoError(
            f"{path}: weight payload is {len(payload)} bytes, manifest implies {expected}"
        )
    params = {}
    off = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
        off += count * 4
    train = header.get("train", {})
    model = Denoiser(cfg, params, cond_dropout_p=train.get("cond_dropout"))
    return model, dcfg, train


def describe(path) -> dict:
    """Header summary for inspection without materializing the model."""
    header, payload = _read_header(path)
    total = sum(int(np.prod(e["shape"])) for e in header["manifest"])
    return {
        "version": VERSION,
        "denoiser": header["denoiser"],
        "diffusion": header["diffusion"],
        "train": header.get("train", {}),
        "tensors": [(e["name"], tuple(e["shape"])) for e in header["manifest"]],
        "param_count": total,
        "payload_bytes": len(payload),
    }
