"""Checkpoint container: magic, version, JSON header, raw little-endian payload.

Layout::

    b"S2T2" | u32 version | u64 header_len | header JSON (utf-8) | payload

The header maps tensor names to ``{dtype, shape, offset, nbytes}`` with
offsets relative to the payload start, plus a free-form ``metadata`` dict.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"S2T2"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4", "u1": "|u1", "b1": "|b1"}


class CheckpointError(ValueError):
    """Unreadable, truncated or inconsistent checkpoint."""


def _dtype_code(arr: np.ndarray) -> str:
    code = arr.dtype.kind + str(arr.dtype.itemsize)
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write atomically (temp file + rename).

    Tensors are laid out in sorted name order so the bytes depend only on the
    contents, not on dict insertion order.
    """
    header: dict = {"tensors": {}, "metadata": metadata or {}}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[code])).tobytes()
        header["tensors"][name] = {"dtype": code, "shape": list(arr.shape), "offset": offset,
                                   "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix (bytes 0..{_PREFIX.size} missing)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version > VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported {VERSION}")
    hstart = _PREFIX.size
    if len(data) < hstart + hlen:
        raise CheckpointError(f"{path}: truncated header (bytes {hstart}..{hstart + hlen} missing, "
                              f"file has {len(data)})")
    try:
        header = json.loads(data[hstart:hstart + hlen])
        entries = header["tensors"]
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    base = hstart + hlen
    payload_len = len(data) - base
    spans = []
    out = {}
    for name, e in entries.items():
        dtype = np.dtype(_DTYPES.get(e.get("dtype"), "V"))
        if dtype.kind == "V":
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        off, nbytes = int(e["offset"]), int(e["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} size does not match its shape")
        if off < 0 or off + nbytes > payload_len:
            raise CheckpointError(f"{path}: tensor {name!r} payload bytes {base + off}..{base + off + nbytes} "
                                  f"missing (file has {len(data)})")
        spans.append((off, off + nbytes, name))
        out[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                  offset=base + off).reshape(shape).astype(dtype.newbyteorder("="))
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: tensors {an!r} and {bn!r} overlap")
    return out, header.get("metadata", {})


# ---------------------------------------------------------------- typed helpers

def save_model(path, model, metadata: dict | None = None) -> None:
    meta = {"kind": "lm", "config": model.config.to_dict(), **(metadata or {})}
    save_checkpoint(path, {f"model/{k}": v for k, v in model.arrays().items()}, meta)


def load_model(path):
    from .autodiff import Tensor
    from .lm import LmConfig, LmParams

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    cfg = LmConfig(**meta["config"])
    params = {k[len("model/"):]: Tensor(v, name=k, dtype=v.dtype) for k, v in tensors.items()
              if k.startswith("model/")}
    return LmParams(cfg, params), meta


def save_coupling(path, coupling, weights: np.ndarray | None = None, metadata: dict | None = None) -> None:
    tensors = {"coupling/P": coupling.P, "marginals/mu": coupling.marginals.mu,
               "marginals/nu": coupling.marginals.nu}
    if weights is not None:
        tensors["coupling/C"] = weights
    meta = {"kind": "coupling", "row_err": coupling.row_err, "col_err": coupling.col_err,
            **(metadata or {})}
    save_checkpoint(path, tensors, meta)


def load_coupling(path):
    from .coupling import Coupling, Marginals

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "coupling":
        raise CheckpointError(f"{path}: not a coupling checkpoint (kind={meta.get('kind')!r})")
    m = Marginals(tensors["marginals/mu"], tensors["marginals/nu"])
    cp = Coupling(tensors["coupling/P"], m, float(meta["row_err"]), float(meta["col_err"]))
    return cp, tensors.get("coupling/C"), meta
