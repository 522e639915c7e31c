"""Binary checkpoint container for model weights.

Layout (all integers little-endian):

    magic "ICSI" | version u32 | config-blob length u32 | UTF-8 JSON blob
    | tensor count u32 | per tensor: name length u16, name bytes,
      dtype code u8 (0 = float32, 1 = float64), rank u8, dims u32 each,
      raw row-major data

The JSON blob carries the model config plus free-form training metadata.
Loading reproduces every tensor bit-for-bit; an unknown version is refused.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError
from .model import TransformerConfig, TransformerParams, sinusoidal_table

MAGIC = b"ICSI"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_POSITIONAL = ("enc.pos", "dec.pos")


def _write_tensor(buf: io.BytesIO, name: str, array: np.ndarray) -> None:
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", code, array.ndim))
    for dim in array.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(params: TransformerParams, meta: dict, path) -> None:
    """Serialize weights (including the fixed positional tables) plus metadata."""
    blob = json.dumps(
        {"model_config": dataclasses.asdict(params.config), "meta": meta}, sort_keys=True
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    arrays = {name: t.data for name, t in params.tensors.items()}
    arrays["enc.pos"] = params.enc_pos
    arrays["dec.pos"] = params.dec_pos
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        _write_tensor(buf, name, arrays[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, n_ctx_dec: int | None = None) -> tuple[TransformerParams, dict]:
    """Rebuild parameters from a container file.

    Passing `n_ctx_dec` loads into a different decoder capacity: the decoder
    positional table is regenerated at the new length while every learned
    tensor is taken verbatim from the file.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config-blob length"))
        blob = _read_exact(fh, blob_len, "config blob")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"config blob is not valid JSON: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        arrays: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"tensor {i} name length"))
            name = _read_exact(fh, name_len, f"tensor {i} name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name!r} header"))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {name!r} dims")
            )
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, n_bytes, f"tensor {name!r} data")
            arrays[name] = (
                np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
            )
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("unexpected trailing bytes after final tensor")
    try:
        config = TransformerConfig(**header["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"config blob missing or malformed model_config: {exc}") from exc
    for pos_name in _POSITIONAL:
        if pos_name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {pos_name!r}")
    enc_pos = arrays.pop("enc.pos")
    dec_pos = arrays.pop("dec.pos")
    dtype = enc_pos.dtype
    if n_ctx_dec is not None and n_ctx_dec != config.n_ctx_dec:
        from dataclasses import replace

        config = replace(config, n_ctx_dec=n_ctx_dec)
        dec_pos = sinusoidal_table(n_ctx_dec, config.d_model, dtype)
    tensors = {name: ad.Tensor(a, requires_grad=True) for name, a in arrays.items()}
    params = TransformerParams(
        config=config, tensors=tensors, enc_pos=enc_pos, dec_pos=dec_pos
    )
    return params, header.get("meta", {})
