"""Binary matrix formats and adapter checkpoint directories.

Dense matrices use the "PSSA" format (magic, u32 version/rows/cols little
endian, then row-major binary64). Quantized matrices use "PSQ4" (magic,
u32 version/rows/cols/block_size, per-block binary64 scales, then packed
4-bit codes, low nibble first). All writers go through a temp file and an
atomic rename so no partial binary is ever visible.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..adapter import AdapterPair, DecomposedLayer
from ..linalg import as_matrix
from ..quant import QuantizedMatrix, build_nf4_codebook

MATRIX_MAGIC = b"PSSA"
QUANT_MAGIC = b"PSQ4"
FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Corrupt or unsupported binary file."""


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_matrix(path, m: np.ndarray) -> None:
    m = as_matrix(m)
    header = MATRIX_MAGIC + struct.pack("<III", FORMAT_VERSION, *m.shape)
    _atomic_write(path, header + m.astype("<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MATRIX_MAGIC:
        raise FileFormatError(f"{path}: not a PSSA matrix file")
    version, rows, cols = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = 16 + rows * cols * 8
    if len(data) != expected:
        raise FileFormatError(
            f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data[16:], dtype="<f8").reshape(rows, cols).copy()


def save_quantized(path, q: QuantizedMatrix) -> None:
    header = QUANT_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, q.rows, q.cols, q.block_size)
    _atomic_write(path, header + q.scales.astype("<f8").tobytes()
                  + q.codes.tobytes())


def load_quantized(path) -> QuantizedMatrix:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != QUANT_MAGIC:
        raise FileFormatError(f"{path}: not a PSQ4 file")
    version, rows, cols, block_size = struct.unpack("<IIII", data[4:20])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if block_size < 1:
        raise FileFormatError(f"{path}: invalid block_size {block_size}")
    nblocks = math.ceil(rows * cols / block_size) if rows * cols else 0
    ncode_bytes = math.ceil(rows * cols / 2)
    expected = 20 + nblocks * 8 + ncode_bytes
    if len(data) != expected:
        raise FileFormatError(
            f"{path}: expected {expected} bytes, got {len(data)}")
    scales = np.frombuffer(data[20:20 + nblocks * 8], dtype="<f8").copy()
    codes = np.frombuffer(data[20 + nblocks * 8:], dtype=np.uint8).copy()
    if (scales < 0).any():
        raise FileFormatError(f"{path}: negative block scale")
    levels = build_nf4_codebook().as_array()
    return QuantizedMatrix(rows, cols, block_size, codes, scales, levels)


def save_adapter_dir(dirpath, layer: DecomposedLayer, seed: int | None = None,
                     include_base: bool = True) -> None:
    """Write A.pssa, B.pssa, optional base, and a metadata file."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    save_matrix(dirpath / "A.pssa", layer.adapter.a)
    save_matrix(dirpath / "B.pssa", layer.adapter.b)
    base_file = None
    if include_base:
        if isinstance(layer.base, np.ndarray):
            base_file = "base.pssa"
            save_matrix(dirpath / base_file, layer.base)
        else:
            base_file = "base.psq4"
            save_quantized(dirpath / base_file, layer.base)
    meta = {
        "rank": layer.adapter.rank,
        "scale": layer.adapter.scale,
        "origin": layer.origin,
        "seed": seed,
        "base_file": base_file,
    }
    _atomic_write(dirpath / "meta.json",
                  (json.dumps(meta, indent=2) + "\n").encode())


def load_adapter_dir(dirpath) -> DecomposedLayer:
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / "meta.json").read_text())
    a = load_matrix(dirpath / "A.pssa")
    b = load_matrix(dirpath / "B.pssa")
    pair = AdapterPair(a=a, b=b, rank=int(meta["rank"]),
                       scale=float(meta["scale"]))
    base_file = meta.get("base_file")
    if base_file is None:
        raise FileFormatError(f"{dirpath}: checkpoint has no stored base")
    if base_file.endswith(".psq4"):
        base = load_quantized(dirpath / base_file)
    else:
        base = load_matrix(dirpath / base_file)
    return DecomposedLayer(base=base, adapter=pair, origin=meta["origin"])
