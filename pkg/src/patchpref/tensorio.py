"""TNSR binary tensor files and checkpoint directories.

Layout: magic ``TNSR``; u8 version=1; u8 dtype (0=f64, 1=f32); u8 ndim;
ndim little-endian u32 dims; row-major little-endian payload. No padding,
no trailing bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"TNSR"
_DTYPES = {0: "<f8", 1: "<f4"}


def write_tensor(t: Tensor, path, dtype: str = "f64") -> None:
    """Serialize a tensor. ``dtype`` "f32" stores a narrowed payload."""
    if dtype not in ("f64", "f32"):
        raise ValueError(f"unsupported dtype {dtype!r}")
    code = 0 if dtype == "f64" else 1
    arr = t.data.astype(_DTYPES[code])
    dims = t.shape
    header = MAGIC + struct.pack("<BBB", 1, code, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 7:
        raise FormatError("truncated header", offset=len(raw))
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != 1:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"dtype byte {code} not in {{0,1}}", offset=5)
    dims_end = 7 + 4 * ndim
    if len(raw) < dims_end:
        raise FormatError("truncated dimension list", offset=len(raw))
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    count = 1
    for d in dims:
        count *= d
    itemsize = 8 if code == 0 else 4
    expected = dims_end + count * itemsize
    if len(raw) < expected:
        raise FormatError(f"truncated payload, need {expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    arr = np.frombuffer(raw, dtype=_DTYPES[code], offset=dims_end, count=count)
    return Tensor(arr.astype(np.float64).reshape(dims))


def save_checkpoint(directory, params) -> None:
    """Write one TNSR file per named parameter plus a manifest.

    ``params`` is a list of (name, layer_index, Tensor). Names must be unique
    and filesystem-safe.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, layer, t in params:
        write_tensor(t, directory / f"{name}.tnsr")
        shape = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"name={name} shape={shape} layer={layer}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Read back a checkpoint directory; returns [(name, layer, Tensor)]."""
    directory = Path(directory)
    params = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        fields = dict(part.split("=", 1) for part in line.split())
        name = fields["name"]
        layer = int(fields["layer"])
        params.append((name, layer, read_tensor(directory / f"{name}.tnsr")))
    return params
