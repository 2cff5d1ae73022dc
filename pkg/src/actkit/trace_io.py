"""ATRC: a flat little-endian container for per-step spatial attention maps.

Layout (no padding)::

    offset  size  field
    0       4     magic   b"ATRC"
    4       2     version u16 = 1
    6       4     steps   u32
    10      4     layers  u32
    14      4     heads   u32
    18      4     H       u32
    22      4     W       u32
    26      4     flags   u32  (bit 0: step 0 is the prefill map)
    30      ...   payload f32[steps, layers, heads, H, W], C order

One file holds one run; a calibration set is a directory of files.
"""
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadDimensionError,
    BadMagicError,
    BadVersionError,
    CalibrationMismatchError,
    IncompleteCalibrationError,
    NonFiniteTraceError,
    PayloadLengthError,
    ShapeError,
)

MAGIC = b"ATRC"
VERSION = 1
HEADER = struct.Struct("<4sH6I")
HEADER_SIZE = HEADER.size  # 30
FLAG_PREFILL = 1
DIM_FIELDS = ("steps", "layers", "heads", "H", "W")
_DIM_OFFSETS = {name: 6 + 4 * i for i, name in enumerate(DIM_FIELDS)}
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class AtrcHeader:
    steps: int
    layers: int
    heads: int
    H: int
    W: int
    flags: int = 0
    version: int = VERSION

    @property
    def shape(self):
        return (self.steps, self.layers, self.heads, self.H, self.W)

    @property
    def includes_prefill(self):
        return bool(self.flags & FLAG_PREFILL)

    @property
    def payload_bytes(self):
        return int(np.prod(self.shape, dtype=np.int64)) * 4

    def pack(self):
        return HEADER.pack(MAGIC, self.version, *self.shape, self.flags)

    @classmethod
    def unpack(cls, raw):
        if len(raw) < 4 or raw[:4] != MAGIC:
            raise BadMagicError(f"bad magic {bytes(raw[:4])!r}, expected {MAGIC!r}", "magic", 0)
        if len(raw) < HEADER_SIZE:
            raise PayloadLengthError(
                f"file holds {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header", "header", len(raw)
            )
        magic, version, *dims, flags = HEADER.unpack_from(raw)
        if version != VERSION:
            raise BadVersionError(f"unsupported version {version}, expected {VERSION}", "version", 4)
        for name, value in zip(DIM_FIELDS, dims):
            if value < 1:
                raise BadDimensionError(f"dimension {name} = {value}, must be >= 1", name, _DIM_OFFSETS[name])
        return cls(*dims, flags=flags, version=version)


def _as_trace(tensor):
    t = np.asarray(tensor)
    if t.ndim != 5:
        raise ShapeError(f"trace must be (steps, layers, heads, H, W), got shape {t.shape}")
    if 0 in t.shape:
        raise ShapeError(f"trace has an empty dimension: {t.shape}")
    if not np.isfinite(t).all():
        bad = int(np.flatnonzero(~np.isfinite(t.reshape(-1)))[0])
        raise NonFiniteTraceError("non-finite entry in trace", "payload", HEADER_SIZE + 4 * bad)
    return t


def encode_trace(tensor, includes_prefill=False):
    """Bytes of an ATRC file holding ``tensor``."""
    t = _as_trace(tensor)
    with np.errstate(over="ignore"):
        f32 = t.astype(_PAYLOAD_DTYPE)
    if not np.isfinite(f32).all():
        raise NonFiniteTraceError("entry overflows float32", "payload", HEADER_SIZE)
    header = AtrcHeader(*t.shape, flags=FLAG_PREFILL if includes_prefill else 0)
    return header.pack() + np.ascontiguousarray(f32).tobytes()


def decode_trace(raw):
    """Parse ATRC bytes into ``(tensor, header)``; the tensor is float32."""
    raw = memoryview(raw)
    header = AtrcHeader.unpack(raw)
    have = len(raw) - HEADER_SIZE
    if have != header.payload_bytes:
        raise PayloadLengthError(
            f"payload holds {have} bytes, header {header.shape} needs {header.payload_bytes}",
            "payload",
            HEADER_SIZE,
        )
    data = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, offset=HEADER_SIZE)
    finite = np.isfinite(data)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteTraceError("non-finite value in payload", "payload", HEADER_SIZE + 4 * bad)
    return data.astype(np.float32).reshape(header.shape), header


def write_trace(tensor, path, includes_prefill=False):
    """Write one run's trace atomically (temp file in the target dir, then rename)."""
    blob = encode_trace(tensor, includes_prefill)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_trace(path):
    """Load ``(tensor, header)`` from an ATRC file."""
    with open(path, "rb") as fh:
        return decode_trace(fh.read())


def trace_files(directory):
    """``*.atrc`` files of ``directory`` in lexicographic name order."""
    return sorted(Path(directory).glob("*.atrc"), key=lambda p: p.name)


def load_calibration(directory, expected=None):
    """Read a calibration directory into decode-step tensors for profiling.

    Parameters
    ----------
    directory : path
    expected : dict, optional
        Required values for any of ``layers``, ``heads``, ``H``, ``W``.

    Returns
    -------
    list of ndarray
        One ``(steps, layers, heads, H, W)`` tensor per file, with the
        prefill map removed when the file flags one.
    """
    files = trace_files(directory)
    if not files:
        raise IncompleteCalibrationError(f"no .atrc traces in {directory}")
    expected = dict(expected or {})
    unknown = set(expected) - set(DIM_FIELDS[1:])
    if unknown:
        raise ValueError(f"unknown dimension names {sorted(unknown)}")
    tensors, ref = [], None
    for path in files:
        t, header = read_trace(path)
        dims = dict(zip(DIM_FIELDS[1:], header.shape[1:]))
        for name, want in expected.items():
            if dims[name] != want:
                raise CalibrationMismatchError(f"{path.name}: {name} = {dims[name]}, expected {want}")
        if ref is None:
            ref = (path.name, dims)
        elif dims != ref[1]:
            raise CalibrationMismatchError(f"{path.name} has dims {dims}, {ref[0]} has {ref[1]}")
        if header.includes_prefill:
            t = t[1:]
        if t.shape[0] < 2:
            raise IncompleteCalibrationError(f"{path.name} holds fewer than 2 decode steps")
        tensors.append(t)
    return tensors
