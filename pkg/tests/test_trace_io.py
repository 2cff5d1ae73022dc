import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from actkit.engine import calibration_tensors, collect_calibration
from actkit.errors import (
    BadDimensionError,
    BadMagicError,
    BadVersionError,
    CalibrationMismatchError,
    IncompleteCalibrationError,
    NonFiniteTraceError,
    PayloadLengthError,
    ShapeError,
)
from actkit.stcs import profile_heads
from actkit.trace_io import (
    HEADER_SIZE,
    AtrcHeader,
    decode_trace,
    encode_trace,
    load_calibration,
    read_trace,
    trace_files,
    write_trace,
)

SMALL = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
# hand-assembled from the field table: magic, u16 version, five u32 dims, u32 flags, f32 payload
GOLDEN = bytes.fromhex(
    "41545243" "0100" "01000000" "01000000" "01000000" "02000000" "02000000" "00000000"
    "0000803f" "00000040" "00004040" "00008040"
)


def test_golden_layout(tmp_path):
    path = write_trace(SMALL, tmp_path / "t.atrc")
    raw = path.read_bytes()
    assert HEADER_SIZE == 30 and len(raw) == 30 + 16
    assert raw == GOLDEN
    t, h = read_trace(path)
    assert t.dtype == np.float32 and h.shape == (1, 1, 1, 2, 2) and not h.includes_prefill


def test_prefill_flag():
    raw = encode_trace(SMALL, includes_prefill=True)
    assert raw[26:30] == b"\x01\x00\x00\x00"
    assert decode_trace(raw)[1].includes_prefill


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(1, 3)] * 3, st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda s: arrays(np.float32, s, elements=st.floats(allow_nan=False, allow_infinity=False, width=32))))
def test_round_trip_bit_exact(t):
    back, header = decode_trace(encode_trace(t))
    assert header.shape == t.shape
    assert back.tobytes() == t.astype("<f4").tobytes()


def _corrupt(raw, offset, value):
    b = bytearray(raw)
    b[offset:offset + len(value)] = value
    return bytes(b)


CORRUPTIONS = [
    ("magic", lambda r: _corrupt(r, 0, b"XTRC"), BadMagicError, 0),
    ("version", lambda r: _corrupt(r, 4, struct.pack("<H", 2)), BadVersionError, 4),
    *[(name, (lambda off: lambda r: _corrupt(r, off, struct.pack("<I", 0)))(6 + 4 * i), BadDimensionError, 6 + 4 * i)
      for i, name in enumerate(("steps", "layers", "heads", "H", "W"))],
    ("payload", lambda r: r[:-3], PayloadLengthError, 30),
]


@pytest.mark.parametrize("field,mutate,err,offset", CORRUPTIONS, ids=[c[0] for c in CORRUPTIONS])
def test_corruption_names_field(field, mutate, err, offset):
    with pytest.raises(err) as info:
        decode_trace(mutate(encode_trace(SMALL)))
    assert info.value.field == field and info.value.offset == offset
    assert field in str(info.value)


def test_short_file_and_extra_bytes():
    with pytest.raises(PayloadLengthError):
        decode_trace(GOLDEN[:12])
    with pytest.raises(PayloadLengthError):
        decode_trace(GOLDEN + b"\x00")


def test_non_finite_rejected(tmp_path):
    bad = SMALL.copy()
    bad[0, 0, 0, 1, 0] = np.nan
    with pytest.raises(NonFiniteTraceError):
        write_trace(bad, tmp_path / "x.atrc")
    assert not list(tmp_path.iterdir())
    raw = _corrupt(GOLDEN, 30 + 8, struct.pack("<f", np.inf))
    with pytest.raises(NonFiniteTraceError) as info:
        decode_trace(raw)
    assert info.value.offset == 38
    with pytest.raises(NonFiniteTraceError):
        encode_trace(SMALL * 1e300)  # finite in float64, overflows float32
    with pytest.raises(ShapeError):
        encode_trace(np.zeros((2, 2)))


def test_header_round_trip():
    h = AtrcHeader(3, 2, 4, 5, 6, flags=1)
    assert AtrcHeader.unpack(h.pack()) == h and h.payload_bytes == 3 * 2 * 4 * 5 * 6 * 4


def test_write_replaces_atomically(tmp_path):
    p = tmp_path / "t.atrc"
    write_trace(SMALL, p)
    write_trace(SMALL * 2, p)
    assert [f.name for f in tmp_path.iterdir()] == ["t.atrc"]
    np.testing.assert_array_equal(read_trace(p)[0], SMALL * 2)


def _maps(rng, steps=4, H=4, W=4):
    t = rng.random((steps, 2, 3, H, W))
    return t / t.sum(axis=(-1, -2), keepdims=True)


def test_load_calibration_rules(tmp_path, rng):
    with pytest.raises(IncompleteCalibrationError):
        load_calibration(tmp_path)
    write_trace(_maps(rng), tmp_path / "b.atrc", includes_prefill=True)
    one = load_calibration(tmp_path)
    assert len(one) == 1 and one[0].shape == (3, 2, 3, 4, 4)
    write_trace(_maps(rng), tmp_path / "a.atrc")
    (tmp_path / "notes.txt").write_text("ignored")
    assert [p.name for p in trace_files(tmp_path)] == ["a.atrc", "b.atrc"]
    assert [t.shape[0] for t in load_calibration(tmp_path)] == [4, 3]
    with pytest.raises(CalibrationMismatchError):
        load_calibration(tmp_path, {"heads": 8})
    write_trace(_maps(rng, H=5), tmp_path / "c.atrc")
    with pytest.raises(CalibrationMismatchError):
        load_calibration(tmp_path)


def test_too_few_steps(tmp_path, rng):
    write_trace(_maps(rng, steps=2), tmp_path / "a.atrc", includes_prefill=True)
    with pytest.raises(IncompleteCalibrationError):
        load_calibration(tmp_path)


def test_file_path_profiling_matches_memory(model, tmp_path):
    runs = collect_calibration(model, 50)
    for i, r in enumerate(runs):
        write_trace(r.attention_tensor(), tmp_path / f"calib_{i:02d}.atrc", includes_prefill=True)
    mem = profile_heads(calibration_tensors(runs), 4, 8)
    disk = profile_heads(load_calibration(tmp_path, {"layers": 12, "heads": 8, "H": 4, "W": 4}), 4, 8)
    np.testing.assert_array_equal(mem.scores(), disk.scores())
    assert mem.to_json() == disk.to_json()
