"""
Profiling from trace files
==========================

Write calibration traces to disk in the ATRC format and profile from the
directory; the manifest is the same as profiling in memory.
"""
import tempfile
from pathlib import Path

import numpy as np

from actkit import build_toy_model, collect_calibration, calibration_tensors, profile_heads
from actkit.trace_io import load_calibration, read_trace, write_trace

model = build_toy_model()
runs = collect_calibration(model, 10)

with tempfile.TemporaryDirectory() as d:
    for i, r in enumerate(runs):
        # step 0 is the prefill map; the flag tells the loader to drop it
        write_trace(r.attention_tensor(), Path(d) / f"calib_{i:02d}.atrc", includes_prefill=True)

    t, header = read_trace(Path(d) / "calib_00.atrc")
    print(header)
    print("bytes:", (Path(d) / "calib_00.atrc").stat().st_size, "=", 30 + header.payload_bytes)

    disk = profile_heads(load_calibration(d), 4, 8)

mem = profile_heads(calibration_tensors(runs), 4, 8)
print("same scores:", np.array_equal(disk.scores(), mem.scores()))
