"""
Finding the heads that look around
==================================

Decode a batch of toy scenes, measure how much each head's spatial
attention map changes from step to step, and pick the restless ones.
"""
import numpy as np

from actkit import build_toy_model, collect_calibration, calibration_tensors, profile_heads

model = build_toy_model()

# 50 scenes, 16 decode steps each, EOS suppressed so every run is full length
runs = collect_calibration(model, 50)
tensors = calibration_tensors(runs)
print("one trace:", tensors[0].shape, "(steps, layers, heads, H, W)")

manifest = profile_heads(tensors, n_dynamic=4, tau=8)

# the score table: near 1 means the map keeps its shape, low means it moves
np.set_printoptions(precision=2, suppress=True)
print(manifest.scores())

# the toy model was built with a known set of scanning heads per layer
for layer in range(model.n_layers):
    found = sorted(manifest.dynamic_heads(layer))
    planted = sorted(model.planted_dynamic[layer])
    print(f"layer {layer:2d}  dynamic {found}  planted {planted}")
