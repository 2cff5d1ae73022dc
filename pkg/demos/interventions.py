"""
Four ways to decode one scene
=============================

Baseline greedy decoding against head amplification (vce), branch
consensus (sca) and both together (act).
"""
import numpy as np

from actkit import (
    InterventionConfig,
    build_toy_model,
    calibration_tensors,
    collect_calibration,
    decode,
    profile_heads,
    scene_for,
    score_output,
)

model = build_toy_model()
manifest = profile_heads(calibration_tensors(collect_calibration(model, 20)), 4, 8)
cfg = InterventionConfig.toy()      # alpha 0.6, band (4, 9), K 5

scene = scene_for(model, 17)
print(scene.grid)
print("present:", sorted(scene.objects_present))

prompt = model.default_prompt()
for mode in ("baseline", "vce", "sca", "act"):
    res = decode(model, scene, prompt, cfg, mode, manifest)
    objs = [model.token_object(t) for t in res.tokens if model.token_object(t) is not None]
    s = score_output(res.tokens, scene, model)
    mass = res.visual_masses().mean()
    print(f"{mode:8s} objects {objs}  hallucinated {s.instance_rate:.2f}  visual mass {mass:.3f}")

# with the knobs at zero every mode is plain greedy decoding
base = decode(model, scene, prompt, cfg, "baseline").tokens
print("act(alpha=0, K=1) == baseline:",
      decode(model, scene, prompt, cfg.with_(alpha=0.0, K=1), "act", manifest).tokens == base)

# visual mass per layer at the first decode step, baseline vs act
b = decode(model, scene, prompt, cfg, "baseline").records[1].visual_mass.mean(axis=1)
a = decode(model, scene, prompt, cfg, "act", manifest).records[1].visual_mass.mean(axis=1)
print(np.round(np.c_[b, a], 3))
