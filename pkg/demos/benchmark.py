"""
Hallucination rates over many scenes
====================================

The same 30 scenes decoded under every mode, scored CHAIR-style, plus
the positional histogram of hallucinated mentions.
"""
from actkit import build_toy_model, calibration_tensors, collect_calibration, compare_modes, profile_heads

model = build_toy_model()
manifest = profile_heads(calibration_tensors(collect_calibration(model, 50)), 4, 8)

seeds = list(range(30))
report = compare_modes(None, seeds, ["baseline", "vce", "sca", "act", "nucleus", "beam"],
                       model=model, manifest=manifest)

for mode in report.modes:
    agg = report.aggregate(mode)
    print(f"{mode:9s} recall {agg['recall']:.3f}  instance {agg['instance_rate']:.3f}  "
          f"scene {agg['scene_rate']:.3f}  length {agg['output_length']:.1f}")

# where in the output do hallucinations land?
for b in report.histogram("baseline")["buckets"]:
    if b["mentions"]:
        print(f"[{b['start']:2d},{b['end']:2d})  {b['hallucinated']}/{b['mentions']}")

print(report.to_csv().splitlines()[:3])
