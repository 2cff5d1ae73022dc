"""Command-line entry point: ``actkit {profile,decode,bench,sweep}``.

Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O error.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from .config import RunConfig
from .engine import MODES, collect_calibration, calibration_tensors, decode
from .errors import (
    CalibrationMismatchError,
    ConfigError,
    IncompleteCalibrationError,
    IncompleteManifestError,
    InsufficientDataError,
    TraceFormatError,
)
from .stcs import ProfileManifest, profile_heads
from .toy import build_toy_model, scene_for
from .trace_io import load_calibration, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
DATA_ERRORS = (
    OSError, TraceFormatError, CalibrationMismatchError, IncompleteCalibrationError,
    IncompleteManifestError, InsufficientDataError, json.JSONDecodeError,
)


class UsageError(ConfigError):
    pass


def _csv_list(text, cast=str):
    return [cast(x.strip()) for x in text.split(",") if x.strip()]


def _overrides(args):
    over = {}
    vce = {}
    if getattr(args, "alpha", None) is not None:
        vce["alpha"] = args.alpha
    if getattr(args, "guidance_shift", None) is not None:
        vce["guidance_shift"] = args.guidance_shift
    if getattr(args, "n_dynamic", None) is not None:
        vce["n_dynamic"] = args.n_dynamic
    if vce:
        over["vce"] = vce
    if getattr(args, "K", None) is not None:
        over["K"] = args.K
    if getattr(args, "max_tokens", None) is not None:
        over["max_tokens"] = args.max_tokens
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None) is not None and args.command == "decode":
        over["mode"] = args.mode
    return over


def _stamp(doc, args):
    if not args.deterministic:
        doc["created"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return doc


def _path_repr(path, args):
    return Path(path).name if args.deterministic else str(Path(path).resolve())


def _write_text(path, text):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_text(text)


def _calibrate(rc, model, n_images, trace_out=None):
    st = rc["stcs"]
    runs = collect_calibration(model, n_images, seed=st["calib_seed"] + rc.seed, steps=st["calib_steps"],
                               density=rc["scene"]["density"])
    if trace_out:
        Path(trace_out).mkdir(parents=True, exist_ok=True)
        width = len(str(n_images - 1))
        for i, r in enumerate(runs):
            write_trace(r.attention_tensor(), Path(trace_out) / f"calib_{i:0{width}d}.atrc", includes_prefill=True)
    return calibration_tensors(runs)


def _auto_manifest(rc, model, args):
    if args.manifest:
        return _load_manifest(args.manifest, model)
    n = rc["stcs"]["calib_images"]
    tensors = _calibrate(rc, model, n)
    return profile_heads(tensors, rc.intervention.n_dynamic, rc.intervention.tau,
                         {"source": "generated", "image_count": n})


def _load_manifest(path, model):
    try:
        man = ProfileManifest.load(path)
    except (ValueError, TypeError) as e:
        raise IncompleteManifestError(f"manifest {path} is malformed: {e}") from None
    if not man.matches(model.n_layers, model.n_heads):
        raise ConfigError(
            f"manifest {path} covers {man.n_layers}x{man.n_heads} heads, model has "
            f"{model.n_layers}x{model.n_heads}"
        )
    return man


def cmd_profile(args, rc):
    model = build_toy_model(rc.model)
    if (args.trace_dir is None) == (args.generate is None):
        raise UsageError("profile: give exactly one of --trace-dir or --generate")
    if args.generate is not None:
        if args.generate < 1:
            raise UsageError("--generate must be >= 1")
        tensors = _calibrate(rc, model, args.generate, args.trace_out)
        meta = {"source": "generated", "image_count": args.generate, "seed": rc.seed}
    else:
        c = rc.model
        tensors = load_calibration(args.trace_dir, {"layers": c.n_layers, "heads": c.n_heads,
                                                    "H": c.grid[0], "W": c.grid[1]})
        meta = {"source": _path_repr(args.trace_dir, args), "image_count": len(tensors)}
    man = profile_heads(tensors, rc.intervention.n_dynamic, rc.intervention.tau, _stamp(meta, args))
    _write_text(args.out, man.to_json(indent=2) + "\n")
    for li in range(man.n_layers):
        print(f"layer {li:2d}: dynamic heads {man.dynamic_heads(li)}")
    return EXIT_OK


def cmd_decode(args, rc):
    model = build_toy_model(rc.model)
    mode = rc["mode"]
    manifest = None
    if mode in ("vce", "act"):
        if not args.manifest:
            raise UsageError(f"--mode {mode} requires --manifest")
        manifest = _load_manifest(args.manifest, model)
    elif args.manifest:
        manifest = _load_manifest(args.manifest, model)
    scene_seed = rc.seed if args.scene_seed is None else args.scene_seed
    scene = scene_for(model, scene_seed, rc["scene"]["density"])
    result = decode(model, scene, model.default_prompt(), rc.intervention, mode, manifest)
    doc = result.to_dict()
    doc["scene"] = scene.to_dict()
    doc["score"] = {
        k: v for k, v in vars(bench_mod.score_output(result.tokens, scene, model)).items() if k != "mentions"
    }
    doc["meta"]["config"] = rc.intervention.to_dict()
    doc["meta"] = _stamp(doc["meta"], args)
    if args.trace_out:
        write_trace(result.attention_tensor(), args.trace_out, includes_prefill=True)
        doc["meta"]["trace"] = _path_repr(args.trace_out, args)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_modes(text):
    modes = _csv_list(text)
    bad = [m for m in modes if m not in bench_mod.BENCH_MODES]
    if bad or not modes:
        raise UsageError(f"--modes: unknown mode(s) {bad}; choose from {','.join(bench_mod.BENCH_MODES)}")
    return modes


def _seeds(rc, n):
    if n < 1:
        raise UsageError("--scenes must be >= 1")
    return [rc.seed + i for i in range(n)]


def cmd_bench(args, rc):
    model = build_toy_model(rc.model)
    modes = _parse_modes(args.modes) if args.modes else list(rc["bench"]["modes"])
    _parse_modes(",".join(modes))
    n = args.scenes if args.scenes is not None else rc["bench"]["scenes"]
    seeds = _seeds(rc, n)
    needs = any(m in ("vce", "act") for m in modes)
    manifest = _auto_manifest(rc, model, args) if needs else None
    scenes = [scene_for(model, s, rc["scene"]["density"]) for s in seeds]
    report = bench_mod.compare_modes(scenes, seeds, modes, rc.intervention, model=model, manifest=manifest,
                                     jobs=args.jobs, bucket_width=rc["bench"]["bucket_width"])
    _write_text(args.out, report.to_csv())
    if args.hist_out:
        _write_text(args.hist_out, report.histograms_json())
    for m in report.modes:
        agg = report.aggregate(m)
        print(f"{m:9s} recall={agg['recall']:.3f} chair_i={agg['instance_rate']:.3f} "
              f"chair_s={agg['scene_rate']:.3f} grounding={agg['mean_grounding_mass']:.3f}")
    return EXIT_OK


def cmd_sweep(args, rc):
    if args.param not in bench_mod.SWEEP_PARAMS:
        raise UsageError(f"--param: unknown parameter {args.param!r}; choose from {','.join(bench_mod.SWEEP_PARAMS)}")
    model = build_toy_model(rc.model)
    mode = args.mode
    if mode not in bench_mod.BENCH_MODES:
        raise UsageError(f"--mode: unknown mode {mode!r}")
    try:
        values = _csv_list(args.values, int if args.param == "K" else float)
    except ValueError:
        raise UsageError(f"--values: cannot parse {args.values!r}") from None
    if not values:
        raise UsageError("--values: empty list")
    n = args.scenes if args.scenes is not None else rc["bench"]["scenes"]
    seeds = _seeds(rc, n)
    manifest = _auto_manifest(rc, model, args) if mode in ("vce", "act") else None
    scenes = [scene_for(model, s, rc["scene"]["density"]) for s in seeds]
    rows = bench_mod.sweep(args.param, values, seeds, rc.intervention, mode=mode, model=model,
                           manifest=manifest, scenes=scenes, jobs=args.jobs)
    _write_text(args.out, bench_mod.sweep_csv(rows))
    for r in rows:
        print(f"{args.param}={r['value']}: chair_i={r['instance_rate']:.3f} recall={r['recall']:.3f}")
    return EXIT_OK


def _add_common(p):
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--seed", type=int, help="base seed (overrides config and ACT_SEED)")
    p.add_argument("--deterministic", action="store_true", help="strip timestamps and absolute paths")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def _add_knobs(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--guidance-shift", type=float, dest="guidance_shift")
    p.add_argument("--n-dynamic", type=int, dest="n_dynamic")
    p.add_argument("--max-tokens", type=int, dest="max_tokens")


def build_parser():
    ap = argparse.ArgumentParser(prog="actkit", description="Attention-score interventions on a toy LVLM.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="classify heads from calibration traces")
    _add_common(p)
    p.add_argument("--n-dynamic", type=int, dest="n_dynamic")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--trace-dir", help="directory of .atrc traces")
    src.add_argument("--generate", type=int, metavar="N", help="decode N toy calibration scenes")
    p.add_argument("--trace-out", help="with --generate: also write the traces here")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("decode", help="decode one scene")
    _add_common(p)
    _add_knobs(p)
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--scene-seed", type=int, dest="scene_seed")
    p.add_argument("--trace-out", help="write the attention trace (ATRC)")
    p.add_argument("--out", help="result JSON path (default stdout)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="compare modes over N scenes")
    _add_common(p)
    _add_knobs(p)
    p.add_argument("--scenes", type=int)
    p.add_argument("--modes", help="comma-separated subset of " + ",".join(bench_mod.BENCH_MODES))
    p.add_argument("--manifest", help="profile manifest (profiled on the fly if omitted)")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--hist-out", dest="hist_out", help="positional histogram JSON path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="bench one mode across parameter values")
    _add_common(p)
    _add_knobs(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--mode", default="act")
    p.add_argument("--scenes", type=int)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        rc = RunConfig.load(args.config, _overrides(args))
        return args.func(args, rc)
    except ConfigError as e:
        print(f"actkit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"actkit {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
