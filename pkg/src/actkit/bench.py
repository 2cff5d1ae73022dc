"""Synthetic hallucination benchmark: scoring, grounding mass, mode comparison.

An object is "mentioned" when its dedicated vocabulary token is emitted;
mentioning an object that is not in the scene is a hallucination.  The
scene-level and instance-level rates are the usual CHAIR-style pair.
"""
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import MODES, DecodeResult, decode
from .errors import ConfigError
from .sca import make_record
from .toy import EOS, build_toy_model, forward_prefill, forward_step, scene_for, token_probs
from .vce import InterventionConfig, Phase

BENCH_MODES = MODES + ("nucleus", "beam")
CSV_COLUMNS = ("mode", "seed", "recall", "instance_rate", "scene_rate", "mean_grounding_mass", "output_length")
SWEEP_COLUMNS = (
    "param", "value", "mode", "n_runs", "recall", "instance_rate", "scene_rate",
    "mean_grounding_mass", "output_length", "modified_heads_per_layer",
)
SWEEP_PARAMS = ("alpha", "guidance_shift", "K")
DEFAULT_BUCKET = 8
NUCLEUS_P = 0.9
BEAM_WIDTH = 5


@dataclass(frozen=True)
class Mention:
    index: int        # position in the output
    obj: int
    hallucinated: bool


@dataclass(frozen=True)
class RunScore:
    recall: float
    instance_rate: float
    scene_rate: float
    output_length: int
    mentions: tuple = ()

    @property
    def n_hallucinated(self):
        return sum(m.hallucinated for m in self.mentions)


def mentions(tokens, scene, model):
    present = scene.objects_present
    out = []
    for i, t in enumerate(tokens):
        o = model.token_object(int(t))
        if o is not None:
            out.append(Mention(i, o, o not in present))
    return tuple(out)


def score_output(tokens, scene, model):
    """Recall of planted objects and hallucination rates for one output."""
    ms = mentions(tokens, scene, model)
    present = scene.objects_present
    emitted = {m.obj for m in ms}
    recall = len(emitted & present) / len(present) if present else 0.0
    n_hall = sum(m.hallucinated for m in ms)
    instance = n_hall / len(ms) if ms else 0.0
    return RunScore(recall, instance, 1.0 if n_hall else 0.0, len(tokens), ms)


def grounding_region(tokens, scene, model):
    """Cells of the present objects the output mentions (row-major indices)."""
    cells = set()
    for m in mentions(tokens, scene, model):
        if not m.hallucinated:
            cells |= scene.region(m.obj)
    return sorted(cells)


def grounding_mass_curve(result, scene, model=None, region=None):
    """Per-step attention mass on the ground-truth region, averaged over heads.

    ``region`` defaults to the union of the cells of every present object
    the output mentions; with no such object the curve is all zeros.
    """
    records = getattr(result, "records", result)
    if records is None or any(getattr(r, "maps", None) is None for r in records):
        raise ConfigError("decode result carries no attention maps")
    if region is None:
        if model is None:
            raise ConfigError("need the model (token mapping) or an explicit region")
        region = grounding_region(result.tokens, scene, model)
    region = np.asarray(sorted(region), dtype=np.int64)
    curve = []
    for r in records:
        flat = np.asarray(r.maps).reshape(r.maps.shape[0] * r.maps.shape[1], -1)
        curve.append(float(np.clip(flat[:, region].sum(axis=1).mean(), 0.0, 1.0)) if region.size else 0.0)
    return np.array(curve)


def positional_histogram(runs, bucket_width=DEFAULT_BUCKET, max_tokens=None):
    """Hallucination rate among mentions, bucketed by output position.

    Buckets ``[k w, (k+1) w)`` cover ``[0, max_tokens]`` (default: the longest
    output).  A bucket with no mentions has rate ``None``.
    """
    runs = list(runs)
    if not runs:
        raise ConfigError("positional histogram needs at least one run")
    if bucket_width < 1 or int(bucket_width) != bucket_width:
        raise ConfigError(f"bucket width must be a positive integer, got {bucket_width}")
    w = int(bucket_width)
    if max_tokens is None:
        max_tokens = max(max((r.output_length for r in runs), default=0), 1)
    n_buckets = max(1, math.ceil(max_tokens / w))
    total = np.zeros(n_buckets, dtype=np.int64)
    hall = np.zeros(n_buckets, dtype=np.int64)
    for r in runs:
        for m in r.mentions:
            b = m.index // w
            if b >= n_buckets:
                raise ConfigError(f"mention at index {m.index} beyond max_tokens={max_tokens}")
            total[b] += 1
            hall[b] += m.hallucinated
    return {
        "bucket_width": w,
        "max_tokens": int(max_tokens),
        "buckets": [
            {
                "start": b * w,
                "end": (b + 1) * w,
                "mentions": int(total[b]),
                "hallucinated": int(hall[b]),
                "rate": float(hall[b] / total[b]) if total[b] else None,
            }
            for b in range(n_buckets)
        ],
    }


# --- harness-only decoding baselines ---------------------------------------

def replay(model, scene, prompt, tokens, mode):
    """Teacher-force ``tokens`` through the unhooked model to recover maps."""
    out, cache = forward_prefill(model, scene, prompt, capacity=model.n_vis + len(prompt) + len(tokens) + 1)
    records = []
    for i, t in enumerate(tokens):
        if i:
            out = forward_step(model, [tokens[i - 1]], cache)
            cache.append(out.k_new, out.v_new)
        phase = Phase.PREFILL if i == 0 else Phase.DECODE
        records.append(make_record(model, i, t, phase, [t], np.ones(1), out, ()))
    return DecodeResult(list(tokens), records, "", mode)


def nucleus_tokens(model, scene, prompt, seed, max_tokens, p=NUCLEUS_P):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x6E75,)))
    out, cache = forward_prefill(model, scene, prompt, capacity=model.n_vis + len(prompt) + max_tokens + 1)
    tokens = []
    while len(tokens) < max_tokens:
        probs = token_probs(out.logits)[0]
        order = np.argsort(-probs, kind="stable")
        keep = order[: int(np.searchsorted(np.cumsum(probs[order]), p)) + 1]
        q = probs[keep] / probs[keep].sum()
        t = int(keep[rng.choice(len(keep), p=q)])
        if t == EOS:
            return tokens, "eos"
        tokens.append(t)
        out = forward_step(model, [t], cache)
        cache.append(out.k_new, out.v_new)
    return tokens, "max_tokens"


def beam_tokens(model, scene, prompt, max_tokens, width=BEAM_WIDTH):
    """Beam search with one cache per beam.

    Hypotheses are ranked by mean log-probability per scored token (EOS
    counts as a token); ties go to the lexicographically smaller output.
    """
    out, cache = forward_prefill(model, scene, prompt, capacity=model.n_vis + len(prompt) + max_tokens + 1)
    live = [((), 0.0, cache, out.logits)]
    done = []
    while live and len(done) < width:
        cands = []
        for bi, (toks, lp, _, logits) in enumerate(live):
            logp = np.log(np.maximum(token_probs(logits)[0], 1e-300))
            for t in np.argsort(-logp, kind="stable")[:width]:
                cands.append((-(lp + logp[t]), bi, int(t)))
        cands.sort()
        grown = []
        for neg, bi, t in cands:
            toks = live[bi][0]
            if t == EOS:
                done.append((toks, -neg / (len(toks) + 1), "eos"))
            else:
                grown.append((bi, toks + (t,), -neg))
            if len(grown) == width:
                break
        nxt = []
        for bi, toks, lp in grown:
            if len(toks) >= max_tokens:
                done.append((toks, lp / len(toks), "max_tokens"))
                continue
            c = live[bi][2].copy()
            o = forward_step(model, [toks[-1]], c)
            c.append(o.k_new, o.v_new)
            nxt.append((toks, lp, c, o.logits))
        live = nxt
    for toks, lp, _, _ in live:
        done.append((toks, lp / max(len(toks), 1), "max_tokens"))
    toks, _, reason = min(done, key=lambda h: (-h[1], h[0]))
    return list(toks), reason


# --- per-run scoring and mode comparison -----------------------------------

@dataclass(frozen=True)
class RunRow:
    mode: str
    seed: int
    recall: float
    instance_rate: float
    scene_rate: float
    mean_grounding_mass: float
    output_length: int
    score: RunScore = field(repr=False, compare=False, default=None)
    amplified: frozenset = field(repr=False, compare=False, default=frozenset())

    def csv_fields(self):
        return [
            self.mode, str(self.seed), f"{self.recall:.6f}", f"{self.instance_rate:.6f}",
            f"{self.scene_rate:.6f}", f"{self.mean_grounding_mass:.6f}", str(self.output_length),
        ]


def run_once(model, scene, seed, mode, cfg, manifest=None, prompt=None):
    """Decode one scene under ``mode`` and score it."""
    prompt = list(prompt or model.default_prompt())
    if mode in MODES:
        result = decode(model, scene, prompt, cfg, mode, manifest)
    elif mode == "nucleus":
        toks, reason = nucleus_tokens(model, scene, prompt, seed, cfg.max_tokens)
        result = replay(model, scene, prompt, toks, mode)
        result.stop_reason = reason
    elif mode == "beam":
        toks, reason = beam_tokens(model, scene, prompt, cfg.max_tokens)
        result = replay(model, scene, prompt, toks, mode)
        result.stop_reason = reason
    else:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {BENCH_MODES}")
    sc = score_output(result.tokens, scene, model)
    curve = grounding_mass_curve(result, scene, model)
    amplified = frozenset().union(*(r.amplified for r in result.records if r.phase == Phase.DECODE.value))
    return RunRow(
        mode, int(seed), sc.recall, sc.instance_rate, sc.scene_rate,
        float(curve.mean()) if curve.size else 0.0, sc.output_length, sc, amplified,
    )


def _run_job(args):
    return run_once(*args)


@dataclass
class HallucinationReport:
    rows: list
    bucket_width: int = DEFAULT_BUCKET
    max_tokens: int = None

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.mode, r.seed))

    @property
    def modes(self):
        return sorted({r.mode for r in self.rows})

    def rows_for(self, mode):
        return [r for r in self.rows if r.mode == mode]

    def aggregate(self, mode):
        rows = self.rows_for(mode)
        if not rows:
            raise KeyError(mode)
        cols = CSV_COLUMNS[2:]
        return {c: float(np.mean([getattr(r, c) for r in rows])) for c in cols} | {"n_runs": len(rows)}

    def histogram(self, mode):
        return positional_histogram([r.score for r in self.rows_for(mode)], self.bucket_width, self.max_tokens)

    def histograms(self):
        return {m: self.histogram(m) for m in self.modes}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def histograms_json(self):
        return json.dumps(self.histograms(), indent=2, sort_keys=True) + "\n"


def _check_modes(modes):
    modes = list(modes)
    if not modes:
        raise ConfigError("no modes requested")
    bad = [m for m in modes if m not in BENCH_MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {bad}; expected a subset of {BENCH_MODES}")
    return modes


def compare_modes(scenes, seeds, modes, cfg=None, *, model=None, manifest=None, prompt=None,
                  jobs=1, bucket_width=DEFAULT_BUCKET):
    """Run every mode over the same (scene, seed) pairs.

    ``scenes`` may be ``None``, in which case scene ``i`` is generated from
    ``seeds[i]``.  Rows come back sorted by ``(mode, seed)``.
    """
    modes = _check_modes(modes)
    model = model or build_toy_model()
    cfg = cfg or InterventionConfig.toy()
    seeds = [int(s) for s in seeds]
    if scenes is None:
        scenes = [scene_for(model, s) for s in seeds]
    scenes = list(scenes)
    if not scenes:
        raise ConfigError("empty scene set")
    if len(scenes) != len(seeds):
        raise ConfigError(f"{len(scenes)} scenes but {len(seeds)} seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct (they key the report rows)")
    if any(m in ("vce", "act") for m in modes) and manifest is None:
        raise ConfigError("vce/act modes need a profile manifest")
    jobs_list = [(model, sc, sd, m, cfg, manifest, prompt) for m in modes for sc, sd in zip(scenes, seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_job, jobs_list, chunksize=max(1, len(jobs_list) // (4 * jobs))))
    else:
        rows = [_run_job(j) for j in jobs_list]
    return HallucinationReport(rows, bucket_width, cfg.max_tokens)


def _format_layer_counts(amplified, n_layers):
    counts = np.zeros(n_layers, dtype=np.int64)
    for layer, _ in amplified:
        counts[layer] += 1
    return ";".join(str(int(c)) for c in counts)


def sweep(param, values, seeds, cfg=None, *, mode="act", model=None, manifest=None, scenes=None,
          prompt=None, jobs=1):
    """One aggregate row per parameter value over a fixed set of seeds.

    ``modified_heads_per_layer`` counts, per layer, the distinct heads
    amplified at any decode step of any run (``;``-separated).
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    values = list(values)
    if not values:
        raise ConfigError("no sweep values")
    model = model or build_toy_model()
    cfg = cfg or InterventionConfig.toy()
    rows = []
    for v in values:
        v = int(v) if param == "K" else float(v)
        run_cfg = cfg.with_(**{param: v})
        rep = compare_modes(scenes, seeds, [mode], run_cfg, model=model, manifest=manifest,
                            prompt=prompt, jobs=jobs)
        agg = rep.aggregate(mode)
        amplified = frozenset().union(*(r.amplified for r in rep.rows))
        rows.append({
            "param": param,
            "value": v,
            "mode": mode,
            "n_runs": agg["n_runs"],
            **{c: agg[c] for c in CSV_COLUMNS[2:]},
            "modified_heads_per_layer": _format_layer_counts(amplified, model.n_layers),
        })
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        value = str(r["value"]) if isinstance(r["value"], int) else f"{r['value']:.6f}"
        w.writerow([
            r["param"], value, r["mode"], r["n_runs"],
            *(f"{r[c]:.6f}" for c in CSV_COLUMNS[2:]),
            r["modified_heads_per_layer"],
        ])
    return buf.getvalue()
