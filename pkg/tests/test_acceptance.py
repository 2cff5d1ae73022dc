"""Acceptance criteria 1-10; each test carries its runtime bound."""
import csv
import random
import struct
import time

import numpy as np
import pytest

import oracles
from actkit.attention import HeadAddress, assemble_attention, scaled_scores
from actkit.bench import Mention, RunScore, positional_histogram, score_output
from actkit.cli import main
from actkit.engine import ModeHook, calibration_tensors, collect_calibration, decode
from actkit.errors import (
    BadDimensionError,
    BadMagicError,
    BadVersionError,
    PayloadLengthError,
)
from actkit.sca import fuse_queries, fused_visual_scores, normalize_weights, spawn_branches, step_branches
from actkit.stcs import centered_frobenius_similarity, profile_heads, stcs_step
from actkit.toy import EOS, SyntheticScene, forward_prefill, scene_for, token_probs
from actkit.trace_io import decode_trace, encode_trace, read_trace, write_trace
from actkit.vce import InterventionConfig, Phase, vce_alpha


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


@pytest.mark.criterion(1, "mode lattice: act(a=0,K=1) = vce(a=0) = sca(K=1) = baseline")
def test_c1_mode_lattice(model, manifest):
    g = np.random.default_rng(101)
    cfg = InterventionConfig.toy()
    with Timer() as t:
        for _ in range(20):
            seed = int(g.integers(0, 2**31))
            scene = scene_for(model, seed, density=float(g.choice([0.15, 0.25, 0.4])))
            prompt = [1] + [int(x) for x in g.integers(1, model.first_object_token, size=int(g.integers(1, 5)))]
            base = decode(model, scene, prompt, cfg, "baseline").tokens
            assert decode(model, scene, prompt, cfg.with_(alpha=0.0, K=1), "act", manifest).tokens == base
            assert decode(model, scene, prompt, cfg.with_(alpha=0.0), "vce", manifest).tokens == base
            assert decode(model, scene, prompt, cfg.with_(K=1), "sca").tokens == base
    assert t.elapsed < 10


@pytest.mark.criterion(2, "rho matches the entrywise-loop oracle")
def test_c2_rho_oracle():
    g = np.random.default_rng(202)
    with Timer() as t:
        for _ in range(1000):
            shape = tuple(int(x) for x in g.integers(1, 9, size=2))
            if shape == (1, 1):
                shape = (1, 2)
            X, Y = g.normal(size=shape), g.normal(size=shape)
            want = oracles.rho(X.tolist(), Y.tolist())
            assert abs(centered_frobenius_similarity(X, Y) - want) <= 1e-6
    assert t.elapsed < 5


@pytest.mark.criterion(3, "STCS symmetry, scale and permutation invariance, range, identity")
def test_c3_stcs_properties():
    g = np.random.default_rng(303)
    with Timer() as t:
        for _ in range(500):
            H, W = (int(x) for x in g.integers(2, 9, size=2))
            A, B = g.random((H, W)), g.random((H, W))
            A, B = A / A.sum(), B / B.sum()
            v = stcs_step(A, B)
            assert v == stcs_step(B, A)
            assert 0.0 <= v <= 1.0
            c, k = float(g.uniform(0.01, 100)), float(g.uniform(0.01, 100))
            assert abs(stcs_step(c * A, k * B) - v) <= 1e-9
            pr, pc = g.permutation(H), g.permutation(W)
            assert abs(stcs_step(A[pr][:, pc], B[pr][:, pc]) - v) <= 1e-9
            assert stcs_step(A, A) == pytest.approx(1.0, abs=1e-12)
    assert t.elapsed < 5


@pytest.mark.criterion(4, "planted dynamic heads recovered at 5, 50 and 500 scenes")
@pytest.mark.parametrize("n", [5, 50, 500])
def test_c4_planted_recovery(model, n):
    with Timer() as t:
        runs = collect_calibration(model, n)
        man = profile_heads(calibration_tensors(runs), n_dynamic=4, tau=8)
    for layer in range(model.n_layers):
        assert frozenset(man.dynamic_heads(layer)) == model.planted_dynamic[layer]
    assert t.elapsed < 60


def _mass(s_vis, s_text):
    return assemble_attention(s_vis, s_text)[:, : s_vis.shape[1]].sum(axis=-1)


@pytest.mark.criterion(5, "gated-head visual mass strictly rises for alpha 0.2 and 0.6")
def test_c5_visual_mass_monotone(model, manifest):
    g = np.random.default_rng(505)
    checked = 0
    with Timer() as t:
        for alpha in (0.2, 0.6):
            cfg = InterventionConfig.toy(alpha=alpha)
            steps = 0
            while steps < 100:
                scene = scene_for(model, int(g.integers(0, 2**31)))
                prompt = model.default_prompt()
                out, cache = forward_prefill(model, scene, prompt)
                p = token_probs(out.logits)[0]
                bs = spawn_branches(p, cfg.K, (), cache, 1, len(prompt))
                for _ in range(int(g.integers(1, 8))):
                    inner = ModeHook("act", cfg, manifest, bs.weights)

                    def hook(site, inner=inner):
                        new = inner(site)
                        a = vce_alpha(HeadAddress(site.layer, site.head), site.phase, manifest, cfg)
                        if a > 0:
                            nonlocal checked
                            # the paired alpha = 0 run sees the same scores untouched
                            before, after = _mass(site.s_vis, site.s_text), _mass(new, site.s_text)
                            s_sca = fused_visual_scores(fuse_queries(site.q[:, None, :], inner.weights),
                                                        site.k_vis, site.d)
                            if (s_sca != 0).any():
                                checked += 1
                                assert (after > before).all(), (site.layer, site.head)
                            else:
                                assert (after == before).all()
                        return new

                    _, bs, _ = step_branches(bs, model, cfg, hook=hook, suppress_eos=True)
                    steps += 1
                    if steps == 100:
                        break
    assert checked > 0
    assert t.elapsed < 10


@pytest.mark.criterion(6, "SCA linearity and bit-identical in-band consensus at K=5")
def test_c6_sca_linearity_and_consensus(model):
    g = np.random.default_rng(606)
    for _ in range(500):
        k = int(g.integers(1, 6))
        qs = [g.normal(size=(1, 16)) for _ in range(k)]
        Kv = g.normal(size=(16, 16))
        w = normalize_weights(g.random(k) + 1e-3)
        avg = sum(wi * scaled_scores(q, Kv) for wi, q in zip(w, qs))
        assert np.abs(fused_visual_scores(fuse_queries(qs, w), Kv) - avg).max() <= 1e-9
    cfg = InterventionConfig.toy()
    assert cfg.K == 5
    lo, hi = cfg.layer_band
    for seed in range(5):
        res = decode(model, scene_for(model, seed), model.default_prompt(), cfg, "sca",
                     max_tokens=64, capture_scores=True)
        decode_recs = [r for r in res.records if r.phase == "decode"]
        assert decode_recs
        for r in decode_recs:
            s = r.vis_scores  # (layers, heads, K, n_vis)
            assert s.shape[2] == 5
            assert (s[lo:hi + 1] == s[lo:hi + 1, :, :1]).all()


def _corrupt(raw, offset, value):
    b = bytearray(raw)
    b[offset:offset + len(value)] = value
    return bytes(b)


@pytest.mark.criterion(7, "ATRC round trip and 8 named corruption errors")
def test_c7_atrc(tmp_path):
    g = np.random.default_rng(707)
    for i in range(100):
        shape = tuple(int(x) for x in g.integers(1, 5, size=5))
        t = g.random(shape).astype(np.float32)
        path = write_trace(t, tmp_path / f"t{i:03d}.atrc", includes_prefill=bool(i % 2))
        back, header = read_trace(path)
        assert back.tobytes() == t.tobytes() and header.includes_prefill == bool(i % 2)
    raw = encode_trace(np.ones((2, 2, 2, 2, 2), dtype=np.float32))
    cases = [
        (_corrupt(raw, 0, b"ATRX"), BadMagicError, "magic"),
        (_corrupt(raw, 4, struct.pack("<H", 2)), BadVersionError, "version"),
        *[(_corrupt(raw, 6 + 4 * i, struct.pack("<I", 0)), BadDimensionError, name)
          for i, name in enumerate(("steps", "layers", "heads", "H", "W"))],
        (raw[:-4], PayloadLengthError, "payload"),
    ]
    assert len(cases) == 8
    for blob, err, field in cases:
        with pytest.raises(err) as info:
            decode_trace(blob)
        assert info.value.field == field


@pytest.mark.criterion(8, "two deterministic 50-scene benches are byte-identical")
def test_c8_bench_determinism(tmp_path):
    outs = []
    with Timer() as t:
        for i in range(2):
            out = tmp_path / f"report{i}.csv"
            assert main(["bench", "--scenes", "50", "--modes", "baseline,vce,sca,act",
                         "--deterministic", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(outs[0].decode().splitlines()))
    assert len(rows) == 1 + 200
    assert t.elapsed <= 120


@pytest.mark.criterion(9, "alpha and guidance-shift sweeps: paired rows, baseline at 0, n_dynamic heads at 1.0")
def test_c9_sweep(tmp_path):
    n = "20"
    alpha = tmp_path / "alpha.csv"
    assert main(["sweep", "--param", "alpha", "--values", "0.0,0.2,0.4,0.6", "--K", "1",
                 "--scenes", n, "--deterministic", "--out", str(alpha)]) == 0
    rows = list(csv.DictReader(alpha.open()))
    assert [float(r["value"]) for r in rows] == [0.0, 0.2, 0.4, 0.6]
    assert {r["n_runs"] for r in rows} == {n}
    base = tmp_path / "base.csv"
    assert main(["bench", "--scenes", n, "--modes", "baseline", "--deterministic", "--out", str(base)]) == 0
    brows = list(csv.DictReader(base.open()))
    for col in ("recall", "instance_rate", "scene_rate", "mean_grounding_mass", "output_length"):
        mean = np.mean([float(r[col]) for r in brows])
        assert float(rows[0][col]) == pytest.approx(mean, abs=5e-7)
    assert rows[0]["modified_heads_per_layer"] == ";".join(["0"] * 12)

    shift = tmp_path / "shift.csv"
    assert main(["sweep", "--param", "guidance_shift", "--values", "0.0,1.0",
                 "--scenes", n, "--deterministic", "--out", str(shift)]) == 0
    srows = list(csv.DictReader(shift.open()))
    assert [float(r["value"]) for r in srows] == [0.0, 1.0]
    cfg = InterventionConfig.toy()
    lo, hi = cfg.layer_band
    counts = [int(c) for c in srows[1]["modified_heads_per_layer"].split(";")]
    assert counts == [cfg.n_dynamic if lo <= l <= hi else 0 for l in range(12)]
    assert srows[0]["modified_heads_per_layer"] == ";".join(["0"] * 12)


@pytest.mark.criterion(10, "positional histogram equals a direct tally on planted indices")
def test_c10_histogram_tally(model):
    g = random.Random(1010)
    scene = SyntheticScene([[0, 1, -1, -1], [-1, -1, 2, -1], [-1, -1, -1, -1], [-1, -1, -1, -1]])
    filler = [t for t in range(1, model.first_object_token)]
    runs, hall_idx, ok_idx = [], [], []
    for _ in range(25):
        n = g.randint(4, 48)
        tokens = [g.choice(filler) for _ in range(n)]
        hallucinated = g.sample(range(n), g.randint(0, 3))
        grounded = g.sample([i for i in range(n) if i not in hallucinated], g.randint(0, 3))
        for i in hallucinated:
            tokens[i] = model.object_token(g.choice([5, 9, 13]))
        for i in grounded:
            tokens[i] = model.object_token(g.choice([0, 1, 2]))
        runs.append(score_output(tokens, scene, model))
        hall_idx += hallucinated
        ok_idx += grounded
    h = positional_histogram(runs, 8, max_tokens=48)
    assert len(h["buckets"]) == 6
    for b in h["buckets"]:
        nh = sum(b["start"] <= i < b["end"] for i in hall_idx)
        no = sum(b["start"] <= i < b["end"] for i in ok_idx)
        assert (b["hallucinated"], b["mentions"]) == (nh, nh + no)
        assert b["rate"] == (nh / (nh + no) if nh + no else None)
