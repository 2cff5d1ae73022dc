import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from actkit.attention import AttnMap2D, HeadAddress
from actkit.errors import (
    DegenerateMatrixError,
    IncompleteCalibrationError,
    InsufficientDataError,
    ShapeError,
)
from actkit.stcs import (
    HeadTrace,
    ProfileManifest,
    centered_frobenius_similarity,
    classify,
    profile_heads,
    stcs_step,
    trace_scores,
    windowed_stcs,
)

CORNER = [[0.5, 0.2, 0.05], [0.2, 0.1, 0.05], [0.05, 0.05, 0.0]]
CENTER = [[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]]
BLUR = [[0.3, 0.2, 0.1], [0.2, 0.1, 0.05], [0.1, 0.05, 0.02]]

maps = arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0))


def test_rho_self_and_negation(rng):
    X = rng.standard_normal((4, 4))
    assert centered_frobenius_similarity(X, X) == pytest.approx(1.0, abs=1e-12)
    assert centered_frobenius_similarity(X, -X) == pytest.approx(-1.0, abs=1e-12)


def test_rho_fixed_pair():
    # brute-force oracle: the centered entries are orthogonal
    assert oracles.rho([[1, 0], [0, 1]], [[1, 2], [3, 4]]) == 0.0
    assert centered_frobenius_similarity([[1, 0], [0, 1]], [[1, 2], [3, 4]]) == pytest.approx(0.0, abs=1e-15)


def test_rho_degenerate_and_shape():
    with pytest.raises(DegenerateMatrixError):
        centered_frobenius_similarity(np.ones((3, 3)), np.eye(3))
    with pytest.raises(ShapeError):
        centered_frobenius_similarity(np.eye(2), np.eye(3))


def test_phi_fixed_maps():
    # oracle values, computed from explicit covariance pairs
    assert stcs_step(CORNER, CENTER, clamp=False) == pytest.approx(-0.13721224403867796, abs=1e-12)
    assert stcs_step(CORNER, CENTER) == 0.0
    assert stcs_step(CORNER, BLUR) == pytest.approx(0.9802765425768125, abs=1e-12)


def test_phi_self_and_scale(rng):
    A = rng.random((4, 4))
    assert stcs_step(A, A) == pytest.approx(1.0, abs=1e-12)
    assert stcs_step(3.7 * A, A) == pytest.approx(1.0, abs=1e-12)


def test_phi_degenerate_convention():
    const = np.full((3, 3), 1 / 9)
    assert stcs_step(const, 2 * const) == 1.0
    assert stcs_step(const, np.array(CORNER)) == pytest.approx(0.5 * oracles._term(
        oracles.matmul(oracles.transpose(const.tolist()), const.tolist()),
        oracles.matmul(oracles.transpose(CORNER), CORNER)), abs=1e-12)
    assert stcs_step(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


@settings(max_examples=300, deadline=None)
@given(maps, maps)
def test_phi_matches_oracle(A, B):
    assert stcs_step(A, B) == pytest.approx(oracles.phi(A.tolist(), B.tolist()), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(maps, maps, st.floats(0.01, 100), st.floats(0.01, 100), st.permutations(range(3)), st.permutations(range(4)))
def test_phi_invariances(A, B, c, d, prow, pcol):
    base = stcs_step(A, B)
    assert stcs_step(B, A) == base
    assert 0.0 <= base <= 1.0
    assert -1 - 1e-9 <= stcs_step(A, B, clamp=False) <= 1 + 1e-9
    assert stcs_step(c * A, d * B) == pytest.approx(base, abs=1e-9)
    assert stcs_step(A[list(prow)], B[list(prow)]) == pytest.approx(base, abs=1e-9)
    assert stcs_step(A[:, list(pcol)], B[:, list(pcol)]) == pytest.approx(base, abs=1e-9)


def test_windowed_constant_and_alternating(rng):
    A = rng.random((3, 3))
    assert windowed_stcs(HeadTrace([A] * 6), 3) == pytest.approx(1.0)
    for tau in (2, 3, 8):
        assert windowed_stcs(HeadTrace([A, A, A]), tau) == pytest.approx(1.0)


def test_windowed_schedule_fixture():
    r = np.random.default_rng(7)
    trace = [r.random((3, 3)) for _ in range(5)]
    expected = oracles.windowed([m.tolist() for m in trace], 3)
    assert windowed_stcs(HeadTrace(trace), 3) == pytest.approx(expected, abs=1e-12)


def test_windowed_frozen_value():
    # random.Random(7) maps from the oracle session, value frozen from oracles.windowed
    import random
    rnd = random.Random(7)
    trace = [[[rnd.random() for _ in range(3)] for _ in range(3)] for _ in range(5)]
    assert windowed_stcs(np.array(trace), 3) == pytest.approx(0.22045354288215768, abs=1e-12)


def test_windowed_errors():
    with pytest.raises(InsufficientDataError):
        windowed_stcs(HeadTrace([np.eye(2)]), 3)
    with pytest.raises(ShapeError):
        HeadTrace([np.eye(2), np.eye(3)])
    with pytest.raises(ShapeError):
        HeadTrace([AttnMap2D(np.eye(2), step=2), AttnMap2D(np.eye(2), step=1)])


def test_trace_scores_matches_per_head(rng):
    T = rng.random((6, 2, 3, 3, 3))
    S = trace_scores(T, 4)
    for li in range(2):
        for h in range(3):
            assert S[li, h] == pytest.approx(windowed_stcs(T[:, li, h], 4), abs=1e-15)


def _planted_calibration(rng, n_images, n_layers=3, n_heads=5, planted=(0, 1), steps=10):
    tensors = []
    for _ in range(n_images):
        t = np.empty((steps, n_layers, n_heads, 4, 4))
        fixed = rng.random((n_layers, n_heads, 4, 4))
        for s in range(steps):
            t[s] = fixed
            for h in planted:
                m = np.zeros((4, 4))
                m[(s + h) % 4, (2 * s) % 4] = 0.9
                t[s, :, h] = m + 0.1 / 16
        tensors.append(t)
    return tensors


def test_profile_planted_recovery(rng):
    man = profile_heads(_planted_calibration(rng, 4), n_dynamic=2, tau=4)
    for li in range(3):
        assert man.dynamic_heads(li) == [0, 1]
        assert all(man.profile(HeadAddress(li, h)).mean_stcs == pytest.approx(1.0) for h in (2, 3, 4))


def test_profile_extremes_and_determinism(rng):
    cal = _planted_calibration(rng, 2)
    assert all(not p.is_dynamic for row in profile_heads(cal, 0, 4).layers for p in row)
    assert all(p.is_dynamic for row in profile_heads(cal, 5, 4).layers for p in row)
    a, b = profile_heads(cal, 2, 4), profile_heads(cal, 2, 4)
    assert a.to_json() == b.to_json()


def test_profile_mapping_input(rng):
    cal = _planted_calibration(rng, 2, n_layers=1, n_heads=3)
    by_head = {HeadAddress(0, h): [HeadTrace(list(t[:, 0, h])) for t in cal] for h in range(3)}
    a = profile_heads(by_head, 2, 4)
    b = profile_heads(cal, 2, 4)
    np.testing.assert_allclose(a.scores(), b.scores(), atol=1e-12)
    del by_head[HeadAddress(0, 1)]
    with pytest.raises(IncompleteCalibrationError):
        profile_heads(by_head, 1, 4)
    with pytest.raises(IncompleteCalibrationError):
        profile_heads([], 1, 4)


def test_images_weighted_equally():
    A, B = np.eye(3), np.ones((3, 3)) - np.eye(3)
    short = np.stack([A, B])[:, None, None]                      # phi(A, B)
    long_ = np.stack([A] * 9)[:, None, None]                     # 1.0
    man = profile_heads([short, long_], 0, 8)
    assert man.scores()[0, 0] == pytest.approx(0.5 * (stcs_step(A, B) + 1.0))


def test_classify_ties_lower_head():
    man = classify(np.array([[0.5, 0.2, 0.2, 0.9]]), 2, 8)
    assert man.dynamic_heads(0) == [1, 2]
    man = classify(np.array([[0.3, 0.3, 0.3, 0.3]]), 1, 8)
    assert man.dynamic_heads(0) == [0]


def test_manifest_json_round_trip(tmp_path, rng):
    man = profile_heads(_planted_calibration(rng, 2), 2, 4, {"corpus": "planted", "seed": 3})
    doc = json.loads(man.to_json())
    assert set(doc) == {"tau", "n_dynamic", "layers", "calibration"}
    assert doc["layers"][0]["heads"][0]["class"] in ("dynamic", "static")
    man.save(tmp_path / "m.json")
    back = ProfileManifest.load(tmp_path / "m.json")
    assert back.to_json() == man.to_json()
    assert back.calibration["corpus"] == "planted"
    g = man.as_global()
    assert all(g.is_dynamic(HeadAddress(li, h)) for li in range(3) for h in range(5))
