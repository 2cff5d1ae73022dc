"""Spatio-temporal covariance similarity (STCS) and head profiling.

For two consecutive spatial attention maps ``A`` and ``B`` of one head the
step similarity is the mean of two normalized centered Frobenius inner
products, one between the row covariances ``A A^T`` / ``B B^T`` and one
between the column covariances ``A^T A`` / ``B^T B``, clamped to [0, 1].
Heads whose windowed average stays low keep moving their spatial focus
(dynamic); heads near 1 keep looking at the same place (static).
"""
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attention import AttnMap2D, HeadAddress
from .errors import (
    DegenerateMatrixError,
    IncompleteCalibrationError,
    IncompleteManifestError,
    InsufficientDataError,
    ShapeError,
)

DEFAULT_TAU = 8
# Relative to ||X||_F so the test is invariant to positive rescaling.
DEGENERATE_TOL = 1e-12

DYNAMIC = "dynamic"
STATIC = "static"


def _centered(X):
    return X - X.mean(axis=(-2, -1), keepdims=True)


def _frob(X):
    return np.sqrt(np.sum(X * X, axis=(-2, -1)))


def _degenerate(X, Xc_norm):
    return Xc_norm <= DEGENERATE_TOL * _frob(X)


def centered_frobenius_similarity(X, Y):
    """Normalized centered Frobenius inner product of two equal-shape matrices.

    Raises
    ------
    DegenerateMatrixError
        If either matrix is constant (zero centered norm).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise ShapeError(f"shape mismatch: {X.shape} vs {Y.shape}")
    Xc, Yc = _centered(X), _centered(Y)
    nx, ny = _frob(Xc), _frob(Yc)
    if _degenerate(X, nx) or _degenerate(Y, ny):
        raise DegenerateMatrixError("centered matrix has zero Frobenius norm")
    return float(np.sum(Xc * Yc) / (nx * ny))


def _aligned(X, Y):
    """Batched centered similarity with the degenerate convention applied.

    Both degenerate -> 1, exactly one degenerate -> 0.
    """
    Xc, Yc = _centered(X), _centered(Y)
    nx, ny = _frob(Xc), _frob(Yc)
    dx, dy = _degenerate(X, nx), _degenerate(Y, ny)
    ok = ~(dx | dy)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.sum(Xc * Yc, axis=(-2, -1)) / (nx * ny)
    return np.where(ok, rho, np.where(dx & dy, 1.0, 0.0))


def stcs_pairs(A_prev, A_cur, clamp=True):
    """Vectorized step similarity over stacks of maps shaped ``(..., H, W)``."""
    A_prev = np.asarray(A_prev, dtype=np.float64)
    A_cur = np.asarray(A_cur, dtype=np.float64)
    if A_prev.shape != A_cur.shape or A_prev.ndim < 2:
        raise ShapeError(f"map shape mismatch: {A_prev.shape} vs {A_cur.shape}")
    At_prev = np.swapaxes(A_prev, -1, -2)
    At_cur = np.swapaxes(A_cur, -1, -2)
    rows = _aligned(A_prev @ At_prev, A_cur @ At_cur)
    cols = _aligned(At_prev @ A_prev, At_cur @ A_cur)
    phi = 0.5 * (rows + cols)
    return np.clip(phi, 0.0, 1.0) if clamp else phi


def _grid(A):
    return A.grid if isinstance(A, AttnMap2D) else np.asarray(A, dtype=np.float64)


def stcs_step(A_prev, A_cur, clamp=True):
    """Similarity of two consecutive attention maps, in [0, 1].

    ``clamp=False`` exposes the raw mean alignment, which lies in [-1, 1].
    """
    a, b = _grid(A_prev), _grid(A_cur)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {a.shape}")
    return float(stcs_pairs(a, b, clamp=clamp))


def _window_mean(phis, tau):
    # phis: (T-1, ...) consecutive-pair similarities along axis 0
    n_pairs = phis.shape[0]
    if n_pairs <= tau - 1:
        return phis.mean(axis=0)
    windows = sliding_window_view(phis, tau - 1, axis=0)
    return windows.mean(axis=-1).mean(axis=0)


@dataclass(frozen=True)
class HeadTrace:
    """All spatial maps of one head over one run, ordered by decode step."""

    maps: tuple

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))
        shapes = {_grid(m).shape for m in self.maps}
        if len(shapes) > 1:
            raise ShapeError(f"maps in a trace must share one grid shape, got {shapes}")
        steps = [m.step for m in self.maps if isinstance(m, AttnMap2D)]
        if len(steps) == len(self.maps) and any(b <= a for a, b in zip(steps, steps[1:])):
            raise ShapeError("trace steps must be strictly increasing")

    @property
    def step_count(self):
        return len(self.maps)

    def stack(self):
        return np.stack([_grid(m) for m in self.maps])


def windowed_stcs(trace, tau=DEFAULT_TAU):
    """Average step similarity over sliding windows of ``tau`` steps.

    Each window contributes the mean of its ``tau - 1`` consecutive-pair
    similarities; windows are then averaged.  A trace shorter than ``tau``
    forms one window.
    """
    if tau < 2:
        raise ShapeError("window size tau must be >= 2")
    maps = trace.stack() if isinstance(trace, HeadTrace) else np.asarray(trace, dtype=np.float64)
    if maps.shape[0] < 2:
        raise InsufficientDataError("need at least 2 steps to compute STCS")
    return float(_window_mean(stcs_pairs(maps[:-1], maps[1:]), tau))


def trace_scores(tensor, tau=DEFAULT_TAU):
    """Windowed STCS for every head of one run.

    Parameters
    ----------
    tensor : ndarray, shape (steps, layers, heads, H, W)

    Returns
    -------
    ndarray, shape (layers, heads)
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 5:
        raise ShapeError(f"expected (steps, layers, heads, H, W), got {tensor.shape}")
    if tensor.shape[0] < 2:
        raise IncompleteCalibrationError("calibration trace has fewer than 2 decode steps")
    if tau < 2:
        raise ShapeError("window size tau must be >= 2")
    return _window_mean(stcs_pairs(tensor[:-1], tensor[1:]), tau)


@dataclass(frozen=True)
class HeadProfile:
    address: HeadAddress
    mean_stcs: float
    cls: str

    def __post_init__(self):
        if self.cls not in (DYNAMIC, STATIC):
            raise ValueError(f"unknown head class {self.cls!r}")
        if not 0.0 <= self.mean_stcs <= 1.0:
            raise ValueError(f"mean_stcs {self.mean_stcs} outside [0, 1]")

    @property
    def is_dynamic(self):
        return self.cls == DYNAMIC


@dataclass(frozen=True)
class ProfileManifest:
    """Per-layer head classification produced by :func:`profile_heads`."""

    tau: int
    n_dynamic: int
    layers: tuple
    calibration: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(row) for row in self.layers))
        for li, row in enumerate(self.layers):
            heads = [p.address.head for p in row]
            if heads != list(range(len(row))) or any(p.address.layer != li for p in row):
                raise IncompleteManifestError(f"layer {li} does not list heads 0..{len(row) - 1} in order")
            n_dyn = sum(p.is_dynamic for p in row)
            if n_dyn != self.n_dynamic:
                raise ValueError(f"layer {li} has {n_dyn} dynamic heads, expected {self.n_dynamic}")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_heads(self):
        return len(self.layers[0]) if self.layers else 0

    def profile(self, address):
        try:
            if address.layer < 0 or address.head < 0:
                raise IndexError
            return self.layers[address.layer][address.head]
        except IndexError:
            raise IncompleteManifestError(f"{address} not covered by manifest") from None

    def is_dynamic(self, address):
        return self.profile(address).is_dynamic

    def dynamic_heads(self, layer):
        return [p.address.head for p in self.layers[layer] if p.is_dynamic]

    def scores(self):
        return np.array([[p.mean_stcs for p in row] for row in self.layers])

    def matches(self, n_layers, n_heads):
        return self.n_layers == n_layers and self.n_heads == n_heads

    def as_global(self):
        """Same scores with every head marked dynamic (uniform-amplification ablation)."""
        layers = [
            [HeadProfile(p.address, p.mean_stcs, DYNAMIC) for p in row] for row in self.layers
        ]
        return ProfileManifest(self.tau, self.n_heads, layers, dict(self.calibration, variant="global"))

    def to_dict(self):
        return {
            "tau": self.tau,
            "n_dynamic": self.n_dynamic,
            "layers": [
                {
                    "layer": li,
                    "heads": [
                        {"head": p.address.head, "mean_stcs": float(f"{p.mean_stcs:.9g}"), "class": p.cls}
                        for p in row
                    ],
                }
                for li, row in enumerate(self.layers)
            ],
            "calibration": dict(self.calibration),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc):
        try:
            layers = []
            for entry in sorted(doc["layers"], key=lambda e: e["layer"]):
                li = int(entry["layer"])
                row = [
                    HeadProfile(HeadAddress(li, int(h["head"])), float(h["mean_stcs"]), h["class"])
                    for h in sorted(entry["heads"], key=lambda h: h["head"])
                ]
                layers.append(row)
            return cls(int(doc["tau"]), int(doc["n_dynamic"]), layers, dict(doc.get("calibration", {})))
        except (KeyError, TypeError) as exc:
            raise IncompleteManifestError(f"malformed manifest: {exc}") from None

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json(indent=2) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def classify(scores, n_dynamic, tau, calibration=None):
    """Build a manifest from a ``(layers, heads)`` score table.

    The ``n_dynamic`` lowest-scoring heads per layer are dynamic; ties go
    to the lower head index.
    """
    scores = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    n_layers, n_heads = scores.shape
    if not 0 <= n_dynamic <= n_heads:
        raise ValueError(f"n_dynamic={n_dynamic} outside [0, {n_heads}]")
    layers = []
    for li in range(n_layers):
        order = np.lexsort((np.arange(n_heads), scores[li]))
        dyn = set(order[:n_dynamic].tolist())
        layers.append([
            HeadProfile(HeadAddress(li, h), float(scores[li, h]), DYNAMIC if h in dyn else STATIC)
            for h in range(n_heads)
        ])
    return ProfileManifest(tau, n_dynamic, layers, dict(calibration or {}))


def profile_heads(calibration, n_dynamic, tau=DEFAULT_TAU, metadata=None):
    """Profile every head over a calibration set and classify it.

    Parameters
    ----------
    calibration : sequence of ndarray or mapping
        Either one ``(steps, layers, heads, H, W)`` tensor per calibration
        image, or a mapping ``HeadAddress -> sequence of HeadTrace``.
    n_dynamic : int
        Number of dynamic heads selected per layer.
    tau : int
        Temporal window size.
    metadata : dict, optional
        Stored verbatim as the manifest's calibration block.

    Each image contributes equally to a head's mean score regardless of
    its trace length.
    """
    meta = {"image_count": 0, "tau": tau}
    meta.update(metadata or {})
    if isinstance(calibration, Mapping):
        scores = _profile_mapping(calibration, tau)
        meta["image_count"] = meta.get("image_count") or max(len(v) for v in calibration.values())
    else:
        scores = _profile_tensors(calibration, tau)
        meta["image_count"] = meta.get("image_count") or len(calibration)
    return classify(scores, n_dynamic, tau, meta)


def _profile_tensors(tensors: Sequence, tau):
    if len(tensors) == 0:
        raise IncompleteCalibrationError("empty calibration set")
    dims = {tuple(np.shape(t)[1:3]) for t in tensors}
    if len(dims) != 1:
        raise IncompleteCalibrationError(f"calibration traces disagree on (layers, heads): {sorted(dims)}")
    total = None
    for t in tensors:
        s = trace_scores(t, tau)
        total = s if total is None else total + s
    return total / len(tensors)


def _profile_mapping(traces: Mapping, tau):
    if not traces:
        raise IncompleteCalibrationError("empty calibration set")
    n_layers = max(a.layer for a in traces) + 1
    n_heads = max(a.head for a in traces) + 1
    scores = np.empty((n_layers, n_heads))
    for li in range(n_layers):
        for h in range(n_heads):
            runs = traces.get(HeadAddress(li, h))
            if not runs:
                raise IncompleteCalibrationError(f"no calibration trace for layer {li} head {h}")
            vals = []
            for run in runs:
                try:
                    vals.append(windowed_stcs(run, tau))
                except InsufficientDataError:
                    raise IncompleteCalibrationError(
                        f"trace for layer {li} head {h} has fewer than 2 steps"
                    ) from None
            scores[li, h] = float(np.mean(vals))
    return scores
