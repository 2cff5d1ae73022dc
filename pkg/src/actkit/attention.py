"""Dense attention primitives with explicit pre-softmax score access.

Score matrices are plain 2-D float arrays of shape ``(queries, keys)``.
Visual tokens always occupy a contiguous prefix of the key axis, so a
score row splits into a visual segment ``S_vis`` followed by a textual
segment ``S_text``.  Interventions rewrite ``S_vis`` only and the two
segments are re-joined by :func:`assemble_attention`.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class HeadAddress:
    layer: int
    head: int

    def check(self, n_layers, n_heads):
        if not (0 <= self.layer < n_layers and 0 <= self.head < n_heads):
            raise ShapeError(
                f"head address {self} outside model with {n_layers} layers x {n_heads} heads"
            )
        return self


@dataclass(frozen=True)
class AttnMap2D:
    """One head's visual attention at one decode step laid out on the patch grid."""

    grid: np.ndarray
    step: int = 0
    layer: int = 0
    head: int = 0

    @property
    def mass(self):
        return float(self.grid.sum())

    def flatten(self):
        return self.grid.reshape(-1)


def scaled_scores(Q, K, d=None):
    """Pre-softmax attention logits ``Q K^T / sqrt(d)``.

    Parameters
    ----------
    Q : array_like, shape (N, d)
    K : array_like, shape (M, d)
    d : int, optional
        Head dimension used for scaling. Defaults to the inner dimension.

    Returns
    -------
    numpy.ndarray, shape (N, M)
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2:
        raise ShapeError(f"expected 2-D operands, got {Q.shape} and {K.shape}")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"inner dimension mismatch: Q{Q.shape} vs K{K.shape}")
    if d is None:
        d = Q.shape[1]
    if d < 1:
        raise ShapeError("head dimension must be >= 1")
    return np.matmul(Q, K.T) / np.sqrt(d)


def softmax_rows(S):
    """Softmax along the last axis with max subtraction.

    ``-inf`` entries act as masks.  A row containing ``+inf`` puts all of
    its mass, split evenly, on the ``+inf`` positions (the limit of the
    softmax).  NaN raises :class:`InvalidInputError`.  Stacks of score
    matrices (``ndim > 2``) are normalized row by row.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2:
        raise ShapeError(f"expected a 2-D score matrix, got shape {S.shape}")
    m = S.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all() or np.isnan(S).any():
        return _softmax_special(S)
    e = np.exp(S - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_special(S):
    if np.isnan(S).any():
        raise InvalidInputError("NaN in attention scores")
    flat = S.reshape(-1, S.shape[-1])
    if np.isneginf(flat).all(axis=1).any():
        raise InvalidInputError("attention row with every key masked")
    posinf = np.isposinf(flat)
    rows = posinf.any(axis=1)
    out = np.empty_like(flat)
    if (~rows).any():
        out[~rows] = softmax_rows(flat[~rows])
    hits = posinf[rows].astype(np.float64)
    out[rows] = hits / hits.sum(axis=1, keepdims=True)
    return out.reshape(S.shape)


def assemble_attention(S_vis, S_text):
    """Joint softmax over ``[S_vis, S_text]`` along the key axis.

    Accepts single ``(queries, keys)`` matrices or equally stacked ones.
    """
    S_vis = np.asarray(S_vis, dtype=np.float64)
    S_text = np.asarray(S_text, dtype=np.float64)
    if S_vis.ndim < 2 or S_vis.ndim != S_text.ndim or S_vis.shape[:-1] != S_text.shape[:-1]:
        raise ShapeError(f"query count mismatch: {S_vis.shape} vs {S_text.shape}")
    return softmax_rows(np.concatenate([S_vis, S_text], axis=-1))


def reshape_visual_row(row, H, W, step=0, layer=0, head=0):
    """Row-major reshape of a length ``H*W`` visual attention row."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != H * W:
        raise ShapeError(f"row of length {row.shape} cannot fill a {H}x{W} grid")
    return AttnMap2D(row.reshape(H, W).copy(), step=step, layer=layer, head=head)
