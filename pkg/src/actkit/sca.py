"""Semantic context aggregation over K parallel decoding branches.

Each branch shares the committed prefix and differs only in the token at
the current position.  Their current-step queries are mixed by branch
weight, scored against the shared visual keys, and the resulting
consensus visual logits replace every branch's own visual segment.
"""
from dataclasses import dataclass, field

import numpy as np

from .attention import scaled_scores
from .errors import DegenerateDistributionError, InternalStateError, ShapeError
from .toy import EOS, forward_step, token_probs
from .vce import Phase


def normalize_weights(top_probs):
    p = np.asarray(top_probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or (p < 0).any() or not np.isfinite(p).all():
        raise ValueError(f"expected a non-empty vector of nonnegative probabilities, got {top_probs!r}")
    total = p.sum()
    if total <= 0:
        raise DegenerateDistributionError("branch probabilities sum to zero")
    return p / total


def fuse_queries(queries, weights):
    """Weighted sum of per-branch query matrices, ``sum_i w_i Q_i``."""
    qs = [np.asarray(q, dtype=np.float64) for q in queries]
    w = np.asarray(weights, dtype=np.float64)
    if len(qs) != len(w) or not qs:
        raise ShapeError(f"{len(qs)} queries but {len(w)} weights")
    if any(q.shape != qs[0].shape for q in qs):
        raise ShapeError("branch queries differ in shape")
    acc = w[0] * qs[0]
    for wi, qi in zip(w[1:], qs[1:]):
        acc = acc + wi * qi
    return acc


def fused_visual_scores(Q_bar, K_vis, d=None):
    return scaled_scores(Q_bar, K_vis, d)


def broadcast_scores(S_fused, branch_set):
    """Give every branch the same consensus visual logits (one row each)."""
    n = len(branch_set) if not isinstance(branch_set, int) else branch_set
    S = np.atleast_2d(np.asarray(S_fused, dtype=np.float64))
    return np.repeat(S, n, axis=0)


def consensus_scores(site, weights):
    """Fused visual scores for one :class:`~actkit.toy.ScoreSite`, shape (1, n_vis)."""
    q_bar = fuse_queries(site.q[:, None, :], weights)
    return fused_visual_scores(q_bar, site.k_vis, site.d)


@dataclass(frozen=True)
class Branch:
    tokens: tuple  # generated history; the last entry is this branch's candidate
    weight: float

    @property
    def token(self):
        return self.tokens[-1]


@dataclass(frozen=True)
class BranchSet:
    branches: tuple
    step: int
    cache: object = field(repr=False)
    prompt_len: int = 0

    def __len__(self):
        return len(self.branches)

    @property
    def weights(self):
        return np.array([b.weight for b in self.branches])

    @property
    def tokens(self):
        return [b.token for b in self.branches]

    @property
    def prefix(self):
        return self.branches[0].tokens[:-1]

    def validate(self):
        if not self.branches:
            raise InternalStateError("empty branch set")
        prefix = self.prefix
        if any(b.tokens[:-1] != prefix for b in self.branches):
            raise InternalStateError("branches disagree on the committed prefix")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise InternalStateError(f"branch weights sum to {self.weights.sum()}")
        if self.cache.text_position != self.prompt_len + len(prefix):
            raise InternalStateError(
                f"cache holds {self.cache.text_position} text positions, "
                f"expected {self.prompt_len + len(prefix)}"
            )
        return self


def top_k_tokens(p, k, exclude=(EOS,)):
    """Highest-probability tokens, ties broken by ascending id."""
    p = np.asarray(p)
    order = np.argsort(-p, kind="stable")
    order = [int(t) for t in order if int(t) not in exclude]
    return order[:k]


def spawn_branches(p_bar, K, prefix, cache, step, prompt_len):
    """New branch set from the top-K tokens of the consensus distribution."""
    cands = top_k_tokens(p_bar, K)
    w = normalize_weights(p_bar[cands])
    branches = tuple(Branch(tuple(prefix) + (t,), float(wi)) for t, wi in zip(cands, w))
    return BranchSet(branches, step, cache, prompt_len)


class ConsensusHook:
    """Broadcast fused visual scores to all branches inside the active layers."""

    def __init__(self, weights, cfg):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.cfg = cfg
        self.amplified = set()

    def active(self, site):
        return site.phase is Phase.DECODE and (self.cfg.sca_all_layers or self.cfg.in_band(site.layer))

    def __call__(self, site):
        if not self.active(site):
            return site.s_vis
        return broadcast_scores(consensus_scores(site, self.weights), site.q.shape[0])


@dataclass
class StepRecord:
    step: int
    token: int
    phase: str
    branch_tokens: tuple
    branch_weights: tuple
    visual_mass: np.ndarray   # (layers, heads)
    maps: np.ndarray          # (layers, heads, H, W), branch-weighted
    amplified: frozenset = frozenset()
    vis_scores: np.ndarray = None  # (layers, heads, K, n_vis) when captured


def mix(rows, weights):
    """``sum_i w_i rows[i]`` accumulated in branch order."""
    acc = weights[0] * rows[0]
    for wi, r in zip(weights[1:], rows[1:]):
        acc = acc + wi * r
    return acc


def commit_token(probs, weights, suppress_eos=False):
    """Argmax of the weight mixture ``sum_i w_i p_i``; returns ``(token, p_bar)``.

    Ties go to the lower token id.
    """
    p_bar = mix(np.asarray(probs, dtype=np.float64), np.asarray(weights, dtype=np.float64))
    if suppress_eos:
        p_bar = p_bar.copy()
        p_bar[EOS] = 0.0
    return int(np.argmax(p_bar)), p_bar


def make_record(model, step, token, phase, tokens, weights, out, amplified, capture_scores=False):
    H, W = model.cfg.grid
    attn = np.moveaxis(out.vis_attn, 2, 0)  # (K, layers, heads, n_vis)
    maps = mix(attn, weights)
    L, Hh = maps.shape[:2]
    return StepRecord(
        step=step,
        token=int(token),
        phase=Phase(phase).value,
        branch_tokens=tuple(int(t) for t in tokens),
        branch_weights=tuple(float(w) for w in weights),
        visual_mass=maps.sum(axis=-1),
        maps=maps.reshape(L, Hh, H, W),
        amplified=frozenset(amplified),
        vis_scores=out.vis_scores.copy() if capture_scores else None,
    )


def step_branches(branch_set, model, cfg, hook="consensus", suppress_eos=False, capture_scores=False):
    """Advance every branch one position and commit one token.

    Returns ``(token, next_branch_set, record)``.  ``token`` is the argmax
    of the weight-mixed next-token distribution; on EOS the next branch
    set is ``None``.  ``hook`` defaults to the consensus broadcast; pass
    ``None`` for an unmodified forward pass.
    """
    branch_set.validate()
    weights = branch_set.weights
    if isinstance(hook, str) and hook == "consensus":
        hook = ConsensusHook(weights, cfg)
    out = forward_step(model, branch_set.tokens, branch_set.cache, hook, Phase.DECODE)
    token, p_bar = commit_token(token_probs(out.logits), weights, suppress_eos)
    record = make_record(
        model, branch_set.step, token, Phase.DECODE, branch_set.tokens, weights, out,
        getattr(hook, "amplified", ()), capture_scores,
    )
    if token == EOS:
        return token, None, record
    cache = branch_set.cache.copy()
    cache.append(out.k_new[:, :, :1], out.v_new[:, :, :1])
    nxt = spawn_branches(
        p_bar, cfg.K, branch_set.branches[0].tokens, cache, branch_set.step + 1, branch_set.prompt_len
    )
    if nxt.branches[0].token != token:
        raise InternalStateError("top branch does not carry the committed token")
    return token, nxt, record
