"""The decode loop for the baseline / VCE / SCA / ACT modes and trace capture."""
from dataclasses import dataclass, field

import numpy as np

from .attention import HeadAddress
from .errors import ConfigError, ShapeError
from .sca import consensus_scores, broadcast_scores, make_record, spawn_branches, step_branches
from .toy import EOS, SyntheticScene, forward_prefill, scene_for, token_probs
from .vce import InterventionConfig, Phase, amplify, vce_alpha

MODES = ("baseline", "vce", "sca", "act")


def act_update(S_vis, S_sca, alpha):
    """``S_vis + alpha * |S_sca|``: own scores nudged by the consensus magnitude."""
    S_vis = np.asarray(S_vis, dtype=np.float64)
    S_sca = np.asarray(S_sca, dtype=np.float64)
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    if S_sca.shape != S_vis.shape:
        if S_sca.ndim == 2 and S_sca.shape[0] == 1 and S_sca.shape[1:] == S_vis.shape[1:]:
            S_sca = np.repeat(S_sca, S_vis.shape[0], axis=0)
        else:
            raise ShapeError(f"score shapes differ: {S_vis.shape} vs {S_sca.shape}")
    return S_vis + alpha * np.abs(S_sca)


def visual_mass(row, n_vis):
    """Attention mass on the visual prefix of a normalized row."""
    return float(np.sum(np.asarray(row)[:n_vis]))


class ModeHook:
    """Score hook implementing one decode mode for one forward pass.

    ``amplified`` collects the heads that received a nonzero
    amplification term during the pass.
    """

    def __init__(self, mode, cfg, manifest, weights=None):
        self.mode = mode
        self.cfg = cfg
        self.manifest = manifest
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)
        self.amplified = set()

    def _consensus_active(self, site):
        return (
            self.weights is not None
            and site.phase is Phase.DECODE
            and (self.cfg.sca_all_layers or self.cfg.in_band(site.layer))
        )

    def __call__(self, site):
        mode = self.mode
        if mode == "baseline":
            return site.s_vis
        if mode == "sca":
            if self._consensus_active(site):
                return broadcast_scores(consensus_scores(site, self.weights), site.q.shape[0])
            return site.s_vis
        a = vce_alpha(HeadAddress(site.layer, site.head), site.phase, self.manifest, self.cfg)
        if mode == "vce" or site.phase is Phase.PREFILL:
            if a == 0.0:
                return site.s_vis
            self.amplified.add((site.layer, site.head))
            return amplify(site.s_vis, a)
        # act, decode phase
        s_sca = consensus_scores(site, self.weights) if self._consensus_active(site) else None
        if a > 0.0:
            self.amplified.add((site.layer, site.head))
            return act_update(site.s_vis, site.s_vis if s_sca is None else s_sca, a)
        if s_sca is not None:
            return broadcast_scores(s_sca, site.q.shape[0])
        return site.s_vis


@dataclass
class DecodeResult:
    tokens: list
    records: list
    stop_reason: str
    mode: str
    meta: dict = field(default_factory=dict)

    def attention_tensor(self):
        """Per-step spatial maps as float32, shape (steps, layers, heads, H, W).

        Step 0 is the prefill (the map of the last prompt row).
        """
        return np.stack([r.maps for r in self.records]).astype(np.float32)

    def visual_masses(self):
        return np.stack([r.visual_mass for r in self.records])

    def to_dict(self):
        return {
            "mode": self.mode,
            "tokens": [int(t) for t in self.tokens],
            "stop_reason": self.stop_reason,
            "meta": dict(self.meta),
            "records": [
                {
                    "step": r.step,
                    "token": r.token,
                    "phase": r.phase,
                    "branch_tokens": list(r.branch_tokens),
                    "branch_weights": [float(f"{w:.9g}") for w in r.branch_weights],
                    "visual_mass": [[float(f"{m:.9g}") for m in row] for row in r.visual_mass],
                    "amplified": sorted([list(a) for a in r.amplified]),
                }
                for r in self.records
            ],
        }


def _check_inputs(model, cfg, mode, manifest, max_tokens):
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg.check_model(model.n_layers, model.n_heads)
    if mode in ("vce", "act"):
        if manifest is None:
            raise ConfigError(f"mode {mode!r} needs a profile manifest")
        if not manifest.matches(model.n_layers, model.n_heads):
            raise ConfigError(
                f"manifest covers {manifest.n_layers}x{manifest.n_heads} heads, "
                f"model has {model.n_layers}x{model.n_heads}"
            )
    if max_tokens is not None and max_tokens < 1:
        raise ConfigError("token budget must be >= 1")


def decode(model, scene, prompt, cfg=None, mode="act", manifest=None, *,
           max_tokens=None, suppress_eos=False, capture_scores=False):
    """Generate a response under one intervention mode.

    ``baseline`` and ``vce`` decode a single greedy branch; ``sca`` and
    ``act`` keep ``cfg.K`` branches.  The prefill uses the VCE rule in the
    ``vce`` and ``act`` modes and is untouched otherwise.  EOS is never
    part of ``tokens``.
    """
    cfg = cfg or InterventionConfig.toy()
    _check_inputs(model, cfg, mode, manifest, max_tokens)
    budget = cfg.max_tokens if max_tokens is None else max_tokens
    prompt = list(prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    K = cfg.K if mode in ("sca", "act") else 1

    pre_hook = ModeHook(mode, cfg, manifest) if mode in ("vce", "act") else None
    out, cache = forward_prefill(model, scene, prompt, pre_hook,
                                 capacity=model.n_vis + len(prompt) + budget + 1)
    p = token_probs(out.logits)[0]
    if suppress_eos:
        p = p.copy()
        p[EOS] = 0.0
    token = int(np.argmax(p))
    records, tokens = [], []
    meta = {"K": K, "suppress_eos": suppress_eos}
    if token == EOS:
        return DecodeResult(tokens, records, "eos", mode, meta)
    records.append(make_record(
        model, 0, token, Phase.PREFILL, prompt[-1:], np.ones(1), out,
        pre_hook.amplified if pre_hook else (), capture_scores,
    ))
    tokens.append(token)
    branches = spawn_branches(p, K, (), cache, 1, len(prompt))
    run_cfg = cfg if cfg.K == K else cfg.with_(K=K)
    while len(tokens) < budget:
        hook = None if mode == "baseline" else ModeHook(mode, cfg, manifest, branches.weights)
        token, branches, rec = step_branches(
            branches, model, run_cfg, hook=hook, suppress_eos=suppress_eos, capture_scores=capture_scores
        )
        if token == EOS:
            return DecodeResult(tokens, records, "eos", mode, meta)
        records.append(rec)
        tokens.append(token)
    return DecodeResult(tokens, records, "max_tokens", mode, meta)


def collect_calibration(model, n_images, seed=10_000, steps=16, prompt=None, density=0.25):
    """Baseline decodes with EOS suppressed over ``n_images`` toy scenes.

    Returns the :class:`DecodeResult` of each run; scene ``i`` uses seed
    ``seed + i``.
    """
    prompt = prompt or model.default_prompt()
    cfg = InterventionConfig.toy(layer_band=(0, model.n_layers - 1), n_dynamic=0, K=1)
    results = []
    for i in range(n_images):
        scene = scene_for(model, seed + i, density)
        results.append(decode(model, scene, prompt, cfg, "baseline", max_tokens=steps + 1, suppress_eos=True))
    return results


def decode_steps(tensor):
    """Drop the prefill map (step 0) from a ``(steps, layers, heads, H, W)`` trace."""
    return tensor[1:]


def calibration_tensors(results):
    return [decode_steps(r.attention_tensor()) for r in results]
