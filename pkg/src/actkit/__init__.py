"""Training-free attention-score interventions against object hallucination.

The package bundles a deterministic toy vision-language decoder with hookable
pre-softmax attention, a head profiler based on spatio-temporal covariance
similarity, the visual-context amplification and multi-branch consensus
interventions, a binary trace format, and a small benchmark harness.
"""
from .attention import AttnMap2D, HeadAddress, assemble_attention, scaled_scores, softmax_rows
from .bench import (
    HallucinationReport,
    compare_modes,
    grounding_mass_curve,
    positional_histogram,
    score_output,
    sweep,
)
from .config import RunConfig
from .engine import MODES, DecodeResult, act_update, calibration_tensors, collect_calibration, decode
from .errors import *  # noqa: F401,F403
from .sca import Branch, BranchSet, broadcast_scores, fuse_queries, fused_visual_scores, step_branches
from .stcs import (
    HeadProfile,
    HeadTrace,
    ProfileManifest,
    centered_frobenius_similarity,
    profile_heads,
    stcs_step,
    windowed_stcs,
)
from .toy import SyntheticScene, ToyModel, ToyModelConfig, build_toy_model, generate_scene, scene_for
from .trace_io import AtrcHeader, load_calibration, read_trace, write_trace
from .vce import InterventionConfig, Phase, amplify, apply_vce

__version__ = "0.1.0"
