"""Visual context exploration: gated amplification of visual attention scores."""
import enum
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attention import HeadAddress
from .errors import ConfigError, InvalidInputError


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class InterventionConfig:
    """Knobs shared by the VCE, SCA and ACT paths.

    The defaults are the published LLaVA-1.5-7B settings; use
    :meth:`toy` for the 12-layer toy model.
    """

    alpha: float = 0.6
    layer_band: tuple = (10, 26)
    n_dynamic: int = 16
    tau: int = 8
    K: int = 5
    guidance_shift: float = 1.0
    decode_only: bool = False
    sca_all_layers: bool = False
    max_tokens: int = 512

    def __post_init__(self):
        object.__setattr__(self, "layer_band", tuple(int(x) for x in self.layer_band))
        lo, hi = self.layer_band
        if not (0 <= lo <= hi):
            raise ConfigError(f"layer_band {self.layer_band} must satisfy 0 <= start <= end")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not 0.0 <= self.guidance_shift <= 1.0:
            raise ConfigError(f"guidance_shift must lie in [0, 1], got {self.guidance_shift}")
        if self.K < 1:
            raise ConfigError("K (branch count) must be >= 1")
        if self.tau < 2:
            raise ConfigError("tau must be >= 2")
        if self.n_dynamic < 0:
            raise ConfigError("n_dynamic must be >= 0")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")

    @classmethod
    def toy(cls, **overrides):
        base = dict(layer_band=(4, 9), n_dynamic=4, max_tokens=64)
        base.update(overrides)
        return cls(**base)

    def check_model(self, n_layers, n_heads):
        if self.layer_band[1] >= n_layers:
            raise ConfigError(f"layer_band {self.layer_band} exceeds model depth {n_layers}")
        if self.n_dynamic > n_heads:
            raise ConfigError(f"n_dynamic={self.n_dynamic} exceeds {n_heads} heads per layer")
        return self

    def in_band(self, layer):
        lo, hi = self.layer_band
        return lo <= layer <= hi

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        d["layer_band"] = list(self.layer_band)
        return d


def amplify(S_vis, alpha):
    """Entrywise ``s + alpha * |s|``."""
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")
    S = np.asarray(S_vis, dtype=np.float64)
    if not np.isfinite(S).all():
        raise InvalidInputError("non-finite visual scores")
    return S + alpha * np.abs(S)


def vce_alpha(address, phase, manifest, cfg):
    """Effective amplification for one head, or 0.0 when the gate misses.

    Dynamic heads in the band get ``alpha * r``; static heads in the
    shallow layers ``[0, start)`` get ``alpha * (1 - r)`` during prefill,
    or the full ``alpha`` when ``r == 1``.
    """
    phase = Phase(phase)
    dynamic = manifest.is_dynamic(address)
    lo, _ = cfg.layer_band
    r = cfg.guidance_shift
    if dynamic and cfg.in_band(address.layer):
        if phase is Phase.PREFILL and cfg.decode_only:
            return 0.0
        return cfg.alpha * r
    if not dynamic and phase is Phase.PREFILL and address.layer < lo:
        return cfg.alpha * (1.0 - r) if r < 1.0 else cfg.alpha
    return 0.0


def apply_vce(S_vis, address, phase, manifest, cfg):
    """Return the (possibly) amplified visual scores for one head.

    Ungated heads get their input back unchanged, as the same object.
    """
    if not isinstance(address, HeadAddress):
        address = HeadAddress(*address)
    a = vce_alpha(address, phase, manifest, cfg)
    if a == 0.0:
        return S_vis
    return amplify(S_vis, a)
