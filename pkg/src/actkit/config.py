"""Run configuration: one JSON document, schema-checked, with flag overrides."""
import json
import os

import jsonschema

from .errors import ConfigError
from .toy import ToyModelConfig
from .vce import InterventionConfig

_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}


def _block(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


RUN_CONFIG_SCHEMA = _block({
    "model": _block({
        "n_layers": {"type": "integer", "minimum": 4},
        "n_heads": _POS,
        "head_dim": _POS,
        "width": _POS,
        "grid": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "vocab_size": _POS,
        "n_objects": _POS,
        "seed": {"type": "integer", "minimum": 0},
        "n_scanning": {"type": ["integer", "null"], "minimum": 0},
        "mlp_ratio": _POS,
    }),
    "vce": _block({
        "alpha": {"type": "number", "minimum": 0},
        "layer_band": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "n_dynamic": {"type": "integer", "minimum": 0},
        "guidance_shift": {"type": "number", "minimum": 0, "maximum": 1},
        "decode_only": {"type": "boolean"},
    }),
    "K": _POS,
    "sca": _block({"all_layers": {"type": "boolean"}}),
    "stcs": _block({
        "tau": {"type": "integer", "minimum": 2},
        "calib_steps": {"type": "integer", "minimum": 2},
        "calib_images": _POS,
        "calib_seed": {"type": "integer", "minimum": 0},
    }),
    "scene": _block({"density": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}}),
    "bench": _block({
        "scenes": _POS,
        "modes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "bucket_width": _POS,
    }),
    "trace": _block({"dir": {"type": "string"}, "out": {"type": "string"}}),
    "seed": {"type": "integer", "minimum": 0},
    "mode": {"enum": ["baseline", "vce", "sca", "act"]},
    "max_tokens": _POS,
})

DEFAULTS = {
    "model": ToyModelConfig().to_dict(),
    "vce": {"alpha": 0.6, "layer_band": [4, 9], "n_dynamic": 4, "guidance_shift": 1.0, "decode_only": False},
    "K": 5,
    "sca": {"all_layers": False},
    "stcs": {"tau": 8, "calib_steps": 16, "calib_images": 50, "calib_seed": 10_000},
    "scene": {"density": 0.25},
    "bench": {"scenes": 50, "modes": ["baseline", "vce", "sca", "act"], "bucket_width": 8},
    "trace": {},
    "seed": 0,
    "mode": "act",
    "max_tokens": 64,
}


def validate(doc):
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"run config invalid at {where}: {e.message}") from None
    return doc


def merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


class RunConfig:
    """Validated run configuration (defaults < file < ``ACT_SEED`` < flags)."""

    def __init__(self, doc=None, overrides=None, env=None):
        doc = validate(dict(doc or {}))
        full = merge(DEFAULTS, doc)
        env = os.environ if env is None else env
        if env.get("ACT_SEED") not in (None, ""):
            try:
                full["seed"] = int(env["ACT_SEED"])
            except ValueError:
                raise ConfigError(f"ACT_SEED must be an integer, got {env['ACT_SEED']!r}") from None
        full = merge(full, overrides or {})
        self.doc = validate(full)
        try:
            self.model = ToyModelConfig(**self.doc["model"])
            v = self.doc["vce"]
            self.intervention = InterventionConfig(
                alpha=v["alpha"], layer_band=tuple(v["layer_band"]), n_dynamic=v["n_dynamic"],
                tau=self.doc["stcs"]["tau"], K=self.doc["K"], guidance_shift=v["guidance_shift"],
                decode_only=v["decode_only"], sca_all_layers=self.doc["sca"]["all_layers"],
                max_tokens=self.doc["max_tokens"],
            ).check_model(self.model.n_layers, self.model.n_heads)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path=None, overrides=None, env=None):
        doc = {}
        if path is not None:
            try:
                with open(path) as fh:
                    doc = json.load(fh)
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls(doc, overrides, env)

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def seed(self):
        return self.doc["seed"]

    def to_dict(self):
        return json.loads(json.dumps(self.doc))
