"""Run configuration: TOML files validated against a versioned JSON schema.

The config digest is the SHA-256 of the canonical JSON form of the
validated config with defaults filled in, leaving out the ``output`` table
(where results go does not change what they are).  Every output file carries
it.
"""
import copy
import hashlib
import json
import math
import sys

import jsonschema

from .model import DetectionParams, MemoryParams, SourceParams
from .protocol import ProtocolConfig
from .simulator import SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1

_num = {"type": "number"}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}


def _table(props, defaults):
    return {"type": "object", "additionalProperties": False, "properties": props, "default": defaults}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "source": _table({
            "sigma_x": _pos, "sigma_y": _pos, "fov_kappa_x": _pos, "fov_kappa_y": _pos, "p_mode": _nonneg,
            "envelope": {"enum": ["uniform", "gaussian"]}, "envelope_width": _nonneg,
            "ensemble_waist": _pos,
        }, {}),
        "detection": _table({
            "eta_S": _prob, "eta_AS": _prob, "chi_R0": _prob, "dark_rate": _nonneg, "pixel_pitch": _pos,
            "sensor_px_x": _count, "sensor_px_y": _count,
        }, {}),
        "memory": _table({
            "enabled": {"type": "boolean"}, "alpha1": _nonneg, "alpha2": _nonneg, "tau1": _pos, "tau2": _pos,
            "omega": _nonneg, "v_thermal": _pos, "wavevector_decay": {"type": "boolean"},
            "xi_table": {"type": "array", "minItems": 1,
                         "items": {"type": "array", "prefixItems": [_nonneg, _nonneg], "minItems": 2, "maxItems": 2}},
        }, {}),
        "simulation": _table({
            "n_frames": _count, "master_seed": _seed, "chunk_frames": _count,
            "storage_times": {"type": "array", "minItems": 1, "items": _nonneg},
            "provenance": {"type": "boolean"},
        }, {}),
        "analysis": _table({
            "products": {"type": "array", "items": {"enum": [
                "com", "map_x", "map_y", "g2_map", "roi_curve", "ensemble", "autocorr", "coincidences"]}},
            "roi_kappa": _pos, "roi_center": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            "roi_sizes": {"type": "array", "items": _pos, "minItems": 1},
            "tile_rois": {"type": "boolean"},
            "com_half_width": _pos, "com_bin": _pos, "map_bin": _pos,
            "g2_map_kappa": _pos,
            "ensemble_rows": _count, "ensemble_columns": _count, "ensemble_row_step": _pos,
            "split_seed": _seed,
        }, {}),
        "lifetime": _table({
            "data": {"type": "string"}, "p": _pos, "eta_AS": _prob, "f_kappa": _prob,
            "fixed": {"type": "object", "additionalProperties": _num},
            "K": _nonneg,
        }, {}),
        "protocol": _table({
            "n_target": _count, "p_mode": _nonneg, "M": _count, "eta_S": _prob, "eta_AS": _prob, "chi_R0": _prob,
            "use_memory": {"type": "boolean"}, "trial_period": _pos, "max_trials": _count, "switch_loss": _prob,
            "master_seed": _seed, "hidden_excitations": {"type": "boolean"}, "n_runs": _count,
            "fov_kappa": _pos, "k_w": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        }, {}),
        "modes": _table({"sigma_x": _pos, "sigma_y": _pos, "kappa": _pos, "n": {"type": "integer", "minimum": 2}}, {}),
        "output": _table({"dir": {"type": "string"}}, {}),
    },
}

DEFAULTS = {
    "source": {"sigma_x": 4.45, "sigma_y": 4.76, "fov_kappa_x": 420.0, "fov_kappa_y": 420.0, "p_mode": 0.0,
               "envelope": "uniform", "envelope_width": 0.0},
    "detection": {"eta_S": 0.08, "eta_AS": 0.08, "chi_R0": 0.35, "dark_rate": 0.0, "pixel_pitch": 2.1},
    "memory": {"enabled": False, "alpha1": math.sqrt(0.35), "alpha2": 0.0, "tau1": math.inf, "tau2": math.inf,
               "omega": 0.0, "v_thermal": 1.45e-5, "wavevector_decay": False, "xi_table": [[0.0, 0.0]]},
    "simulation": {"n_frames": 1000, "master_seed": 0, "chunk_frames": 65536, "storage_times": [0.0],
                   "provenance": False},
    "analysis": {"products": ["com", "map_y"], "roi_kappa": 21.0, "roi_center": [0.0, 0.0],
                 "roi_sizes": [10.0, 21.0, 42.0, 84.0], "tile_rois": True, "com_half_width": 30.0,
                 "com_bin": 1.0, "map_bin": 2.1, "g2_map_kappa": 21.0, "ensemble_rows": 100,
                 "ensemble_columns": 25, "ensemble_row_step": 2.1, "split_seed": 1},
    "lifetime": {"f_kappa": 1.0, "fixed": {}},
    "protocol": {"n_target": 6, "p_mode": 0.01, "M": 665, "eta_S": 0.08, "eta_AS": 0.08, "chi_R0": 0.35,
                 "use_memory": False, "trial_period": 1.0, "max_trials": 100000, "switch_loss": 0.0,
                 "master_seed": 0, "hidden_excitations": True, "n_runs": 1000, "fov_kappa": 420.0,
                 "k_w": [0.0, 0.0]},
    "modes": {"sigma_x": 4.45, "sigma_y": 4.76, "kappa": 420.0, "n": 2048},
    "output": {"dir": "out"},
}


class ConfigSchemaError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


def validate(raw):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errs:
        raise ConfigSchemaError(
            f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errs)


def normalise(raw):
    """Validate and fill defaults; returns a new nested dict."""
    validate(raw)
    out = {"schema_version": raw["schema_version"]}
    for section, defaults in DEFAULTS.items():
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(raw.get(section, {})))
        out[section] = merged
    return out


def loads(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigSchemaError([f"not valid TOML: {exc}"]) from exc
    return normalise(raw)


def load(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigSchemaError([f"{path}: not UTF-8"]) from exc
    return loads(text)


def _canon(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def digest(cfg):
    body = {k: v for k, v in cfg.items() if k != "output"}
    text = json.dumps(_canon(body), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def apply_overrides(cfg, seed=None, frames=None):
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["simulation"]["master_seed"] = int(seed)
        cfg["protocol"]["master_seed"] = int(seed)
    if frames is not None:
        cfg["simulation"]["n_frames"] = int(frames)
    validate(cfg)
    return cfg


def memory_params(cfg):
    m = cfg["memory"]
    if not m["enabled"]:
        return None
    return MemoryParams(alpha1=m["alpha1"], alpha2=m["alpha2"], tau1=m["tau1"], tau2=m["tau2"], omega=m["omega"],
                        v_thermal=m["v_thermal"], xi_table=tuple(tuple(p) for p in m["xi_table"]),
                        wavevector_decay=m["wavevector_decay"])


def _domain(fn):
    try:
        return fn()
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigSchemaError):
            raise
        raise ConfigSchemaError([str(exc)]) from exc


def sim_config(cfg):
    def build():
        s, d, sim = cfg["source"], cfg["detection"], cfg["simulation"]
        return SimConfig(
            source=SourceParams(**s),
            detection=DetectionParams(**d),
            memory=memory_params(cfg),
            n_frames=sim["n_frames"],
            storage_times=tuple(sim["storage_times"]),
            master_seed=sim["master_seed"],
        )
    return _domain(build)


def protocol_config(cfg):
    def build():
        p = dict(cfg["protocol"])
        p.pop("n_runs")
        use_memory = p.pop("use_memory")
        p["k_w"] = tuple(p["k_w"])
        return ProtocolConfig(memory=memory_params(cfg) if use_memory else None, **p)
    return _domain(build)
