"""Experiment configuration: JSON schema, cross-field checks, object construction."""
from __future__ import annotations

import copy
import hashlib
import json
import math

import jsonschema
import numpy as np

from .levy_sources import CPMeasureSpec, RadialLaw
from .lyapunov_cert import LyapunovSpec, admissibility, default_delta
from .sde_model import ControlPolicy, DriftParams, Driver, effective_params

KINDS = ("verify", "sde-sim", "tv-rate", "tail", "queue-sim", "fclt", "approx-check")

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["model", "driver", "experiment"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "model": {
            "type": "object",
            "required": ["mu", "gamma"],
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "ell": _vec,
                "beta": {"type": "number"},
                "mu": _vec,
                "gamma": _vec,
            },
        },
        "driver": {
            "type": "object",
            "required": ["variant"],
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["stable", "brownian_cp", "stable_cp", "none"]},
                "alpha": {"type": "number", "exclusiveMinimum": 1, "exclusiveMaximum": 2},
                "xi": _vec,
                "sigma": _vec,
                "cp": {
                    "type": "object",
                    "required": ["nu", "direction", "radial"],
                    "additionalProperties": False,
                    "properties": {
                        "nu": {"type": "number", "minimum": 0},
                        "direction": _vec,
                        "vartheta": _vec,
                        "radial": {
                            "type": "object",
                            "required": ["kind"],
                            "additionalProperties": False,
                            "properties": {
                                "kind": {"enum": ["point", "exponential", "pareto"]},
                                "r": {"type": "number"},
                                "mean": {"type": "number"},
                                "theta": {"type": "number"},
                                "scale": {"type": "number"},
                            },
                        },
                    },
                },
            },
        },
        "policy": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["constant", "static_priority", "proportional"]},
                "u": _vec,
                "order": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "lyapunov": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"anyOf": [{"type": "number"}, {"const": "auto"}]},
                "variant": {"enum": ["Vp", "Vp_scaled"]},
            },
        },
        "experiment": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": list(KINDS)}},
        },
    },
}

EXPERIMENT_DEFAULTS = {
    "verify": {"inequality": "thm2_foster", "n_random": 8, "compact_radius": 20.0, "max_radius_exp": 14},
    "sde-sim": {"N": 1000, "horizon": 10.0, "dt": 0.01, "checkpoints": None, "x0": None},
    "tv-rate": {"N": 100000, "dt": 0.02, "x0": None, "times": [2, 4, 8, 16, 32],
                "reference": {"replications": 10000, "per_replication": 20, "burn_in": 200.0, "thinning": 10.0},
                "fit": "polynomial"},
    "tail": {"replications": 2000, "dt": 0.2, "burn_in": 20000.0, "thinning": 100.0, "per_replication": 50,
             "k": None},
    "queue-sim": {"n": 100, "lam": None, "family": "pareto_batch", "horizon": 10.0, "replications": 100,
                  "x0": None, "checkpoints": None, "burn_in": 0.0, "event_log": False},
    "fclt": {"ns": [50, 200, 800], "lam": None, "family": "pareto_batch", "horizon": 1.0, "N": 10000,
             "x0": None, "sde_dt": 0.001},
    "approx-check": {"ns": [16, 256, 4096], "lam": None, "samples": 1000, "radius_factor": 0.5},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def _path(err):
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(raw: dict, seed: int | None = None) -> dict:
    """Schema and cross-field checks; returns the resolved config (defaults filled in).

    Seed precedence: the config's own seed, then ``seed``, then 0.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = [f"{_path(e)}: {e.message}" for e in sorted(validator.iter_errors(raw), key=str)]
    if errors:
        raise ConfigError(errors)
    cfg = copy.deepcopy(raw)
    if "seed" not in cfg:
        cfg["seed"] = 0 if seed is None else int(seed)
    model, drv = cfg["model"], cfg["driver"]
    m = len(model["mu"])
    model.setdefault("m", m)
    errs = []
    if model["m"] != m or len(model["gamma"]) != m:
        errs.append("model: m, mu and gamma disagree in dimension")
    if ("ell" in model) == ("beta" in model):
        errs.append("model: give exactly one of ell or beta")
    elif "ell" in model and len(model["ell"]) != m:
        errs.append("model/ell: wrong dimension")
    if any(v <= 0 for v in model["mu"]) or any(v < 0 for v in model["gamma"]):
        errs.append("model: need mu > 0 and gamma >= 0")
    var = drv["variant"]
    need = {"stable": ("alpha", "xi"), "brownian_cp": ("sigma", "cp"), "stable_cp": ("alpha", "xi", "cp"), "none": ()}[var]
    errs += [f"driver/{k}: required for variant {var}" for k in need if k not in drv]
    for k in ("xi", "sigma"):
        if k in drv and len(drv[k]) != m:
            errs.append(f"driver/{k}: wrong dimension")
    cfg.setdefault("policy", {"kind": "constant", "u": [1.0 / m] * m})
    pol = cfg["policy"]
    if pol["kind"] == "constant" and ("u" not in pol or len(pol["u"]) != m):
        errs.append("policy/u: constant policy needs an m-vector")
    if pol["kind"] == "static_priority" and sorted(pol.get("order", [])) != list(range(m)):
        errs.append("policy/order: must be a permutation of 0..m-1")
    if errs:
        raise ConfigError(errs)

    try:
        params = build_params(cfg)
        driver = build_driver(cfg)
        build_policy(cfg)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc

    kind = cfg["experiment"]["kind"]
    exp = cfg["experiment"]
    for key, val in EXPERIMENT_DEFAULTS[kind].items():
        if isinstance(val, dict):
            exp[key] = {**val, **exp.get(key, {})}
        else:
            exp.setdefault(key, val)

    lyap = cfg.setdefault("lyapunov", {})
    lyap.setdefault("p", 1.2)
    lyap.setdefault("variant", "Vp")
    lyap.setdefault("delta", "auto")
    if kind == "verify":
        if lyap["delta"] == "auto":
            if not params.beta > 0 and not driver.has_cp:
                raise ConfigError(["lyapunov/delta: 'auto' needs positive spare capacity; give delta explicitly"])
            base = params
            if driver.has_cp:
                base = params.with_ell(effective_params(params, driver.cp).ell_tilde)
            lyap["delta"] = default_delta(base) if base.beta > 0 else 0.05
        else:
            issues = admissibility(LyapunovSpec(lyap["p"], lyap["delta"], params.mu, lyap["variant"]), params,
                                   driver.alpha if driver.has_stable else None)
            # negative controls (beta <= 0) are allowed to run; inadmissible delta is not
            issues = [s for s in issues if "spare capacity" not in s and "outside (1, alpha)" not in s]
            if issues:
                raise ConfigError([f"lyapunov/delta: {s}" for s in issues])

    if kind in ("queue-sim", "fclt", "approx-check"):
        lam = exp.get("lam")
        if lam is None:
            raise ConfigError(["experiment/lam: queue experiments need first-order arrival rates"])
        rho = np.asarray(lam, dtype=float) / params.mu
        if not math.isclose(float(rho.sum()), 1.0, abs_tol=1e-9):
            raise ConfigError([f"experiment/lam: <e, rho> = {rho.sum():.6g} must equal 1 (regime)"])
    if kind == "fclt" and not driver.has_stable:
        raise ConfigError(["driver: the FCLT limit needs a stable driver"])
    return cfg


def build_params(cfg) -> DriftParams:
    model = cfg["model"]
    if "beta" in model:
        return DriftParams.recentred(model["beta"], model["mu"], model["gamma"])
    return DriftParams(model["ell"], model["mu"], model["gamma"])


def build_driver(cfg) -> Driver:
    d = cfg["driver"]
    m = len(cfg["model"]["mu"])
    cp = None
    if "cp" in d:
        c = d["cp"]
        cp = CPMeasureSpec(c["nu"], np.asarray(c["direction"], dtype=float), RadialLaw(**c["radial"]),
                           None if "vartheta" not in c else np.asarray(c["vartheta"], dtype=float))
        cp.validate_ray_support(cfg["model"]["mu"])
    var = d["variant"]
    if var == "stable":
        return Driver.stable(d["alpha"], d["xi"])
    if var == "brownian_cp":
        return Driver.brownian_cp(d["sigma"], cp)
    if var == "stable_cp":
        return Driver.stable_cp(d["alpha"], d["xi"], cp)
    return Driver.none(m)


def build_policy(cfg) -> ControlPolicy:
    p = cfg["policy"]
    m = len(cfg["model"]["mu"])
    if p["kind"] == "constant":
        return ControlPolicy.constant(p["u"])
    if p["kind"] == "static_priority":
        return ControlPolicy.static_priority(p["order"])
    return ControlPolicy.proportional(m)


def build_lyapunov(cfg) -> LyapunovSpec:
    ly = cfg["lyapunov"]
    return LyapunovSpec(ly["p"], float(ly["delta"]), cfg["model"]["mu"], ly["variant"])
