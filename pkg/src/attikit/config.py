"""JSON run configuration: schema, validation and conversion to a :class:`Scenario`.

Physical quantities carry their SI unit in the key name.  Unknown keys are
rejected everywhere.  A minimal noise-free example::

    {
      "duration_s": 60.0,
      "dt_s": 0.01,
      "seed": 1,
      "omega_profile": {"kind": "constant", "omega_rad_s": [0.1, 0.0, 0.0]},
      "observations": [
        {"vector": [0, 0, 1], "weight": 1.0},
        {"vector": [0.5, 0, 0.866], "weight": 0.7}
      ],
      "initial": {"c_tilde0_rotvec_rad": [0.5, 0.3, -0.2], "b_tilde0_rad_s": [0.02, -0.01, 0.03]},
      "filter": {"kind": "generalized", "k_p": [2, 1, 1], "k_i": 0.2}
    }
"""

from __future__ import annotations

import json

import jsonschema
import numpy as np

from . import filters as flt
from .errors import ConfigError
from .sensors import GyroModel, ObservationModel
from .sim import (
    FILTER_KINDS,
    ConstantRate,
    FilterConfig,
    InitialErrorSampler,
    PiecewiseRate,
    Scenario,
    SinusoidRate,
)
from .so3 import exp_map


_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_mat3 = {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3}
_row6 = {"type": "array", "items": {"type": "number"}, "minItems": 6, "maxItems": 6}
_mat6 = {"type": "array", "items": _row6, "minItems": 6, "maxItems": 6}
_gain = {"oneOf": [{"type": "number"}, _vec3, _mat3]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_noise = _obj(
    {
        "sigma_omega_rad_s": {"type": "number", "minimum": 0},
        "sigma_b_rad_s_sqrt_hz": {"type": "number", "minimum": 0},
    },
    ("sigma_omega_rad_s", "sigma_b_rad_s_sqrt_hz"),
)

SCHEMA = _obj(
    {
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "dt_s": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "simulate_noise": {"type": "boolean"},
        "out_dir": {"type": "string"},
        "omega_profile": {
            "oneOf": [
                _obj({"kind": {"const": "constant"}, "omega_rad_s": _vec3}, ("kind", "omega_rad_s")),
                _obj(
                    {
                        "kind": {"const": "sinusoid"},
                        "amplitude_rad_s": _vec3,
                        "freq_hz": {"type": "number", "minimum": 0},
                        "offset_rad_s": _vec3,
                        "phase_rad": {"type": "number"},
                    },
                    ("kind", "amplitude_rad_s", "freq_hz"),
                ),
                _obj(
                    {
                        "kind": {"const": "piecewise"},
                        "segments": {
                            "type": "array",
                            "minItems": 1,
                            "items": _obj(
                                {"t_start_s": {"type": "number", "minimum": 0}, "omega_rad_s": _vec3},
                                ("t_start_s", "omega_rad_s"),
                            ),
                        },
                    },
                    ("kind", "segments"),
                ),
            ]
        },
        "observations": {
            "type": "array",
            "minItems": 1,
            "items": _obj(
                {
                    "vector": _vec3,
                    "weight": {"type": "number", "exclusiveMinimum": 0},
                    "sigma": {"type": "number", "minimum": 0},
                },
                ("vector",),
            ),
        },
        "gyro": _obj(
            {
                "sigma_omega_rad_s": {"type": "number", "minimum": 0},
                "sigma_b_rad_s_sqrt_hz": {"type": "number", "minimum": 0},
                "b0_rad_s": _vec3,
            }
        ),
        "initial": _obj(
            {
                "c0_rotvec_rad": _vec3,
                "c_tilde0_rotvec_rad": _vec3,
                "b_tilde0_rad_s": _vec3,
            }
        ),
        "filter": _obj(
            {
                "kind": {"enum": list(FILTER_KINDS)},
                "k_p": _gain,
                "k_i": _gain,
                "noise": _noise,
                "p0": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, _mat3, _mat6]},
            },
            ("kind",),
        ),
        "montecarlo": _obj(
            {
                "runs": {"type": "integer"},
                "min_angle_rad": {"type": "number", "minimum": 0},
                "max_angle_rad": {"type": "number", "minimum": 0, "maximum": float(np.pi)},
                "max_bias_rad_s": {"type": "number", "minimum": 0},
                "bias_tol_rad_s": {"type": "number", "exclusiveMinimum": 0},
            }
        ),
    },
    ("observations",),
)


def _path(err):
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def _best_error(err):
    # for a tagged union, report the error inside the branch whose "kind" matches
    while err.validator == "oneOf" and err.context:
        kind = err.instance.get("kind") if isinstance(err.instance, dict) else None
        branches = err.schema["oneOf"]
        match = [i for i, b in enumerate(branches) if b.get("properties", {}).get("kind", {}).get("const") == kind]
        inner = [e for e in err.context if match and e.relative_schema_path[0] == match[0]]
        if not inner:
            break
        err = min(inner, key=lambda e: e.validator != "additionalProperties")
    return err


def validate(cfg):
    """Raise :class:`ConfigError` naming the first offending key."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = _best_error(errors[0])
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            key = ".".join([p for p in [_path(err)] if p != "<root>"] + [extra[0]]) if extra else _path(err)
            raise ConfigError(f"unknown key '{key}'")
        if err.validator == "required":
            raise ConfigError(f"config key '{_path(err)}': {err.message}")
        raise ConfigError(f"config key '{_path(err)}': {err.message}")
    return cfg


def load(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from None
    return validate(cfg)


def require(cfg, *keys):
    node = cfg
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"missing config key '{'.'.join(keys[: i + 1])}'")
        node = node[key]
    return node


def _gain_matrix(value, key):
    g = np.asarray(value, dtype=float)
    if g.ndim == 0:
        g = g * np.eye(3)
    elif g.ndim == 1:
        g = np.diag(g)
    if not np.allclose(g, g.T, rtol=0, atol=1e-12):
        raise ConfigError(f"config key '{key}' must be symmetric")
    return g


def observation_model(cfg):
    obs = require(cfg, "observations")
    vecs = []
    for i, o in enumerate(obs):
        v = np.asarray(o["vector"], dtype=float)
        if np.linalg.norm(v) < 1e-9:
            raise ConfigError(f"config key 'observations.{i}.vector' must be nonzero")
        vecs.append(v)
    weights = [o.get("weight", 1.0) for o in obs]
    sigmas = [o.get("sigma", 0.0) for o in obs]
    return ObservationModel.from_directions(vecs, weights, sigmas)


def noise_params(cfg):
    node = require(cfg, "filter", "noise")
    return flt.NoiseParams(node["sigma_omega_rad_s"], node["sigma_b_rad_s_sqrt_hz"])


def _omega_profile(node):
    kind = node["kind"]
    if kind == "constant":
        return ConstantRate(np.asarray(node["omega_rad_s"], float))
    if kind == "sinusoid":
        return SinusoidRate(
            np.asarray(node["amplitude_rad_s"], float),
            float(node["freq_hz"]),
            np.asarray(node.get("offset_rad_s", [0.0, 0.0, 0.0]), float),
            float(node.get("phase_rad", 0.0)),
        )
    segs = sorted(((float(s["t_start_s"]), np.asarray(s["omega_rad_s"], float)) for s in node["segments"]), key=lambda s: s[0])
    return PiecewiseRate(tuple(segs))


def _filter_config(cfg, model):
    node = require(cfg, "filter")
    kind = node["kind"]
    if kind in ("generalized", "mahony"):
        k_p = _gain_matrix(require(cfg, "filter", "k_p"), "filter.k_p")
        k_i = _gain_matrix(require(cfg, "filter", "k_i"), "filter.k_i")
        if kind == "mahony" and not (np.ndim(node["k_p"]) == 0 and np.ndim(node["k_i"]) == 0):
            raise ConfigError("config keys 'filter.k_p' and 'filter.k_i' must be scalars for the mahony filter")
        for key, g, zero_ok in (("filter.k_p", k_p, False), ("filter.k_i", k_i, True)):
            try:
                flt.check_gain(g, key, allow_zero=zero_ok)
            except flt.GainNotPositiveDefinite:
                raise ConfigError(f"config key '{key}' must be symmetric positive definite") from None
        return FilterConfig(kind, gains=flt.ConstantGains(k_p, k_i))
    noise = noise_params(cfg)
    if np.any(model.sigmas <= 0):
        raise ConfigError("config key 'observations.*.sigma' must be positive for MEKF filters")
    p0 = node.get("p0")
    if p0 is not None:
        dim = 3 if kind == "bias_free_mekf" else 6
        p0 = np.asarray(p0, float)
        p0 = p0 * np.eye(dim) if p0.ndim == 0 else p0
        if p0.shape != (dim, dim):
            raise ConfigError(f"config key 'filter.p0' must be {dim}x{dim} for {kind}")
    if kind == "constant_gain_mekf" and p0 is not None:
        raise ConfigError("config key 'filter.p0' is not used by constant_gain_mekf")
    return FilterConfig(kind, noise=noise, p0=p0)


def scenario(cfg, seed=None):
    """Build a :class:`Scenario` from a validated config (``seed`` overrides)."""
    duration = float(require(cfg, "duration_s"))
    dt = float(require(cfg, "dt_s"))
    profile = _omega_profile(require(cfg, "omega_profile"))
    model = observation_model(cfg)
    gyro_node = cfg.get("gyro", {})
    gyro = GyroModel(
        gyro_node.get("sigma_omega_rad_s", 0.0),
        gyro_node.get("sigma_b_rad_s_sqrt_hz", 0.0),
        np.asarray(gyro_node.get("b0_rad_s", [0.0, 0.0, 0.0]), float),
    )
    init = cfg.get("initial", {})
    c0 = exp_map(np.asarray(init.get("c0_rotvec_rad", [0.0, 0.0, 0.0]), float))
    sc = Scenario(
        duration=duration,
        dt=dt,
        omega_profile=profile,
        model=model,
        filter=_filter_config(cfg, model),
        c0=c0,
        b0=gyro.b0,
        c_hat0=c0,
        b_hat0=gyro.b0,
        gyro=gyro,
        seed=int(cfg.get("seed", 0) if seed is None else seed),
        simulate_noise=bool(cfg.get("simulate_noise", True)),
    )
    try:
        sc.n_steps
    except ValueError as exc:
        raise ConfigError(f"config keys 'duration_s'/'dt_s': {exc}") from None
    ct0 = exp_map(np.asarray(init.get("c_tilde0_rotvec_rad", [0.0, 0.0, 0.0]), float))
    bt0 = np.asarray(init.get("b_tilde0_rad_s", [0.0, 0.0, 0.0]), float)
    return sc.with_initial_error(ct0, bt0)


def montecarlo_settings(cfg, runs=None):
    node = cfg.get("montecarlo", {})
    n = node.get("runs") if runs is None else runs
    if n is None:
        raise ConfigError("missing config key 'montecarlo.runs' (or pass --runs)")
    if int(n) < 1:
        raise ConfigError(f"config key 'montecarlo.runs' must be at least 1, got {n}")
    lo = float(node.get("min_angle_rad", 0.0))
    hi = float(node.get("max_angle_rad", np.pi - 0.2))
    if hi < lo:
        raise ConfigError("config key 'montecarlo.max_angle_rad' must not be below min_angle_rad")
    sampler = InitialErrorSampler((lo, hi), float(node.get("max_bias_rad_s", 0.1)))
    return int(n), sampler, float(node.get("bias_tol_rad_s", 1e-3))
