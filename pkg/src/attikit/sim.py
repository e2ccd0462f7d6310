"""Truth generation, scenario runs and Monte Carlo sweeps.

The scenario loop is written with broadcasting, so a Monte Carlo batch is the
same code path as a single run with a leading run axis on every state array.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import filters as flt
from .errors import DivergenceDetected
from .sensors import (
    GyroModel,
    NoiseBank,
    NoiseStream,
    ObservationModel,
    build_m,
    check_distinct_eigenvalues,
    measure,
)
from .so3 import cross_op, exp_map, pa, rotation_angle

SETTLE_ANGLE = 1e-2
SETTLE_HOLD = 1.0
CSV_COLUMNS = ("t", "err_angle", "bx", "by", "bz", "v", "vdot", "pa_ctm_norm")
FILTER_KINDS = ("generalized", "mahony", "bias_free_mekf", "constant_gain_mekf", "full_mekf")


# --------------------------------------------------------------------------
# angular-rate profiles


@dataclass(frozen=True)
class ConstantRate:
    omega: np.ndarray

    def __call__(self, t):
        return np.asarray(self.omega, dtype=float)

    def describe(self):
        return {"kind": "constant", "omega_rad_s": list(map(float, self.omega))}


@dataclass(frozen=True)
class SinusoidRate:
    """``offset + amplitude * sin(2 pi freq t + phase)`` per axis."""

    amplitude: np.ndarray
    freq_hz: float
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase: float = 0.0

    def __call__(self, t):
        return np.asarray(self.offset, float) + np.asarray(self.amplitude, float) * np.sin(
            2 * np.pi * self.freq_hz * t + self.phase
        )

    def describe(self):
        return {
            "kind": "sinusoid",
            "amplitude_rad_s": list(map(float, self.amplitude)),
            "freq_hz": float(self.freq_hz),
            "offset_rad_s": list(map(float, self.offset)),
            "phase_rad": float(self.phase),
        }


@dataclass(frozen=True)
class PiecewiseRate:
    """Held rates: segment ``(t_start, omega)`` applies from ``t_start`` on."""

    segments: tuple

    def __call__(self, t):
        current = self.segments[0][1]
        for start, omega in self.segments:
            if t >= start:
                current = omega
        return np.asarray(current, dtype=float)

    def describe(self):
        return {
            "kind": "piecewise",
            "segments": [{"t_start_s": float(s), "omega_rad_s": list(map(float, w))} for s, w in self.segments],
        }


def integrate_truth(c, omega_profile, t, dt):
    """Geometric midpoint step ``C exp(dt omega(t + dt/2))``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return c @ exp_map(dt * omega_profile(t + 0.5 * dt))


def attitude_error_angle(c_true, c_hat):
    """Angle of ``C_hat^T C`` in ``[0, pi]``."""
    return rotation_angle(np.swapaxes(c_hat, -1, -2) @ c_true)


# --------------------------------------------------------------------------
# scenario


@dataclass
class FilterConfig:
    """Which estimator to run and its tuning.

    ``gains`` drives ``generalized``/``mahony``; the MEKF kinds use ``noise`` (and
    ``p0``: 3x3 for bias-free, 6x6 for full).  ``steady`` may pre-seed the
    constant-gain MEKF, otherwise it is computed from the model.
    """

    kind: str = "generalized"
    gains: Optional[flt.GainSchedule] = None
    noise: Optional[flt.NoiseParams] = None
    p0: Optional[np.ndarray] = None
    steady: Optional[flt.SteadyState] = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")


@dataclass
class Scenario:
    duration: float
    dt: float
    omega_profile: Callable
    model: ObservationModel
    filter: FilterConfig
    c0: np.ndarray = field(default_factory=lambda: np.eye(3))
    b0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    c_hat0: np.ndarray = field(default_factory=lambda: np.eye(3))
    b_hat0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: GyroModel = field(default_factory=GyroModel)
    seed: int = 0
    simulate_noise: bool = True

    @property
    def n_steps(self):
        n = int(round(self.duration / self.dt))
        if self.dt <= 0 or n < 1 or abs(n * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ValueError("duration must be a positive integer multiple of dt")
        return n

    def with_initial_error(self, c_tilde0, b_tilde0):
        """Copy with the estimate placed so that ``C_hat^T C = c_tilde0``."""
        c_hat0 = np.asarray(self.c0) @ np.swapaxes(c_tilde0, -1, -2)
        return replace(self, c_hat0=c_hat0, b_hat0=np.asarray(self.b0) - b_tilde0)


@dataclass
class RunRecord:
    columns: dict
    meta: dict
    c_true: Optional[np.ndarray] = None
    c_hat: Optional[np.ndarray] = None
    b_true: Optional[np.ndarray] = None
    b_hat: Optional[np.ndarray] = None

    @property
    def t(self):
        return self.columns["t"]

    def __getitem__(self, key):
        return self.columns[key]

    def csv_text(self):
        names = list(self.columns)
        lines = [",".join(names)]
        cols = [self.columns[n] for n in names]
        for row in zip(*cols):
            lines.append(",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


# --------------------------------------------------------------------------
# engine


def _measurement_models(sc):
    if sc.simulate_noise:
        return sc.gyro, sc.model
    quiet = ObservationModel(sc.model.vectors, sc.model.weights, np.zeros(len(sc.model)))
    return GyroModel(0.0, 0.0, sc.gyro.b0), quiet


def _mekf_model(sc):
    return ObservationModel(sc.model.vectors, sc.model.inverse_variances, sc.model.sigmas)


class _Estimator:
    """Binds a filter kind to its step function and effective Lyapunov gains."""

    def __init__(self, sc):
        fc = sc.filter
        self.kind = fc.kind
        self.model = sc.model
        if fc.kind in ("generalized", "mahony"):
            if fc.gains is None:
                raise ValueError(f"{fc.kind} filter needs gains")
            self.gains = fc.gains
            self.v_model = sc.model
        else:
            if fc.noise is None:
                raise ValueError(f"{fc.kind} filter needs noise parameters")
            self.noise = fc.noise
            self.v_model = _mekf_model(sc)
            if fc.kind == "constant_gain_mekf":
                self.steady = fc.steady or flt.riccati_steady_state(sc.model, fc.noise)
                self.gains = self.steady.gains()
        self.suffix = {"bias_free_mekf": ("pa_trace",), "full_mekf": ("pa_trace", "pb_trace")}.get(fc.kind, ())

    def initial_p(self, sc, batch_shape):
        fc = sc.filter
        if fc.kind == "bias_free_mekf":
            p0 = np.eye(3) if fc.p0 is None else np.asarray(fc.p0, float)
        elif fc.kind == "full_mekf":
            p0 = np.eye(6) if fc.p0 is None else np.asarray(fc.p0, float)
        else:
            return None
        return np.broadcast_to(p0, batch_shape + p0.shape).copy()

    def step(self, state, frame, dt):
        k = self.kind
        if k in ("generalized", "mahony"):
            return flt.generalized_step(state, frame, self.model, self.gains, dt)
        if k == "constant_gain_mekf":
            return flt.constant_gain_mekf_step(state, frame, self.model, self.noise, dt, self.steady)
        if k == "bias_free_mekf":
            return flt.bias_free_mekf_step(state, frame, self.model, self.noise, dt)
        return flt.full_mekf_step(state, frame, self.model, self.noise, dt)

    def lyapunov_gains(self, state, t):
        """``(K_P, K_I, K_I_dot)`` for ``v``; ``None`` when ``v`` is undefined."""
        if self.kind in ("generalized", "mahony", "constant_gain_mekf"):
            return self.gains.k_p(t), self.gains.k_i(t), self.gains.k_i_dot(t)
        if self.kind == "bias_free_mekf":
            return state.p, np.zeros((3, 3)), np.zeros((3, 3))
        return None

    def suffix_values(self, state):
        if self.kind == "bias_free_mekf":
            return (np.trace(state.p, axis1=-2, axis2=-1),)
        if self.kind == "full_mekf":
            return (
                np.trace(state.p[..., :3, :3], axis1=-2, axis2=-1),
                np.trace(state.p[..., 3:, 3:], axis1=-2, axis2=-1),
            )
        return ()


def _metrics(est, c, b, state, t):
    """err_angle, b_tilde, v, v_dot, |Pa(C_tilde M)| at one instant (broadcasting)."""
    ct = np.swapaxes(state.c_hat, -1, -2) @ c
    bt = b - state.b_hat
    angle = rotation_angle(ct)
    vm = est.v_model
    m = build_m(vm, c)
    pa_ctm = pa(ct @ m)
    pa_norm = np.linalg.norm(pa_ctm, axis=(-2, -1))
    g = est.lyapunov_gains(state, t)
    shape = angle.shape
    if g is None:
        return angle, bt, np.full(shape, np.nan), np.full(shape, np.nan), pa_norm
    k_p, k_i, k_i_dot = g
    v = np.sum(vm.weights) - np.trace(ct @ m, axis1=-2, axis2=-1)
    # omega_err = uncross(2 Pa(C_tilde M)) for noise-free vectors
    w = 2.0 * np.stack([pa_ctm[..., 2, 1], pa_ctm[..., 0, 2], pa_ctm[..., 1, 0]], axis=-1)
    kw = np.einsum("...ij,...j->...i", k_p, w)
    vdot = np.trace(cross_op(kw) @ pa_ctm, axis1=-2, axis2=-1)
    if np.any(k_i):
        inv = np.linalg.inv(k_i)
        v = v + 0.5 * np.einsum("...i,...ij,...j->...", bt, inv, bt)
        vdot = vdot - 0.5 * np.einsum("...i,...ij,...j->...", bt, inv @ k_i_dot @ inv, bt)
    return angle, bt, v, vdot, pa_norm


def _simulate(sc, c_hat0, b_hat0, noise, batch_shape=(), keep_states=False, observer=None):
    n = sc.n_steps
    dt = sc.dt
    est = _Estimator(sc)
    gyro, meas_model = _measurement_models(sc)
    c = np.broadcast_to(np.asarray(sc.c0, float), batch_shape + (3, 3)).copy()
    b = np.broadcast_to(np.asarray(sc.b0, float), batch_shape + (3,)).copy()
    state = flt.FilterState(
        np.array(np.broadcast_to(c_hat0, batch_shape + (3, 3))),
        np.array(np.broadcast_to(b_hat0, batch_shape + (3,))),
        est.initial_p(sc, batch_shape),
        0.0,
    )
    rows = {k: [] for k in CSV_COLUMNS[1:] if k not in ("bx", "by", "bz")}
    rows["b_tilde"] = []
    suffix = {k: [] for k in est.suffix}
    hist = {"c_true": [], "c_hat": [], "b_true": [], "b_hat": []} if keep_states else None

    def record(t):
        angle, bt, v, vdot, pa_norm = _metrics(est, c, b, state, t)
        rows["err_angle"].append(angle)
        rows["b_tilde"].append(bt)
        rows["v"].append(v)
        rows["vdot"].append(vdot)
        rows["pa_ctm_norm"].append(pa_norm)
        for key, val in zip(est.suffix, est.suffix_values(state)):
            suffix[key].append(val)
        if hist is not None:
            hist["c_true"].append(c.copy())
            hist["c_hat"].append(state.c_hat.copy())
            hist["b_true"].append(b.copy())
            hist["b_hat"].append(state.b_hat.copy())
        if observer is not None:
            observer(t, c, b, state)

    for k in range(n + 1):
        t = k * dt
        record(t)
        if k == n:
            break
        omega_mid = sc.omega_profile(t + 0.5 * dt)
        frame, b_next = measure(c, omega_mid, b, gyro, meas_model, dt, noise, t=t)
        state = est.step(state, frame, dt)
        state.t = (k + 1) * dt
        c = c @ exp_map(dt * omega_mid)
        b = b_next
        if not (np.all(np.isfinite(state.c_hat)) and np.all(np.isfinite(state.b_hat))):
            raise DivergenceDetected(f"non-finite filter state at t={state.t:g}")

    t_arr = dt * np.arange(n + 1)
    out = {"t": t_arr}
    out["err_angle"] = np.array(rows["err_angle"])
    bts = np.array(rows["b_tilde"])
    out["bx"], out["by"], out["bz"] = bts[..., 0], bts[..., 1], bts[..., 2]
    for key in ("v", "vdot", "pa_ctm_norm"):
        out[key] = np.array(rows[key])
    for key in est.suffix:
        out[key] = np.array(suffix[key])
    states = {k: np.array(v) for k, v in hist.items()} if hist is not None else None
    return out, states


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if hasattr(x, "describe"):
        return x.describe()
    return repr(x)


def scenario_summary(sc):
    return {
        "duration_s": sc.duration,
        "dt_s": sc.dt,
        "omega_profile": sc.omega_profile.describe() if hasattr(sc.omega_profile, "describe") else repr(sc.omega_profile),
        "filter": sc.filter.kind,
        "seed": sc.seed,
        "simulate_noise": sc.simulate_noise,
        "c0": sc.c0,
        "b0": sc.b0,
        "c_hat0": sc.c_hat0,
        "b_hat0": sc.b_hat0,
        "vectors": sc.model.vectors,
        "weights": sc.model.weights,
        "sigmas": sc.model.sigmas,
        "gyro": [sc.gyro.sigma_omega, sc.gyro.sigma_b],
    }


def _require_distinct(sc):
    model = sc.model if sc.filter.kind in ("generalized", "mahony") else _mekf_model(sc)
    check_distinct_eigenvalues(model.m_inertial)


def run_scenario(sc, keep_states=False):
    """Run truth, sensors and filter in lockstep; one record row per step."""
    _require_distinct(sc)
    noise = NoiseStream(sc.seed)
    cols, states = _simulate(sc, sc.c_hat0, sc.b_hat0, noise, keep_states=keep_states)
    numeric = getattr(getattr(sc.filter, "gains", None), "k_i_dot_numeric", False)
    meta = {
        "seed": sc.seed,
        "config_hash": config_hash(scenario_summary(sc)),
        "integrator": flt.INTEGRATOR,
        "truth_integrator": "midpoint-exp",
        "noise_algorithm": noise.algorithm,
        "k_i_dot_numeric": bool(numeric),
        "filter": sc.filter.kind,
    }
    rec = RunRecord(cols, meta)
    if states is not None:
        rec.c_true, rec.c_hat = states["c_true"], states["c_hat"]
        rec.b_true, rec.b_hat = states["b_true"], states["b_hat"]
    return rec


def simulate_batch(sc, c_tilde0, b_tilde0, seeds=None, keep_states=False):
    """Run one scenario for a stack of initial errors in a single batch.

    ``c_tilde0`` is ``(N, 3, 3)`` and ``b_tilde0`` ``(N, 3)``; ``seeds`` (default
    :func:`run_seed` of the scenario seed) gives each run its noise stream.
    Returns ``(columns, states)`` with the run index on axis 1 of every series.
    """
    _require_distinct(sc)
    c_tilde0 = np.asarray(c_tilde0, float)
    n = c_tilde0.shape[0]
    if seeds is None:
        seeds = [run_seed(sc.seed, i) for i in range(n)]
    c0 = np.asarray(sc.c0, float)
    c_hat0 = c0 @ np.swapaxes(c_tilde0, -1, -2)
    b_hat0 = np.asarray(sc.b0, float) - np.asarray(b_tilde0, float)
    return _simulate(sc, c_hat0, b_hat0, NoiseBank(seeds), batch_shape=(n,), keep_states=keep_states)


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class InitialErrorSampler:
    """Random initial errors: uniform axis, angle uniform in ``angle_range``,
    bias error with uniform direction and magnitude uniform in ``[0, bias_max]``."""

    angle_range: tuple = (0.0, np.pi - 0.2)
    bias_max: float = 0.1

    def sample(self, rng):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(*self.angle_range)
        bdir = rng.standard_normal(3)
        bdir /= np.linalg.norm(bdir)
        return exp_map(angle * axis), rng.uniform(0.0, self.bias_max) * bdir


@dataclass(frozen=True)
class FixedInitialError:
    c_tilde0: np.ndarray
    b_tilde0: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sample(self, rng):
        return np.asarray(self.c_tilde0, float), np.asarray(self.b_tilde0, float)


def run_seed(seed, index):
    """Per-run 64-bit noise seed derived from the template seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


@dataclass
class MonteCarloSummary:
    seeds: np.ndarray
    initial_angle: np.ndarray
    initial_bias_error: np.ndarray
    settling_time: np.ndarray  # nan where the run never settles
    final_angle: np.ndarray
    final_bias_error: np.ndarray
    steady_angle: np.ndarray  # median error angle over the final 20 % of the run
    converged: np.ndarray

    @property
    def n_runs(self):
        return len(self.seeds)

    @property
    def convergence_fraction(self):
        return float(np.mean(self.converged))

    def settling_stats(self):
        st = self.settling_time[np.isfinite(self.settling_time)]
        if st.size == 0:
            return float("nan"), float("nan")
        return float(np.median(st)), float(np.percentile(st, 95))

    def csv_text(self):
        head = "run,seed,initial_angle,initial_bias_error,settling_time,converged,final_angle,final_bias_error,steady_angle"
        lines = [head]
        for i in range(self.n_runs):
            vals = [
                self.initial_angle[i],
                self.initial_bias_error[i],
                self.settling_time[i],
            ]
            lines.append(
                ",".join(
                    [str(i), str(int(self.seeds[i]))]
                    + [repr(float(x)) for x in vals]
                    + [str(int(bool(self.converged[i])))]
                    + [repr(float(x)) for x in (self.final_angle[i], self.final_bias_error[i], self.steady_angle[i])]
                )
            )
        return "\n".join(lines) + "\n"


def _settling(angles, dt, duration):
    # last index whose angle is still above threshold, per run
    above = angles >= SETTLE_ANGLE
    n = angles.shape[0]
    any_above = above.any(axis=0)
    last = np.where(any_above, n - 1 - np.argmax(above[::-1], axis=0), -1)
    t_settle = (last + 1) * dt
    ok = duration - t_settle >= SETTLE_HOLD - 1e-12
    return np.where(ok, t_settle, np.nan)


def _mc_chunk(sc, c_tilde0, b_tilde0, seeds):
    c0 = np.asarray(sc.c0, float)
    c_hat0 = c0 @ np.swapaxes(c_tilde0, -1, -2)
    b_hat0 = np.asarray(sc.b0, float) - b_tilde0
    cols, _ = _simulate(sc, c_hat0, b_hat0, NoiseBank(seeds), batch_shape=(len(seeds),))
    return cols


def monte_carlo(sc_template, n_runs, init_sampler, bias_tol=1e-3, threads=None):
    """Run ``n_runs`` seeded copies of the template with sampled initial errors.

    A run converges when its error angle stays below 1e-2 rad for at least the
    final second and its final bias error is below ``bias_tol``.  Runs are
    batched; ``threads`` (default ``ATTIKIT_THREADS`` or 1) splits the batch.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    _require_distinct(sc_template)
    samples = [init_sampler.sample(np.random.default_rng([int(sc_template.seed), i, 7])) for i in range(n_runs)]
    c_tilde0 = np.array([s[0] for s in samples])
    b_tilde0 = np.array([s[1] for s in samples])
    seeds = np.array([run_seed(sc_template.seed, i) for i in range(n_runs)], dtype=np.uint64)

    if threads is None:
        threads = int(os.environ.get("ATTIKIT_THREADS", "1") or 1)
    threads = max(1, min(int(threads), n_runs))
    bounds = np.linspace(0, n_runs, threads + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def work(lohi):
        lo, hi = lohi
        return _mc_chunk(sc_template, c_tilde0[lo:hi], b_tilde0[lo:hi], seeds[lo:hi])

    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    angles = np.concatenate([r["err_angle"] for r in results], axis=1)
    bx = np.concatenate([np.stack([r["bx"], r["by"], r["bz"]], -1) for r in results], axis=1)

    n_steps = angles.shape[0] - 1
    duration = n_steps * sc_template.dt
    settle = _settling(angles, sc_template.dt, duration)
    final_bias = np.linalg.norm(bx[-1], axis=-1)
    tail = angles[int(0.8 * n_steps) :]
    converged = np.isfinite(settle) & (final_bias < bias_tol)
    return MonteCarloSummary(
        seeds=seeds,
        initial_angle=rotation_angle(c_tilde0),
        initial_bias_error=np.linalg.norm(b_tilde0, axis=-1),
        settling_time=settle,
        final_angle=angles[-1],
        final_bias_error=final_bias,
        steady_angle=np.median(tail, axis=0),
        converged=converged,
    )
