"""Complementary attitude filters and their MEKF relatives.

Every filter shares one fixed-step integrator (:func:`lie_rk4`): attitude moves
on SO(3) through products of exponentials, bias and covariance get exactly the
classical RK4 update, and all four stages see the same zero-order-hold gyro
sample.  Because the integrator is shared, a filter that is algebraically a
special case of another reproduces it to the last bit.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import CovarianceMissing, CovarianceNotPD, GainNotPositiveDefinite, NoConvergence
from .so3 import cross, cross_op, exp_map, orthonormalize, ps

INTEGRATOR = "cf4-lie-rk4"
_I3 = np.eye(3)


@dataclass
class FilterState:
    """Attitude estimate, gyro-bias estimate and optional covariance.

    ``p`` is ``(6, 6)`` for the full/constant-gain MEKF layout
    ``[[P_a, P_c], [P_c^T, P_b]]`` or ``(3, 3)`` (``P_a`` only) for the
    bias-free MEKF.  Arrays may carry leading batch axes.
    """

    c_hat: np.ndarray
    b_hat: np.ndarray
    p: Optional[np.ndarray] = None
    t: float = 0.0

    @classmethod
    def initial(cls, c_hat=None, b_hat=None, p=None, t=0.0):
        c = _I3.copy() if c_hat is None else np.array(c_hat, dtype=float)
        b = np.zeros(3) if b_hat is None else np.array(b_hat, dtype=float)
        return cls(c, b, None if p is None else np.array(p, dtype=float), float(t))


@dataclass(frozen=True)
class NoiseParams:
    sigma_omega: float
    sigma_b: float

    def __post_init__(self):
        if self.sigma_omega < 0 or self.sigma_b < 0:
            raise ValueError("noise parameters must be nonnegative")


# --------------------------------------------------------------------------
# gain schedules


class GainSchedule:
    """Time-varying matrix gains ``K_P(t)``, ``K_I(t)``.

    Subclasses override :meth:`k_p` and :meth:`k_i`; :meth:`k_i_dot` defaults to a
    central difference and sets :attr:`k_i_dot_numeric` so callers can flag it.
    """

    k_i_dot_numeric = True

    def k_p(self, t):
        raise NotImplementedError

    def k_i(self, t):
        raise NotImplementedError

    def k_i_dot(self, t):
        h = 1e-6 * max(1.0, abs(t))
        return (self.k_i(t + h) - self.k_i(t - h)) / (2 * h)


class ConstantGains(GainSchedule):
    k_i_dot_numeric = False

    def __init__(self, k_p, k_i):
        self._k_p = _as_gain(k_p)
        self._k_i = _as_gain(k_i)

    @classmethod
    def scalar(cls, k_p, k_i):
        return cls(k_p * _I3, k_i * _I3)

    def k_p(self, t):
        return self._k_p

    def k_i(self, t):
        return self._k_i

    def k_i_dot(self, t):
        return np.zeros_like(self._k_i)


class FunctionGains(GainSchedule):
    """Gains from callables; pass ``k_i_dot`` for an analytic derivative."""

    def __init__(self, k_p, k_i, k_i_dot=None):
        self._k_p, self._k_i, self._k_i_dot = k_p, k_i, k_i_dot
        self.k_i_dot_numeric = k_i_dot is None

    def k_p(self, t):
        return _as_gain(self._k_p(t))

    def k_i(self, t):
        return _as_gain(self._k_i(t))

    def k_i_dot(self, t):
        if self._k_i_dot is None:
            return super().k_i_dot(t)
        return _as_gain(self._k_i_dot(t))


class RecordedGains(GainSchedule):
    """Replays ``K_P`` values captured from another filter, ``K_I = 0``.

    Values are served per time stamp in the order they were recorded; two
    integrator stages can share a time stamp with different gains.
    """

    k_i_dot_numeric = False

    def __init__(self, records):
        self._queue = defaultdict(list)
        for t, k in records:
            self._queue[float(t)].append(np.array(k, dtype=float))

    def k_p(self, t):
        try:
            return self._queue[float(t)].pop(0)
        except IndexError:
            raise KeyError(f"no recorded gain left for t={t!r}") from None

    def k_i(self, t):
        return np.zeros((3, 3))

    def k_i_dot(self, t):
        return np.zeros((3, 3))


def _as_gain(k):
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        return k * _I3
    return k


def check_gain(k, name, allow_zero=False):
    if allow_zero and not np.any(k):
        return
    if np.max(np.abs(k - np.swapaxes(k, -1, -2))) > 1e-9 * max(1.0, np.max(np.abs(k))):
        raise GainNotPositiveDefinite(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        raise GainNotPositiveDefinite(f"{name} is not positive definite") from None


# --------------------------------------------------------------------------
# shared kernels


def _mv(a, x):
    return np.einsum("...ij,...j->...i", a, x)


def _predicted(c_hat, ref):
    # v_hat_n = C_hat^T v^A_n, shape (..., n, 3)
    return np.einsum("...ji,nj->...ni", c_hat, ref)


def _weighted_cross(vec_meas, v_hat, weights):
    return np.einsum("n,...ni->...i", weights, cross(vec_meas, v_hat))


def lie_rk4(c_hat, b_hat, p, omega_meas, vec_meas, t, dt, rates):
    """One step of the shared filter integrator.

    ``rates(c, b, p, vec, t) -> (u, b_dot, p_dot)`` gives the body rate applied to
    the attitude estimate and the bias/covariance derivatives (``None`` for
    absent parts).  The attitude uses the 4th-order commutator-free Lie group
    scheme whose translation part is classical RK4.  Measured vectors are carried
    to intermediate stage times with the bias-corrected gyro.
    """
    h = dt
    gyro = omega_meas - b_hat

    def vec_at(tau):
        r = exp_map(tau * gyro)
        return np.einsum("...ji,...nj->...ni", r, vec_meas)

    def add(x, k, s):
        return None if x is None else x + s * k

    vec_half = vec_at(0.5 * h)
    t_half = t + 0.5 * h

    u1, kb1, kp1 = rates(c_hat, b_hat, p, vec_meas, t)
    c2 = c_hat @ exp_map(0.5 * h * u1)
    b2, p2 = add(b_hat, kb1, 0.5 * h), add(p, kp1, 0.5 * h)
    u2, kb2, kp2 = rates(c2, b2, p2, vec_half, t_half)
    c3 = c_hat @ exp_map(0.5 * h * u2)
    b3, p3 = add(b_hat, kb2, 0.5 * h), add(p, kp2, 0.5 * h)
    u3, kb3, kp3 = rates(c3, b3, p3, vec_half, t_half)
    c4 = c2 @ exp_map(h * (u3 - 0.5 * u1))
    b4, p4 = add(b_hat, kb3, h), add(p, kp3, h)
    u4, kb4, kp4 = rates(c4, b4, p4, vec_at(h), t + h)

    c_new = (
        c_hat
        @ exp_map(h * (u1 / 4 + u2 / 6 + u3 / 6 - u4 / 12))
        @ exp_map(h * (-u1 / 12 + u2 / 6 + u3 / 6 + u4 / 4))
    )
    b_new = b_hat + h / 6 * (kb1 + 2 * kb2 + 2 * kb3 + kb4)
    p_new = None if p is None else p + h / 6 * (kp1 + 2 * kp2 + 2 * kp3 + kp4)
    return orthonormalize(c_new), b_new, p_new


# --------------------------------------------------------------------------
# generalized complementary filter


def omega_err(state, frame, model):
    """Correction vector ``sum_n k_n v_meas_n x v_hat_n``."""
    v_hat = _predicted(state.c_hat, model.vectors)
    return _weighted_cross(frame.vec_meas, v_hat, model.weights)


def generalized_step(state, frame, model, gains, dt, check=True):
    """Advance the matrix-gain complementary filter by ``dt``.

    ``C_hat' = C_hat (omega_meas - b_hat + K_P omega_err)x`` and
    ``b_hat' = -K_I omega_err``.  ``K_I`` may be exactly zero (integral action
    off); otherwise both gains must be positive definite at ``state.t``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ref, w = model.vectors, model.weights
    first = [check]

    def rates(c, b, _p, vec, tt):
        k_p, k_i = gains.k_p(tt), gains.k_i(tt)
        if first[0]:
            check_gain(k_p, "K_P")
            check_gain(k_i, "K_I", allow_zero=True)
            first[0] = False
        err = _weighted_cross(vec, _predicted(c, ref), w)
        return frame.omega_meas - b + _mv(k_p, err), -_mv(k_i, err), None

    c, b, _ = lie_rk4(state.c_hat, state.b_hat, None, frame.omega_meas, frame.vec_meas, state.t, dt, rates)
    return FilterState(c, b, state.p, state.t + dt)


def mahony_step(state, frame, model, k_p, k_i, dt, check=True):
    """Scalar-gain special case; ``k_i = 0`` freezes the bias estimate."""
    if k_p <= 0 or k_i < 0:
        raise GainNotPositiveDefinite("need k_p > 0 and k_i >= 0")
    return generalized_step(state, frame, model, ConstantGains.scalar(k_p, k_i), dt, check)


# --------------------------------------------------------------------------
# MEKF family


def _blocks(p):
    if p.shape[-1] == 3:
        return p, None, None
    return p[..., :3, :3], p[..., :3, 3:], p[..., 3:, 3:]


def _innovation(c, vec, model):
    return _weighted_cross(vec, _predicted(c, model.vectors), model.inverse_variances)


def mekf_omega_ref(state, frame, model):
    """Reference rate ``omega_meas - b_hat + P_a sum_n sigma_n^-2 (v_meas x v_ref)``."""
    if state.p is None:
        raise CovarianceMissing("MEKF needs a covariance in the filter state")
    p_a = _blocks(state.p)[0]
    return frame.omega_meas - state.b_hat + _mv(p_a, _innovation(state.c_hat, frame.vec_meas, model))


def _measurement_shape(v_ref, inv_var):
    # sum_n sigma_n^-2 (v_n)x^2 = sum_n sigma_n^-2 (v v^T - I)
    outer = np.einsum("n,...ni,...nj->...ij", inv_var, v_ref, v_ref)
    return outer - np.sum(inv_var) * _I3


def _riccati(p, omega_prime, v_ref, inv_var, noise):
    w = cross_op(omega_prime)
    s = _measurement_shape(v_ref, inv_var)
    sw2, sb2 = noise.sigma_omega**2, noise.sigma_b**2
    p_a, p_c, p_b = _blocks(p)
    if p_c is None:
        return p_a @ w - w @ p_a + sw2 * _I3 + p_a @ s @ p_a
    out = np.empty(np.broadcast_shapes(p.shape, w.shape[:-2] + (6, 6)))
    p_ct = np.swapaxes(p_c, -1, -2)
    out[..., :3, :3] = p_a @ w - w @ p_a - (p_c + p_ct) + sw2 * _I3
    out[..., :3, 3:] = -w @ p_c - p_b
    out[..., 3:, :3] = p_ct @ w - p_b
    out[..., 3:, 3:] = sb2 * _I3
    lower = p[..., :3, :]
    return out + np.swapaxes(lower, -1, -2) @ s @ lower


def riccati_rhs(p, omega_prime, state, model, noise):
    """Covariance derivative of the continuous-time MEKF.

    ``omega_prime`` is ``(omega_meas + omega_ref - b_hat) / 2``; the reference
    vectors come from ``state.c_hat``.  A ``(3, 3)`` ``p`` gives the bias-free
    attitude block.
    """
    p = np.asarray(p, dtype=float)
    v_ref = _predicted(state.c_hat, model.vectors)
    return _riccati(p, np.asarray(omega_prime, float), v_ref, model.inverse_variances, noise)


def _finish_covariance(p):
    asym = np.max(np.abs(p - np.swapaxes(p, -1, -2)))
    if not np.isfinite(asym) or asym > 1e-6:
        raise CovarianceNotPD(f"covariance asymmetry {asym:.3e} exceeds 1e-6")
    p = ps(p)
    try:
        np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        raise CovarianceNotPD("covariance lost positive definiteness") from None
    return p


def full_mekf_step(state, frame, model, noise, dt):
    """Continuous-time MEKF: attitude, bias and 6x6 covariance together."""
    if state.p is None:
        raise CovarianceMissing("full MEKF needs a 6x6 covariance")
    if state.p.shape[-1] != 6:
        raise CovarianceMissing("full MEKF needs a 6x6 covariance, got P_a only")
    ref, iv = model.vectors, model.inverse_variances

    def rates(c, b, p, vec, tt):
        p_a, p_c, _ = _blocks(p)
        v_ref = _predicted(c, ref)
        inn = _weighted_cross(vec, v_ref, iv)
        u = frame.omega_meas - b + _mv(p_a, inn)
        b_dot = _mv(np.swapaxes(p_c, -1, -2), inn)
        w_prime = 0.5 * (frame.omega_meas + u - b)
        return u, b_dot, _riccati(p, w_prime, v_ref, iv, noise)

    c, b, p = lie_rk4(state.c_hat, state.b_hat, state.p, frame.omega_meas, frame.vec_meas, state.t, dt, rates)
    return FilterState(c, b, _finish_covariance(p), state.t + dt)


def bias_free_mekf_step(state, frame, model, noise, dt, record=None):
    """MEKF without bias states; ``state.p`` is the 3x3 attitude covariance.

    If ``record`` is a list, every ``(t, P_a)`` the integrator stages use is
    appended to it, ready for :class:`RecordedGains`.
    """
    if state.p is None:
        raise CovarianceMissing("bias-free MEKF needs P_a")
    if state.p.shape[-1] != 3:
        raise CovarianceMissing("bias-free MEKF takes the 3x3 P_a block only")
    ref, iv = model.vectors, model.inverse_variances
    zero = np.zeros_like(state.b_hat)

    def rates(c, b, p, vec, tt):
        if record is not None:
            record.append((tt, p.copy()))
        v_ref = _predicted(c, ref)
        inn = _weighted_cross(vec, v_ref, iv)
        u = frame.omega_meas - b + _mv(p, inn)
        w_prime = 0.5 * (frame.omega_meas + u - b)
        return u, zero, _riccati(p, w_prime, v_ref, iv, noise)

    c, b, p = lie_rk4(state.c_hat, state.b_hat, state.p, frame.omega_meas, frame.vec_meas, state.t, dt, rates)
    return FilterState(c, b, _finish_covariance(p), state.t + dt)


class SteadyState(NamedTuple):
    p_a: np.ndarray
    p_c: np.ndarray
    p_b: np.ndarray

    @property
    def p(self):
        return np.block([[self.p_a, self.p_c], [self.p_c.T, self.p_b]])

    def gains(self):
        """Equivalent generalized-filter gains ``(K_P, K_I) = (P_a, -P_c^T)``."""
        return ConstantGains(self.p_a, -self.p_c.T)


def information_matrix(model, c=None):
    """``A_0 = tr(M) I - M`` with MEKF weights ``sigma_n^-2`` (body axes of ``c``)."""
    v = model.vectors if c is None else model.vectors @ np.asarray(c, float)
    return -_measurement_shape(v, model.inverse_variances)


def steady_state_residuals(ss, a0, noise):
    """Residuals of the ``omega = 0`` stationarity conditions and the P_c relation."""
    p_a, p_c, p_b = ss
    sw2, sb2 = noise.sigma_omega**2, noise.sigma_b**2
    return {
        "pa": float(np.linalg.norm(-2 * ps(p_c) + sw2 * _I3 - p_a @ a0 @ p_a)),
        "pb": float(np.linalg.norm(sb2 * _I3 - p_c.T @ a0 @ p_c)),
        "pc": float(np.linalg.norm(-p_b - p_c.T @ a0 @ p_a)),
        "pc_relation": float(np.linalg.norm(p_c + sb2 * p_a @ np.linalg.inv(p_b))),
    }


def riccati_steady_state(model, noise, c=None, p0=None, tol=1e-10, max_steps=10_000_000):
    """Covariance limit of the MEKF Riccati equation with ``omega = 0``.

    Integrates from ``p0`` (default identity) with an adaptive explicit scheme
    until ``|P_dot|_F < tol``.  Raises :class:`NoConvergence` if the derivative
    stalls or the step budget runs out.
    """
    if noise.sigma_omega <= 0 or noise.sigma_b <= 0:
        raise ValueError("steady state needs sigma_omega > 0 and sigma_b > 0")
    a0 = information_matrix(model, c)
    try:
        np.linalg.cholesky(a0)
    except np.linalg.LinAlgError:
        raise NoConvergence("tr(M) I - M is not positive definite") from None
    s = -a0
    sw2, sb2 = noise.sigma_omega**2, noise.sigma_b**2

    def pdot(p):
        p_c, p_b = p[:3, 3:], p[3:, 3:]
        out = np.empty((6, 6))
        out[:3, :3] = -(p_c + p_c.T) + sw2 * _I3
        out[:3, 3:] = -p_b
        out[3:, :3] = -p_b
        out[3:, 3:] = sb2 * _I3
        lower = p[:3, :]
        return out + lower.T @ s @ lower

    def fun(_t, y):
        return pdot(y.reshape(6, 6)).ravel()

    p = np.eye(6) if p0 is None else np.array(p0, dtype=float)
    norm = np.linalg.norm(pdot(p))
    horizon, steps, best, stalls = 10.0, 0, norm, 0
    while norm >= tol:
        sol = solve_ivp(fun, (0.0, horizon), p.ravel(), method="DOP853", rtol=1e-13, atol=1e-18)
        if not sol.success:
            raise NoConvergence(sol.message)
        steps += sol.t.size
        p = ps(sol.y[:, -1].reshape(6, 6))
        norm = np.linalg.norm(pdot(p))
        if norm < 0.5 * best:
            best, stalls = norm, 0
        else:
            stalls += 1
        if stalls >= 8 or steps > max_steps:
            raise NoConvergence(f"|P_dot| stalled at {norm:.3e}")
        horizon = min(2 * horizon, 1e4)
    return SteadyState(p[:3, :3].copy(), p[:3, 3:].copy(), p[3:, 3:].copy())


def constant_gain_mekf_step(state, frame, model, noise, dt, gains_cache):
    """MEKF with the covariance frozen at its ``omega = 0`` limit.

    ``gains_cache`` is ``(P_a, P_c)`` (a :class:`SteadyState` works too).  The
    update law is the generalized filter with ``K_P = P_a``, ``K_I = -P_c^T``.
    """
    p_a, p_c = gains_cache[0], gains_cache[1]
    p_ct = np.swapaxes(p_c, -1, -2)
    ref, iv = model.vectors, model.inverse_variances

    def rates(c, b, _p, vec, tt):
        inn = _weighted_cross(vec, _predicted(c, ref), iv)
        return frame.omega_meas - b + _mv(p_a, inn), _mv(p_ct, inn), None

    c, b, _ = lie_rk4(state.c_hat, state.b_hat, None, frame.omega_meas, frame.vec_meas, state.t, dt, rates)
    return FilterState(c, b, state.p, state.t + dt)
