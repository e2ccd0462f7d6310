"""Error dynamics, equilibria, linearizations and Lyapunov-style certificates.

Error variables follow ``C_tilde = C_hat^T C`` and ``b_tilde = b - b_hat``.  The
body-frame quantities depend on the true attitude through ``M = C^T M^A C``, so
most functions accept ``c_true`` (identity by default, in which case body and
inertial axes coincide).

Wherever a ``model`` is taken, a plain inertial ``M^A`` array (optionally with
leading batch axes) works too; the noise-free measurement error is then formed
as ``uncross(2 Pa(C_tilde M))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares

from .errors import NoCertificateFound
from .sensors import ObservationModel, build_m, check_distinct_eigenvalues
from .so3 import cross, cross_op, exp_map, orthonormalize, pa, ps, vee

_I3 = np.eye(3)
_D = np.array([np.diag([1.0, 1.0, 1.0]), np.diag([1.0, -1.0, -1.0]), np.diag([-1.0, 1.0, -1.0]), np.diag([-1.0, -1.0, 1.0])])


@dataclass
class ErrorState:
    c_tilde: np.ndarray
    b_tilde: np.ndarray


class EquilibriumSet(NamedTuple):
    c_star: np.ndarray  # (4, 3, 3): identity then the three half-turns
    u: np.ndarray
    lam: np.ndarray


def _mv(a, x):
    return np.einsum("...ij,...j->...i", a, x)


def _quad(x, a, y):
    return np.einsum("...i,...ij,...j->...", x, a, y)


def _tr(a):
    return np.trace(a, axis1=-2, axis2=-1)


def _body_vectors(model, c_true):
    if c_true is None:
        return model.vectors
    return np.einsum("...ji,nj->...ni", np.asarray(c_true, float), model.vectors)


def _m_of(model, c_true=None):
    if isinstance(model, ObservationModel):
        return build_m(model, c_true)
    m = np.asarray(model, float)
    if c_true is None:
        return m
    c = np.asarray(c_true, float)
    return np.swapaxes(c, -1, -2) @ m @ c


def measurement_error(c_tilde, model, c_true=None):
    """``omega_err = sum_n k_n v_n x C_tilde v_n`` for noise-free body vectors."""
    if not isinstance(model, ObservationModel):
        return 2.0 * vee(pa(np.asarray(c_tilde, float) @ _m_of(model, c_true)))
    v = _body_vectors(model, c_true)
    cv = np.einsum("...ij,...nj->...ni", c_tilde, v)
    return np.einsum("n,...ni->...i", model.weights, cross(v, cv))


def error_dynamics_rhs(err, omega, model, gains, t, c_true=None):
    """Time derivatives ``(C_tilde_dot, b_tilde_dot)`` of the noise-free error."""
    ct, bt = np.asarray(err.c_tilde, float), np.asarray(err.b_tilde, float)
    w = measurement_error(ct, model, c_true)
    corr = bt + _mv(gains.k_p(t), w)
    wx = cross_op(omega)
    c_dot = ct @ wx - wx @ ct - cross_op(corr) @ ct
    return c_dot, _mv(gains.k_i(t), w)


def error_rk4_step(c, ct, bt, t, dt, omega_fn, model, gains, project=True):
    """One classical RK4 step of the joint (truth, error) system.

    ``dt`` may be negative.  With ``project`` the two rotations are re-projected
    onto SO(3) afterwards.
    """

    def f(tt, c, ct, bt):
        om = omega_fn(tt)
        ct_dot, bt_dot = error_dynamics_rhs(ErrorState(ct, bt), om, model, gains, tt, c)
        return c @ cross_op(om), ct_dot, bt_dot

    x0 = (c, ct, bt)
    k1 = f(t, *x0)
    k2 = f(t + dt / 2, *(x + dt / 2 * d for x, d in zip(x0, k1)))
    k3 = f(t + dt / 2, *(x + dt / 2 * d for x, d in zip(x0, k2)))
    k4 = f(t + dt, *(x + dt * d for x, d in zip(x0, k3)))
    c, ct, bt = (x + dt / 6 * (a + 2 * b + 2 * e + d) for x, a, b, e, d in zip(x0, k1, k2, k3, k4))
    if project:
        c, ct = orthonormalize(c), orthonormalize(ct)
    return c, ct, bt


def integrate_error_dynamics(err, c_true, omega_fn, model, gains, t0, dt, n_steps):
    """RK4 on (truth, error) jointly; returns arrays of times, C, C_tilde, b_tilde.

    The truth attitude is carried because the body-frame reference vectors rotate
    with it.  Rotations are re-projected onto SO(3) after each step.  Leading batch
    axes on the states (and on ``model`` given as an ``M^A`` array) are kept.
    """
    c = np.array(c_true, dtype=float)
    ct = np.array(err.c_tilde, dtype=float)
    bt = np.array(err.b_tilde, dtype=float)
    ts = t0 + dt * np.arange(n_steps + 1)
    cs, cts, bts = [c], [ct], [bt]
    for k in range(n_steps):
        c, ct, bt = error_rk4_step(c, ct, bt, ts[k], dt, omega_fn, model, gains)
        cs.append(c)
        cts.append(ct)
        bts.append(bt)
    return ts, np.array(cs), np.array(cts), np.array(bts)


# --------------------------------------------------------------------------
# equilibria


def _eig_desc(m):
    lam, u = np.linalg.eigh(m)
    lam, u = lam[::-1], u[:, ::-1]
    if np.linalg.det(u) < 0:
        u = u.copy()
        u[:, 2] = -u[:, 2]
    return lam, u


def equilibria_of(m):
    """Equilibrium attitude errors ``U D_i U^T`` of a symmetric PSD ``M``."""
    check_distinct_eigenvalues(m)
    lam, u = _eig_desc(np.asarray(m, float))
    c_star = u @ _D @ u.T
    return EquilibriumSet(c_star, u, lam)


def equilibria(model, c=None):
    """Equilibria for ``M = C^T M^A C`` (inertial ``M^A`` when ``c`` is None)."""
    return equilibria_of(_m_of(model, c))


def pa_zero_search(m, r0):
    """Drive ``|Pa(R M)|`` to zero by Levenberg-Marquardt from the rotation ``r0``.

    Returns ``(R, |Pa(R M)|_F)``.
    """
    m = np.asarray(m, float)
    r0 = np.asarray(r0, float)

    def resid(x):
        return vee(exp_map(x) @ r0 @ m)

    sol = least_squares(resid, np.zeros(3), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    r = orthonormalize(exp_map(sol.x) @ r0)
    return r, float(np.linalg.norm(pa(r @ m)))


# --------------------------------------------------------------------------
# Lyapunov analysis


def _bias_term(bt, k_i):
    if not np.any(k_i):
        return np.zeros(np.shape(bt)[:-1])
    return 0.5 * _quad(bt, np.linalg.inv(k_i), bt)


def lyapunov_v(err, model, gains, t, c_true=None):
    """``sum k_n - tr(C_tilde M) + b_tilde^T K_I^-1 b_tilde / 2``.

    With ``K_I = 0`` (no integral action) the bias term is dropped.
    """
    m = _m_of(model, c_true)
    ct = np.asarray(err.c_tilde, float)
    return _tr(m) - _tr(ct @ m) + _bias_term(np.asarray(err.b_tilde, float), gains.k_i(t))


def lyapunov_v_dot(err, omega, model, gains, t, c_true=None):
    """Analytic ``v_dot = tr((K_P w)x Pa(C_tilde M)) - b^T K_I^-1 K_I_dot K_I^-1 b / 2``.

    ``omega`` drops out of the simplified expression; it is accepted so the
    signature matches :func:`error_dynamics_rhs`.
    """
    m = _m_of(model, c_true)
    ct = np.asarray(err.c_tilde, float)
    bt = np.asarray(err.b_tilde, float)
    w = measurement_error(ct, model, c_true)
    att = _tr(cross_op(_mv(gains.k_p(t), w)) @ pa(ct @ m))
    k_i = gains.k_i(t)
    if not np.any(k_i):
        return att
    inv = np.linalg.inv(k_i)
    return att - 0.5 * _quad(bt, inv @ gains.k_i_dot(t) @ inv, bt)


def linearization_a(model, equil_index, c=None):
    """Jacobian ``A_i`` of the measurement error at ``C*_i``: ``w_err ~ A_i x_i``.

    ``A_i = tr(C*_i M) I - C*_i M`` with ``x_i = C*_i x`` for the perturbation
    ``C_tilde = C*_i exp(x)``.  ``A_0 = tr(M) I - M`` is positive definite; the
    half-turn equilibria each give at least one negative eigenvalue.
    """
    m = _m_of(model, c)
    if equil_index == 0:
        return np.trace(m) * _I3 - m
    cm = equilibria_of(m).c_star[equil_index] @ m
    return np.trace(cm) * _I3 - cm


def linearized_system(model, gains_const, omega, equil_index, c=None, frame=None):
    """6x6 state matrix of the error dynamics linearized at ``C*_i``.

    State is ``(x_i, y)`` with ``b_tilde = -y``.  Body axes give
    ``[[-K_P A_0 - w x, I], [-K_I A_0, 0]]`` (only defined at ``i = 0``); inertial
    axes give ``[[-K_P A_i, I], [-K_I A_i, w x]]``.  ``frame`` defaults to body at
    ``i = 0`` and inertial otherwise.
    """
    k_p, k_i = (np.asarray(g, float) for g in gains_const)
    if frame is None:
        frame = "body" if equil_index == 0 else "inertial"
    if frame not in ("body", "inertial"):
        raise ValueError("frame must be 'body' or 'inertial'")
    if frame == "body" and equil_index != 0:
        raise ValueError("the body-axes form is only defined at the identity equilibrium")
    a = linearization_a(model, equil_index, c)
    wx = cross_op(omega)
    b = np.zeros((6, 6))
    b[:3, 3:] = _I3
    b[3:, :3] = -k_i @ a
    if frame == "body":
        b[:3, :3] = -k_p @ a - wx
    else:
        b[:3, :3] = -k_p @ a
        b[3:, 3:] = wx
    return b


def instability_cost(err_lin, model, gains, equil_index, t, c=None):
    """Cost ``s`` and its derivative near an unstable equilibrium (``i`` in 1..3)."""
    if equil_index not in (1, 2, 3):
        raise ValueError("instability cost is defined for equilibria 1, 2, 3")
    x, y = (np.asarray(v, float) for v in err_lin)
    a = linearization_a(model, equil_index, c)
    k_p, k_i = gains.k_p(t), gains.k_i(t)
    inv = np.linalg.inv(k_i)
    s = 0.5 * x @ a @ x + 0.5 * y @ inv @ y
    s_dot = -x @ a.T @ k_p @ a @ x - 0.5 * y @ inv @ gains.k_i_dot(t) @ inv @ y
    return float(s), float(s_dot)


class Certificate(NamedTuple):
    alpha: float
    min_eig_p: float
    min_eig_q: float


def certificate_matrices(a0, k_p, k_i, omega, alpha, k_i_dot=None):
    """Weight ``P(alpha)`` and decay matrix ``Q = -(P B + B^T P + P_dot)``.

    ``a0`` is in body axes, so it turns with the body: ``A0_dot = A0 w x - w x A0``
    enters ``P_dot`` alongside the ``K_I`` term.
    """
    k_i_inv = np.linalg.inv(k_i)
    wx = cross_op(omega)
    p = np.block([[a0, -alpha * a0], [-alpha * a0, k_i_inv]])
    b = np.block([[-k_p @ a0 - wx, _I3], [-k_i @ a0, np.zeros((3, 3))]])
    a0_dot = a0 @ wx - wx @ a0
    p_dot = np.block([[a0_dot, -alpha * a0_dot], [-alpha * a0_dot, np.zeros((3, 3))]])
    if k_i_dot is not None:
        p_dot[3:, 3:] = -k_i_inv @ k_i_dot @ k_i_inv
    q = -(p @ b + b.T @ p + p_dot)
    return p, ps(q)


def exponential_certificate(model, gains_const, omega, c=None, n_grid=200, k_i_dot=None):
    """Search ``alpha`` making both ``P`` and ``Q`` positive definite.

    The grid is logarithmic over ``(1e-6, 1) * alpha_max`` where
    ``alpha_max**2 A_0 = K_I^-1`` at the boundary; it is scanned from the largest
    value down and the first success is returned.
    """
    k_p, k_i = (np.asarray(g, float) for g in gains_const)
    a0 = linearization_a(model, 0, c)
    alpha_max = 1.0 / np.sqrt(np.max(np.linalg.eigvals(k_i @ a0).real))
    grid = alpha_max * np.logspace(-6.0, 0.0, n_grid, endpoint=False)
    for alpha in grid[::-1]:
        p, q = certificate_matrices(a0, k_p, k_i, omega, alpha, k_i_dot)
        ep = np.linalg.eigvalsh(p)[0]
        eq = np.linalg.eigvalsh(q)[0]
        tiny = 1e-13 * max(np.max(np.abs(q)), 1.0)
        if ep > 0 and eq > tiny:
            return Certificate(float(alpha), float(ep), float(eq))
    raise NoCertificateFound("no alpha on the grid makes both P and Q positive definite")
