"""Seeded property suites that exercise the stability results numerically.

Each suite draws ``n`` random cases, evaluates one or more residuals per case and
returns a :class:`SuiteResult` with pass/fail counts and the worst residual of
every kind next to its limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import filters as flt
from . import stability as stab
from .sensors import GyroModel, NoiseBank, ObservationModel, build_m, measure
from .so3 import (
    commutator,
    cross,
    cross_op,
    exp_map,
    pa,
    random_rotation,
    rotation_angle,
    uncross,
    vee,
)

_I3 = np.eye(3)


@dataclass
class SuiteResult:
    name: str
    n: int
    passed: int = 0
    failed: int = 0
    worst: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.failed == 0 and self.passed > 0

    def tally(self, good):
        good = np.asarray(good, dtype=bool)
        self.passed += int(np.sum(good))
        self.failed += int(np.sum(~good))

    def note(self, key, values, limit):
        """Track the worst value of ``key``; a case passes when ``value <= limit``."""
        values = np.atleast_1d(np.asarray(values, dtype=float))
        prev = self.worst.get(key, -np.inf)
        worst = float(np.max(np.where(np.isnan(values), np.inf, values))) if values.size else -np.inf
        self.worst[key] = max(prev, worst)
        self.limits[key] = limit
        return values <= limit

    def lines(self):
        out = [f"suite={self.name} n={self.n} passed={self.passed} failed={self.failed}"]
        for key in self.worst:
            out.append(f"worst_{key}={self.worst[key]:.3e} limit={self.limits[key]:.1e}")
        for key, val in self.info.items():
            out.append(f"{key}={val}")
        out.append("result=" + ("PASS" if self.ok else "FAIL"))
        return out


# --------------------------------------------------------------------------
# random inputs


def random_unit(rng, size=None):
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_spd(rng, lo, hi, size=None):
    """Symmetric matrices with eigenvalues uniform in ``[lo, hi]`` and random axes."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    s = random_rotation(rng, size)
    lam = rng.uniform(lo, hi, shape + (3,))
    return s @ (lam[..., :, None] * np.swapaxes(s, -1, -2))


def random_model(rng, n_vectors=None, min_gap=0.05, sigma_range=(0.02, 0.2)):
    """Random observation model whose ``M^A`` has well separated eigenvalues.

    ``min_gap`` is relative to ``tr(M^A)``.
    """
    while True:
        n = int(rng.integers(2, 4)) if n_vectors is None else n_vectors
        v = random_unit(rng, n)
        k = rng.uniform(0.5, 2.0, n)
        s = rng.uniform(*sigma_range, n)
        m = np.einsum("n,ni,nj->ij", k, v, v)
        lam = np.linalg.eigvalsh(m)
        if np.min(np.diff(lam)) > min_gap * np.sum(lam):
            return ObservationModel(v, k, s)


def _random_error(rng, size, max_angle=np.pi - 0.2, max_bias=0.1):
    ct = exp_map(random_unit(rng, size) * rng.uniform(0, max_angle, (size, 1)))
    bt = random_unit(rng, size) * rng.uniform(0, max_bias, (size, 1))
    return ct, bt


# --------------------------------------------------------------------------
# suites


def identities_suite(n=1000, seed=0):
    """Cross-product and projection identities, plus the measurement-error identity."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("identities", n)
    x = rng.standard_normal((n, 3))
    y = rng.standard_normal((n, 3))
    xx, yx = cross_op(x), cross_op(y)

    def fro(a):
        return np.linalg.norm(a, axis=(-2, -1))

    ok = res.note("cross_commutator", fro(cross_op(cross(x, y)) - commutator(xx, yx)), 1e-12)

    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None, None]
    q = sign * random_spd(rng, 0.2, 5.0, n)
    lhs = cross(np.einsum("...ij,...j->...i", q, x), np.einsum("...ij,...j->...i", q, y))
    rhs = np.linalg.det(q)[:, None] * np.einsum("...ij,...j->...i", np.linalg.inv(q), cross(x, y))
    scale = np.maximum(np.linalg.norm(rhs, axis=-1), np.linalg.norm(lhs, axis=-1))
    ok &= res.note("matrix_cross_rel", np.linalg.norm(lhs - rhs, axis=-1) / np.maximum(scale, 1e-300), 1e-12)

    dot = np.sum(x * y, axis=-1)
    ok &= res.note("trace_dot", np.abs(dot + 0.5 * np.trace(xx @ yx, axis1=-2, axis2=-1)), 1e-12)
    outer = y[:, :, None] * x[:, None, :] - dot[:, None, None] * _I3
    ok &= res.note("cross_product_expand", fro(xx @ yx - outer), 1e-12)

    s = random_rotation(rng, n)
    st = np.swapaxes(s, -1, -2)
    la = rng.uniform(-2, 2, (n, 3))
    lb = rng.uniform(-2, 2, (n, 3))
    lc = np.stack(
        [
            la[:, 1] * lb[:, 2] + lb[:, 1] * la[:, 2],
            la[:, 0] * lb[:, 2] + lb[:, 0] * la[:, 2],
            la[:, 0] * lb[:, 1] + lb[:, 0] * la[:, 1],
        ],
        -1,
    )
    ld = np.stack([la[:, 1] * la[:, 2], la[:, 0] * la[:, 2], la[:, 0] * la[:, 1]], -1)

    def conj(lam):
        return s @ (lam[..., :, None] * st)

    a, b, c, d = conj(la), conj(lb), conj(lc), conj(ld)
    cx = np.einsum("...ij,...j->...i", c, x)
    dx = np.einsum("...ij,...j->...i", d, x)
    ok &= res.note("projection_expand", fro(pa(a @ xx @ b) - 0.5 * cross_op(cx)), 1e-12)
    ok &= res.note("rotation_conjugate", fro(s @ xx @ st - cross_op(np.einsum("...ij,...j->...i", s, x))), 1e-12)
    ok &= res.note("same_side_expand", fro(a @ xx @ a - cross_op(dx)), 1e-12)

    # omega_err = uncross(2 Pa(C_tilde M)) for noise-free vectors
    werr = np.empty(n)
    cts = random_rotation(rng, n)
    cs = random_rotation(rng, n)
    for i in range(n):
        model = random_model(rng, int(rng.integers(2, 5)), min_gap=0.0)
        direct = stab.measurement_error(cts[i], model, cs[i])
        via_pa = uncross(2.0 * pa(cts[i] @ build_m(model, cs[i])))
        werr[i] = np.linalg.norm(direct - via_pa)
    ok &= res.note("omega_err_identity", werr, 1e-12)
    res.tally(ok)
    return res


def lyapunov_suite(n=100, seed=0, duration=20.0, dt=0.01, fd_h=1e-6, fd_every=0.5):
    """Noise-free error trajectories with random constant gains and sinusoidal rates.

    Checks per trajectory: ``v`` never rises by more than 1e-9 in a step, the
    analytic ``v_dot`` is non-positive and matches a central difference of ``v``
    (step ``fd_h``) to relative 1e-4 wherever ``|v_dot| > 1e-4``.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("lyapunov", n)
    models = [random_model(rng) for _ in range(n)]
    m_a = np.array([m.m_inertial for m in models])
    gains = flt.ConstantGains(random_spd(rng, 0.5, 3.0, n), random_spd(rng, 0.05, 0.5, n))
    amp = rng.uniform(-1.0, 1.0, (n, 3))
    freq = rng.uniform(0.02, 0.3, (n, 1))
    phase = rng.uniform(0, 2 * np.pi, (n, 1))

    def omega_fn(t):
        return amp * np.sin(2 * np.pi * freq * t + phase)

    c = random_rotation(rng, n)
    ct, bt = _random_error(rng, n)
    n_steps = int(round(duration / dt))
    fd_stride = max(1, int(round(fd_every / dt)))

    def v_of(c, ct, bt):
        return stab.lyapunov_v(stab.ErrorState(ct, bt), m_a, gains, 0.0, c)

    v = v_of(c, ct, bt)
    rise = np.full(n, -np.inf)
    vdot_max = np.full(n, -np.inf)
    fd_rel = np.zeros(n)
    fd_count = 0
    for k in range(n_steps + 1):
        t = k * dt
        if k % fd_stride == 0:
            an = stab.lyapunov_v_dot(stab.ErrorState(ct, bt), omega_fn(t), m_a, gains, t, c)
            vdot_max = np.maximum(vdot_max, an)
            fwd = v_of(*stab.error_rk4_step(c, ct, bt, t, fd_h, omega_fn, m_a, gains, project=False))
            bwd = v_of(*stab.error_rk4_step(c, ct, bt, t, -fd_h, omega_fn, m_a, gains, project=False))
            fd = (fwd - bwd) / (2 * fd_h)
            big = np.abs(an) > 1e-4
            fd_count += int(np.sum(big))
            fd_rel = np.maximum(fd_rel, np.where(big, np.abs(fd - an) / np.where(big, np.abs(an), 1.0), 0.0))
        if k == n_steps:
            break
        c, ct, bt = stab.error_rk4_step(c, ct, bt, t, dt, omega_fn, m_a, gains)
        v_new = v_of(c, ct, bt)
        rise = np.maximum(rise, v_new - v)
        v = v_new

    ok = res.note("v_step_increase", rise, 1e-9)
    ok &= res.note("v_dot_analytic", vdot_max, 1e-12)
    ok &= res.note("v_dot_fd_rel", fd_rel, 1e-4)
    final_pa = np.linalg.norm(pa(ct @ np.swapaxes(c, -1, -2) @ m_a @ c), axis=(-2, -1))
    res.info["fd_points"] = fd_count
    res.info["median_final_pa_norm"] = f"{np.median(final_pa):.3e}"
    res.tally(ok)
    return res


def equilibria_suite(n=100, seed=0, starts=4):
    """Both directions of the equilibrium characterization on random models."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("equilibria", n)
    hits = 0
    for _ in range(n):
        model = random_model(rng)
        m = model.m_inertial
        eq = stab.equilibria(model)
        fwd = np.linalg.norm(pa(eq.c_star @ m), axis=(-2, -1))
        ok = bool(res.note("forward_pa_norm", fwd, 1e-12).all())
        shape = np.linalg.norm(eq.c_star @ eq.c_star - _I3, axis=(-2, -1))
        ok &= bool(res.note("equilibrium_square", shape, 1e-12).all())
        found = 0
        for r0 in random_rotation(rng, starts):
            r, resid = stab.pa_zero_search(m, r0)
            if resid < 1e-9:
                found += 1
                dist = np.min(rotation_angle(eq.c_star @ r))
                ok &= bool(res.note("converse_distance", dist, 1e-6).all())
        hits += found
        signs_ok = np.all(np.linalg.eigvalsh(stab.linearization_a(model, 0)) > 0)
        for i in (1, 2, 3):
            signs_ok &= np.min(np.linalg.eigvals(stab.linearization_a(model, i)).real) < 0
        ok &= bool(signs_ok) and found > 0
        res.tally(ok)
    res.info["zeros_found"] = f"{hits}/{n * starts}"
    return res


def _inertial_rates(ct, bt, omega, model, gains):
    # error dynamics seen in inertial axes at the instant C = I
    c_dot, b_dot = stab.error_dynamics_rhs(stab.ErrorState(ct, bt), omega, model, gains, 0.0)
    wx = cross_op(omega)
    return c_dot + wx @ ct - ct @ wx, b_dot + wx @ bt


def linearization_fd(model, gains, omega, i, xi, eps=1e-6):
    """Central difference of the nonlinear error dynamics along ``xi = (x_i, y)``.

    Uses body axes for ``i = 0`` and inertial axes otherwise, matching
    :func:`attikit.stability.linearized_system`; ``b_tilde = -y`` in both.
    """
    c_star = stab.equilibria(model).c_star[i]
    x_i, y = xi[:3], xi[3:]
    x = c_star.T @ x_i

    def rate(s):
        ct = c_star @ exp_map(s * x)
        bt = -s * y
        if i == 0:
            c_dot, b_dot = stab.error_dynamics_rhs(stab.ErrorState(ct, bt), omega, model, gains, 0.0)
        else:
            c_dot, b_dot = _inertial_rates(ct, bt, omega, model, gains)
        return np.concatenate([c_star @ vee(c_star.T @ c_dot), -b_dot])

    return (rate(eps) - rate(-eps)) / (2 * eps)


def linearization_suite(n=100, seed=0, omega_max=10.0):
    """Spectral dichotomy, finite-difference check of the linearizations, certificates.

    Eigenvalues decide stability only where the 6x6 system is time invariant: at
    ``omega = 0`` for matrix gains, and for any constant ``omega`` with scalar
    gains in inertial axes.  Both regimes are sampled per case.  The finite
    difference and certificate checks use matrix gains with a random ``omega``.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("linearization", n)
    zero = np.zeros(3)
    for _ in range(n):
        model = random_model(rng)
        k_p = random_spd(rng, 0.3, 3.0)
        k_i = random_spd(rng, 0.05, 1.0)
        gains = flt.ConstantGains(k_p, k_i)
        omega = random_unit(rng) * rng.uniform(0, omega_max)
        scalar = (rng.uniform(0.3, 3.0) * _I3, rng.uniform(0.05, 1.0) * _I3)

        ok = True
        for g, w in (((k_p, k_i), zero), (scalar, omega)):
            real0 = np.max(np.linalg.eigvals(stab.linearized_system(model, g, w, 0, frame="inertial")).real)
            ok &= bool(res.note("max_real_stable", real0, -1e-12).all())
            for i in (1, 2, 3):
                real_i = np.max(np.linalg.eigvals(stab.linearized_system(model, g, w, i)).real)
                ok &= bool(res.note("neg_max_real_unstable", -real_i, -1e-12).all())
        fd_err = 0.0
        for i in range(4):
            xi = rng.standard_normal(6)
            lin = stab.linearized_system(model, (k_p, k_i), omega, i) @ xi
            fd = linearization_fd(model, gains, omega, i, xi)
            fd_err = max(fd_err, np.linalg.norm(fd - lin) / np.linalg.norm(lin))
        ok &= bool(res.note("linear_fd_rel", fd_err, 1e-6).all())
        try:
            cert = stab.exponential_certificate(model, (k_p, k_i), omega)
            ok &= cert.min_eig_p > 0 and cert.min_eig_q > 0
        except stab.NoCertificateFound:
            res.info["certificate_misses"] = res.info.get("certificate_misses", 0) + 1
            ok = False
        res.tally(ok)
    return res


def equivalence_suite(n=50, seed=0, steps=1000, dt=0.01, group=10):
    """Filter equivalences on shared noisy measurement frames.

    Constant-gain MEKF against the generalized filter with the steady-state gains
    (limit 1e-14 per step), and the bias-free MEKF against the generalized filter
    replaying its recorded ``P_a`` schedule (limit 1e-12).  Cases run in batches
    of ``group`` sharing one random model.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("equivalence", n)
    done = 0
    while done < n:
        size = min(group, n - done)
        base = random_model(rng, sigma_range=(0.05, 0.2))
        model = ObservationModel.mekf_weighted(base.vectors, base.sigmas)
        noise = flt.NoiseParams(rng.uniform(0.005, 0.05), rng.uniform(0.0005, 0.005))
        gyro_sigmas = (noise.sigma_omega, noise.sigma_b)
        cg, bf = _equivalence_batch(rng, model, noise, gyro_sigmas, size, steps, dt)
        ok = res.note("constant_gain_diff", cg, 1e-14)
        ok &= res.note("bias_free_diff", bf, 1e-12)
        res.tally(ok)
        done += size
    return res


def _equivalence_batch(rng, model, noise, gyro_sigmas, size, steps, dt):
    gyro = GyroModel(*gyro_sigmas)
    steady = flt.riccati_steady_state(model, noise)
    gains = steady.gains()
    c = random_rotation(rng, size)
    b = random_unit(rng, size) * 0.01
    ct0, bt0 = _random_error(rng, size, max_angle=1.0, max_bias=0.02)
    c_hat0 = c @ np.swapaxes(ct0, -1, -2)
    b_hat0 = b - bt0
    omega = random_unit(rng, size) * rng.uniform(0, 1, (size, 1))
    bank = NoiseBank(rng.integers(0, 2**63, size))
    cgm = flt.FilterState(c_hat0.copy(), b_hat0.copy())
    gen = flt.FilterState(c_hat0.copy(), b_hat0.copy())
    p_a0 = np.broadcast_to(steady.p_a, (size, 3, 3)).copy()
    bfm = flt.FilterState(c_hat0.copy(), b_hat0.copy(), p_a0)
    rep = flt.FilterState(c_hat0.copy(), b_hat0.copy())
    worst_cg = np.zeros(size)
    worst_bf = np.zeros(size)
    for k in range(steps):
        frame, b = measure(c, omega, b, gyro, model, dt, bank, t=k * dt)
        cgm = flt.constant_gain_mekf_step(cgm, frame, model, noise, dt, steady)
        gen = flt.generalized_step(gen, frame, model, gains, dt)
        record = []
        bfm = flt.bias_free_mekf_step(bfm, frame, model, noise, dt, record=record)
        rep = flt.generalized_step(rep, frame, model, flt.RecordedGains(record), dt)
        c = c @ exp_map(dt * omega)
        worst_cg = np.maximum(worst_cg, _state_gap(cgm, gen))
        worst_bf = np.maximum(worst_bf, _state_gap(bfm, rep))
    return worst_cg, worst_bf


def _state_gap(s1, s2):
    dc = np.max(np.abs(s1.c_hat - s2.c_hat), axis=(-2, -1))
    db = np.max(np.abs(s1.b_hat - s2.b_hat), axis=-1)
    return np.maximum(dc, db)


SUITES = {
    "identities": identities_suite,
    "lyapunov": lyapunov_suite,
    "equilibria": equilibria_suite,
    "linearization": linearization_suite,
    "equivalence": equivalence_suite,
}


def run_suite(name, n=None, seed=0):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    fn = SUITES[name]
    return fn(seed=seed) if n is None else fn(n=n, seed=seed)
