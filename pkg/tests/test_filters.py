import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attikit import filters as flt
from attikit import sim
from attikit import stability as stab
from attikit.errors import CovarianceMissing, CovarianceNotPD, GainNotPositiveDefinite, NoConvergence
from attikit.sensors import GyroModel, MeasurementFrame, NoiseStream, ObservationModel, build_m, measure
from attikit.so3 import exp_map, is_rotation, pa, random_rotation, rot_z, uncross
from strategies import rotations, spd_matrices, two_vector_dirs

E1, E2, E3 = np.eye(3)
MODEL = ObservationModel.from_directions([E1, [0.0, 0.6, 0.8]], weights=[1.0, 0.6], sigmas=[0.1, 0.2])
NOISE = flt.NoiseParams(0.1, 0.01)


def exact_frame(c, omega, model=MODEL, t=0.0):
    return MeasurementFrame(t, np.asarray(omega, float), np.einsum("ji,nj->ni", c, model.vectors))


def frames(n, dt, omega_fn, model=MODEL, seed=0, gyro=None, noisy_model=None):
    """Sensor frames and truth attitudes along a trajectory starting at identity."""
    c = np.eye(3)
    b = np.zeros(3) if gyro is None else gyro.b0
    gyro = gyro or GyroModel()
    meas_model = noisy_model or ObservationModel(model.vectors, model.weights, np.zeros(len(model)))
    noise = NoiseStream(seed)
    out, truth = [], [c]
    for k in range(n):
        w = omega_fn(k * dt + dt / 2)
        f, b = measure(c, w, b, gyro, meas_model, dt, noise, t=k * dt)
        out.append(f)
        c = c @ exp_map(dt * w)
        truth.append(c)
    return out, truth


def sine(t):
    return np.array([0.3 * np.sin(0.7 * t), 0.2, -0.4 * np.cos(0.3 * t)])


# --------------------------------------------------------------------------
# measurement error


def test_omega_err_zero_when_converged():
    c = exp_map([0.3, -0.5, 1.0])
    state = flt.FilterState.initial(c)
    np.testing.assert_allclose(flt.omega_err(state, exact_frame(c, np.zeros(3)), MODEL), 0, atol=1e-15)


def test_omega_err_closed_form():
    model = ObservationModel.from_directions([E1, E2])
    state = flt.FilterState.initial(rot_z(np.pi / 6).T)
    w = flt.omega_err(state, exact_frame(np.eye(3), np.zeros(3), model), model)
    np.testing.assert_allclose(w, [0, 0, 1.0], atol=1e-15)


@given(rotations(), rotations(), two_vector_dirs(), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_omega_err_equals_projection(c, c_hat, dirs, k1, k2):
    model = ObservationModel.from_directions(dirs, weights=[k1, k2])
    w = flt.omega_err(flt.FilterState.initial(c_hat), exact_frame(c, np.zeros(3), model), model)
    ct = c_hat.T @ c
    np.testing.assert_allclose(w, uncross(2 * pa(ct @ build_m(model, c))), atol=1e-12)


# --------------------------------------------------------------------------
# generalized and scalar filters


def test_generalized_equilibrium_is_fixed():
    c = exp_map([0.2, 0.1, -0.3])
    b = np.array([0.01, -0.02, 0.005])
    state = flt.FilterState.initial(c, b)
    gains = flt.ConstantGains(np.diag([2.0, 1.0, 0.5]), 0.3 * np.eye(3))
    out = flt.generalized_step(state, exact_frame(c, b), MODEL, gains, 0.01)
    np.testing.assert_allclose(out.c_hat, c, atol=1e-14)
    np.testing.assert_allclose(out.b_hat, b, atol=1e-14)
    assert out.t == pytest.approx(0.01)


def test_scalar_gains_reproduce_mahony():
    fr, _ = frames(300, 0.01, sine)
    a = flt.FilterState.initial(exp_map([1.0, -0.5, 0.2]), [0.05, 0, 0])
    b = flt.FilterState.initial(exp_map([1.0, -0.5, 0.2]), [0.05, 0, 0])
    gains = flt.ConstantGains.scalar(1.5, 0.4)
    for f in fr:
        a = flt.generalized_step(a, f, MODEL, gains, 0.01)
        b = flt.mahony_step(b, f, MODEL, 1.5, 0.4, 0.01)
        assert np.max(np.abs(a.c_hat - b.c_hat)) <= 1e-14
        assert np.max(np.abs(a.b_hat - b.b_hat)) <= 1e-14


def test_zero_integral_gain_freezes_bias():
    fr, _ = frames(200, 0.01, sine)
    state = flt.FilterState.initial(exp_map([0.4, 0.4, 0.0]), [0.01, 0.02, 0.03])
    for f in fr:
        state = flt.mahony_step(state, f, MODEL, 1.0, 0.0, 0.01)
    np.testing.assert_array_equal(state.b_hat, [0.01, 0.02, 0.03])


def test_steps_keep_rotation():
    fr, _ = frames(500, 0.01, lambda t: np.array([3.0, -8.0, 5.0]))
    state = flt.FilterState.initial(exp_map([2.0, 0.5, 0.0]))
    gains = flt.ConstantGains(np.diag([3.0, 1.0, 2.0]), np.diag([0.2, 0.1, 0.3]))
    for f in fr:
        state = flt.generalized_step(state, f, MODEL, gains, 0.01)
        assert is_rotation(state.c_hat, 1e-13)


def test_generalized_rejects_bad_gains():
    state = flt.FilterState.initial()
    f = exact_frame(np.eye(3), np.zeros(3))
    with pytest.raises(GainNotPositiveDefinite):
        flt.generalized_step(state, f, MODEL, flt.ConstantGains(np.diag([1.0, -1, 1]), np.eye(3)), 0.01)
    with pytest.raises(GainNotPositiveDefinite):
        flt.generalized_step(state, f, MODEL, flt.ConstantGains(np.eye(3), [[1, 0.5, 0], [0, 1, 0], [0, 0, 1]]), 0.01)
    with pytest.raises(GainNotPositiveDefinite):
        flt.mahony_step(state, f, MODEL, 0.0, 0.1, 0.01)
    with pytest.raises(ValueError):
        flt.generalized_step(state, f, MODEL, flt.ConstantGains.scalar(1, 1), 0.0)


def test_gain_schedules():
    g = flt.FunctionGains(lambda t: (1 + t) * np.eye(3), lambda t: np.exp(t) * np.eye(3))
    assert g.k_i_dot_numeric
    np.testing.assert_allclose(g.k_i_dot(0.5), np.exp(0.5) * np.eye(3), rtol=1e-8)
    g2 = flt.FunctionGains(lambda t: 1.0, lambda t: t, k_i_dot=lambda t: 1.0)
    assert not g2.k_i_dot_numeric
    np.testing.assert_array_equal(g2.k_i_dot(3.0), np.eye(3))
    rec = flt.RecordedGains([(0.0, np.eye(3)), (0.0, 2 * np.eye(3))])
    np.testing.assert_array_equal(rec.k_p(0.0), np.eye(3))
    np.testing.assert_array_equal(rec.k_p(0.0), 2 * np.eye(3))
    with pytest.raises(KeyError):
        rec.k_p(0.0)


def test_time_varying_gains_converge():
    # K_I grows slowly (K_I_dot >= 0) while K_P oscillates
    gains = flt.FunctionGains(
        lambda t: (1.5 + 0.5 * np.sin(t)) * np.eye(3),
        lambda t: (0.2 + 0.1 * np.tanh(t / 10)) * np.eye(3),
        k_i_dot=lambda t: 0.01 / np.cosh(t / 10) ** 2 * np.eye(3),
    )
    fr, truth = frames(3000, 0.01, sine)
    state = flt.FilterState.initial(exp_map([1.5, 0.0, 0.5]), [0.05, -0.05, 0.0])
    for f in fr:
        state = flt.generalized_step(state, f, MODEL, gains, 0.01)
    assert np.linalg.norm(uncross(pa(state.c_hat.T @ truth[-1]))) < 1e-3
    assert np.linalg.norm(state.b_hat) < 1e-3


def _reference_error(model, gains, ct0, bt0, duration, dt):
    _, _, cts, bts = stab.integrate_error_dynamics(
        stab.ErrorState(ct0, bt0), np.eye(3), lambda t: np.array([0.1, 0.0, 0.0]), model, gains, 0.0, dt, int(duration / dt)
    )
    return cts, bts


def test_generalized_convergence_example():
    # weak second vector puts the x-axis error/bias pair near critical damping,
    # so the bias error decays faster than the K_I/K_P = 0.1 /s limit of a
    # strongly observed axis
    model = ObservationModel.from_directions([E1, E2], weights=[2.0, 0.22])
    gains = flt.ConstantGains(np.diag([2.0, 1.0, 1.0]), 0.2 * np.eye(3))
    ct0, bt0 = exp_map([0.5, 0.3, -0.2]), np.array([0.02, -0.01, 0.03])
    sc = sim.Scenario(60.0, 0.01, sim.ConstantRate(np.array([0.1, 0.0, 0.0])), model, sim.FilterConfig("generalized", gains))
    rec = sim.run_scenario(sc.with_initial_error(ct0, bt0))
    angle = rec["err_angle"][-1]
    bias = np.linalg.norm([rec["bx"][-1], rec["by"][-1], rec["bz"][-1]])
    assert angle < 1e-3
    assert bias < 1e-4
    cts, bts = _reference_error(model, gains, ct0, bt0, 60.0, 0.004)
    ref_angle = np.linalg.norm(uncross(pa(cts[-1])))
    assert abs(angle - ref_angle) < 1e-6
    assert abs(bias - np.linalg.norm(bts[-1])) < 1e-6


def test_mahony_lyapunov_decreases():
    sc = sim.Scenario(40.0, 0.01, sim.SinusoidRate(np.array([0.2, -0.1, 0.3]), 0.2), MODEL, sim.FilterConfig("mahony", flt.ConstantGains.scalar(1.0, 0.3)), simulate_noise=False)
    rec = sim.run_scenario(sc.with_initial_error(rot_z(2.0), np.array([0.02, 0.0, -0.01])))
    v = rec["v"]
    assert np.max(np.diff(v)) <= 1e-9
    assert v[-1] < 1e-6 * v[0]
    assert np.all(rec["vdot"] <= 1e-12)


# --------------------------------------------------------------------------
# MEKF family


def _mekf_model():
    return ObservationModel.mekf_weighted(MODEL.vectors, MODEL.sigmas)


def test_mekf_omega_ref_converged():
    c = exp_map([0.1, 0.2, 0.3])
    state = flt.FilterState.initial(c, [0.01, 0, 0], np.eye(6))
    f = exact_frame(c, [0.5, 0.1, 0.0])
    np.testing.assert_allclose(flt.mekf_omega_ref(state, f, MODEL), f.omega_meas - state.b_hat, atol=1e-15)


def test_mekf_omega_ref_identity_covariance():
    c, c_hat = exp_map([0.1, 0.2, 0.3]), exp_map([-0.3, 0.4, 0.0])
    state = flt.FilterState.initial(c_hat, [0.01, 0, 0], np.eye(6))
    f = exact_frame(c, [0.5, 0.1, 0.0])
    want = f.omega_meas - state.b_hat + flt.omega_err(state, f, _mekf_model())
    np.testing.assert_allclose(flt.mekf_omega_ref(state, f, MODEL), want, atol=1e-14)


@given(rotations(), rotations(), spd_matrices(0.01, 2.0))
def test_mekf_omega_ref_is_matrix_gain_law(c, c_hat, p_a):
    p = np.eye(6)
    p[:3, :3] = p_a
    state = flt.FilterState.initial(c_hat, [0.0, 0.01, -0.02], p)
    f = exact_frame(c, [0.2, -0.3, 0.1])
    want = f.omega_meas - state.b_hat + p_a @ flt.omega_err(state, f, _mekf_model())
    np.testing.assert_allclose(flt.mekf_omega_ref(state, f, MODEL), want, atol=1e-14 * max(1, np.abs(want).max()))


def test_mekf_needs_covariance():
    state = flt.FilterState.initial()
    f = exact_frame(np.eye(3), np.zeros(3))
    with pytest.raises(CovarianceMissing):
        flt.mekf_omega_ref(state, f, MODEL)
    with pytest.raises(CovarianceMissing):
        flt.full_mekf_step(state, f, MODEL, NOISE, 0.01)
    with pytest.raises(CovarianceMissing):
        flt.full_mekf_step(flt.FilterState.initial(p=np.eye(3)), f, MODEL, NOISE, 0.01)
    with pytest.raises(CovarianceMissing):
        flt.bias_free_mekf_step(flt.FilterState.initial(p=np.eye(6)), f, MODEL, NOISE, 0.01)


def test_riccati_rhs_pure_process_noise():
    state = flt.FilterState.initial(exp_map([0.3, 0.2, 0.1]))
    out = flt.riccati_rhs(np.zeros((6, 6)), [0.1, 0.2, 0.3], state, MODEL, NOISE)
    np.testing.assert_allclose(out, np.diag([0.1**2] * 3 + [0.01**2] * 3), rtol=1e-15, atol=0)


def test_riccati_rhs_attitude_block_two_orthogonal_vectors():
    model = ObservationModel.from_directions([E1, E2], sigmas=[0.1, 0.2])
    # A0 = sum sigma^-2 (I - v v^T) = 100 diag(0,1,1) + 25 diag(1,0,1)
    a0 = np.diag([25.0, 100.0, 125.0])
    p_a = spd = np.array([[0.3, 0.1, 0.0], [0.1, 0.2, 0.05], [0.0, 0.05, 0.4]])
    p = np.zeros((6, 6))
    p[:3, :3] = spd
    out = flt.riccati_rhs(p, np.zeros(3), flt.FilterState.initial(), model, NOISE)
    np.testing.assert_allclose(out[:3, :3], 0.01 * np.eye(3) - p_a @ a0 @ p_a, atol=1e-13)


@settings(max_examples=50)
@given(rotations(), st.integers(0, 2**32 - 1))
def test_riccati_rhs_symmetry(c_hat, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 6))
    p = a @ a.T
    w = rng.standard_normal(3)
    state = flt.FilterState.initial(c_hat)
    out = flt.riccati_rhs(p, w, state, MODEL, NOISE)
    np.testing.assert_allclose(out, out.T, atol=1e-12 * max(1, np.abs(out).max()))
    np.testing.assert_allclose(flt.riccati_rhs(p.T, w, state, MODEL, NOISE), out.T, atol=1e-12 * max(1, np.abs(out).max()))


def test_full_mekf_tracks_from_steady_state():
    ss = flt.riccati_steady_state(_mekf_model(), NOISE)
    sc = sim.Scenario(10.0, 0.01, sim.SinusoidRate(np.array([0.3, 0.2, -0.1]), 0.2), MODEL, sim.FilterConfig("full_mekf", noise=NOISE, p0=ss.p), simulate_noise=False)
    rec = sim.run_scenario(sc)
    assert np.max(rec["err_angle"]) < 1e-6
    assert np.max(np.abs([rec["bx"], rec["by"], rec["bz"]])) < 1e-6
    assert np.all(np.isnan(rec["v"]))
    assert rec["pa_trace"][-1] > 0 and rec["pb_trace"][-1] > 0


def test_full_mekf_without_bias_walk_matches_bias_free():
    noise = flt.NoiseParams(0.05, 0.0)
    gyro = GyroModel(0.05, 0.0)
    noisy = ObservationModel(MODEL.vectors, MODEL.weights, MODEL.sigmas)
    fr, _ = frames(500, 0.01, sine, gyro=gyro, noisy_model=noisy, seed=4)
    c0 = exp_map([0.3, -0.2, 0.1])
    p_a0 = 0.1 * np.eye(3)
    full = flt.FilterState.initial(c0, np.zeros(3), np.block([[p_a0, np.zeros((3, 3))], [np.zeros((3, 3)), 1e-12 * np.eye(3)]]))
    free = flt.FilterState.initial(c0, np.zeros(3), p_a0)
    worst_pc, worst_gap = 0.0, 0.0
    for f in fr:
        full = flt.full_mekf_step(full, f, MODEL, noise, 0.01)
        free = flt.bias_free_mekf_step(free, f, MODEL, noise, 0.01)
        worst_pc = max(worst_pc, np.abs(full.p[:3, 3:]).max())
        worst_gap = max(worst_gap, np.abs(full.c_hat - free.c_hat).max())
    assert worst_pc < 1e-10
    assert worst_gap < 1e-9


def test_full_mekf_covariance_stays_positive_definite():
    gyro = GyroModel(0.01, 0.001, np.array([0.02, -0.01, 0.0]))
    noisy = ObservationModel(MODEL.vectors, MODEL.weights, MODEL.sigmas)
    fr, _ = frames(2000, 0.01, sine, gyro=gyro, noisy_model=noisy, seed=9)
    state = flt.FilterState.initial(exp_map([1.0, 0.5, -0.5]), np.zeros(3), np.eye(6))
    for f in fr:
        state = flt.full_mekf_step(state, f, MODEL, flt.NoiseParams(0.01, 0.001), 0.01)
        np.linalg.cholesky(state.p)
        assert np.array_equal(state.p, state.p.T)


def test_covariance_failure_is_reported():
    state = flt.FilterState.initial(p=-np.eye(6))
    with pytest.raises(CovarianceNotPD):
        flt.full_mekf_step(state, exact_frame(np.eye(3), np.zeros(3)), MODEL, NOISE, 0.01)


def test_bias_free_matches_recorded_gain_schedule():
    fr, _ = frames(400, 0.01, sine)
    mekf = flt.FilterState.initial(exp_map([1.0, 1.0, 0.5]), np.zeros(3), 0.5 * np.eye(3))
    gen = flt.FilterState.initial(exp_map([1.0, 1.0, 0.5]), np.zeros(3))
    model = _mekf_model()
    for f in fr:
        rec = []
        mekf = flt.bias_free_mekf_step(mekf, f, MODEL, NOISE, 0.01, record=rec)
        gen = flt.generalized_step(gen, f, model, flt.RecordedGains(rec), 0.01)
        assert np.max(np.abs(mekf.c_hat - gen.c_hat)) <= 1e-12


def test_bias_free_covariance_settles():
    fr, _ = frames(4000, 0.01, lambda t: np.zeros(3))
    state = flt.FilterState.initial(np.eye(3), np.zeros(3), np.eye(3))
    for f in fr:
        state = flt.bias_free_mekf_step(state, f, MODEL, NOISE, 0.01)
    resid = flt.riccati_rhs(state.p, np.zeros(3), state, MODEL, NOISE)
    assert np.linalg.norm(resid) < 1e-10
    # closed form at rest: P_a = sigma_omega A0^(-1/2)
    lam, u = np.linalg.eigh(flt.information_matrix(_mekf_model()))
    np.testing.assert_allclose(state.p, 0.1 * u @ np.diag(lam**-0.5) @ u.T, atol=1e-10)


def test_bias_free_noise_free_convergence():
    sc = sim.Scenario(30.0, 0.01, sim.SinusoidRate(np.array([0.3, 0.2, -0.1]), 0.2), MODEL, sim.FilterConfig("bias_free_mekf", noise=NOISE), simulate_noise=False)
    rec = sim.run_scenario(sc.with_initial_error(exp_map([1.0, 1.0, 0.5]), np.zeros(3)))
    assert rec["err_angle"][-1] < 1e-3
    assert np.all(rec["pa_trace"] > 0)


# --------------------------------------------------------------------------
# steady state and the constant-gain MEKF


def isotropic_closed_form(sigma_w, sigma_b, a):
    c = -sigma_b / np.sqrt(a)
    p = np.sqrt((sigma_w**2 - 2 * c) / a)
    return p, c, -a * c * p


def test_isotropic_steady_state():
    model = ObservationModel.mekf_weighted(np.eye(3), [1.0, 1.0, 1.0])
    ss = flt.riccati_steady_state(model, flt.NoiseParams(0.1, 0.02))
    p, c, q = isotropic_closed_form(0.1, 0.02, 2.0)
    assert (p, c, q) == pytest.approx((0.138355, -0.0141421, 0.0039133), abs=5e-7)
    np.testing.assert_allclose(ss.p_a, p * np.eye(3), atol=1e-9)
    np.testing.assert_allclose(ss.p_c, c * np.eye(3), atol=1e-9)
    np.testing.assert_allclose(ss.p_b, q * np.eye(3), atol=1e-9)


def test_small_bias_walk_limit():
    model = ObservationModel.mekf_weighted(np.eye(3), [1.0, 1.0, 1.0])
    ss = flt.riccati_steady_state(model, flt.NoiseParams(0.1, 1e-6))
    assert np.abs(ss.p_c).max() < 1e-6
    np.testing.assert_allclose(np.diag(ss.p_a), 0.1 / np.sqrt(2), rtol=1e-3)


@settings(max_examples=10, deadline=None)
@given(two_vector_dirs(), st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.01, 0.2), st.floats(0.001, 0.05))
def test_steady_state_residuals(dirs, s1, s2, sw, sb):
    model = ObservationModel.mekf_weighted(dirs, [s1, s2])
    noise = flt.NoiseParams(sw, sb)
    ss = flt.riccati_steady_state(model, noise)
    res = flt.steady_state_residuals(ss, flt.information_matrix(model), noise)
    assert max(res.values()) < 1e-8
    assert np.linalg.eigvalsh(0.5 * (ss.p_c + ss.p_c.T))[-1] < 0


def test_steady_state_failures():
    with pytest.raises(NoConvergence):
        flt.riccati_steady_state(ObservationModel.mekf_weighted([E1], [0.1]), NOISE)
    with pytest.raises(NoConvergence):
        flt.riccati_steady_state(_mekf_model(), NOISE, max_steps=5)
    with pytest.raises(ValueError):
        flt.riccati_steady_state(_mekf_model(), flt.NoiseParams(0.1, 0.0))


def test_constant_gain_equals_generalized():
    ss = flt.riccati_steady_state(_mekf_model(), NOISE)
    fr, _ = frames(1000, 0.01, sine)
    a = flt.FilterState.initial(exp_map([2.0, -1.0, 0.3]), [0.05, 0.0, -0.05])
    b = flt.FilterState.initial(exp_map([2.0, -1.0, 0.3]), [0.05, 0.0, -0.05])
    model, gains = _mekf_model(), ss.gains()
    for f in fr:
        a = flt.constant_gain_mekf_step(a, f, MODEL, NOISE, 0.01, ss)
        b = flt.generalized_step(b, f, model, gains, 0.01)
        assert np.max(np.abs(a.c_hat - b.c_hat)) <= 1e-14
        assert np.max(np.abs(a.b_hat - b.b_hat)) <= 1e-14


def test_constant_gain_stationary_when_converged():
    ss = flt.riccati_steady_state(_mekf_model(), NOISE)
    c = random_rotation(np.random.default_rng(1))
    state = flt.FilterState.initial(c, [0.01, 0.0, 0.0])
    for _ in range(100):
        state = flt.constant_gain_mekf_step(state, exact_frame(c, [0.01, 0.0, 0.0]), MODEL, NOISE, 0.01, ss)
    np.testing.assert_allclose(state.c_hat, c, atol=1e-13)
    np.testing.assert_allclose(state.b_hat, [0.01, 0, 0], atol=1e-15)


def test_constant_gain_converges_from_near_half_turn():
    sc = sim.Scenario(150.0, 0.02, sim.SinusoidRate(np.array([0.3, 0.2, -0.1]), 0.2), MODEL, sim.FilterConfig("constant_gain_mekf", noise=NOISE), simulate_noise=False)
    rec = sim.run_scenario(sc.with_initial_error(rot_z(np.pi - 0.1), np.zeros(3)))
    assert rec["err_angle"][-1] < 1e-3
    assert np.max(np.diff(rec["v"])) <= 1e-9
