import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import multivariate_normal, norm

from linear_models import linear_spec, rts_smoother
from turbosmooth import backward as bw
from turbosmooth.backward import (
    BackwardConfig,
    BackwardState,
    init_terminal,
    measurement_message,
    phase1,
    phase2_step1,
    phase2_step2,
    phase2_step3,
    phase2_step4,
    phase2_step5,
    run_backward,
)
from turbosmooth.errors import BackwardPassError, DegenerateCovariance
from turbosmooth.forward import ForwardConfig, ForwardRecord, ParticleCloud, run_forward
from turbosmooth.gaussian import GaussianMessage, product
from turbosmooth.model import AgentMotionParams, CLGModelSpec, LinearizedModel, agent_clg_spec, simulate, simulate_spec

N_1_0_2 = (4 * math.pi) ** -0.5 * math.exp(-0.25)


def block_spec(d_l=1, d_n=1, a_l=None, a_n=None, f_l=None, f_n=None, B=None, g=None, cov_w_l=None, cov_w_n=None, cov_e=None):
    """CLG spec with constant blocks; drifts may be callables of x_N."""
    a_l = np.eye(d_l) if a_l is None else np.atleast_2d(a_l)
    a_n = np.ones((d_n, d_l)) if a_n is None else np.atleast_2d(a_n)
    B = np.eye(1, d_l) if B is None else np.atleast_2d(B)
    p = B.shape[0]

    def const(m):
        m = np.asarray(m, float)
        return lambda xn: np.broadcast_to(m, (len(xn),) + m.shape).copy()

    def drift(f, d):
        if f is None:
            return const(np.zeros(d))
        return f if callable(f) else const(np.atleast_1d(f))

    return CLGModelSpec(
        dim_l=d_l,
        dim_n=d_n,
        dim_y=p,
        trans_l=const(a_l),
        trans_n=const(a_n),
        drift_l=drift(f_l, d_l),
        drift_n=drift(f_n, d_n),
        meas_offset=drift(g, p),
        meas_gain=const(B),
        cov_w_l=np.eye(d_l) if cov_w_l is None else np.atleast_2d(cov_w_l),
        cov_w_n=np.eye(d_n) if cov_w_n is None else np.atleast_2d(cov_w_n),
        cov_e=np.eye(p) if cov_e is None else np.atleast_2d(cov_e),
        prior=GaussianMessage.from_moments(np.zeros(d_l + d_n), np.eye(d_l + d_n)),
    )


def cloud_of(points, weights=None):
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[0] == 1 and points.shape[1] > 1:
        points = points.T
    n = len(points)
    w = np.full(n, -np.log(n)) if weights is None else np.log(np.asarray(weights, float))
    return ParticleCloud(points, {"fe": w})


def scalar_record(cloud, estimate=None, step=0):
    lin = LinearizedModel(F=np.eye(2), u=np.zeros(2), H=np.eye(2, 1), v=np.zeros(1))
    est = estimate or GaussianMessage.from_moments(np.zeros(2), np.eye(2)).to_canonical()
    return ForwardRecord(step=step, ekf_prediction=est.to_moment(), ekf_estimate=est, cloud=cloud, linearization=lin)


# --- terminal initialization ----------------------------------------------------


def test_init_terminal_degenerate_weights_pick_particle_zero():
    cloud = ParticleCloud(np.array([[5.0], [6.0], [7.0]]), {"fe": np.array([0.0, -np.inf, -np.inf])})
    state = init_terminal(scalar_record(cloud), np.random.default_rng(0), "tsa")
    assert state.chosen_index == 0
    np.testing.assert_array_equal(state.be_particle, [5.0])


def test_init_terminal_copies_ekf_estimate_bit_for_bit():
    est = GaussianMessage.from_canonical(np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([0.7, -0.1]))
    state = init_terminal(scalar_record(cloud_of([[1.0], [2.0]]), est), np.random.default_rng(0), "tsa")
    np.testing.assert_array_equal(state.be_gauss.W, est.W)
    np.testing.assert_array_equal(state.be_gauss.w, est.w)


def test_init_terminal_stsa_uniform_is_cloud_mean():
    state = init_terminal(scalar_record(cloud_of([[1.0], [2.0], [6.0]])), np.random.default_rng(0), "stsa")
    assert state.be_particle == pytest.approx([3.0])
    assert state.chosen_index is None


# --- Phase I --------------------------------------------------------------------


def test_phase1_scalar_pseudo_measurement():
    spec = block_spec()
    be_next = BackwardState(1, GaussianMessage.from_moments([0.0, 3.0], np.eye(2)), np.array([3.0]))
    _, _, pm = phase1(be_next, scalar_record(cloud_of([[0.0]])), spec)
    assert pm.z[0, 0] == pytest.approx(3.0)
    assert pm.mean[0, 0] == pytest.approx(3.0)
    assert pm.cov[0, 0, 0] == pytest.approx(1.0)
    assert pm.precision[0, 0, 0] == pytest.approx(1.0)


def test_phase1_vacuous_pseudo_measurement():
    spec = block_spec(a_n=[[0.0]])
    be_next = BackwardState(1, GaussianMessage.from_moments([0.0, 3.0], np.eye(2)), np.array([3.0]))
    _, _, pm = phase1(be_next, scalar_record(cloud_of([[0.0]])), spec)
    assert not pm.valid[0]
    assert pm.precision[0, 0, 0] == 0.0


def test_phase1_backward_prediction_with_small_noise():
    spec = block_spec(cov_w_l=[[1e-12]], cov_w_n=[[1e-12]])
    be = GaussianMessage.from_moments([1.0, 2.0], np.array([[2.0, 0.5], [0.5, 1.0]]))
    bp, be_l, _ = phase1(BackwardState(1, be.to_canonical(), np.array([2.0])), scalar_record(cloud_of([[0.0]])), spec)
    np.testing.assert_allclose(bp.to_moment().mean, be.mean, rtol=1e-9)
    np.testing.assert_allclose(bp.to_moment().cov, be.cov, rtol=1e-9)
    assert be_l.mean == pytest.approx([1.0])


# --- Phase II -------------------------------------------------------------------


def test_step1_first_iteration_uses_forward_weights():
    cloud = cloud_of([[0.0], [1.0], [2.0]], [0.2, 0.3, 0.5])
    spec = block_spec()
    be_next = BackwardState(1, GaussianMessage.from_moments([0.0, 3.0], np.eye(2)), np.array([3.0]))
    _, _, pm_l = phase1(be_next, scalar_record(cloud), spec)
    log_W, _ = phase2_step1(pm_l, cloud, cloud.log_weights["fe"], np.zeros(3))
    np.testing.assert_allclose(np.exp(log_W), [0.2, 0.3, 0.5], rtol=1e-14)


def test_step1_normalizes_equal_weights():
    cloud = cloud_of([[0.0], [1.0]])
    pm_l = bw.PseudoMeasurementL(np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 1, 1)), np.ones(2, bool))
    log_W, _ = phase2_step1(pm_l, cloud, np.log([2.0, 2.0]), np.zeros(2))
    np.testing.assert_allclose(np.exp(log_W), [0.5, 0.5])


def test_step1_two_particle_mixture():
    cloud = cloud_of([[-1.0], [1.0]])
    pm_l = bw.PseudoMeasurementL(np.zeros((2, 1)), np.array([[0.0], [2.0]]), np.ones((2, 1, 1)), np.ones(2, bool))
    _, pm = phase2_step1(pm_l, cloud, np.zeros(2), np.zeros(2))
    m = pm.to_moment()
    np.testing.assert_allclose(m.mean, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(m.cov, [[2.0, 1.0], [1.0, 1.0]], atol=1e-12)


def test_step1_all_weights_zero_falls_back_to_forward():
    cloud = cloud_of([[0.0], [1.0]], [0.25, 0.75])
    pm_l = bw.PseudoMeasurementL(np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 1, 1)), np.ones(2, bool))
    diag = bw.Diagnostics()
    log_W, _ = phase2_step1(pm_l, cloud, np.full(2, -np.inf), np.zeros(2), diag)
    np.testing.assert_allclose(np.exp(log_W), [0.25, 0.75])
    assert diag.degenerate_weights == 1


def test_step2_canonical_addition():
    bp = GaussianMessage.from_canonical([[0.5]], [1.0])
    pm = GaussianMessage.from_canonical([[1.0]], [3.0])
    be1 = product(bp, pm)
    assert be1.W[0, 0] == pytest.approx(1.5) and be1.w[0] == pytest.approx(4.0)


def test_step2_vacuous_pseudo_measurement_gives_prediction():
    bp = GaussianMessage.from_canonical(np.array([[0.5, 0.1], [0.1, 0.7]]), np.array([1.0, 2.0]))
    est = GaussianMessage.from_moments([0.0, 0.0], np.eye(2))
    be1, sm, sm_l = phase2_step2(bp, GaussianMessage.flat(2), est, 1)
    np.testing.assert_array_equal(be1.W, bp.W)
    np.testing.assert_array_equal(be1.w, bp.w)
    assert sm_l.dim == 1
    np.testing.assert_allclose(sm.to_canonical().W, bp.W + np.eye(2), rtol=1e-12)


def test_step3_scalar_example():
    spec = block_spec()
    log_w = phase2_step3(
        GaussianMessage.from_moments([1.0], [[2.0]]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud_of([[0.0]]), spec
    )
    assert math.exp(log_w[0]) == pytest.approx(N_1_0_2, rel=1e-12)


def test_step3_perfect_match_is_maximal():
    spec = block_spec(f_l=lambda xn: xn.copy())
    cloud = cloud_of([[-0.5], [0.0], [1.0], [2.0]])
    log_w = phase2_step3(
        GaussianMessage.from_moments([1.0], [[1.0 + 1e-12]]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud, spec
    )
    assert np.argmax(log_w) == 2


def test_step3_identical_particles_equal_weights():
    spec = block_spec()
    log_w = phase2_step3(
        GaussianMessage.from_moments([1.0], [[2.0]]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud_of([[0.3]] * 4), spec
    )
    assert np.all(log_w == log_w[0])


def test_step3_clamps_indefinite_difference():
    spec = block_spec()
    diag = bw.Diagnostics()
    log_w = phase2_step3(
        GaussianMessage.from_moments([1.0], [[0.5]]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud_of([[0.0]]), spec, diag
    )
    assert np.isfinite(log_w).all()
    assert diag.clamps == 1


def test_step4_scalar_example():
    spec = block_spec()
    log_w_bp, log_w_be1 = phase2_step4(np.array([1.0]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud_of([[0.0]]), spec, np.zeros(1))
    assert math.exp(log_w_bp[0]) == pytest.approx(N_1_0_2, rel=1e-12)
    assert log_w_be1[0] == log_w_bp[0]


def test_step4_exact_prediction_is_maximal():
    spec = block_spec(f_n=lambda xn: xn.copy())
    cloud = cloud_of([[-1.0], [0.0], [0.5]])
    log_w_bp, _ = phase2_step4(np.array([0.5]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud, spec, np.zeros(3))
    assert np.argmax(log_w_bp) == 2


def test_step5_scalar_example():
    spec = block_spec()
    from turbosmooth.forward import measurement_log_likelihood

    ll = measurement_log_likelihood(np.array([[0.0]]), np.array([1.0]), GaussianMessage.from_moments([0.0], [[1.0]]), spec)
    assert math.exp(ll[0]) == pytest.approx(N_1_0_2, rel=1e-12)


def test_step5_uninformative_measurement_is_uniform():
    spec = block_spec(B=[[0.0]])
    log_w = phase2_step5(np.array([1.0]), GaussianMessage.from_moments([0.0], [[1.0]]), cloud_of([[0.0], [1.0], [5.0]]), spec)
    np.testing.assert_allclose(np.exp(log_w), 1 / 3, rtol=1e-12)


# --- quadrature oracles ----------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    eta_be=st.floats(-2, 2),
    c_be=st.floats(1.2, 3.0),
    eta_sm=st.floats(-2, 2),
    c_sm=st.floats(0.1, 1.0),
    a=st.floats(-1, 1),
    f=st.floats(-1, 1),
    q=st.floats(0.2, 2.0),
)
def test_step3_matches_convolution_quadrature(eta_be, c_be, eta_sm, c_sm, a, f, q):
    spec = block_spec(a_l=[[a]], f_l=f, cov_w_l=[[q]])
    log_w = phase2_step3(
        GaussianMessage.from_moments([eta_be], [[c_be]]), GaussianMessage.from_moments([eta_sm], [[c_sm]]), cloud_of([[0.0]]), spec
    )
    mean_z, var_z = eta_be - a * eta_sm, c_be - a * a * c_sm
    value, _ = integrate.quad(
        lambda z: norm.pdf(z, mean_z, math.sqrt(var_z)) * norm.pdf(z, f, math.sqrt(q)), -np.inf, np.inf, epsabs=0, epsrel=1e-12
    )
    assert math.exp(log_w[0]) == pytest.approx(value, rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(
    x_next=st.floats(-2, 2),
    eta_sm=st.floats(-2, 2),
    c_sm=st.floats(0.1, 2.0),
    a=st.floats(-1.5, 1.5),
    f=st.floats(-1, 1),
    q=st.floats(0.2, 2.0),
)
def test_step4_matches_integral_quadrature(x_next, eta_sm, c_sm, a, f, q):
    spec = block_spec(a_n=[[a]], f_n=f, cov_w_n=[[q]])
    log_w_bp, _ = phase2_step4(np.array([x_next]), GaussianMessage.from_moments([eta_sm], [[c_sm]]), cloud_of([[0.0]]), spec, np.zeros(1))
    value, _ = integrate.quad(
        lambda x: norm.pdf(x_next, a * x + f, math.sqrt(q)) * norm.pdf(x, eta_sm, math.sqrt(c_sm)),
        -np.inf,
        np.inf,
        epsabs=0,
        epsrel=1e-12,
    )
    assert math.exp(log_w_bp[0]) == pytest.approx(value, rel=1e-6)


def test_step4_two_dimensional_quadrature():
    a_n = np.array([[0.7, -0.4]])
    sm = GaussianMessage.from_moments([0.2, -0.3], np.array([[0.5, 0.1], [0.1, 0.3]]))
    spec = block_spec(d_l=2, a_n=a_n, f_n=0.1, cov_w_n=[[0.4]], B=np.eye(1, 2))
    log_w_bp, _ = phase2_step4(np.array([0.6]), sm, cloud_of([[0.0]]), spec, np.zeros(1))
    density = multivariate_normal(sm.mean, sm.cov)
    value, _ = integrate.dblquad(
        lambda x2, x1: norm.pdf(0.6, a_n[0] @ [x1, x2] + 0.1, math.sqrt(0.4)) * density.pdf([x1, x2]),
        -6,
        6,
        -6,
        6,
        epsabs=0,
        epsrel=1e-10,
    )
    assert math.exp(log_w_bp[0]) == pytest.approx(value, rel=1e-6)


def test_step5_matches_integral_quadrature():
    spec = block_spec(B=[[1.3]], g=0.2, cov_e=[[0.6]])
    log_w = phase2_step5(np.array([0.9]), GaussianMessage.from_moments([0.1], [[0.8]]), cloud_of([[0.0], [0.0]]), spec)
    from turbosmooth.forward import measurement_log_likelihood

    full = measurement_log_likelihood(np.array([[0.0]]), np.array([0.9]), GaussianMessage.from_moments([0.1], [[0.8]]), spec)
    value, _ = integrate.quad(
        lambda x: norm.pdf(0.9, 1.3 * x + 0.2, math.sqrt(0.6)) * norm.pdf(x, 0.1, math.sqrt(0.8)), -np.inf, np.inf, epsabs=0, epsrel=1e-12
    )
    assert math.exp(full[0]) == pytest.approx(value, rel=1e-8)
    np.testing.assert_allclose(np.exp(log_w), 0.5)


# --- Phase III ------------------------------------------------------------------


def test_phase3_measurement_fusion_scalar():
    lin = LinearizedModel(F=np.eye(1), u=np.zeros(1), H=np.eye(1), v=np.zeros(1))
    be2 = product(GaussianMessage.from_canonical([[1.5]], [4.0]), measurement_message(lin, np.array([1.0]), np.eye(1)))
    assert be2.W[0, 0] == pytest.approx(2.5)
    assert be2.w[0] == pytest.approx(5.0)
    assert be2.to_moment().mean[0] == pytest.approx(2.0)


def test_phase3_degenerate_weights_pick_particle_zero():
    spec = block_spec()
    cloud = cloud_of([[4.0], [5.0]], [1.0, 1e-300])
    record = scalar_record(cloud)
    be_next = BackwardState(1, GaussianMessage.from_moments([0.0, 4.0], np.eye(2)), np.array([4.0]))
    bp, _, pm_l = phase1(be_next, record, spec)
    scratch = bw.IterationScratch(k=0, log_w_fe1=np.array([0.0, -np.inf]), log_w_be1=np.zeros(2))
    for mode in ("tsa", "stsa"):
        state, log_W, _, _ = bw.phase3(scratch, bp, pm_l, record, np.array([0.0]), spec, np.random.default_rng(1), mode)
        np.testing.assert_array_equal(state.be_particle, [4.0])


def test_phase3_stsa_uniform_weights_give_cloud_mean():
    spec = block_spec()
    cloud = cloud_of([[1.0], [2.0], [6.0]])
    record = scalar_record(cloud)
    be_next = BackwardState(1, GaussianMessage.from_moments([0.0, 4.0], np.eye(2)), np.array([4.0]))
    bp, _, pm_l = phase1(be_next, record, spec)
    scratch = bw.IterationScratch(k=0, log_w_fe1=np.zeros(3), log_w_be1=np.zeros(3))
    state, _, _, _ = bw.phase3(scratch, bp, pm_l, record, np.array([0.0]), spec, None, "stsa")
    assert state.be_particle == pytest.approx([3.0])


# --- full backward pass ---------------------------------------------------------


def agent_setup(T=30, n=40, seed=0):
    p = AgentMotionParams()
    spec = agent_clg_spec(p)
    ys = simulate(p, T, seed).measurements
    return spec, ys, run_forward(spec, ys, ForwardConfig(n, seed=seed))


def test_two_steps_run_exactly_one_recursion(monkeypatch):
    spec, ys, records = agent_setup(T=2)
    calls = []
    original = bw.backward_step
    monkeypatch.setattr(bw, "backward_step", lambda *a, **k: calls.append(1) or original(*a, **k))
    result = run_backward(records, ys, spec, BackwardConfig(seed=0))
    assert len(calls) == 1
    assert len(result.states) == 2


def test_last_step_is_forward_output():
    spec, ys, records = agent_setup()
    result = run_backward(records, ys, spec, BackwardConfig(seed=0))
    np.testing.assert_array_equal(result.smoothed_log_weights[-1], records[-1].cloud.log_weights["fe"])
    np.testing.assert_allclose(result.smoothed[-1].mean, records[-1].ekf_estimate.to_moment().mean)


def test_linear_model_matches_exact_backward_information_filter():
    spec = linear_spec()
    ys = simulate_spec(spec, 30, 7).measurements
    records = run_forward(spec, ys, ForwardConfig(8, "mpf", seed=0))
    result = run_backward(records, ys, spec, BackwardConfig(exchange=False, terminal="measurement", seed=0))
    _, _, sm_m, sm_P = rts_smoother(ys)
    for g, m, P in zip(result.smoothed, sm_m, sm_P):
        np.testing.assert_allclose(g.mean, m, rtol=1e-8, atol=1e-8 * np.abs(m).max())
        np.testing.assert_allclose(g.cov, P, rtol=1e-8, atol=1e-8 * np.abs(P).max())


def test_same_seed_gives_identical_states():
    spec, ys, records = agent_setup()
    a = run_backward(records, ys, spec, BackwardConfig(mode="tsa", seed=3))
    b = run_backward(records, ys, spec, BackwardConfig(mode="tsa", seed=3))
    for s, t in zip(a.states, b.states):
        assert s.chosen_index == t.chosen_index
        np.testing.assert_array_equal(s.be_gauss.w, t.be_gauss.w)


def test_weight_reuse_is_exact_at_one_iteration():
    spec, ys, records = agent_setup()
    a = run_backward(records, ys, spec, BackwardConfig(n_iter=1, weight_reuse=False, seed=0))
    b = run_backward(records, ys, spec, BackwardConfig(n_iter=1, weight_reuse=True, seed=0))
    for x, y in zip(a.smoothed_log_weights, b.smoothed_log_weights):
        np.testing.assert_array_equal(x, y)


def test_zero_iterations_uses_forward_weights():
    spec, ys, records = agent_setup(T=5)
    result = run_backward(records, ys, spec, BackwardConfig(n_iter=0, seed=0))
    for w, r in zip(result.smoothed_log_weights, records):
        np.testing.assert_allclose(np.exp(w), np.exp(r.cloud.log_weights["fe"]), atol=1e-15)


def test_failure_reports_step(monkeypatch):
    spec, ys, records = agent_setup(T=6)

    def broken(*args, **kwargs):
        raise DegenerateCovariance("boom")

    monkeypatch.setattr(bw, "phase2_step3", broken)
    with pytest.raises(BackwardPassError) as info:
        run_backward(records, ys, spec, BackwardConfig(seed=0))
    assert info.value.step == 4


def test_diagnostics_per_step():
    spec, ys, records = agent_setup(T=10)
    result = run_backward(records, ys, spec, BackwardConfig(seed=0))
    assert [d["step"] for d in result.diagnostics] == list(range(10))
    assert all(1.0 <= d["ess"] <= 40.0 for d in result.diagnostics)


def test_config_validation():
    with pytest.raises(ValueError):
        BackwardConfig(mode="both")
    with pytest.raises(ValueError):
        BackwardConfig(n_iter=-1)
    with pytest.raises(ValueError):
        BackwardConfig(terminal="middle")
