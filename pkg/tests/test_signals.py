import cmath
import math

import numpy as np
import pytest

from mmgsim.signals import (
    LpfState,
    Phasor,
    PllState,
    QsgState,
    SlidingPhasor,
    SymmetricalComponents,
    alpha_beta_to_dq,
    fortescue,
    inverse_fortescue,
    lpf_step,
    phasor_estimate,
    pll_step,
    qsg_step,
    vuf,
    wrap_angle,
)

W60 = 2 * math.pi * 60.0
D120 = 2 * math.pi / 3


def test_fortescue_balanced_positive_sequence():
    s = fortescue(Phasor(1, 0), Phasor(1, -D120), Phasor(1, D120))
    assert s.zero.magnitude == pytest.approx(0, abs=1e-12)
    assert s.positive.magnitude == pytest.approx(1, abs=1e-12)
    assert s.positive.angle == pytest.approx(0, abs=1e-12)
    assert s.negative.magnitude == pytest.approx(0, abs=1e-12)


def test_fortescue_swapped_phases_are_negative_sequence():
    s = fortescue(Phasor(1, 0), Phasor(1, D120), Phasor(1, -D120))
    assert s.positive.magnitude == pytest.approx(0, abs=1e-12)
    assert s.negative.magnitude == pytest.approx(1, abs=1e-12)


def test_fortescue_common_mode_is_zero_sequence():
    s = fortescue(Phasor(1, 0), Phasor(1, 0), Phasor(1, 0))
    assert s.zero.magnitude == pytest.approx(1, abs=1e-12)
    assert s.positive.magnitude == pytest.approx(0, abs=1e-12)
    assert s.negative.magnitude == pytest.approx(0, abs=1e-12)


def test_fortescue_round_trip_random_triples():
    rng = np.random.default_rng(7)
    for _ in range(200):
        orig = [Phasor(float(rng.uniform(0, 200)), float(rng.uniform(-math.pi, math.pi)))
                for _ in range(3)]
        back = inverse_fortescue(fortescue(*orig))
        for o, b in zip(orig, back):
            zo, zb = o.to_complex(), b.to_complex()
            assert abs(zo - zb) <= 1e-9 * (1.0 + abs(zo))


def test_vuf_definition_and_errors():
    s = SymmetricalComponents(Phasor(0, 0), Phasor(100, 0), Phasor(3.6, 0))
    assert vuf(s) == pytest.approx(3.6)
    balanced = fortescue(Phasor(5, 0), Phasor(5, -D120), Phasor(5, D120))
    assert vuf(balanced) == pytest.approx(0, abs=1e-9)
    dead = SymmetricalComponents(Phasor(0, 0), Phasor(0, 0), Phasor(1, 0))
    with pytest.raises(ValueError):
        vuf(dead)


def test_vuf_scale_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        mags = rng.uniform(1, 200, 3)
        angs = rng.uniform(-math.pi, math.pi, 3)
        s1 = fortescue(*[Phasor(float(m), float(a)) for m, a in zip(mags, angs)])
        k = float(rng.uniform(0.01, 100))
        s2 = fortescue(*[Phasor(float(k * m), float(a)) for m, a in zip(mags, angs)])
        if s1.positive.magnitude > 1e-6:
            assert vuf(s2) == pytest.approx(vuf(s1), rel=1e-9)


def test_phasor_normalizes_angle_and_rejects_negative_magnitude():
    assert Phasor(1, 3 * math.pi).angle == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        Phasor(-1, 0)


# -- quadrature generator -----------------------------------------------------

def test_qsg_quadrature_after_five_cycles():
    dt = 15e-6
    st = QsgState()
    n = round(6 / 60 / dt)
    for k in range(n):
        st = qsg_step(st, 170 * math.cos(W60 * (k * dt)), W60, dt)
    # correlate the last cycle of each output against the fundamental
    nc = round(2 * math.pi / W60 / dt)
    alpha, beta = [], []
    for k in range(n, n + nc):
        st = qsg_step(st, 170 * math.cos(W60 * (k * dt)), W60, dt)
        alpha.append(st.v_alpha)
        beta.append(st.v_beta)
    t0 = (n + 1) * dt
    za = sum(a * cmath.exp(-1j * W60 * (t0 + i * dt)) for i, a in enumerate(alpha)) * 2 / nc
    zb = sum(b * cmath.exp(-1j * W60 * (t0 + i * dt)) for i, b in enumerate(beta)) * 2 / nc
    assert abs(zb) == pytest.approx(170, rel=0.01)
    lag = math.degrees(wrap_angle(cmath.phase(zb) - cmath.phase(za)))
    assert lag == pytest.approx(-90, abs=1.0)


def test_qsg_zero_input_zero_state_fixed_point():
    st = QsgState()
    for _ in range(10):
        st = qsg_step(st, 0.0, W60, 1e-5)
    assert st.v_alpha == 0.0 and st.v_beta == 0.0


def test_qsg_step_input_remains_bounded():
    st = QsgState()
    dt = 15e-6
    peak = 0.0
    for _ in range(round(1.0 / dt)):
        st = qsg_step(st, 100.0, W60, dt)
        peak = max(peak, abs(st.v_alpha), abs(st.v_beta))
    assert peak < 300.0
    # DC gain of the quadrature output equals the damping gain
    assert st.v_beta == pytest.approx(math.sqrt(2) * 100, rel=0.02)


def test_qsg_bounded_for_bounded_input():
    rng = np.random.default_rng(3)
    st = QsgState()
    dt = 1e-4
    peak = 0.0
    for k in range(20000):
        u = 50 * math.cos(W60 * k * dt) + float(rng.uniform(-25, 25))
        st = qsg_step(st, u, W60, dt)
        peak = max(peak, abs(st.v_alpha), abs(st.v_beta))
    assert peak <= 5 * 75.0


def test_qsg_rejects_bad_arguments():
    with pytest.raises(ValueError):
        qsg_step(QsgState(), 1.0, W60, 0.0)
    with pytest.raises(ValueError):
        qsg_step(QsgState(), 1.0, -1.0, 1e-5)


# -- rotation -----------------------------------------------------------------

def test_alpha_beta_to_dq_aligned_case():
    theta = 0.7
    v_d, v_q = alpha_beta_to_dq(170 * math.cos(theta), 170 * math.sin(theta), theta)
    assert v_d == pytest.approx(170)
    assert v_q == pytest.approx(0, abs=1e-9)


def test_alpha_beta_to_dq_identity_and_quarter_turn():
    assert alpha_beta_to_dq(3.0, 4.0, 0.0) == pytest.approx((3.0, 4.0))
    v_d, v_q = alpha_beta_to_dq(1.0, 0.0, math.pi / 2)
    assert (v_d, v_q) == pytest.approx((0.0, -1.0), abs=1e-12)


def test_dq_rotation_preserves_magnitude():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a, b, th = rng.uniform(-100, 100, 3)
        v_d, v_q = alpha_beta_to_dq(float(a), float(b), float(th))
        assert v_d * v_d + v_q * v_q == pytest.approx(a * a + b * b, rel=1e-12)


# -- phase tracking -----------------------------------------------------------

def _run_pll(v_peak, w_in, t_end, dt=15e-6, pll0=None):
    qsg = QsgState()
    pll = pll0 or PllState()
    for k in range(round(t_end / dt)):
        v_in = v_peak * math.cos(w_in * k * dt)
        qsg = qsg_step(qsg, v_in, max(pll.omega_estimate, 0.5 * W60), dt)
        v_d, v_q = alpha_beta_to_dq(qsg.v_alpha, qsg.v_beta, pll.theta)
        pll = pll_step(pll, v_d, v_q, dt, omega_nom=W60, v_nom=170.0)
    return qsg, pll, v_q


def test_pll_locks_from_ten_percent_frequency_error():
    pll0 = PllState(theta=0.0, omega_estimate=0.9 * W60, integrator=-0.1 * W60,
                    magnitude_estimate=0.0)
    _, pll, v_q = _run_pll(170.0, W60, 0.2, pll0=pll0)
    assert abs(pll.omega_estimate - W60) < 0.01 * 2 * math.pi
    assert abs(v_q) < 1.0
    assert pll.magnitude_estimate == pytest.approx(170, abs=1.0)


def test_pll_aligned_input_is_fixed_point():
    st = PllState(theta=0.0, omega_estimate=W60, integrator=0.0,
                  magnitude_estimate=170.0)
    dt = 1e-5
    out = pll_step(st, 170.0, 0.0, dt, omega_nom=W60, v_nom=170.0)
    assert out.omega_estimate == st.omega_estimate
    assert out.integrator == st.integrator
    assert out.theta == pytest.approx((st.theta + W60 * dt) % (2 * math.pi))
    assert out.magnitude_estimate == pytest.approx(170.0)


def test_pll_omega_clamped():
    st = PllState()
    out = pll_step(st, 0.0, 1e9, 1e-5, omega_nom=W60, v_nom=170.0)
    assert out.omega_estimate <= 1.2 * W60


# -- low-pass -----------------------------------------------------------------

def test_lpf_converges_monotonically_to_dc():
    st = LpfState(0.0, 2 * math.pi * 5)
    prev = 0.0
    for _ in range(5000):
        st = lpf_step(st, 1.0, 1e-4)
        assert st.output >= prev - 1e-15
        prev = st.output
    assert st.output == pytest.approx(1.0, abs=1e-6)


def test_lpf_fixed_point():
    st = LpfState(0.42, 10.0)
    assert lpf_step(st, 0.42, 1e-3).output == pytest.approx(0.42, rel=1e-12)


def test_lpf_step_response_at_one_time_constant():
    wc = 2 * math.pi * 5
    dt = 1e-5
    st = LpfState(0.0, wc)
    n = round(1.0 / wc / dt)
    for _ in range(n):
        st = lpf_step(st, 1.0, dt)
    assert st.output == pytest.approx(1 - math.exp(-1), rel=0.01)


def test_lpf_output_bounded_by_input_bounds():
    rng = np.random.default_rng(9)
    u = rng.uniform(-3, 7, 3000)
    st = LpfState(float(u[0]), 40.0)
    for x in u:
        st = lpf_step(st, float(x), 1e-4)
        assert u.min() - 1e-12 <= st.output <= u.max() + 1e-12


def test_lpf_rejects_bad_cutoff_and_dt():
    with pytest.raises(ValueError):
        LpfState(0.0, 0.0)
    with pytest.raises(ValueError):
        lpf_step(LpfState(0.0, 1.0), 1.0, 0.0)


# -- phasor estimation --------------------------------------------------------

def test_phasor_estimate_pure_cosine():
    dt = (2 * math.pi / W60) / 1024
    t = np.arange(1024) * dt
    ph = phasor_estimate(170 * np.cos(W60 * t), W60, dt)
    assert ph.magnitude == pytest.approx(170, abs=0.1)
    assert math.degrees(ph.angle) == pytest.approx(0, abs=0.5)


def test_phasor_estimate_zero_signal():
    dt = (2 * math.pi / W60) / 512
    ph = phasor_estimate(np.zeros(512), W60, dt)
    assert ph.magnitude == 0.0


def test_phasor_estimate_shifted_cosine():
    dt = (2 * math.pi / W60) / 1024
    t = np.arange(1024) * dt
    ph = phasor_estimate(170 * np.cos(W60 * t - math.radians(120)), W60, dt)
    assert math.degrees(ph.angle) == pytest.approx(-120, abs=0.5)


def test_phasor_estimate_rejects_short_window():
    dt = (2 * math.pi / W60) / 1024
    with pytest.raises(ValueError):
        phasor_estimate(np.zeros(100), W60, dt)


def test_sliding_phasor_matches_batch_estimate():
    n = 1000
    dt = (2 * math.pi / W60) / n
    sp = SlidingPhasor(W60, dt, n)
    samples = []
    rng = np.random.default_rng(13)
    phase = float(rng.uniform(0, 2 * math.pi))
    for k in range(4 * n):
        x = 170 * math.cos(W60 * k * dt + phase) + 5 * math.cos(3 * W60 * k * dt)
        samples.append(x)
        sp.update(x)
    batch = phasor_estimate(np.array(samples[-n:]), W60, dt)
    assert sp.magnitude == pytest.approx(batch.magnitude, abs=1e-6)
