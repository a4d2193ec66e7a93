"""Control laws for the energy-storage inverter and the grid-forming units.

The storage controller builds its current references from local measurements
only: average output power through a reverse droop on frequency, reactive
capability from the charge/discharge headroom, and a voltage compensator that
trims the reactive reference until the three PCC phase magnitudes agree.
A proportional-resonant regulator closes the inner current loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

from .signals import (
    LpfState,
    PllState,
    QsgState,
    TWO_PI,
    alpha_beta_to_dq,
    lpf_step,
    pll_step,
    qsg_step,
)


@dataclass(frozen=True, slots=True)
class MrdcParams:
    """Coefficients of the storage-inverter control stack.

    ``n_r`` is (rad/s)/W, ``m_r``/``d_r``/``c_r`` are V/var with peak-volt
    magnitudes.  ``qs_sign`` selects the branch of the reactive-capability
    square root.
    """

    n_r: float = 0.067
    m_r: float = -0.8e-2
    d_r: float = -25e-6
    c_r: float = -2.85e-4
    w_ref: float = TWO_PI * 60.0
    v_ref: float = 120.0 * math.sqrt(2.0)  # volts peak
    qs_sign: int = 1
    lpf_cutoff: float = TWO_PI * 5.0       # power averaging
    mag_cutoff: float = TWO_PI * 2.0       # phase-magnitude smoothing
    ref_slew: float = 60.0                 # A/s on both current references
    undervoltage_floor: float = 0.1        # fraction of v_ref
    power_consistent: bool = False         # use 2*P_ref/v_sd in the d-axis reference

    def __post_init__(self):
        for name in ("n_r", "m_r", "d_r", "c_r"):
            if getattr(self, name) == 0.0:
                raise ValueError(f"{name} must be nonzero")
        if self.w_ref <= 0.0 or self.v_ref <= 0.0:
            raise ValueError("w_ref and v_ref must be > 0")
        if self.qs_sign not in (1, -1):
            raise ValueError("qs_sign must be +1 or -1")


def compute_p_ess(p_mppt: float, p_load: float) -> float:
    """Charge/discharge power of the storage unit: available PV power minus
    the local load."""
    return p_mppt - p_load


def compute_ps(v_sd: float, i_sd: float) -> float:
    """Instantaneous active output power in the voltage-aligned frame (peak
    convention).  Callers low-pass this to obtain the average."""
    return 0.5 * v_sd * i_sd


def compute_qs(p_ess: float, p_s: float, sign: int = 1) -> float:
    """Reactive capability left after the active-power duty.

    Clamped to zero when ``|p_s|`` exceeds ``|p_ess|``: negative headroom
    means no apparent-power budget remains, and the square root would
    otherwise go imaginary.
    """
    head = p_ess * p_ess - p_s * p_s
    if head <= 0.0:
        return 0.0
    return sign * 2.0 * math.sqrt(head)


def voltage_compensator(v_a: float, v_b: float, v_c: float,
                        params: MrdcParams) -> float:
    """Reactive correction from the spread of the PCC phase magnitudes.

    Phase a carries the single-phase units, so it serves as the reference
    against b and c.  Balanced magnitudes give exactly zero.
    """
    return (v_a - v_b) / params.d_r + (v_c - v_a) / params.c_r


def rpc_references(p_s: float, q_s: float, v_m: float, w_m: float,
                   q_vcc: float, params: MrdcParams) -> tuple[float, float]:
    """Reverse-droop power references from measured frequency and voltage."""
    p_ref = p_s + (params.w_ref - w_m) / params.n_r
    q_ref = q_s - (params.v_ref - v_m) / params.m_r - q_vcc
    return p_ref, q_ref


def current_references(p_ref: float, q_ref: float, v_sd: float,
                       prev_id: float = 0.0, prev_iq: float = 0.0,
                       floor: float = 0.1 * 120.0 * math.sqrt(2.0),
                       power_consistent: bool = False,
                       ) -> tuple[float, float, bool]:
    """dq current references; holds the previous pair under loss of voltage.

    Returns ``(id_ref, iq_ref, undervoltage)``.  Below the voltage floor the
    division would produce unbounded references, so the previous values are
    held and the flag raised instead.
    """
    if abs(v_sd) < floor:
        return prev_id, prev_iq, True
    scale = 2.0 if power_consistent else 1.0
    return scale * p_ref / v_sd, q_ref / v_sd, False


def dq_to_instantaneous_current(id_ref: float, iq_ref: float, theta: float) -> float:
    """Project the rotating current reference onto the stationary axis."""
    return id_ref * math.cos(theta) - iq_ref * math.sin(theta)


@dataclass(frozen=True, slots=True)
class PrParams:
    """Proportional-resonant regulator: ``k_p`` plus one damped resonator per
    listed harmonic of ``omega_0``."""

    k_p: float = 40.0
    omega_c: float = 1.0
    resonant_terms: tuple[tuple[int, float], ...] = ((1, 1000.0), (3, 50.0))
    omega_0: float = TWO_PI * 60.0

    def __post_init__(self):
        if self.k_p <= 0.0 or self.omega_c <= 0.0:
            raise ValueError("k_p and omega_c must be > 0")
        ks = [k for k, _ in self.resonant_terms]
        if len(set(ks)) != len(ks) or any(k < 1 for k in ks):
            raise ValueError("harmonics must be distinct integers >= 1")


@dataclass(frozen=True, slots=True)
class PrState:
    """Direct-form-II-transposed states, one (s1, s2) pair per resonator."""

    sections: tuple[tuple[float, float], ...] = ()


@lru_cache(maxsize=None)
def _resonator_coeffs(k_r: float, omega_c: float, omega_k: float,
                      dt: float) -> tuple[float, float, float, float, float]:
    """Bilinear coefficients for 2*k_r*w_c*s / (s^2 + 2*w_c*s + w_k^2),
    prewarped so the discrete peak sits exactly at ``omega_k``."""
    kk = omega_k / math.tan(0.5 * omega_k * dt)
    a0 = kk * kk + 2.0 * omega_c * kk + omega_k * omega_k
    b0 = 2.0 * k_r * omega_c * kk / a0
    b2 = -b0
    a1 = (-2.0 * kk * kk + 2.0 * omega_k * omega_k) / a0
    a2 = (kk * kk - 2.0 * omega_c * kk + omega_k * omega_k) / a0
    return b0, 0.0, b2, a1, a2


def pr_step(state: PrState, error: float, dt: float,
            params: PrParams) -> tuple[PrState, float]:
    """One proportional-resonant update; returns ``(state, output volts)``."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    sections = state.sections
    if len(sections) != len(params.resonant_terms):
        sections = tuple((0.0, 0.0) for _ in params.resonant_terms)
    out = params.k_p * error
    new_sections = []
    for (k, k_r), (s1, s2) in zip(params.resonant_terms, sections):
        b0, b1, b2, a1, a2 = _resonator_coeffs(k_r, params.omega_c,
                                               k * params.omega_0, dt)
        y = b0 * error + s1
        new_sections.append((b1 * error - a1 * y + s2, b2 * error - a2 * y))
        out += y
    return PrState(tuple(new_sections)), out


@dataclass(frozen=True, slots=True)
class DroopParams:
    """Conventional droop for a grid-forming (voltage-mode) inverter."""

    m_p: float           # (rad/s)/W
    n_q: float           # V/var (peak volts)
    w_nom: float
    v_nom: float         # volts peak

    def __post_init__(self):
        if self.m_p <= 0.0 or self.n_q <= 0.0:
            raise ValueError("droop slopes must be > 0")


def conventional_droop_step(p_meas: float, q_meas: float,
                            params: DroopParams) -> tuple[float, float]:
    """Frequency and voltage commands from measured delivered P and Q."""
    return (params.w_nom - params.m_p * p_meas,
            params.v_nom - params.n_q * q_meas)


@dataclass(frozen=True, slots=True)
class MrdcMeasurements:
    """Per-step inputs to the storage controller."""

    v_s: float        # instantaneous terminal voltage
    i_s: float        # instantaneous output (inductor) current
    v_mag_a: float    # PCC phase magnitudes, volts peak
    v_mag_b: float
    v_mag_c: float
    p_mppt: float
    p_load: float


@dataclass(frozen=True, slots=True)
class MrdcState:
    """Full controller state: the published quantities plus the internal
    synchronization and filter blocks."""

    p_s_filtered: float = 0.0
    q_s: float = 0.0
    p_ref: float = 0.0
    q_ref: float = 0.0
    q_vcc: float = 0.0
    id_ref: float = 0.0
    iq_ref: float = 0.0
    qsg_v: QsgState = field(default_factory=QsgState)
    qsg_i: QsgState = field(default_factory=QsgState)
    pll: PllState = field(default_factory=PllState)
    va_filt: float = 0.0
    vb_filt: float = 0.0
    vc_filt: float = 0.0
    undervoltage: bool = False


def mrdc_step(meas: MrdcMeasurements, params: MrdcParams, state: MrdcState,
              dt: float, enabled: bool = True) -> tuple[MrdcState, float]:
    """Advance the full storage-control chain by one sample.

    Quadrature generation and the phase tracker run unconditionally so the
    measurement side stays warm; when ``enabled`` is false the current
    references slew back to zero instead of following the droop chain.
    Returns the new state and the instantaneous current reference.
    """
    w_track = state.pll.omega_estimate if state.pll.omega_estimate > 0.0 else params.w_ref
    qsg_v = qsg_step(state.qsg_v, meas.v_s, w_track, dt)
    qsg_i = qsg_step(state.qsg_i, meas.i_s, w_track, dt)
    v_d, v_q = alpha_beta_to_dq(qsg_v.v_alpha, qsg_v.v_beta, state.pll.theta)
    pll = pll_step(state.pll, v_d, v_q, dt,
                   omega_nom=params.w_ref, v_nom=params.v_ref)
    i_d, _ = alpha_beta_to_dq(qsg_i.v_alpha, qsg_i.v_beta, state.pll.theta)

    p_inst = compute_ps(v_d, i_d)
    p_s = lpf_step(LpfState(state.p_s_filtered, params.lpf_cutoff), p_inst, dt).output

    a = 1.0 - math.exp(-params.mag_cutoff * dt)
    va = state.va_filt + a * (meas.v_mag_a - state.va_filt)
    vb = state.vb_filt + a * (meas.v_mag_b - state.vb_filt)
    vc = state.vc_filt + a * (meas.v_mag_c - state.vc_filt)

    p_ess = compute_p_ess(meas.p_mppt, meas.p_load)
    q_s = compute_qs(p_ess, p_s, params.qs_sign)
    q_vcc = voltage_compensator(va, vb, vc, params)
    p_ref, q_ref = rpc_references(p_s, q_s, pll.magnitude_estimate,
                                  pll.omega_estimate, q_vcc, params)

    if enabled:
        id_t, iq_t, uv = current_references(
            p_ref, q_ref, v_d, state.id_ref, state.iq_ref,
            floor=params.undervoltage_floor * params.v_ref,
            power_consistent=params.power_consistent)
    else:
        id_t, iq_t, uv = 0.0, 0.0, False

    slew = params.ref_slew * dt
    id_ref = state.id_ref + min(max(id_t - state.id_ref, -slew), slew)
    iq_ref = state.iq_ref + min(max(iq_t - state.iq_ref, -slew), slew)

    new_state = MrdcState(
        p_s_filtered=p_s, q_s=q_s, p_ref=p_ref, q_ref=q_ref, q_vcc=q_vcc,
        id_ref=id_ref, iq_ref=iq_ref, qsg_v=qsg_v, qsg_i=qsg_i, pll=pll,
        va_filt=va, vb_filt=vb, vc_filt=vc, undervoltage=uv)
    i_ref = dq_to_instantaneous_current(id_ref, iq_ref, pll.theta)
    return new_state, i_ref
