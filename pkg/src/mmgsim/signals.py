"""Discrete-time signal processing blocks for single-phase synchronization
and three-phase sequence analysis.

Everything here is a pure state machine: ``step(state, inputs) -> new state``.
States are small frozen dataclasses, so instances can be shared or replayed
freely; a single chain must be stepped sequentially.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi

# SOGI damping gain: sqrt(2) trades settling speed against overshoot.
DEFAULT_SOGI_GAIN = math.sqrt(2.0)

# Synchronization loop defaults: ~0.1 s settling at 60 Hz, critically-ish damped.
DEFAULT_PLL_ZETA = 0.707
DEFAULT_PLL_NATURAL_FREQ = TWO_PI * 10.0


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    theta = math.remainder(theta, TWO_PI)
    if theta <= -math.pi:
        theta += TWO_PI
    return theta


@dataclass(frozen=True, slots=True)
class Phasor:
    """Peak-magnitude phasor of a sinusoid at fundamental frequency."""

    magnitude: float
    angle: float  # radians, (-pi, pi]

    def __post_init__(self):
        if self.magnitude < 0.0:
            raise ValueError(f"phasor magnitude must be >= 0, got {self.magnitude}")
        object.__setattr__(self, "angle", wrap_angle(self.angle))

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        return cls(abs(z), cmath.phase(z))

    def to_complex(self) -> complex:
        return cmath.rect(self.magnitude, self.angle)


@dataclass(frozen=True, slots=True)
class SymmetricalComponents:
    zero: Phasor
    positive: Phasor
    negative: Phasor


_ALPHA = cmath.rect(1.0, TWO_PI / 3.0)  # 1 /_ 120 deg


def fortescue(a: Phasor, b: Phasor, c: Phasor) -> SymmetricalComponents:
    """Decompose a three-phase phasor set into zero/positive/negative sequences."""
    za, zb, zc = a.to_complex(), b.to_complex(), c.to_complex()
    z0 = (za + zb + zc) / 3.0
    zp = (za + _ALPHA * zb + _ALPHA**2 * zc) / 3.0
    zn = (za + _ALPHA**2 * zb + _ALPHA * zc) / 3.0
    return SymmetricalComponents(
        zero=Phasor.from_complex(z0),
        positive=Phasor.from_complex(zp),
        negative=Phasor.from_complex(zn),
    )


def inverse_fortescue(s: SymmetricalComponents) -> tuple[Phasor, Phasor, Phasor]:
    """Reconstruct the abc phasors from sequence components."""
    z0, zp, zn = s.zero.to_complex(), s.positive.to_complex(), s.negative.to_complex()
    za = z0 + zp + zn
    zb = z0 + _ALPHA**2 * zp + _ALPHA * zn
    zc = z0 + _ALPHA * zp + _ALPHA**2 * zn
    return (Phasor.from_complex(za), Phasor.from_complex(zb), Phasor.from_complex(zc))


def vuf(s: SymmetricalComponents) -> float:
    """Voltage unbalance factor in percent: 100 * |V-| / |V+|.

    Zero sequence is excluded from the ratio.  Raises ``ValueError`` when the
    positive-sequence magnitude is zero: that is a collapsed network, not a
    measurable unbalance.
    """
    if s.positive.magnitude <= 0.0:
        raise ValueError("positive-sequence magnitude is zero; VUF undefined")
    return 100.0 * s.negative.magnitude / s.positive.magnitude


@dataclass(frozen=True, slots=True)
class QsgState:
    """Second-order generalized integrator producing a quadrature pair.

    ``v_alpha`` tracks the input at fundamental frequency; ``v_beta`` is its
    90-degree-lagged companion.  The two fields are the integrator states.
    """

    v_alpha: float = 0.0
    v_beta: float = 0.0


def qsg_step(state: QsgState, v_in: float, omega: float, dt: float,
             gain: float = DEFAULT_SOGI_GAIN) -> QsgState:
    """Advance the quadrature generator by one sample (trapezoidal update).

    The implicit discretization keeps the resonator amplitude-accurate at
    the tracked frequency, which a forward-Euler update would not.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    if omega <= 0.0:
        raise ValueError("omega must be > 0")
    h = 0.5 * dt
    kw = gain * omega
    hw = h * omega
    hkw = h * kw
    # (I - h*A) x' = (I + h*A) x + 2*h*B*u  with A = [[-k*w, -w], [w, 0]]
    r0 = state.v_alpha * (1.0 - hkw) - hw * state.v_beta + 2.0 * hkw * v_in
    r1 = state.v_beta + hw * state.v_alpha
    det = 1.0 + hkw + hw * hw
    v_alpha = (r0 - hw * r1) / det
    v_beta = (hw * r0 + (1.0 + hkw) * r1) / det
    return QsgState(v_alpha, v_beta)


def alpha_beta_to_dq(v_alpha: float, v_beta: float, theta: float) -> tuple[float, float]:
    """Rotate a stationary-frame pair into the frame at angle ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return (v_alpha * c + v_beta * s, -v_alpha * s + v_beta * c)


@dataclass(frozen=True, slots=True)
class PllState:
    theta: float = 0.0               # [0, 2*pi)
    omega_estimate: float = 0.0      # rad/s
    integrator: float = 0.0          # rad/s
    magnitude_estimate: float = 0.0  # volts peak


def pll_step(state: PllState, v_d: float, v_q: float, dt: float,
             omega_nom: float = TWO_PI * 60.0,
             v_nom: float = 120.0 * math.sqrt(2.0),
             zeta: float = DEFAULT_PLL_ZETA,
             natural_freq: float = DEFAULT_PLL_NATURAL_FREQ,
             mag_cutoff: float = TWO_PI * 20.0) -> PllState:
    """One update of the synchronous-frame phase tracker.

    A PI loop drives ``v_q`` to zero; the estimated speed is clamped to
    [0.8, 1.2] of nominal so a bad transient cannot run the angle away.
    ``magnitude_estimate`` is a low-pass of sqrt(v_d^2 + v_q^2).
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    kp = 2.0 * zeta * natural_freq / v_nom
    ki = natural_freq * natural_freq / v_nom
    lim = 0.2 * omega_nom
    integrator = state.integrator + ki * v_q * dt
    integrator = min(max(integrator, -lim), lim)
    omega = omega_nom + kp * v_q + integrator
    omega = min(max(omega, 0.8 * omega_nom), 1.2 * omega_nom)
    theta = (state.theta + omega * dt) % TWO_PI
    mag_in = math.hypot(v_d, v_q)
    a = 1.0 - math.exp(-mag_cutoff * dt)
    magnitude = state.magnitude_estimate + a * (mag_in - state.magnitude_estimate)
    return PllState(theta, omega, integrator, magnitude)


@dataclass(frozen=True, slots=True)
class LpfState:
    """First-order low-pass state.  DC gain is exactly 1."""

    output: float
    cutoff: float  # rad/s

    def __post_init__(self):
        if self.cutoff <= 0.0:
            raise ValueError("cutoff must be > 0")


def lpf_step(state: LpfState, value: float, dt: float) -> LpfState:
    """Exact zero-order-hold discretization of a first-order lag."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    a = math.exp(-state.cutoff * dt)
    return replace(state, output=state.output * a + value * (1.0 - a))


def phasor_estimate(samples, omega: float, dt: float) -> Phasor:
    """Single-frequency Fourier correlation over a sample window.

    The window must span at least one period of ``omega``; accuracy is best
    when it spans an integer number of periods.  The returned angle is the
    cosine phase at the first sample.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n * dt < TWO_PI / omega * (1.0 - 1e-9):
        raise ValueError(
            f"window of {n * dt:.6g} s is shorter than one period ({TWO_PI / omega:.6g} s)"
        )
    t = np.arange(n) * dt
    z = 2.0 / n * np.sum(x * np.exp(-1j * omega * t))
    return Phasor.from_complex(complex(z))


class SlidingPhasor:
    """Recursive one-cycle Fourier correlator, updated one sample at a time.

    Equivalent to :func:`phasor_estimate` over the trailing window (the
    recursion is resynchronized against an exact sum once per cycle, keeping
    the two within 1e-6 over arbitrarily long runs).  Absolute angle rotates
    with the running reference; relative angles between instances sharing the
    same ``omega``/``dt`` are consistent, which is what sequence analysis needs.
    """

    __slots__ = ("omega", "dt", "n", "_rot", "_step_rot", "_prod", "_head",
                 "_sum", "_count")

    def __init__(self, omega: float, dt: float, n_samples: int | None = None):
        if n_samples is None:
            n_samples = max(2, round(TWO_PI / omega / dt))
        self.omega = omega
        self.dt = dt
        self.n = n_samples
        self._rot = 1.0 + 0.0j
        self._step_rot = cmath.exp(-1j * omega * dt)
        self._prod = np.zeros(n_samples, dtype=complex)
        self._head = 0
        self._sum = 0.0 + 0.0j
        self._count = 0

    def update(self, x: float) -> complex:
        """Push one sample; return the current phasor (peak convention)."""
        p = x * self._rot
        self._sum += p - self._prod[self._head]
        self._prod[self._head] = p
        self._head = (self._head + 1) % self.n
        self._rot *= self._step_rot
        self._count += 1
        if self._count % self.n == 0:
            # periodic resync: kill rotor drift and incremental-sum roundoff
            self._rot /= abs(self._rot)
            self._sum = self._prod.sum()
        return 2.0 * self._sum / self.n

    @property
    def magnitude(self) -> float:
        return 2.0 * abs(self._sum) / self.n
