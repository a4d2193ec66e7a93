"""Measurements over simulation traces: sliding P/Q, per-cycle unbalance,
steady-state extraction, and the run summary.

Sign conventions: trace channels measure consumption at the element (positive
P/Q flows from the bus into the element), so generating inverters show
negative active power.  In the summary report the active-power fields are
flipped to generation-positive so sharing ratios read naturally; reactive
fields stay consumption-positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class NotSettledError(ValueError):
    def __init__(self, message: str, ripple: float):
        super().__init__(message)
        self.ripple = ripple


#: Recordable channels and their units (time excluded; always first column).
CHANNELS: dict[str, str] = {
    "v_pcc_a": "V", "v_pcc_b": "V", "v_pcc_c": "V", "v_mg2": "V",
    "i_ess": "A", "i_mg2_feeder": "A",
    "v_mag_pcc_a": "V", "v_mag_pcc_b": "V", "v_mag_pcc_c": "V",
    "vuf_pcc": "%",
    "p_3ph": "W", "q_3ph": "var", "p_1ph": "W", "q_1ph": "var",
    "p_ess": "W", "q_ess": "var",
    "p_load_bus": "W", "q_load_bus": "var", "p_load1": "W",
    "w_island": "rad/s", "w_pll": "rad/s", "v_m_pll": "V",
    "p_ref": "W", "q_ref": "var", "q_s": "var", "q_vcc": "var",
    "id_ref": "A", "iq_ref": "A", "mrdc_on": "",
}


@dataclass
class SimulationTrace:
    """Uniformly sampled named channels plus provenance metadata."""

    time: np.ndarray
    signals: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = self.time.size
        for name, ch in self.signals.items():
            if ch.size != n:
                raise ValueError(f"channel {name!r} length {ch.size} != time {n}")
        if len(set(self.signals)) != len(self.signals):
            raise ValueError("duplicate channel names")

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.signals[name]

    def to_csv(self, path):
        names = list(self.signals)
        cols = [self.time] + [self.signals[n] for n in names]
        header = ",".join(["time"] + names)
        lines = [header]
        stacked = np.column_stack(cols)
        for row in stacked:
            lines.append(",".join(f"{x:.9g}" for x in row))
        with open(path, "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SimulationTrace":
        with open(path) as f:
            header = f.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if header[0] != "time":
            raise ValueError("first CSV column must be 'time'")
        signals = {name: data[:, k + 1] for k, name in enumerate(header[1:])}
        return cls(time=data[:, 0], signals=signals)


def _sliding_mean(x: np.ndarray, n: int) -> np.ndarray:
    """Trailing-window mean; the first n-1 entries repeat the first full value."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty_like(x)
    out[n - 1:] = (c[n:] - c[:-n]) / n
    out[: n - 1] = out[n - 1]
    return out


def pq_measure(v: np.ndarray, i: np.ndarray, omega: float,
               dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Sliding one-cycle active and reactive power of a v/i channel pair.

    P is the plain windowed mean of the instantaneous product.  Q correlates
    the current against the quadrature (90-degree-lagged) component of the
    voltage fundamental, so a lagging current yields positive Q.
    """
    v = np.asarray(v, float)
    i = np.asarray(i, float)
    if v.shape != i.shape:
        raise ValueError("channels must be aligned")
    n = round(TWO_PI / omega / dt)
    if v.size < n:
        raise ValueError(f"channel shorter than one cycle ({n} samples)")
    p = _sliding_mean(v * i, n)
    t = np.arange(v.size) * dt
    rot = np.exp(-1j * omega * t)
    cv = 2.0 * (_sliding_mean((v * rot).real, n) + 1j * _sliding_mean((v * rot).imag, n))
    v_quad = (cv * np.conj(rot)).imag
    q = _sliding_mean(v_quad * i, n)
    return p, q


def cycle_phasors(x: np.ndarray, omega: float, dt: float,
                  t0: float = 0.0) -> np.ndarray:
    """Complex phasor of each consecutive full cycle of a channel."""
    n = round(TWO_PI / omega / dt)
    m = x.size // n
    if m < 1:
        raise ValueError("need at least one full cycle")
    t = t0 + np.arange(m * n) * dt
    prod = (x[: m * n] * np.exp(-1j * omega * t)).reshape(m, n)
    return 2.0 * prod.mean(axis=1)


def vuf_series(trace: SimulationTrace,
               pcc_channels: tuple[str, str, str] = ("v_pcc_a", "v_pcc_b", "v_pcc_c"),
               omega: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cycle voltage unbalance factor (percent) over the trace.

    Returns (cycle end times, VUF values).  Raises when the positive-sequence
    magnitude collapses, which signals a dead network rather than unbalance.
    """
    for ch in pcc_channels:
        if ch not in trace.signals:
            raise KeyError(f"channel {ch!r} not in trace")
    if omega is None:
        omega = TWO_PI * float(trace.metadata.get("frequency_hz", 60.0))
    dt = trace.dt
    t0 = float(trace.time[0])
    ph = [cycle_phasors(trace[ch], omega, dt, t0) for ch in pcc_channels]
    a, b, c = ph
    zp = np.abs(a + b * np.exp(2j * math.pi / 3) + c * np.exp(-2j * math.pi / 3)) / 3.0
    zn = np.abs(a + b * np.exp(-2j * math.pi / 3) + c * np.exp(2j * math.pi / 3)) / 3.0
    if np.any(zp <= 1e-12):
        raise ValueError("positive-sequence magnitude is zero; VUF undefined")
    n = round(TWO_PI / omega / dt)
    m = zp.size
    times = trace.time[np.arange(1, m + 1) * n - 1]
    return times, 100.0 * zn / zp


def steady_state(channel: np.ndarray, window_s: float, dt: float,
                 tol: float = 0.02, floor: float = 0.0) -> float:
    """Mean of the trailing ``window_s`` seconds, guarded against ripple.

    Raises :class:`NotSettledError` when the peak-to-peak excursion in the
    window exceeds ``tol * |mean|`` (or ``floor``, whichever is larger; the
    floor keeps near-zero channels checkable).
    """
    n = max(1, round(window_s / dt))
    if n > channel.size:
        raise ValueError("window longer than channel")
    seg = channel[-n:]
    mean = float(seg.mean())
    ripple = float(seg.max() - seg.min())
    if ripple > max(tol * abs(mean), floor):
        raise NotSettledError(
            f"not settled: peak-to-peak {ripple:.6g} exceeds "
            f"{max(tol * abs(mean), floor):.6g}", ripple)
    return mean


@dataclass
class SummaryReport:
    """Headline numbers of one run, taken from the steady windows before the
    compensator enable event and at the end of the run."""

    vuf_pre: float | None
    vuf_post: float
    improvement: float | None
    p_three_phase: float
    p_single_phase: float
    sharing_ratio: float | None
    q_load_pre: float | None
    q_load_post: float
    q_ess: float
    q_three_phase: float
    q_single_phase: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _window(trace: SimulationTrace, name: str, t_end: float, window_s: float,
            tol: float, floor: float) -> float:
    dt = trace.dt
    k_end = int(np.searchsorted(trace.time, t_end + 0.5 * dt))
    ch = trace[name][:k_end]
    return steady_state(ch, window_s, dt, tol=tol, floor=floor)


def _power_floor(scenario) -> float:
    """Settling floor for power channels: 1 % of installed inverter capacity.

    A pure relative ripple test is unsatisfiable on channels whose settled
    mean is near zero, so windows count as settled when the excursion stays
    inside this absolute band as well.
    """
    rating = scenario.pv_three_phase.rating_w
    if scenario.pv_single_phase is not None:
        rating += scenario.pv_single_phase.rating_w
    return 0.01 * rating


#: Percentage-point floor for unbalance-factor windows.
VUF_FLOOR = 0.1


def summarize(trace: SimulationTrace, scenario) -> SummaryReport:
    """Build the summary report for a run containing an ``enable_mrdc`` event."""
    t_enable = None
    for ev in scenario.events:
        if ev.action == "enable_mrdc":
            t_enable = ev.time_s
            break
    if t_enable is None:
        raise ValueError("scenario has no enable_mrdc event; cannot split pre/post")
    window = scenario.outputs.summary_window_s
    tol = scenario.outputs.summary_tol
    pfloor = _power_floor(scenario)
    t_end = float(trace.time[-1])

    vuf_pre = _window(trace, "vuf_pcc", t_enable, window, tol, VUF_FLOOR)
    vuf_post = _window(trace, "vuf_pcc", t_end, window, tol, VUF_FLOOR)
    improvement = None
    if vuf_pre > 1e-9:
        improvement = 100.0 * (vuf_pre - vuf_post) / vuf_pre

    p3 = -_window(trace, "p_3ph", t_end, window, tol, pfloor)
    p1 = -_window(trace, "p_1ph", t_end, window, tol, pfloor)
    sharing = p3 / p1 if abs(p1) > 1e-9 else None
    q3 = _window(trace, "q_3ph", t_end, window, tol, pfloor)
    q1 = _window(trace, "q_1ph", t_end, window, tol, pfloor)

    q_load_pre = _window(trace, "q_load_bus", t_enable, window, tol, pfloor)
    q_load_post = _window(trace, "q_load_bus", t_end, window, tol, pfloor)
    q_ess = _window(trace, "q_ess", t_end, window, tol, pfloor)

    return SummaryReport(
        vuf_pre=vuf_pre, vuf_post=vuf_post, improvement=improvement,
        p_three_phase=p3, p_single_phase=p1, sharing_ratio=sharing,
        q_load_pre=q_load_pre, q_load_post=q_load_post, q_ess=q_ess,
        q_three_phase=q3, q_single_phase=q1)


def tail_report(trace: SimulationTrace, scenario) -> SummaryReport:
    """Summary of a run with no compensator enable event: only the trailing
    window is measured, and the pre/improvement fields stay null."""
    window = scenario.outputs.summary_window_s
    tol = scenario.outputs.summary_tol
    pfloor = _power_floor(scenario)
    t_end = float(trace.time[-1])
    p3 = -_window(trace, "p_3ph", t_end, window, tol, pfloor)
    p1 = -_window(trace, "p_1ph", t_end, window, tol, pfloor)
    return SummaryReport(
        vuf_pre=None, vuf_post=_window(trace, "vuf_pcc", t_end, window, tol, VUF_FLOOR),
        improvement=None,
        p_three_phase=p3, p_single_phase=p1,
        sharing_ratio=p3 / p1 if abs(p1) > 1e-9 else None,
        q_load_pre=None,
        q_load_post=_window(trace, "q_load_bus", t_end, window, tol, pfloor),
        q_ess=_window(trace, "q_ess", t_end, window, tol, pfloor),
        q_three_phase=_window(trace, "q_3ph", t_end, window, tol, pfloor),
        q_single_phase=_window(trace, "q_1ph", t_end, window, tol, pfloor))
