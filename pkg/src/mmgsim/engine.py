"""Closed-loop scenario runner.

Wires the nodal plant, the grid-forming droop units, and the storage
controller together at fixed step, applies timed events, and records the
trace.  Everything is deterministic: identical scenarios produce bit-identical
traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import __version__
from .control import (
    MrdcMeasurements,
    MrdcParams,
    MrdcState,
    PrParams,
    PrState,
    conventional_droop_step,
    DroopParams,
    mrdc_step,
    pr_step,
)
from .metrics import CHANNELS, SimulationTrace
from .plant import AveragedInverter, PowerAudit, TopologyParams, build, default_topology, inverter_inject
from .scenario import ScenarioConfig
from .signals import QsgState, SlidingPhasor, qsg_step

TWO_PI = 2.0 * math.pi
_A120 = complex(math.cos(TWO_PI / 3.0), math.sin(TWO_PI / 3.0))
_A240 = _A120.conjugate()


class _Meter:
    """Average P/Q of one element from instantaneous products.

    First lag feeds the droops; the cascaded second lag gives trace-grade
    smoothing of the double-frequency ripple inherent to single-phase power.
    Sign follows the orientation of the supplied current.
    """

    __slots__ = ("a", "p", "q", "p2", "q2")

    def __init__(self, cutoff: float, dt: float):
        self.a = 1.0 - math.exp(-cutoff * dt)
        self.p = 0.0
        self.q = 0.0
        self.p2 = 0.0
        self.q2 = 0.0

    def update(self, v: float, v_beta: float, i: float):
        a = self.a
        self.p += a * (v * i - self.p)
        self.q += a * (v_beta * i - self.q)
        self.p2 += a * (self.p - self.p2)
        self.q2 += a * (self.q - self.q2)


@dataclass
class _VcmUnit:
    """Grid-forming unit: shared frequency droop, per-leg magnitude droop."""

    droop: DroopParams
    offsets: tuple[float, ...]
    theta: float = 0.0
    omega: float = 0.0
    v_cmds: tuple[float, ...] = ()

    def __post_init__(self):
        self.omega = self.droop.w_nom
        self.v_cmds = tuple(self.droop.v_nom for _ in self.offsets)

    def control(self, p_total: float, q_legs: tuple[float, ...]):
        cmds = []
        for q in q_legs:
            w, v = conventional_droop_step(p_total, q, self.droop)
            cmds.append(v)
        self.omega = w
        self.v_cmds = tuple(cmds)

    def advance(self, dt: float):
        self.theta = (self.theta + self.omega * dt) % TWO_PI

    def emf(self, leg: int, ramp: float) -> float:
        return ramp * self.v_cmds[leg] * math.cos(self.theta + self.offsets[leg])


def _topology_params(cfg: ScenarioConfig) -> TopologyParams:
    v_rms = cfg.system.v_nominal_rms
    r3 = 3.0 * v_rms * v_rms / cfg.loads.three_phase_total_w
    mg2 = cfg.mg2
    return TopologyParams(
        three_phase_load_ohm=r3,
        single_phase_load_ohm=None if mg2 is None else mg2.load_ohm,
        pv3_filter_l=cfg.pv_three_phase.filter_l_mh * 1e-3,
        pv3_filter_c=cfg.pv_three_phase.filter_c_uf * 1e-6,
        pv3_feeder_r=cfg.pv_three_phase.feeder_r_ohm,
        pv3_feeder_l=cfg.pv_three_phase.feeder_l_mh * 1e-3,
        pv1_filter_l=(cfg.pv_single_phase.filter_l_mh * 1e-3
                      if cfg.pv_single_phase else 1.5e-3),
        pv1_filter_c=(cfg.pv_single_phase.filter_c_uf * 1e-6
                      if cfg.pv_single_phase else 100e-6),
        mg2_feeder_r=mg2.feeder_r_ohm if mg2 else 0.05,
        mg2_feeder_l=mg2.feeder_l_mh * 1e-3 if mg2 else 0.1e-3,
        ess_filter_l=cfg.ess.filter_l_mh * 1e-3 if cfg.ess else 1.5e-3,
        ess_filter_c=cfg.ess.filter_c_uf * 1e-6 if cfg.ess else 100e-6,
        has_single_phase_pv=cfg.pv_single_phase is not None,
        has_ess=cfg.ess is not None,
        ess_ideal_current=bool(cfg.ess and cfg.ess.stage == "ideal_current"),
    )


def _droop_params(rating_w, sag_f, sag_v, loading, omega0, v_peak, rated_var):
    dw_rated = sag_f * omega0
    return DroopParams(
        m_p=dw_rated / rating_w,
        n_q=sag_v * v_peak / rated_var,
        w_nom=omega0 + dw_rated * loading,
        v_nom=v_peak,
    )


def run_scenario(cfg: ScenarioConfig, audit: bool = False) -> SimulationTrace:
    """Simulate one scenario and return its trace.

    ``audit`` additionally runs per-step trapezoidal energy bookkeeping (for
    verification; it roughly doubles the cost) and stores the worst relative
    residual in the trace metadata.
    """
    dt = cfg.dt_plant_s
    n_sub = round(cfg.run.dt_control_us / cfg.run.dt_plant_us)
    dt_ctl = dt * n_sub
    n_steps = round(cfg.run.duration_s / dt)
    omega0 = cfg.system.omega
    v_peak = cfg.system.v_nominal_peak
    ramp_steps = max(1, round(cfg.run.startup_ramp_s / dt))

    net = build(default_topology(_topology_params(cfg)), dt)
    auditor = PowerAudit(net) if audit else None

    has_mg2 = cfg.mg2 is not None
    has_pv1 = cfg.pv_single_phase is not None
    has_ess = cfg.ess is not None

    # grid-forming units; bridge headroom of 2.5x nominal peak stands in for
    # the unspecified PV-side dc links
    p3 = cfg.pv_three_phase
    pv3 = _VcmUnit(
        droop=_droop_params(p3.rating_w, p3.freq_sag_at_rated_frac,
                            p3.volt_sag_at_rated_frac, p3.loading_at_w_ref,
                            omega0, v_peak, p3.rating_w / 3.0),
        offsets=(0.0, -TWO_PI / 3.0, TWO_PI / 3.0))
    pv3_invs = [AveragedInverter(mode="vcm", dc_link=2.5 * v_peak,
                                 source_name=f"src_3{ph}") for ph in "abc"]
    pv1 = None
    if has_pv1:
        p1 = cfg.pv_single_phase
        pv1 = _VcmUnit(
            droop=_droop_params(p1.rating_w, p1.freq_sag_at_rated_frac,
                                p1.volt_sag_at_rated_frac, p1.loading_at_w_ref,
                                omega0, v_peak, p1.rating_w),
            offsets=(0.0,))
        pv1_inv = AveragedInverter(mode="vcm", dc_link=2.5 * v_peak, source_name="src_1")

    # storage unit
    mrdc = None
    if has_ess:
        e = cfg.ess
        c = cfg.control
        mrdc_params = MrdcParams(
            n_r=c.n_r_si, m_r=c.m_r, d_r=c.d_r, c_r=c.c_r,
            w_ref=omega0, v_ref=e.v_ref_rms * math.sqrt(2.0), qs_sign=c.qs_sign,
            lpf_cutoff=TWO_PI * c.lpf_cutoff_hz, mag_cutoff=TWO_PI * c.magnitude_lpf_hz,
            ref_slew=c.ref_slew_a_per_s, undervoltage_floor=c.undervoltage_floor_frac,
            power_consistent=c.power_consistent)
        pr_params = PrParams(k_p=c.pr.k_p, omega_c=c.pr.omega_c_rad_s,
                             resonant_terms=tuple(zip(c.pr.resonant_harmonics,
                                                      c.pr.resonant_gains)),
                             omega_0=omega0)
        mrdc = MrdcState()
        pr_state = PrState()
        ideal_ess = e.stage == "ideal_current"
        ess_inv = AveragedInverter(
            mode="ccm" if ideal_ess else "vcm",
            dc_link=e.dc_link_v, source_name="src_ess",
            filter_l=e.filter_l_mh * 1e-3, filter_c=e.filter_c_uf * 1e-6,
            current_limit=(e.dc_link_v / (omega0 * e.filter_l_mh * 1e-3))
            if ideal_ess else math.inf)
        p_mppt = e.p_mppt_w
        forward_q = c.forward_q_ref_to_pv

    # measurement taps
    nn = net.node_index
    n_pcc = (nn("pcc_a"), nn("pcc_b"), nn("pcc_c"))
    n_t3 = (nn("t3a"), nn("t3b"), nn("t3c"))
    n_mg2 = nn("mg2") if has_mg2 else 0
    res_names = [b.name for b in net._res]
    i_fdr3 = [res_names.index(f"fdr3_r_{ph}") for ph in "abc"]
    i_fdr2 = res_names.index("fdr2_r") if has_mg2 else -1
    i_load1 = (res_names.index("load_1")
               if has_mg2 and cfg.mg2.load_ohm is not None else -1)
    il_pv1 = net.inductor_index("lf_1") if has_pv1 else -1
    il_ess = net.inductor_index("lf_ess") if has_ess else -1

    lpf_cut = TWO_PI * cfg.control.lpf_cutoff_hz
    met3 = [_Meter(lpf_cut, dt) for _ in range(3)]
    met1 = _Meter(lpf_cut, dt)
    met_ess = _Meter(lpf_cut, dt)
    met_fdr = _Meter(lpf_cut, dt)
    met_load1 = _Meter(lpf_cut, dt)
    sogi3 = [QsgState() for _ in range(3)]
    sogi_mg2 = QsgState()

    n_cycle = max(2, round(TWO_PI / omega0 / dt))
    sp_pcc = [SlidingPhasor(omega0, dt, n_cycle) for _ in range(3)]
    vuf_every = max(1, n_cycle // 8)

    # events by plant-step index
    events = [(min(n_steps - 1, round(ev.time_s / dt)), ev) for ev in cfg.events]
    mrdc_enabled = False

    decimate = cfg.outputs.decimate
    n_rec = n_steps // decimate
    rec = {name: np.zeros(n_rec) for name in CHANNELS}
    rec_t = np.zeros(n_rec)

    q_ref_fwd = 0.0
    vuf_now = 0.0
    i_ref = 0.0
    ess_cmd_i = 0.0
    v = net.v
    ev_ptr = 0

    for k in range(n_steps):
        while ev_ptr < len(events) and events[ev_ptr][0] == k:
            ev = events[ev_ptr][1]
            if ev.action == "enable_mrdc":
                mrdc_enabled = True
            elif ev.action == "disable_mrdc":
                mrdc_enabled = False
            elif ev.action == "load_step":
                name = "load_1" if ev.node == "mg2" else "load_3" + ev.node[-1]
                net.update_resistor(name, ev.ohms)
            elif ev.action == "set_p_mppt" and has_ess:
                p_mppt = ev.watts
            ev_ptr += 1

        ramp = min(1.0, (k + 1) / ramp_steps)

        # ---- controllers (control rate) ----
        if k % n_sub == 0:
            p_tot3 = met3[0].p + met3[1].p + met3[2].p
            pv3.control(p_tot3, tuple(m.q for m in met3))
            if pv1 is not None:
                q_in = met1.q - (q_ref_fwd if has_ess and forward_q else 0.0)
                pv1.control(met1.p, (q_in,))
            if mrdc is not None:
                meas = MrdcMeasurements(
                    v_s=v[n_mg2], i_s=net.i_ind[il_ess],
                    v_mag_a=sp_pcc[0].magnitude, v_mag_b=sp_pcc[1].magnitude,
                    v_mag_c=sp_pcc[2].magnitude,
                    p_mppt=p_mppt, p_load=met_load1.p)
                mrdc, i_ref = mrdc_step(meas, mrdc_params, mrdc, dt_ctl,
                                        enabled=mrdc_enabled)
                q_ref_fwd = mrdc.q_ref
                if ideal_ess:
                    ess_cmd_i = i_ref
                else:
                    pr_state, u_pr = pr_step(pr_state, i_ref - net.i_ind[il_ess],
                                             dt_ctl, pr_params)
                    ess_cmd_i = (u_pr + v[n_mg2]) / ess_inv.dc_link

        # ---- source commands (plant rate) ----
        pv3.advance(dt)
        for leg in range(3):
            inv = pv3_invs[leg]
            inverter_inject(net, inv, pv3.emf(leg, ramp) / inv.dc_link)
        if pv1 is not None:
            pv1.advance(dt)
            inverter_inject(net, pv1_inv, pv1.emf(0, ramp) / pv1_inv.dc_link)
        if mrdc is not None:
            inverter_inject(net, ess_inv, ess_cmd_i)

        v = net.step()
        if auditor is not None:
            auditor.record()

        # ---- measurements (plant rate) ----
        ir = net.resistor_currents()
        for leg in range(3):
            vt = v[n_t3[leg]]
            sogi3[leg] = qsg_step(sogi3[leg], vt, omega0, dt)
            met3[leg].update(vt, sogi3[leg].v_beta, ir[i_fdr3[leg]])
        pa = sp_pcc[0].update(v[n_pcc[0]])
        pb = sp_pcc[1].update(v[n_pcc[1]])
        pc = sp_pcc[2].update(v[n_pcc[2]])
        if has_mg2:
            vm = v[n_mg2]
            sogi_mg2 = qsg_step(sogi_mg2, vm, omega0, dt)
            vb = sogi_mg2.v_beta
            met_fdr.update(vm, vb, ir[i_fdr2])
            if i_load1 >= 0:
                met_load1.update(vm, vb, ir[i_load1])
            if pv1 is not None:
                met1.update(vm, vb, net.i_ind[il_pv1])
            if mrdc is not None:
                met_ess.update(vm, vb, net.i_ind[il_ess])

        if k % vuf_every == 0 and k >= n_cycle:
            zp = (pa + pb * _A120 + pc * _A240) / 3.0
            zn = (pa + pb * _A240 + pc * _A120) / 3.0
            mag_p = abs(zp)
            vuf_now = 100.0 * abs(zn) / mag_p if mag_p > 1e-9 else 0.0

        # ---- record ----
        if (k + 1) % decimate == 0:
            j = (k + 1) // decimate - 1
            rec_t[j] = (k + 1) * dt
            rec["v_pcc_a"][j] = v[n_pcc[0]]
            rec["v_pcc_b"][j] = v[n_pcc[1]]
            rec["v_pcc_c"][j] = v[n_pcc[2]]
            rec["v_mg2"][j] = v[n_mg2] if has_mg2 else 0.0
            rec["i_ess"][j] = net.i_ind[il_ess] if has_ess else 0.0
            rec["i_mg2_feeder"][j] = ir[i_fdr2] if has_mg2 else 0.0
            rec["v_mag_pcc_a"][j] = sp_pcc[0].magnitude
            rec["v_mag_pcc_b"][j] = sp_pcc[1].magnitude
            rec["v_mag_pcc_c"][j] = sp_pcc[2].magnitude
            rec["vuf_pcc"][j] = vuf_now
            rec["p_3ph"][j] = -(met3[0].p2 + met3[1].p2 + met3[2].p2)
            rec["q_3ph"][j] = -(met3[0].q2 + met3[1].q2 + met3[2].q2)
            rec["p_1ph"][j] = -met1.p2
            rec["q_1ph"][j] = -met1.q2
            rec["p_ess"][j] = -met_ess.p2
            rec["q_ess"][j] = -met_ess.q2
            rec["p_load_bus"][j] = met_fdr.p2
            rec["q_load_bus"][j] = met_fdr.q2
            rec["p_load1"][j] = met_load1.p2
            rec["w_island"][j] = pv3.omega
            rec["w_pll"][j] = mrdc.pll.omega_estimate if mrdc else 0.0
            rec["v_m_pll"][j] = mrdc.pll.magnitude_estimate if mrdc else 0.0
            rec["p_ref"][j] = mrdc.p_ref if mrdc else 0.0
            rec["q_ref"][j] = mrdc.q_ref if mrdc else 0.0
            rec["q_s"][j] = mrdc.q_s if mrdc else 0.0
            rec["q_vcc"][j] = mrdc.q_vcc if mrdc else 0.0
            rec["id_ref"][j] = mrdc.id_ref if mrdc else 0.0
            rec["iq_ref"][j] = mrdc.iq_ref if mrdc else 0.0
            rec["mrdc_on"][j] = 1.0 if mrdc_enabled else 0.0

    wanted = cfg.outputs.channels
    if "all" not in wanted:
        rec = {name: rec[name] for name in wanted}
    metadata = {
        "frequency_hz": repr(cfg.system.frequency_hz),
        "scenario_hash": cfg.hash(),
        "version": __version__,
        "dt_plant_us": repr(cfg.run.dt_plant_us),
    }
    if auditor is not None:
        metadata["max_power_residual"] = repr(auditor.max_residual)
    return SimulationTrace(time=rec_t, signals=rec, metadata=metadata)
