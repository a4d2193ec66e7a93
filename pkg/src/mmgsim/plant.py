"""Fixed-step electromagnetic-transient solver.

Nodal analysis with trapezoidal companion models: inductors and capacitors
become conductances (dt/2L, 2C/dt) in parallel with history current sources,
voltage sources pin their node, and the reduced conductance matrix is
factorized once per topology/timestep.  Averaged inverters are either ideal
voltage sources behind their filter inductor (voltage mode) or controlled
current injections at the filter node (current mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TopologyError(ValueError):
    """Network description cannot be assembled into a solvable system."""


class NumericFault(RuntimeError):
    """Simulation produced a non-finite value; carries the failing step index."""

    def __init__(self, step_index: int, where: str = "node voltage"):
        super().__init__(f"non-finite {where} at step {step_index}")
        self.step_index = step_index


BRANCH_KINDS = ("resistor", "inductor", "capacitor", "voltage_source", "current_source")


@dataclass(frozen=True, slots=True)
class Branch:
    kind: str
    n_from: int
    n_to: int
    value: float
    name: str

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise TopologyError(f"unknown branch kind {self.kind!r}")
        if self.kind in ("resistor", "inductor", "capacitor") and self.value <= 0.0:
            raise TopologyError(f"{self.name}: passive value must be > 0")


@dataclass(frozen=True, slots=True)
class NetworkDescription:
    """Node 0 is ground; ``node_names`` indexes the remaining nodes from 1."""

    node_names: tuple[str, ...]
    branches: tuple[Branch, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.node_names) + 1


class Network:
    """Assembled nodal system with per-branch trapezoidal history state."""

    def __init__(self, description: NetworkDescription, dt: float):
        if dt <= 0.0:
            raise ValueError("dt must be > 0")
        self.description = description
        self.dt = dt
        n = description.n_nodes
        self._name_to_node = {name: i + 1 for i, name in enumerate(description.node_names)}
        self._name_to_node["gnd"] = 0

        for br in description.branches:
            for node in (br.n_from, br.n_to):
                if not 0 <= node < n:
                    raise TopologyError(f"{br.name}: node {node} not declared")

        self._res = [b for b in description.branches if b.kind == "resistor"]
        self._ind = [b for b in description.branches if b.kind == "inductor"]
        self._cap = [b for b in description.branches if b.kind == "capacitor"]
        self._vsrc = [b for b in description.branches if b.kind == "voltage_source"]
        self._isrc = [b for b in description.branches if b.kind == "current_source"]

        for b in self._vsrc:
            if b.n_to != 0:
                raise TopologyError(f"{b.name}: voltage sources must return to ground")

        def idx(branches):
            return (np.array([b.n_from for b in branches], dtype=int),
                    np.array([b.n_to for b in branches], dtype=int))

        self._rf, self._rt = idx(self._res)
        self._lf, self._lt = idx(self._ind)
        self._cf, self._ct = idx(self._cap)
        self._if, self._it = idx(self._isrc)

        self.g_res = np.array([1.0 / b.value for b in self._res])
        self.g_ind = np.array([dt / (2.0 * b.value) for b in self._ind])
        self.g_cap = np.array([2.0 * b.value / dt for b in self._cap])

        self.hist_ind = np.zeros(len(self._ind))
        self.hist_cap = np.zeros(len(self._cap))
        self.i_ind = np.zeros(len(self._ind))
        self.i_cap = np.zeros(len(self._cap))
        self.v_source = np.zeros(len(self._vsrc))
        self.i_source = np.zeros(len(self._isrc))

        self._vsrc_nodes = np.array([b.n_from for b in self._vsrc], dtype=int)
        self._vsrc_index = {b.name: i for i, b in enumerate(self._vsrc)}
        self._isrc_index = {b.name: i for i, b in enumerate(self._isrc)}
        self._branch_by_name = {b.name: b for b in description.branches}
        if len(self._branch_by_name) != len(description.branches):
            raise TopologyError("branch names must be unique")

        self.v = np.zeros(n)
        self._last_rhs = np.zeros(n)
        self.step_count = 0
        self._check_connectivity()
        self._assemble()

        # history sources scatter into the rhs: inductor h flows from->to,
        # capacitor h flows to->from; realized as small matrix products
        def scatter_matrix(f_idx, t_idx, sign):
            m = np.zeros((n, len(f_idx)))
            for k in range(len(f_idx)):
                m[int(f_idx[k]), k] -= sign
                m[int(t_idx[k]), k] += sign
            return m

        self._scatter_l = scatter_matrix(self._lf, self._lt, 1.0)
        self._scatter_c = scatter_matrix(self._cf, self._ct, -1.0)
        self._scatter_i = scatter_matrix(self._if, self._it, 1.0)
        self._v_fixed = np.zeros(len(self._fixed))

    # -- assembly -----------------------------------------------------------

    def _check_connectivity(self):
        n = self.description.n_nodes
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            parent[find(a)] = find(b)

        for b in self._res + self._ind + self._cap + self._vsrc:
            union(b.n_from, b.n_to)
        grounded = {find(0)}
        for node in self._vsrc_nodes:
            grounded.add(find(int(node)))
        floating = [self.description.node_names[i - 1]
                    for i in range(1, n) if find(i) not in grounded]
        if floating:
            raise TopologyError("floating subnetwork, no path to ground: "
                                + ", ".join(floating))

    def _assemble(self):
        n = self.description.n_nodes
        g = np.zeros((n, n))
        for (f, t), gv in (((self._rf, self._rt), self.g_res),
                           ((self._lf, self._lt), self.g_ind),
                           ((self._cf, self._ct), self.g_cap)):
            for k in range(len(gv)):
                i, j = int(f[k]), int(t[k])
                g[i, i] += gv[k]
                g[j, j] += gv[k]
                g[i, j] -= gv[k]
                g[j, i] -= gv[k]
        fixed = [0] + [int(x) for x in self._vsrc_nodes]
        free = [i for i in range(n) if i not in fixed]
        self._free = np.array(free, dtype=int)
        self._fixed = np.array(fixed, dtype=int)
        g_ff = g[np.ix_(free, free)]
        try:
            self._g_ff_inv = np.linalg.inv(g_ff)
        except np.linalg.LinAlgError as exc:
            raise TopologyError(f"singular nodal matrix: {exc}") from exc
        self._g_fx = g[np.ix_(free, fixed)]
        self._g_full = g

    # -- public surface ------------------------------------------------------

    def node_index(self, name: str) -> int:
        return self._name_to_node[name]

    def set_voltage_source(self, name: str, volts: float):
        self.v_source[self._vsrc_index[name]] = volts

    def set_current_source(self, name: str, amps: float):
        self.i_source[self._isrc_index[name]] = amps

    def inductor_index(self, name: str) -> int:
        return [b.name for b in self._ind].index(name)

    def update_resistor(self, name: str, ohms: float):
        """Change a resistor value and refactorize; branch states persist."""
        if ohms <= 0.0:
            raise TopologyError(f"{name}: resistance must be > 0")
        k = [b.name for b in self._res].index(name)
        self.g_res[k] = 1.0 / ohms
        self._assemble()

    def step(self, source_commands: dict[str, float] | None = None,
             dt: float | None = None) -> np.ndarray:
        """Advance one timestep; returns the node-voltage vector (index 0 is
        ground).  ``source_commands`` maps source branch names to values."""
        if dt is not None and dt != self.dt:
            raise ValueError("timestep is fixed at build; rebuild to change dt")
        if source_commands:
            for name, val in source_commands.items():
                if name in self._vsrc_index:
                    self.set_voltage_source(name, val)
                elif name in self._isrc_index:
                    self.set_current_source(name, val)
                else:
                    raise KeyError(f"unknown source {name!r}")

        rhs = (self._scatter_l @ self.hist_ind
               + self._scatter_c @ self.hist_cap
               + self._scatter_i @ self.i_source)
        self._last_rhs = rhs

        v_fixed = self._v_fixed
        v_fixed[1:] = self.v_source
        v_free = self._g_ff_inv @ (rhs[self._free] - self._g_fx @ v_fixed)
        if not np.all(np.isfinite(v_free)):
            raise NumericFault(self.step_count)
        self.v[self._free] = v_free
        self.v[self._fixed] = v_fixed

        v_l = self.v[self._lf] - self.v[self._lt]
        self.i_ind = self.g_ind * v_l + self.hist_ind
        self.hist_ind = self.i_ind + self.g_ind * v_l
        v_c = self.v[self._cf] - self.v[self._ct]
        self.i_cap = self.g_cap * v_c - self.hist_cap
        self.hist_cap = self.i_cap + self.g_cap * v_c

        self.step_count += 1
        return self.v

    def source_currents(self) -> np.ndarray:
        """Current delivered by each voltage source (into the network), from
        KCL at its node using the history vector of the last solve."""
        out = np.zeros(len(self._vsrc))
        if self.step_count == 0:
            return out
        flow = self._g_full @ self.v - self._last_rhs
        for k, node in enumerate(self._vsrc_nodes):
            out[k] = flow[int(node)]
        return out

    def resistor_currents(self) -> np.ndarray:
        return self.g_res * (self.v[self._rf] - self.v[self._rt])


def build(description: NetworkDescription, dt: float) -> Network:
    """Assemble and factorize the nodal system for a fixed timestep."""
    return Network(description, dt)


@dataclass(slots=True)
class AveragedInverter:
    """Averaged power stage: a modulated voltage bridge (voltage mode) or a
    controlled current injection at the filter node (current mode)."""

    mode: str                      # "vcm" or "ccm"
    dc_link: float
    source_name: str
    modulation_limit: float = 1.0
    filter_l: float = 1.5e-3
    filter_c: float = 100e-6
    current_limit: float = math.inf
    saturated: bool = field(default=False)

    def __post_init__(self):
        if self.mode not in ("vcm", "ccm"):
            raise ValueError("mode must be 'vcm' or 'ccm'")


def inverter_inject(net: Network, inv: AveragedInverter, command: float) -> bool:
    """Apply a command to an inverter's source branch.

    Voltage mode: ``command`` is a modulation index; the branch voltage is
    ``clamp(command) * dc_link`` so the output can never exceed the dc link.
    Current mode: ``command`` is amps, clamped at ``current_limit``.
    Returns (and latches on the inverter) whether the command saturated.
    """
    if not math.isfinite(command):
        raise NumericFault(net.step_count, f"command for {inv.source_name}")
    if inv.mode == "vcm":
        m = min(max(command, -inv.modulation_limit), inv.modulation_limit)
        net.set_voltage_source(inv.source_name, m * inv.dc_link)
        sat = m != command
    else:
        i = min(max(command, -inv.current_limit), inv.current_limit)
        net.set_current_source(inv.source_name, i)
        sat = i != command
    inv.saturated = sat
    return sat


@dataclass(frozen=True, slots=True)
class TopologyParams:
    """Everything needed to lay out the default two-microgrid network."""

    three_phase_load_ohm: float
    single_phase_load_ohm: float | None = 20.0
    pv3_filter_l: float = 1.5e-3
    pv3_filter_c: float = 100e-6
    pv3_feeder_r: float = 0.1
    pv3_feeder_l: float = 0.6e-3
    pv1_filter_l: float = 1.5e-3
    pv1_filter_c: float = 100e-6
    mg2_feeder_r: float = 0.05
    mg2_feeder_l: float = 0.1e-3
    ess_filter_l: float = 1.5e-3
    ess_filter_c: float = 100e-6
    has_single_phase_pv: bool = True
    has_ess: bool = True
    ess_ideal_current: bool = False


def default_topology(params: TopologyParams) -> NetworkDescription:
    """Two coupled microgrids: a three-phase grid-forming PV unit feeding the
    PCC through per-phase LC filters and a short feeder, with the single-phase
    microgrid (PV unit, resistive load, storage inverter) hung on phase a.

    Phase legs use ideal bridge sources behind the filter inductor; the
    storage bridge is the same unless ``ess_ideal_current`` asks for the
    contracted ideal-injection form.
    """
    nodes: list[str] = []
    branches: list[Branch] = []

    def add_node(name: str) -> int:
        nodes.append(name)
        return len(nodes)

    def add(kind, f, t, value, name):
        branches.append(Branch(kind, f, t, value, name))

    pcc = {}
    for ph in "abc":
        e = add_node(f"e3{ph}")
        t3 = add_node(f"t3{ph}")
        fm = add_node(f"f3{ph}")
        p = add_node(f"pcc_{ph}")
        pcc[ph] = p
        add("voltage_source", e, 0, 0.0, f"src_3{ph}")
        add("inductor", e, t3, params.pv3_filter_l, f"lf_3{ph}")
        add("capacitor", t3, 0, params.pv3_filter_c, f"cf_3{ph}")
        add("resistor", t3, fm, params.pv3_feeder_r, f"fdr3_r_{ph}")
        add("inductor", fm, p, params.pv3_feeder_l, f"fdr3_l_{ph}")
        add("resistor", p, 0, params.three_phase_load_ohm, f"load_3{ph}")

    needs_mg2 = (params.has_single_phase_pv or params.has_ess
                 or params.single_phase_load_ohm is not None)
    if needs_mg2:
        m2f = add_node("m2f")
        mg2 = add_node("mg2")
        add("resistor", pcc["a"], m2f, params.mg2_feeder_r, "fdr2_r")
        add("inductor", m2f, mg2, params.mg2_feeder_l, "fdr2_l")
        if params.single_phase_load_ohm is not None:
            add("resistor", mg2, 0, params.single_phase_load_ohm, "load_1")
        if params.has_single_phase_pv:
            e1 = add_node("e1")
            add("voltage_source", e1, 0, 0.0, "src_1")
            add("inductor", e1, mg2, params.pv1_filter_l, "lf_1")
            add("capacitor", mg2, 0, params.pv1_filter_c, "cf_1")
        if params.has_ess:
            if params.ess_ideal_current:
                essn = add_node("essn")
                add("current_source", 0, essn, 0.0, "src_ess")
                add("capacitor", essn, 0, params.ess_filter_c, "cf_ess")
                add("inductor", essn, mg2, params.ess_filter_l, "lf_ess")
            else:
                eess = add_node("eess")
                add("voltage_source", eess, 0, 0.0, "src_ess")
                add("inductor", eess, mg2, params.ess_filter_l, "lf_ess")
                add("capacitor", mg2, 0, params.ess_filter_c, "cf_ess")

    return NetworkDescription(tuple(nodes), tuple(branches))


class PowerAudit:
    """Per-step trapezoidal energy bookkeeping.

    All products use midpoint averages of consecutive solves, which is the
    convention under which the trapezoidal companions conserve energy exactly;
    the residual then measures only assembly/KCL consistency.
    """

    def __init__(self, net: Network):
        self.net = net
        self._prev = None
        self.max_residual = 0.0

    def snapshot(self):
        n = self.net
        return (n.v.copy(), n.i_ind.copy(), n.i_cap.copy(),
                n.source_currents(), n.i_source.copy(), n.resistor_currents())

    def record(self):
        """Call after each step; compares against the previous snapshot."""
        cur = self.snapshot()
        if self._prev is not None:
            n = self.net
            v0, il0, ic0, is0, ii0, ir0 = self._prev
            v1, il1, ic1, is1, ii1, ir1 = cur
            vm = 0.5 * (v0 + v1)

            p_vsrc = float(np.sum(vm[n._vsrc_nodes] * 0.5 * (is0 + is1)))
            du_i = vm[n._it] - vm[n._if]
            p_isrc = float(np.sum(du_i * 0.5 * (ii0 + ii1)))

            vr = vm[n._rf] - vm[n._rt]
            p_res = float(np.sum(vr * 0.5 * (ir0 + ir1)))
            vl = vm[n._lf] - vm[n._lt]
            p_ind = float(np.sum(vl * 0.5 * (il0 + il1)))
            vc = vm[n._cf] - vm[n._ct]
            p_cap = float(np.sum(vc * 0.5 * (ic0 + ic1)))

            injected = p_vsrc + p_isrc
            residual = injected - (p_res + p_ind + p_cap)
            scale = max(abs(injected), 1.0)
            self.max_residual = max(self.max_residual, abs(residual) / scale)
        self._prev = cur
