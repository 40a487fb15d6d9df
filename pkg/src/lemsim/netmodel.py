"""Distribution feeder model: topology, impedances, phases, DERs, switches, zones.

The feeder is described by a sectioned plain-text document (see ``load_feeder``)
carrying physical units (kW, kvar, ohm, amp, kV).  After loading, all electrical
quantities are normalized to per-unit on the declared bases and the model is
immutable: downstream code (markets, solvers, reconfiguration) shares it
read-only across workers.

Per-unit conventions used throughout the package:

* ``s_base_kva`` is the three-phase power base.  Balanced single-phase
  equivalents use ``P_pu = P_kw / s_base_kva``; phase-resolved models use
  ``P_pu = P_phase_kw / (s_base_kva / 3)``.
* The impedance base is ``kv_primary**2 * 1000 / s_base_kva`` ohm, which is
  identical for the line-to-line three-phase basis and the per-phase
  line-to-neutral basis, so one ``z_pu`` serves both model flavours.
* Injections are signed positive for generation and negative for load,
  everywhere.  Net imports at the PCC are therefore negative injections.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

PHASES = ("a", "b", "c")

DER_KINDS = ("PV", "battery", "diesel", "EV", "HVAC", "WH", "microgrid")

# Closed switches enter the admittance/power-flow models as short jumpers.
SWITCH_R_PU = 1e-4
SWITCH_X_PU = 1e-4

DEFAULT_CRITICAL_FRACTION = 0.25


class FeederFormatError(ValueError):
    """Raised when a feeder document violates the format or its invariants."""


@dataclass(frozen=True)
class DerRecord:
    kind: str
    cap_kw: float
    cap_kvar: float
    dispatchable: bool = True
    islanded_only: bool = False


@dataclass(frozen=True)
class NodeRecord:
    id: str
    phases: tuple[str, ...]
    role: str  # PCC | PMA-node | SMA-node
    zone: int
    critical_fraction: float
    load_kw: dict[str, float]
    load_kvar: dict[str, float]
    shunt_kvar: dict[str, float] = field(default_factory=dict)
    ders: tuple[DerRecord, ...] = ()

    @property
    def total_load_kw(self) -> float:
        return sum(self.load_kw.values())

    @property
    def total_load_kvar(self) -> float:
        return sum(self.load_kvar.values())

    @property
    def der_cap_kw(self) -> float:
        return sum(d.cap_kw for d in self.ders)

    @property
    def is_smo_site(self) -> bool:
        """Active market site: carries load or a grid-connected DER."""
        return self.role != "PCC" and (
            self.total_load_kw != 0.0
            or self.total_load_kvar != 0.0
            or any(not d.islanded_only for d in self.ders)
        )


@dataclass(frozen=True)
class BranchRecord:
    from_node: str
    to_node: str
    phases: tuple[str, ...]
    r_pu: float      # per-phase self resistance
    x_pu: float      # per-phase self reactance
    rm_pu: float     # mutual resistance between present phases
    xm_pu: float     # mutual reactance
    ampacity_pu: float | None  # max current magnitude per phase; None = unrated
    b_shunt_pu: float = 0.0

    def z_self(self) -> complex:
        return complex(self.r_pu, self.x_pu)

    def z_mutual(self) -> complex:
        return complex(self.rm_pu, self.xm_pu)

    def z_sequence(self) -> complex:
        """Positive-sequence impedance of the transposed equivalent."""
        return self.z_self() - self.z_mutual()

    def z_matrix(self) -> np.ndarray:
        """Phase impedance matrix over this branch's present phases."""
        n = len(self.phases)
        z = np.full((n, n), self.z_mutual(), dtype=complex)
        np.fill_diagonal(z, self.z_self())
        return z


@dataclass(frozen=True)
class SwitchRecord:
    from_node: str
    to_node: str
    status: str  # OPEN | CLOSED
    normally_closed: bool

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_node, self.to_node)


@dataclass(frozen=True)
class FeederModel:
    name: str
    s_base_kva: float
    kv_levels: dict[str, float]  # substation / primary / secondary
    pcc_node: str
    nodes: tuple[NodeRecord, ...]
    branches: tuple[BranchRecord, ...]
    switches: tuple[SwitchRecord, ...]
    balanced: bool = False

    def node(self, node_id: str) -> NodeRecord:
        return self._node_map[node_id]

    @property
    def _node_map(self) -> dict[str, NodeRecord]:
        obj = object.__getattribute__(self, "__dict__")
        if "_node_cache" not in obj:
            obj["_node_cache"] = {n.id: n for n in self.nodes}
        return obj["_node_cache"]

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def switch(self, a: str, b: str) -> SwitchRecord:
        for s in self.switches:
            if {s.from_node, s.to_node} == {a, b}:
                return s
        raise KeyError(f"no switch between {a} and {b}")

    def switch_states(self, overrides: dict[tuple[str, str], str] | None = None) -> dict[tuple[str, str], str]:
        """Effective switch status map after applying overrides."""
        states = {s.key: s.status for s in self.switches}
        for key, status in (overrides or {}).items():
            norm = self._normalize_switch_key(key)
            if status not in ("OPEN", "CLOSED"):
                raise FeederFormatError(f"bad switch status {status!r}")
            states[norm] = status
        return states

    def _normalize_switch_key(self, key: tuple[str, str]) -> tuple[str, str]:
        a, b = key
        for s in self.switches:
            if {s.from_node, s.to_node} == {a, b}:
                return s.key
        raise FeederFormatError(f"override references unknown switch {a}-{b}")

    def with_switch_states(self, overrides: dict[tuple[str, str], str]) -> "FeederModel":
        states = self.switch_states(overrides)
        new_switches = tuple(replace(s, status=states[s.key]) for s in self.switches)
        return replace(self, switches=new_switches)

    def closed_edges(self, overrides: dict[tuple[str, str], str] | None = None) -> list[tuple[str, str]]:
        """All conducting edges: branches plus closed switches."""
        states = self.switch_states(overrides)
        edges = [(b.from_node, b.to_node) for b in self.branches]
        edges += [k for k, status in states.items() if status == "CLOSED"]
        return edges

    @property
    def total_load_kw(self) -> float:
        return sum(n.total_load_kw for n in self.nodes)

    @property
    def total_load_kvar(self) -> float:
        return sum(n.total_load_kvar for n in self.nodes)

    def kw_to_pu(self, kw: float, per_phase: bool = False) -> float:
        base = self.s_base_kva / 3.0 if per_phase else self.s_base_kva
        return kw / base

    def pu_to_kw(self, pu: float, per_phase: bool = False) -> float:
        base = self.s_base_kva / 3.0 if per_phase else self.s_base_kva
        return pu * base


# ---------------------------------------------------------------------------
# document parsing


def _parse_phase_values(token: str, phases: tuple[str, ...]) -> dict[str, float]:
    """Parse 'a:b:c' colon values or a single scalar spread over phases."""
    parts = token.split(":")
    if len(parts) == 1:
        val = float(parts[0])
        return {p: val for p in phases}
    if len(parts) != 3:
        raise FeederFormatError(f"expected 1 or 3 phase values, got {token!r}")
    vals = dict(zip(PHASES, (float(v) for v in parts)))
    for p, v in vals.items():
        if p not in phases and v != 0.0:
            raise FeederFormatError(f"value on undeclared phase {p!r}: {token!r}")
    return {p: vals[p] for p in phases}


def _parse_kv(field_str: str) -> bool:
    return field_str.strip().lower() in ("yes", "true", "1")


def load_feeder(path_or_text) -> FeederModel:
    """Parse a feeder description document and build a per-unit FeederModel.

    The document has sections ``[base]``, ``[nodes]``, ``[branches]``,
    ``[switches]`` and ``[ders]``; ``#`` starts a comment.  Branch impedances
    are given in ohm and converted to per-unit on the primary voltage base.
    Raises FeederFormatError on malformed input, dangling endpoints, duplicate
    ids, or nonpositive bases.
    """
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
    else:
        text = str(path_or_text)
        if "\n" not in text and not text.lstrip().startswith("["):
            with open(text, "r", encoding="utf-8") as fh:
                text = fh.read()

    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise FeederFormatError(f"content before first section: {line!r}")
        sections[current].append(line)

    for required in ("base", "nodes", "branches"):
        if required not in sections:
            raise FeederFormatError(f"missing [{required}] section")

    base: dict[str, str] = {}
    for line in sections["base"]:
        if "=" not in line:
            raise FeederFormatError(f"bad base line {line!r}")
        k, v = line.split("=", 1)
        base[k.strip()] = v.strip()

    try:
        s_base = float(base["power_kva"])
        kv_primary = float(base["voltage_kv"])
    except KeyError as exc:
        raise FeederFormatError(f"missing base field {exc}") from exc
    if s_base <= 0 or kv_primary <= 0:
        raise FeederFormatError("nonpositive base")
    kv_levels = {
        "substation": float(base.get("voltage_kv_substation", kv_primary)),
        "primary": kv_primary,
        "secondary": float(base.get("voltage_kv_secondary", 0.24)),
    }
    pcc = base.get("pcc")
    if pcc is None:
        raise FeederFormatError("missing pcc node id in [base]")
    z_base = kv_primary**2 * 1000.0 / s_base  # ohm
    i_base = s_base / (math.sqrt(3.0) * kv_primary)  # amp

    nodes: list[NodeRecord] = []
    seen: set[str] = set()
    for line in sections["nodes"]:
        toks = line.split()
        if len(toks) < 7:
            raise FeederFormatError(f"bad node line {line!r}")
        nid, phases_s, role, zone_s, crit_s, p_s, q_s = toks[:7]
        if nid in seen:
            raise FeederFormatError(f"duplicate id {nid!r}")
        seen.add(nid)
        phases = tuple(p for p in PHASES if p in phases_s)
        if not phases:
            raise FeederFormatError(f"node {nid}: no phases declared")
        if role not in ("PCC", "PMA-node", "SMA-node"):
            raise FeederFormatError(f"node {nid}: bad role {role!r}")
        crit = DEFAULT_CRITICAL_FRACTION if crit_s == "-" else float(crit_s)
        if not 0.0 <= crit <= 1.0:
            raise FeederFormatError(f"node {nid}: critical_fraction {crit} outside [0,1]")
        shunt: dict[str, float] = {}
        for extra in toks[7:]:
            if extra.startswith("shunt_kvar="):
                shunt = _parse_phase_values(extra.split("=", 1)[1], phases)
            else:
                raise FeederFormatError(f"node {nid}: unknown field {extra!r}")
        nodes.append(
            NodeRecord(
                id=nid,
                phases=phases,
                role=role,
                zone=int(zone_s),
                critical_fraction=crit,
                load_kw=_parse_phase_values(p_s, phases),
                load_kvar=_parse_phase_values(q_s, phases),
                shunt_kvar=shunt,
            )
        )
    node_ids = {n.id for n in nodes}
    if pcc not in node_ids:
        raise FeederFormatError(f"pcc node {pcc!r} not declared")

    branches: list[BranchRecord] = []
    for line in sections["branches"]:
        toks = line.split()
        if len(toks) < 4:
            raise FeederFormatError(f"bad branch line {line!r}")
        f, t = toks[0], toks[1]
        for end in (f, t):
            if end not in node_ids:
                raise FeederFormatError(f"dangling endpoint {end!r} in branch {f}-{t}")
        kv = {}
        for tok in toks[2:]:
            if "=" not in tok:
                raise FeederFormatError(f"bad branch field {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        r_ohm = float(kv.get("r", "0"))
        x_ohm = float(kv.get("x", "0"))
        rm_ohm = float(kv.get("rm", "0"))
        xm_ohm = float(kv.get("xm", "0"))
        amp = kv.get("ampacity_a")
        phases = tuple(p for p in PHASES if p in kv.get("phases", "abc"))
        common = tuple(
            p for p in phases
            if p in dict.fromkeys(tuple(next(n for n in nodes if n.id == f).phases))
            and p in next(n for n in nodes if n.id == t).phases
        )
        if not common:
            raise FeederFormatError(f"branch {f}-{t}: no common phase with endpoints")
        ampacity_pu = None if amp is None else float(amp) / i_base
        if ampacity_pu is not None and ampacity_pu <= 0:
            raise FeederFormatError(f"branch {f}-{t}: nonpositive ampacity")
        branches.append(
            BranchRecord(
                from_node=f,
                to_node=t,
                phases=common,
                r_pu=r_ohm / z_base,
                x_pu=x_ohm / z_base,
                rm_pu=rm_ohm / z_base,
                xm_pu=xm_ohm / z_base,
                ampacity_pu=ampacity_pu,
                b_shunt_pu=float(kv.get("b_shunt", "0")) * z_base,
            )
        )

    switches: list[SwitchRecord] = []
    for line in sections.get("switches", []):
        toks = line.split()
        if len(toks) != 4:
            raise FeederFormatError(f"bad switch line {line!r}")
        f, t, status, nc = toks
        for end in (f, t):
            if end not in node_ids:
                raise FeederFormatError(f"dangling endpoint {end!r} in switch {f}-{t}")
        if status not in ("OPEN", "CLOSED"):
            raise FeederFormatError(f"switch {f}-{t}: bad status {status!r}")
        switches.append(SwitchRecord(f, t, status, _parse_kv(nc)))

    ders: dict[str, list[DerRecord]] = {}
    for line in sections.get("ders", []):
        toks = line.split()
        if len(toks) < 4:
            raise FeederFormatError(f"bad der line {line!r}")
        nid, kind, cap_kw_s, cap_kvar_s = toks[:4]
        if nid not in node_ids:
            raise FeederFormatError(f"der references unknown node {nid!r}")
        if kind not in DER_KINDS:
            raise FeederFormatError(f"unknown der kind {kind!r}")
        cap_kw = float(cap_kw_s)
        cap_kvar = float(cap_kvar_s)
        if cap_kw < 0 or cap_kvar < 0:
            raise FeederFormatError(f"der at {nid}: negative capacity")
        dispatchable = True
        islanded_only = False
        for extra in toks[4:]:
            if extra.startswith("dispatchable="):
                dispatchable = _parse_kv(extra.split("=", 1)[1])
            elif extra.startswith("islanded_only="):
                islanded_only = _parse_kv(extra.split("=", 1)[1])
            else:
                raise FeederFormatError(f"der at {nid}: unknown field {extra!r}")
        ders.setdefault(nid, []).append(
            DerRecord(kind, cap_kw, cap_kvar, dispatchable, islanded_only)
        )

    nodes = [replace(n, ders=tuple(ders.get(n.id, ()))) for n in nodes]

    model = FeederModel(
        name=base.get("name", "feeder"),
        s_base_kva=s_base,
        kv_levels=kv_levels,
        pcc_node=pcc,
        nodes=tuple(nodes),
        branches=tuple(branches),
        switches=tuple(switches),
        balanced=all(len(n.phases) == 1 for n in nodes),
    )
    _check_connectivity(model)
    return model


def _check_connectivity(model: FeederModel) -> None:
    """BFS from the PCC over branches plus normally-closed switches."""
    overrides = {
        s.key: ("CLOSED" if s.normally_closed else "OPEN") for s in model.switches
    }
    adj: dict[str, list[str]] = {n.id: [] for n in model.nodes}
    for f, t in model.closed_edges(overrides):
        adj[f].append(t)
        adj[t].append(f)
    seen = {model.pcc_node}
    stack = [model.pcc_node]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    missing = set(model.node_ids) - seen
    if missing:
        raise FeederFormatError(
            f"nodes unreachable from PCC with normally-closed switches: {sorted(missing)[:5]}"
        )


# ---------------------------------------------------------------------------
# balanced single-phase conversion


def to_balanced_single_phase(model: FeederModel) -> FeederModel:
    """Collapse a multi-phase model to one balanced equivalent phase per element.

    Spot loads are summed across phases (total P and Q conserved exactly),
    branch impedances are replaced by their transposed positive-sequence
    equivalents, shunt capacitors become reactive generation offsets, and
    switches are reset to their normal positions.
    """
    if model.balanced:
        return model
    new_nodes = []
    for n in model.nodes:
        p_tot = sum(n.load_kw.values())
        q_tot = sum(n.load_kvar.values())
        shunt_tot = sum(n.shunt_kvar.values())
        # capacitors act as reactive generators: negative reactive load
        q_tot -= shunt_tot
        new_nodes.append(
            replace(
                n,
                phases=("a",),
                load_kw={"a": p_tot},
                load_kvar={"a": q_tot},
                shunt_kvar={},
            )
        )
    new_branches = []
    for b in model.branches:
        zseq = b.z_sequence()
        amp = None
        if b.ampacity_pu is not None:
            amp = b.ampacity_pu * len(b.phases)
        new_branches.append(
            replace(
                b,
                phases=("a",),
                r_pu=zseq.real,
                x_pu=zseq.imag,
                rm_pu=0.0,
                xm_pu=0.0,
                ampacity_pu=amp,
            )
        )
    new_switches = tuple(
        replace(s, status="CLOSED" if s.normally_closed else "OPEN")
        for s in model.switches
    )
    return replace(
        model,
        nodes=tuple(new_nodes),
        branches=tuple(new_branches),
        switches=new_switches,
        balanced=True,
    )


# ---------------------------------------------------------------------------
# admittance assembly


def phase_index(model: FeederModel) -> dict[tuple[str, str], int]:
    """Stable index over (node, phase) pairs in node declaration order."""
    idx: dict[tuple[str, str], int] = {}
    for n in model.nodes:
        for p in n.phases:
            idx[(n.id, p)] = len(idx)
    return idx


def admittance(
    model: FeederModel,
    switch_overrides: dict[tuple[str, str], str] | None = None,
) -> np.ndarray:
    """Complex nodal admittance matrix over (node, phase) indices.

    Open switches contribute no coupling; closed switches enter as short
    jumpers of impedance ``SWITCH_R_PU + j SWITCH_X_PU`` per phase.  The
    matrix is symmetric, and with zero shunt terms every row sums to zero.
    """
    idx = phase_index(model)
    n = len(idx)
    Y = np.zeros((n, n), dtype=complex)

    def stamp(f: str, t: str, zmat: np.ndarray, phases: tuple[str, ...], b_shunt: float) -> None:
        ymat = np.linalg.inv(zmat)
        for i, pi in enumerate(phases):
            fi, ti = idx[(f, pi)], idx[(t, pi)]
            for j, pj in enumerate(phases):
                fj, tj = idx[(f, pj)], idx[(t, pj)]
                Y[fi, fj] += ymat[i, j]
                Y[ti, tj] += ymat[i, j]
                Y[fi, tj] -= ymat[i, j]
                Y[ti, fj] -= ymat[i, j]
        if b_shunt:
            for pi in phases:
                Y[idx[(f, pi)], idx[(f, pi)]] += 1j * b_shunt / 2.0
                Y[idx[(t, pi)], idx[(t, pi)]] += 1j * b_shunt / 2.0

    for b in model.branches:
        stamp(b.from_node, b.to_node, b.z_matrix(), b.phases, b.b_shunt_pu)

    states = model.switch_states(switch_overrides)
    z_sw = complex(SWITCH_R_PU, SWITCH_X_PU)
    for s in model.switches:
        if states[s.key] != "CLOSED":
            continue
        f, t = s.key
        common = tuple(p for p in model.node(f).phases if p in model.node(t).phases)
        zmat = np.diag([z_sw] * len(common))
        stamp(f, t, zmat, common, 0.0)
    return Y


def export_admittance_csv(model: FeederModel, path: str, switch_overrides=None) -> None:
    """Dump nonzero Y entries as CSV for debugging."""
    idx = phase_index(model)
    names = [f"{nid}.{ph}" for (nid, ph) in idx]
    Y = admittance(model, switch_overrides)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "g", "b"])
        for i in range(Y.shape[0]):
            for j in range(Y.shape[1]):
                if Y[i, j] != 0:
                    w.writerow([names[i], names[j], repr(Y[i, j].real), repr(Y[i, j].imag)])


def export_adjacency_csv(model: FeederModel, path: str, switch_overrides=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "kind"])
        for b in model.branches:
            w.writerow([b.from_node, b.to_node, "branch"])
        for key, status in model.switch_states(switch_overrides).items():
            if status == "CLOSED":
                w.writerow([key[0], key[1], "switch"])


# ---------------------------------------------------------------------------
# tree utilities shared by the power-flow and program builders


def radial_tree(
    model: FeederModel,
    root: str | None = None,
    switch_overrides: dict[tuple[str, str], str] | None = None,
    subset: set[str] | None = None,
) -> tuple[list[str], dict[str, str], dict[str, object]]:
    """Orient the conducting graph as a tree rooted at the PCC (or ``root``).

    Returns (ordering, parent map, parent-edge map) where ordering is a BFS
    order from the root and the parent-edge map value is either a
    BranchRecord or a SwitchRecord.  Raises if the conducting subgraph
    spanning ``subset`` is not a tree (non-radial).
    """
    root = root or model.pcc_node
    states = model.switch_states(switch_overrides)
    edges: list[tuple[str, str, object]] = [
        (b.from_node, b.to_node, b) for b in model.branches
    ]
    for s in model.switches:
        if states[s.key] == "CLOSED":
            edges.append((s.from_node, s.to_node, s))
    adj: dict[str, list[tuple[str, object]]] = {}
    for f, t, rec in edges:
        if subset is not None and (f not in subset or t not in subset):
            continue
        adj.setdefault(f, []).append((t, rec))
        adj.setdefault(t, []).append((f, rec))

    order = [root]
    parent: dict[str, str] = {}
    parent_edge: dict[str, object] = {}
    seen = {root}
    qi = 0
    edge_count = 0
    while qi < len(order):
        cur = order[qi]
        qi += 1
        for nxt, rec in sorted(adj.get(cur, []), key=lambda e: e[0]):
            if nxt in seen:
                continue
            seen.add(nxt)
            parent[nxt] = cur
            parent_edge[nxt] = rec
            order.append(nxt)
            edge_count += 1
    reachable_edges = sum(
        1 for f, t, _ in edges
        if f in seen and t in seen
        and (subset is None or (f in subset and t in subset))
    )
    if reachable_edges != edge_count:
        raise ValueError("conducting subgraph is not radial (contains a loop)")
    return order, parent, parent_edge


def edge_impedance(rec: object) -> complex:
    """Balanced equivalent series impedance of a branch or closed switch."""
    if isinstance(rec, BranchRecord):
        return rec.z_sequence() if len(rec.phases) > 1 else rec.z_self()
    return complex(SWITCH_R_PU, SWITCH_X_PU)


def edge_ampacity(rec: object) -> float | None:
    if isinstance(rec, BranchRecord):
        return rec.ampacity_pu
    return None


def nominal_phasor(phase: str) -> complex:
    """Nominal 1 p.u. phasor for a phase (a at 0, b at -120, c at +120 deg)."""
    ang = {"a": 0.0, "b": -2.0 * math.pi / 3.0, "c": 2.0 * math.pi / 3.0}[phase]
    return cmath.exp(1j * ang)
