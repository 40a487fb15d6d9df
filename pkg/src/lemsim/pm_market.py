"""Primary-market OPF formulation.

Builds the two convex program flavours used to clear the primary market:

* a branch-flow second-order-cone relaxation for balanced radial feeders, and
* a three-phase current-injection model whose bilinear voltage-current
  products are replaced by their convex (four-inequality) envelopes over
  preprocessed component boxes.

Both emit :class:`lemsim.programs.ConvexProgram` instances; solving is
delegated to :mod:`lemsim.distopt`.  Prices come back out of the converged
duals of the nodal balance rows (``extract_dlmp``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import (
    BranchRecord,
    FeederModel,
    SWITCH_R_PU,
    SWITCH_X_PU,
    nominal_phasor,
    radial_tree,
)
from .programs import ConeBlock, ConvexProgram, ProgramBuilder

BIG = 50.0  # generous p.u. cap for otherwise unbounded market variables
DEFAULT_V_BAND = 0.05
DEFAULT_XI = 1.0
BOUND_INFLATION = 1.02  # safety inflation applied to swept voltage radii


class PmInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class PmBid:
    """SMO flexibility bid into the primary market, per-unit, net injection."""

    node: str
    P0: float
    Q0: float
    P_lo: float
    P_hi: float
    Q_lo: float
    Q_hi: float
    alpha_P: float
    alpha_Q: float
    beta_P: float
    beta_Q: float
    has_generation: bool = True
    phase_share: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.P_lo <= self.P0 <= self.P_hi and self.Q_lo <= self.Q0 <= self.Q_hi):
            raise ValueError(f"bid at {self.node}: bounds do not bracket baseline")
        if min(self.alpha_P, self.alpha_Q, self.beta_P, self.beta_Q) < 0:
            raise ValueError(f"bid at {self.node}: negative coefficient")

    def share(self, phase: str, nphases: int) -> float:
        if self.phase_share:
            return self.phase_share.get(phase, 0.0)
        return 1.0 / nphases


@dataclass(frozen=True)
class PmObjective:
    """Assembled objective data: disutility, generation cost, loss weight."""

    alpha_P: dict[str, float]
    alpha_Q: dict[str, float]
    beta_P: dict[str, float]
    beta_Q: dict[str, float]
    PL0: dict[str, float]
    QL0: dict[str, float]
    pcc: str
    lmp_P: float
    lmp_Q: float
    xi: tuple[float, float, float]

    def xi_for(self, phase: str) -> float:
        return self.xi[{"a": 0, "b": 1, "c": 2}[phase]]


def assemble_objective(
    bids: list[PmBid],
    pcc: str,
    lmp_P: float,
    lmp_Q: float | None = None,
    xi: float | tuple[float, float, float] = DEFAULT_XI,
) -> PmObjective:
    """Collect per-node cost coefficients and the PCC import price terms.

    ``lmp_Q`` defaults to one tenth of ``lmp_P``.  ``xi`` may be a scalar
    (applied to every phase) or a per-phase triple.
    """
    if pcc is None:
        raise PmInfeasibleError("missing PCC")
    if lmp_Q is None:
        lmp_Q = 0.1 * lmp_P
    xi3 = tuple(xi) if isinstance(xi, (tuple, list)) else (float(xi),) * 3
    if min(xi3) <= 0:
        raise ValueError("loss weight must be positive")
    return PmObjective(
        alpha_P={b.node: b.alpha_P for b in bids},
        alpha_Q={b.node: b.alpha_Q for b in bids},
        beta_P={b.node: b.beta_P for b in bids},
        beta_Q={b.node: b.beta_Q for b in bids},
        PL0={b.node: max(0.0, -b.P0) for b in bids},
        QL0={b.node: max(0.0, -b.Q0) for b in bids},
        pcc=pcc,
        lmp_P=lmp_P,
        lmp_Q=lmp_Q,
        xi=xi3,
    )


def evaluate_objective(
    objective: PmObjective,
    PG: dict, PL: dict, QG: dict, QL: dict,
    branch_loss_quadratic: float,
) -> float:
    """Reference evaluation: disutility + generation cost + weighted losses.

    ``branch_loss_quadratic`` is the already-summed R*|I|^2 term; multi-phase
    callers pre-apply the per-phase loss weights and pass xi=1-scaled totals.
    """
    total = branch_loss_quadratic
    for node in set(PG) | set(PL):
        pg, pl = PG.get(node, 0.0), PL.get(node, 0.0)
        qg, ql = QG.get(node, 0.0), QL.get(node, 0.0)
        if node == objective.pcc:
            total += objective.lmp_P * pg + objective.lmp_Q * qg
        else:
            total += objective.alpha_P.get(node, 0.0) * pg**2
            total += objective.alpha_Q.get(node, 0.0) * qg**2
            total += objective.beta_P.get(node, 0.0) * (pl - objective.PL0.get(node, 0.0)) ** 2
            total += objective.beta_Q.get(node, 0.0) * (ql - objective.QL0.get(node, 0.0)) ** 2
    return total


def _gen_load_split(bid: PmBid | None, scale: float = 1.0):
    """Split a net-injection bid box into generation and load variable boxes.

    Bids without generation capability get their positive-injection headroom
    dropped: flexibility above zero would otherwise read as free generation.
    """
    if bid is None:
        return (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0.0
    plo, phi = bid.P_lo * scale, bid.P_hi * scale
    qlo, qhi = bid.Q_lo * scale, bid.Q_hi * scale
    if not bid.has_generation:
        phi = min(phi, 0.0)
        plo = min(plo, phi)
    pg = (max(0.0, plo), max(0.0, phi))
    pl = (max(0.0, -phi), max(0.0, -plo))
    qg = (max(0.0, qlo), max(0.0, qhi))
    ql = (max(0.0, -qhi), max(0.0, -qlo))
    pl0 = max(0.0, -bid.P0 * scale)
    ql0 = max(0.0, -bid.Q0 * scale)
    return pg, pl, qg, ql, pl0, ql0


# ---------------------------------------------------------------------------
# branch-flow SOCP (balanced, radial)


def build_bf_socp(
    model: FeederModel,
    bids: list[PmBid],
    objective: PmObjective,
    v_band: float = DEFAULT_V_BAND,
    switch_overrides: dict | None = None,
    root: str | None = None,
    fixed_injections: dict[str, complex] | None = None,
) -> ConvexProgram:
    """Emit the branch-flow SOCP over the conducting radial tree.

    Per branch into child i with parent k the program carries the voltage
    drop equality, the sending-end cone relaxation fP²+fQ² ≤ v_k·l, and the
    apparent-power ampacity cap; per node the P/Q balance with loss terms and
    the box constraints from the bids.  Nodes in ``fixed_injections`` get
    their net injection pinned (used for feasibility checks).
    """
    if not model.balanced:
        raise PmInfeasibleError("branch-flow model requires a balanced single-phase feeder")
    root = root or model.pcc_node
    order, parent, parent_edge = radial_tree(model, root, switch_overrides)
    bid_map = {b.node: b for b in bids}
    fixed = fixed_injections or {}

    pb = ProgramBuilder()
    v_lo, v_hi = (1.0 - v_band) ** 2, (1.0 + v_band) ** 2

    for nid in order:
        node = model.node(nid)
        bid = bid_map.get(nid)
        if nid == root:
            pb.add_var(f"PG:{nid}", nid, -BIG, BIG, c1=objective.lmp_P)
            pb.add_var(f"QG:{nid}", nid, -BIG, BIG, c1=objective.lmp_Q)
            pb.add_var(f"PL:{nid}", nid, 0.0, 0.0)
            pb.add_var(f"QL:{nid}", nid, 0.0, 0.0)
            pb.add_var(f"v:{nid}", nid, 1.0, 1.0)
            continue
        if nid in fixed:
            s = fixed[nid]
            pb.add_var(f"PG:{nid}", nid, max(s.real, 0.0), max(s.real, 0.0))
            pb.add_var(f"PL:{nid}", nid, max(-s.real, 0.0), max(-s.real, 0.0))
            pb.add_var(f"QG:{nid}", nid, max(s.imag, 0.0), max(s.imag, 0.0))
            pb.add_var(f"QL:{nid}", nid, max(-s.imag, 0.0), max(-s.imag, 0.0))
        else:
            (pg, pl, qg, ql, pl0, ql0) = _gen_load_split(bid)
            pb.add_var(
                f"PG:{nid}", nid, pg[0], pg[1],
                c2=objective.alpha_P.get(nid, 0.0),
            )
            pb.add_var(
                f"PL:{nid}", nid, pl[0], pl[1],
                c2=objective.beta_P.get(nid, 0.0),
                c1=-2.0 * objective.beta_P.get(nid, 0.0) * pl0,
            )
            pb.c0 += objective.beta_P.get(nid, 0.0) * pl0**2
            pb.add_var(
                f"QG:{nid}", nid, qg[0], qg[1],
                c2=objective.alpha_Q.get(nid, 0.0),
            )
            pb.add_var(
                f"QL:{nid}", nid, ql[0], ql[1],
                c2=objective.beta_Q.get(nid, 0.0),
                c1=-2.0 * objective.beta_Q.get(nid, 0.0) * ql0,
            )
            pb.c0 += objective.beta_Q.get(nid, 0.0) * ql0**2
        pb.add_var(f"v:{nid}", nid, v_lo, v_hi)
        del node

    # branch variables keyed by the child node
    for nid in order:
        if nid == root:
            continue
        rec = parent_edge[nid]
        z = _bf_edge_z(rec)
        amp = rec.ampacity_pu if isinstance(rec, BranchRecord) else None
        s_cap = amp if amp is not None else BIG
        l_cap = s_cap**2 / v_lo
        pb.add_var(f"fP:{nid}", nid, -s_cap, s_cap)
        pb.add_var(f"fQ:{nid}", nid, -s_cap, s_cap)
        pb.add_var(f"l:{nid}", nid, 0.0, l_cap, c1=objective.xi_for("a") * z.real)

    children: dict[str, list[str]] = {}
    for child, par in parent.items():
        children.setdefault(par, []).append(child)

    for nid in order:
        coeffs_p = {pb.var(f"PG:{nid}"): 1.0, pb.var(f"PL:{nid}"): -1.0}
        coeffs_q = {pb.var(f"QG:{nid}"): 1.0, pb.var(f"QL:{nid}"): -1.0}
        if nid != root:
            rec = parent_edge[nid]
            z = _bf_edge_z(rec)
            coeffs_p[pb.var(f"fP:{nid}")] = 1.0
            coeffs_p[pb.var(f"l:{nid}")] = -z.real
            coeffs_q[pb.var(f"fQ:{nid}")] = 1.0
            coeffs_q[pb.var(f"l:{nid}")] = -z.imag
        for c in sorted(children.get(nid, [])):
            coeffs_p[pb.var(f"fP:{c}")] = -1.0
            coeffs_q[pb.var(f"fQ:{c}")] = -1.0
        pb.add_eq(coeffs_p, 0.0, f"pbal:{nid}", nid)
        pb.add_eq(coeffs_q, 0.0, f"qbal:{nid}", nid)

        if nid == root:
            continue
        rec = parent_edge[nid]
        z = _bf_edge_z(rec)
        par = parent[nid]
        pb.add_eq(
            {
                pb.var(f"v:{nid}"): 1.0,
                pb.var(f"v:{par}"): -1.0,
                pb.var(f"fP:{nid}"): 2.0 * z.real,
                pb.var(f"fQ:{nid}"): 2.0 * z.imag,
                pb.var(f"l:{nid}"): -(z.real**2 + z.imag**2),
            },
            0.0,
            f"vdrop:{nid}",
            nid,
        )
        pb.add_cone(
            ConeBlock(
                "rotated",
                x=pb.var(f"fP:{nid}"),
                y=pb.var(f"fQ:{nid}"),
                u=pb.var(f"v:{par}"),
                w=pb.var(f"l:{nid}"),
                owner=nid,
            )
        )
        amp = rec.ampacity_pu if isinstance(rec, BranchRecord) else None
        if amp is not None:
            pb.add_cone(
                ConeBlock(
                    "disk",
                    x=pb.var(f"fP:{nid}"),
                    y=pb.var(f"fQ:{nid}"),
                    rhs=amp,
                    owner=nid,
                )
            )

    prog = pb.build()
    prog.meta.update(
        {
            "kind": "bf",
            "root": root,
            "order": order,
            "parent": parent,
            "pcc": root,
            "loss_terms": [
                (f"l:{nid}", _bf_edge_z(parent_edge[nid]).real) for nid in order if nid != root
            ],
        }
    )
    return prog


def _bf_edge_z(rec) -> complex:
    if isinstance(rec, BranchRecord):
        return rec.z_sequence() if len(rec.phases) > 1 else rec.z_self()
    return complex(SWITCH_R_PU, SWITCH_X_PU)


# ---------------------------------------------------------------------------
# current-injection bound preprocessing


@dataclass(frozen=True)
class VoltageCurrentBounds:
    """Component boxes for nodal voltages/currents and branch currents."""

    vr: dict[tuple[str, str], tuple[float, float]]
    vi: dict[tuple[str, str], tuple[float, float]]
    ir: dict[tuple[str, str], tuple[float, float]]
    ii: dict[tuple[str, str], tuple[float, float]]
    branch_ir: dict[tuple[str, str, str], tuple[float, float]]
    branch_ii: dict[tuple[str, str, str], tuple[float, float]]

    def validate(self) -> None:
        for group in (self.vr, self.vi, self.ir, self.ii, self.branch_ir, self.branch_ii):
            for key, (lo, hi) in group.items():
                if lo > hi:
                    raise PmInfeasibleError(f"empty bound interval at {key}")


def preprocess_ci_bounds(
    model: FeederModel,
    bids: list[PmBid],
    v_band: float = DEFAULT_V_BAND,
    switch_overrides: dict | None = None,
    root: str | None = None,
) -> VoltageCurrentBounds:
    """Interval sweep over the radial tree giving valid V/I component boxes.

    Nodal injection currents are bounded by the worst-case apparent power of
    each bid box over the minimum voltage; branch current bounds accumulate
    those over the subtree; voltage boxes grow outward from the exactly-known
    root phasor by the worst-case series drop, then get a 2 percent safety
    inflation and are clipped to the declared voltage band annulus.
    """
    root = root or model.pcc_node
    order, parent, parent_edge = radial_tree(model, root, switch_overrides)
    bid_map = {b.node: b for b in bids}
    per_phase = not model.balanced
    v_min = 1.0 - v_band
    v_max = 1.0 + v_band

    inj_imax: dict[tuple[str, str], float] = {}
    for nid in order:
        node = model.node(nid)
        bid = bid_map.get(nid)
        for p in node.phases:
            if nid == root:
                inj_imax[(nid, p)] = BIG
                continue
            if bid is None:
                smax = abs(complex(node.load_kw.get(p, 0.0), node.load_kvar.get(p, 0.0))) / (
                    model.s_base_kva / (3.0 if per_phase else 1.0)
                )
            else:
                share = bid.share(p, len(node.phases)) if per_phase else 1.0
                pmax = max(abs(bid.P_lo), abs(bid.P_hi)) * share
                qmax = max(abs(bid.Q_lo), abs(bid.Q_hi)) * share
                smax = math.hypot(pmax, qmax)
            shunt = node.shunt_kvar.get(p, 0.0) / (model.s_base_kva / (3.0 if per_phase else 1.0))
            inj_imax[(nid, p)] = smax / v_min + abs(shunt) * v_max

    # backward accumulation of worst-case branch current magnitudes
    br_imax: dict[tuple[str, str], dict[str, float]] = {}
    subtree: dict[str, dict[str, float]] = {
        nid: {p: inj_imax[(nid, p)] for p in model.node(nid).phases} for nid in order
    }
    for nid in reversed(order):
        if nid == root:
            continue
        par = parent[nid]
        rec = parent_edge[nid]
        phases = rec.phases if isinstance(rec, BranchRecord) else tuple(
            p for p in model.node(par).phases if p in model.node(nid).phases
        )
        amp = rec.ampacity_pu if isinstance(rec, BranchRecord) else None
        flow = {}
        for p in phases:
            bound = subtree[nid].get(p, 0.0)
            if amp is not None:
                bound = min(bound, amp)
            flow[p] = bound
        br_imax[(par, nid)] = flow
        for p in phases:
            subtree[par][p] = subtree[par].get(p, 0.0) + flow[p]

    # forward sweep of voltage disk radii
    radius: dict[tuple[str, str], float] = {(root, p): 0.0 for p in model.node(root).phases}
    for nid in order:
        if nid == root:
            continue
        par = parent[nid]
        rec = parent_edge[nid]
        if isinstance(rec, BranchRecord):
            phases = rec.phases
            zmat = rec.z_matrix()
        else:
            phases = tuple(p for p in model.node(par).phases if p in model.node(nid).phases)
            zmat = np.diag([complex(SWITCH_R_PU, SWITCH_X_PU)] * len(phases))
        flow = br_imax[(par, nid)]
        for i, p in enumerate(phases):
            drop = sum(abs(zmat[i, j]) * flow.get(q, 0.0) for j, q in enumerate(phases))
            radius[(nid, p)] = radius[(par, p)] + drop

    vr: dict[tuple[str, str], tuple[float, float]] = {}
    vi: dict[tuple[str, str], tuple[float, float]] = {}
    ir: dict[tuple[str, str], tuple[float, float]] = {}
    ii: dict[tuple[str, str], tuple[float, float]] = {}
    for nid in order:
        for p in model.node(nid).phases:
            center = nominal_phasor(p)
            r = radius[(nid, p)] * BOUND_INFLATION
            if nid == root:
                r = 1e-9  # slack phasor is pinned
            lo_r = max(center.real - r, -v_max)
            hi_r = min(center.real + r, v_max)
            lo_i = max(center.imag - r, -v_max)
            hi_i = min(center.imag + r, v_max)
            if lo_r > hi_r or lo_i > hi_i:
                raise PmInfeasibleError(f"empty voltage bound interval at {(nid, p)}")
            vr[(nid, p)] = (lo_r, hi_r)
            vi[(nid, p)] = (lo_i, hi_i)
            imax = inj_imax[(nid, p)] * BOUND_INFLATION
            ir[(nid, p)] = (-imax, imax)
            ii[(nid, p)] = (-imax, imax)

    branch_ir: dict[tuple[str, str, str], tuple[float, float]] = {}
    branch_ii: dict[tuple[str, str, str], tuple[float, float]] = {}
    for (par, child), flow in br_imax.items():
        for p, mag in flow.items():
            m = mag * BOUND_INFLATION
            branch_ir[(par, child, p)] = (-m, m)
            branch_ii[(par, child, p)] = (-m, m)

    bounds = VoltageCurrentBounds(vr, vi, ir, ii, branch_ir, branch_ii)
    bounds.validate()
    return bounds


# ---------------------------------------------------------------------------
# current-injection model with McCormick envelopes


def _mce_rows(pb: ProgramBuilder, w: int, x: int, y: int, owner: str, tag: str) -> None:
    """The four envelope inequalities for w = x*y over the boxes of x and y."""
    xl, xu = pb.lb[x], pb.ub[x]
    yl, yu = pb.lb[y], pb.ub[y]
    # w >= xl*y + x*yl - xl*yl   ->  -w + xl*y + yl*x <= xl*yl
    pb.add_ineq({w: -1.0, y: xl, x: yl}, xl * yl, f"mce_ll:{tag}", owner)
    # w >= xu*y + x*yu - xu*yu
    pb.add_ineq({w: -1.0, y: xu, x: yu}, xu * yu, f"mce_uu:{tag}", owner)
    # w <= xl*y + x*yu - xl*yu   ->  w - xl*y - yu*x <= -xl*yu
    pb.add_ineq({w: 1.0, y: -xl, x: -yu}, -xl * yu, f"mce_lu:{tag}", owner)
    # w <= xu*y + x*yl - xu*yl
    pb.add_ineq({w: 1.0, y: -xu, x: -yl}, -xu * yl, f"mce_ul:{tag}", owner)


def mce_box(xl: float, xu: float, yl: float, yu: float) -> tuple[float, float]:
    prods = (xl * yl, xl * yu, xu * yl, xu * yu)
    return min(prods), max(prods)


def build_ci_mce(
    model: FeederModel,
    bids: list[PmBid],
    objective: PmObjective,
    bounds: VoltageCurrentBounds,
    switch_overrides: dict | None = None,
    root: str | None = None,
    fixed_injections: dict[tuple[str, str], complex] | None = None,
) -> ConvexProgram:
    """Emit the linearized current-injection program.

    Carries Ohm's-law equalities I = YV (componentwise), the linearized
    injection identities P = a + b and Q = -c + d with envelope inequalities
    on each auxiliary product, branch-current definitions for the loss
    objective, and all component boxes from ``bounds``.
    """
    from .netmodel import admittance, phase_index

    root = root or model.pcc_node
    bid_map = {b.node: b for b in bids}
    per_phase = not model.balanced
    fixed = fixed_injections or {}
    idx = phase_index(model)
    Y = admittance(model, switch_overrides)
    pairs = list(idx.keys())

    pb = ProgramBuilder()
    for nid, p in pairs:
        node = model.node(nid)
        bid = bid_map.get(nid)
        tag = f"{nid}:{p}"
        if nid == root:
            pb.add_var(f"P:{tag}", nid, -BIG, BIG)
            pb.add_var(f"Q:{tag}", nid, -BIG, BIG)
            pb.add_var(f"PG:{tag}", nid, -BIG, BIG, c1=objective.lmp_P)
            pb.add_var(f"PL:{tag}", nid, 0.0, 0.0)
            pb.add_var(f"QG:{tag}", nid, -BIG, BIG, c1=objective.lmp_Q)
            pb.add_var(f"QL:{tag}", nid, 0.0, 0.0)
        elif (nid, p) in fixed:
            s = fixed[(nid, p)]
            pb.add_var(f"P:{tag}", nid, s.real, s.real)
            pb.add_var(f"Q:{tag}", nid, s.imag, s.imag)
            pb.add_var(f"PG:{tag}", nid, max(s.real, 0.0), max(s.real, 0.0))
            pb.add_var(f"PL:{tag}", nid, max(-s.real, 0.0), max(-s.real, 0.0))
            pb.add_var(f"QG:{tag}", nid, max(s.imag, 0.0), max(s.imag, 0.0))
            pb.add_var(f"QL:{tag}", nid, max(-s.imag, 0.0), max(-s.imag, 0.0))
        else:
            share = bid.share(p, len(node.phases)) if (bid and per_phase) else 1.0
            scaled = None
            if bid is not None:
                scaled = PmBid(
                    node=bid.node,
                    P0=bid.P0 * share, Q0=bid.Q0 * share,
                    P_lo=bid.P_lo * share, P_hi=bid.P_hi * share,
                    Q_lo=bid.Q_lo * share, Q_hi=bid.Q_hi * share,
                    alpha_P=bid.alpha_P, alpha_Q=bid.alpha_Q,
                    beta_P=bid.beta_P, beta_Q=bid.beta_Q,
                )
            (pg, pl, qg, ql, pl0, ql0) = _gen_load_split(scaled)
            shunt_q = node.shunt_kvar.get(p, 0.0) / (
                model.s_base_kva / (3.0 if per_phase else 1.0)
            )
            pb.add_var(f"P:{tag}", nid, pg[0] - pl[1], pg[1] - pl[0])
            pb.add_var(f"Q:{tag}", nid, qg[0] - ql[1] + shunt_q, qg[1] - ql[0] + shunt_q)
            pb.add_var(f"PG:{tag}", nid, pg[0], pg[1], c2=objective.alpha_P.get(nid, 0.0))
            bP = objective.beta_P.get(nid, 0.0)
            pb.add_var(f"PL:{tag}", nid, pl[0], pl[1], c2=bP, c1=-2.0 * bP * pl0)
            pb.c0 += bP * pl0**2
            pb.add_var(f"QG:{tag}", nid, qg[0], qg[1], c2=objective.alpha_Q.get(nid, 0.0))
            bQ = objective.beta_Q.get(nid, 0.0)
            pb.add_var(f"QL:{tag}", nid, ql[0], ql[1], c2=bQ, c1=-2.0 * bQ * ql0)
            pb.c0 += bQ * ql0**2
            pb.add_eq(
                {
                    pb.var(f"P:{tag}"): 1.0,
                    pb.var(f"PG:{tag}"): -1.0,
                    pb.var(f"PL:{tag}"): 1.0,
                },
                0.0, f"psplit:{tag}", nid,
            )
            pb.add_eq(
                {
                    pb.var(f"Q:{tag}"): 1.0,
                    pb.var(f"QG:{tag}"): -1.0,
                    pb.var(f"QL:{tag}"): 1.0,
                },
                shunt_q, f"qsplit:{tag}", nid,
            )
        if nid == root:
            pb.add_eq(
                {pb.var(f"P:{tag}"): 1.0, pb.var(f"PG:{tag}"): -1.0}, 0.0, f"psplit:{tag}", nid
            )
            pb.add_eq(
                {pb.var(f"Q:{tag}"): 1.0, pb.var(f"QG:{tag}"): -1.0}, 0.0, f"qsplit:{tag}", nid
            )

        if nid == root:
            ph = nominal_phasor(p)
            pb.add_var(f"VR:{tag}", nid, ph.real, ph.real)
            pb.add_var(f"VI:{tag}", nid, ph.imag, ph.imag)
        else:
            pb.add_var(f"VR:{tag}", nid, *bounds.vr[(nid, p)])
            pb.add_var(f"VI:{tag}", nid, *bounds.vi[(nid, p)])
        pb.add_var(f"IR:{tag}", nid, *(bounds.ir[(nid, p)] if nid != root else (-BIG, BIG)))
        pb.add_var(f"II:{tag}", nid, *(bounds.ii[(nid, p)] if nid != root else (-BIG, BIG)))
        for aux, (bx, by) in (("a", ("VR", "IR")), ("b", ("VI", "II")),
                              ("c", ("VR", "II")), ("d", ("VI", "IR"))):
            lo, hi = mce_box(
                pb.lb[pb.var(f"{bx}:{tag}")], pb.ub[pb.var(f"{bx}:{tag}")],
                pb.lb[pb.var(f"{by}:{tag}")], pb.ub[pb.var(f"{by}:{tag}")],
            )
            pb.add_var(f"{aux}:{tag}", nid, lo, hi)

    # linearized injections and envelopes
    for nid, p in pairs:
        tag = f"{nid}:{p}"
        pb.add_eq(
            {pb.var(f"P:{tag}"): 1.0, pb.var(f"a:{tag}"): -1.0, pb.var(f"b:{tag}"): -1.0},
            0.0, f"pbal:{tag}", nid,
        )
        pb.add_eq(
            {pb.var(f"Q:{tag}"): 1.0, pb.var(f"c:{tag}"): 1.0, pb.var(f"d:{tag}"): -1.0},
            0.0, f"qbal:{tag}", nid,
        )
        _mce_rows(pb, pb.var(f"a:{tag}"), pb.var(f"VR:{tag}"), pb.var(f"IR:{tag}"), nid, f"a:{tag}")
        _mce_rows(pb, pb.var(f"b:{tag}"), pb.var(f"VI:{tag}"), pb.var(f"II:{tag}"), nid, f"b:{tag}")
        _mce_rows(pb, pb.var(f"c:{tag}"), pb.var(f"VR:{tag}"), pb.var(f"II:{tag}"), nid, f"c:{tag}")
        _mce_rows(pb, pb.var(f"d:{tag}"), pb.var(f"VI:{tag}"), pb.var(f"IR:{tag}"), nid, f"d:{tag}")

    # Ohm's law I = YV, componentwise
    for (nid, p), row in zip(pairs, range(len(pairs))):
        tag = f"{nid}:{p}"
        coeffs_r: dict[int, float] = {pb.var(f"IR:{tag}"): -1.0}
        coeffs_i: dict[int, float] = {pb.var(f"II:{tag}"): -1.0}
        for col, (mid, q) in enumerate(pairs):
            y = Y[row, col]
            if y == 0:
                continue
            mtag = f"{mid}:{q}"
            coeffs_r[pb.var(f"VR:{mtag}")] = coeffs_r.get(pb.var(f"VR:{mtag}"), 0.0) + y.real
            coeffs_r[pb.var(f"VI:{mtag}")] = coeffs_r.get(pb.var(f"VI:{mtag}"), 0.0) - y.imag
            coeffs_i[pb.var(f"VI:{mtag}")] = coeffs_i.get(pb.var(f"VI:{mtag}"), 0.0) + y.real
            coeffs_i[pb.var(f"VR:{mtag}")] = coeffs_i.get(pb.var(f"VR:{mtag}"), 0.0) + y.imag
        pb.add_eq(coeffs_r, 0.0, f"ohm_r:{tag}", nid)
        pb.add_eq(coeffs_i, 0.0, f"ohm_i:{tag}", nid)

    # branch currents for the loss objective
    loss_terms = []
    for br in model.branches:
        ymat = np.linalg.inv(br.z_matrix())
        f, t = br.from_node, br.to_node
        for i, p in enumerate(br.phases):
            tag = f"{f}-{t}:{p}"
            key = (f, t, p)
            lo_r, hi_r = bounds.branch_ir.get(key, (-BIG, BIG))
            lo_i, hi_i = bounds.branch_ii.get(key, (-BIG, BIG))
            xi_r = objective.xi_for(p) * br.r_pu
            vr_ = pb.add_var(f"bIR:{tag}", t, lo_r, hi_r, c2=xi_r)
            vi_ = pb.add_var(f"bII:{tag}", t, lo_i, hi_i, c2=xi_r)
            loss_terms.append((f"bIR:{tag}", br.r_pu, p))
            loss_terms.append((f"bII:{tag}", br.r_pu, p))
            coeffs_r: dict[int, float] = {vr_: -1.0}
            coeffs_i: dict[int, float] = {vi_: -1.0}
            for j, q in enumerate(br.phases):
                y = ymat[i, j]
                for end, sgn in ((f, 1.0), (t, -1.0)):
                    etag = f"{end}:{q}"
                    kr, ki = pb.var(f"VR:{etag}"), pb.var(f"VI:{etag}")
                    coeffs_r[kr] = coeffs_r.get(kr, 0.0) + sgn * y.real
                    coeffs_r[ki] = coeffs_r.get(ki, 0.0) - sgn * y.imag
                    coeffs_i[ki] = coeffs_i.get(ki, 0.0) + sgn * y.real
                    coeffs_i[kr] = coeffs_i.get(kr, 0.0) + sgn * y.imag
            pb.add_eq(coeffs_r, 0.0, f"bcur_r:{tag}", t)
            pb.add_eq(coeffs_i, 0.0, f"bcur_i:{tag}", t)

    prog = pb.build()
    prog.meta.update(
        {
            "kind": "ci",
            "root": root,
            "pcc": root,
            "pairs": pairs,
            "loss_terms": loss_terms,
        }
    )
    return prog


# ---------------------------------------------------------------------------
# price extraction


class DualsNotConvergedError(RuntimeError):
    pass


def extract_dlmp(solution, s_base_kva: float | None = None) -> dict[str, tuple[float, float]]:
    """Distribution locational marginal prices from converged balance duals.

    ``solution`` is a :class:`lemsim.distopt.SolveResult`.  Returns per node
    (or node:phase) the pair (price_P, price_Q) in the program's per-unit
    money scale, or scaled by the power base when ``s_base_kva`` is given.
    Prices are withheld when the solver did not report dual convergence.
    """
    if not solution.converged or not solution.duals_stationary:
        raise DualsNotConvergedError(
            "duals not converged; prices withheld "
            f"(eq={solution.eq_residual:.2e}, cons={solution.consensus_residual:.2e})"
        )
    out: dict[str, tuple[float, float]] = {}
    scale = 1.0 if s_base_kva is None else 1.0 / s_base_kva
    p_duals = {}
    q_duals = {}
    for label, mu in solution.eq_duals.items():
        if label.startswith("pbal:"):
            p_duals[label[5:]] = -mu
        elif label.startswith("qbal:"):
            q_duals[label[5:]] = -mu
    for key in p_duals:
        out[key] = (p_duals[key] * scale, q_duals.get(key, 0.0) * scale)
    return out
