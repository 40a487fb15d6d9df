"""Islanding response: restoration path search, ranking, and load shedding.

After the feeder separates from the grid, candidate restoration plans pair
the available distributed generators with critical loads over shortest
switchable paths, expand each served set to a switch-delimited island, shed
non-critical load in ascending trustability order until the island's
generation covers it, and validate the result with a per-island optimal
power-flow solve.  Candidates are ranked by the resiliency of the nodes
their paths traverse, and the first feasible plan wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from . import distopt, pm_market
from .netmodel import FeederModel, edge_impedance
from .powerflow import solve_sweep

LOSS_MARGIN = 0.04   # crude loss allowance when sizing restored load


class NoFeasiblePlanError(RuntimeError):
    pass


class PlanInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgUnit:
    node: str
    cap_kw: float
    cap_kvar: float


@dataclass
class RestorationPlan:
    switch_open: list[tuple[str, str]]
    switch_close: list[tuple[str, str]]
    islands: dict[str, int]                       # node -> island index
    dg_dispatch: dict[str, float]                 # node -> kW
    shed: list[tuple[str, float]]                 # (node, shed fraction), TS order
    restored_critical_kw: float
    restored_noncritical_kw: float
    path_resilience: float
    paths: list[list[str]] = field(default_factory=list)

    def describe(self) -> str:
        lines = [
            "switch actions:",
            *[f"  OPEN  {a}-{b}" for a, b in self.switch_open],
            *[f"  CLOSE {a}-{b}" for a, b in self.switch_close],
            f"restored critical: {self.restored_critical_kw:.1f} kW",
            f"restored non-critical: {self.restored_noncritical_kw:.1f} kW",
            f"path resilience: {self.path_resilience:.4f}",
            "dg dispatch: " + ", ".join(f"{n}={v:.1f}kW" for n, v in sorted(self.dg_dispatch.items())),
            "shed fractions (ascending trust):",
            *[f"  {node}: {frac:.3f}" for node, frac in self.shed],
        ]
        return "\n".join(lines)


def _switch_graph(model: FeederModel) -> nx.Graph:
    """Graph over branches plus every switch regardless of current state."""
    g = nx.Graph()
    g.add_nodes_from(model.node_ids)
    for b in model.branches:
        g.add_edge(b.from_node, b.to_node, weight=1.0 + 1e-6 * abs(b.z_sequence()), kind="branch")
    for s in model.switches:
        g.add_edge(s.from_node, s.to_node, weight=1.0 + 1e-6 * 1e-4, kind="switch")
    return g


def available_dgs(model: FeederModel, dg_overrides: dict[str, float] | None = None) -> list[DgUnit]:
    """Dispatchable units usable during islanding, capacity overridable."""
    out = []
    for n in model.nodes:
        cap_kw = sum(d.cap_kw for d in n.ders if d.dispatchable)
        cap_kvar = sum(d.cap_kvar for d in n.ders if d.dispatchable)
        if dg_overrides and n.id in dg_overrides:
            cap_kw = dg_overrides[n.id]
        if cap_kw > 0:
            out.append(DgUnit(n.id, cap_kw, cap_kvar))
    return out


def _expand_to_switch_island(model: FeederModel, seed: set[str]) -> set[str]:
    """Grow a node set until every outgoing edge is a switch."""
    adj: dict[str, list[tuple[str, str]]] = {n.id: [] for n in model.nodes}
    for b in model.branches:
        adj[b.from_node].append((b.to_node, "branch"))
        adj[b.to_node].append((b.from_node, "branch"))
    for s in model.switches:
        adj[s.from_node].append((s.to_node, "switch"))
        adj[s.to_node].append((s.from_node, "switch"))
    island = set(seed)
    frontier = list(seed)
    while frontier:
        cur = frontier.pop()
        for nxt, kind in adj[cur]:
            if kind == "branch" and nxt not in island:
                island.add(nxt)
                frontier.append(nxt)
    return island


def plan_restoration(
    model: FeederModel,
    critical_map: dict[str, float] | None = None,
    pnr: dict[str, float] | None = None,
    ts: dict[str, float] | None = None,
    dg_overrides: dict[str, float] | None = None,
    max_plans: int = 6,
    validate: bool = True,
) -> list[RestorationPlan]:
    """Enumerate and rank feasible restoration plans for an islanded feeder.

    ``critical_map`` overrides each node's critical fraction; ``pnr`` feeds
    the per-node resiliency used to rank paths and ``ts`` orders shedding.
    Plans are returned most-resilient first; when nothing can be validated a
    single full-shed fallback plan is returned.
    """
    dgs = available_dgs(model, dg_overrides)
    if not dgs:
        raise NoFeasiblePlanError("no distributed generation available")
    pnr = pnr or {}
    ts = ts or {}
    crit_frac = {
        n.id: (critical_map.get(n.id, n.critical_fraction) if critical_map else n.critical_fraction)
        for n in model.nodes
    }
    load = {n.id: n.total_load_kw for n in model.nodes}
    crit_kw = {nid: load[nid] * crit_frac[nid] for nid in load}
    critical_nodes = [nid for nid, kw in crit_kw.items() if kw > 1e-9]
    g = _switch_graph(model)

    # shortest switchable paths between every source and critical-load pair
    paths: dict[tuple[str, str], list[str]] = {}
    for dg in dgs:
        lengths, path_map = nx.single_source_dijkstra(g, dg.node, weight="weight")
        for cn in critical_nodes:
            if cn in path_map:
                paths[(dg.node, cn)] = path_map[cn]

    # candidate orderings of the generation fleet give distinct plans
    orders = [sorted(dgs, key=lambda d: (-d.cap_kw, d.node))]
    orders.append(sorted(dgs, key=lambda d: d.node))
    if len(dgs) > 1:
        orders.append(list(reversed(orders[0])))

    plans: list[RestorationPlan] = []
    seen_keys: set = set()
    for order in orders:
        plan = _greedy_plan(model, order, paths, crit_kw, load, crit_frac, pnr, ts, g)
        if plan is None:
            continue
        key = (tuple(plan.switch_open), tuple(plan.switch_close),
               tuple(sorted(plan.dg_dispatch.items())))
        if key in seen_keys:
            continue
        seen_keys.add(key)
        plans.append(plan)
        if len(plans) >= max_plans:
            break

    if validate:
        plans = [p for p in plans if _validate_plan(model, p)]
    plans.sort(key=lambda p: -p.path_resilience)
    if not plans:
        return [_full_shed_plan(model)]
    return plans


def _greedy_plan(model, order, paths, crit_kw, load, crit_frac, pnr, ts, g):
    served_crit: dict[str, float] = {}
    dispatch: dict[str, float] = {}
    residual: dict[str, float] = {}
    plan_paths: list[list[str]] = []
    unserved = {n: kw for n, kw in crit_kw.items() if kw > 1e-9}
    for dg in order:
        cap = dg.cap_kw * (1.0 - LOSS_MARGIN)
        used = 0.0
        reachable = sorted(
            (n for n in unserved if (dg.node, n) in paths),
            key=lambda n: (len(paths[(dg.node, n)]), n),
        )
        for n in reachable:
            if n not in unserved:
                continue
            need = unserved[n]
            if used + need > cap + 1e-9:
                continue
            used += need
            served_crit[n] = need
            plan_paths.append(paths[(dg.node, n)])
            del unserved[n]
        if used > 0 or dg.cap_kw > 0:
            dispatch[dg.node] = used / (1.0 - LOSS_MARGIN)
            residual[dg.node] = dg.cap_kw - dispatch[dg.node]
    if not served_crit:
        return None

    # the energized region: all path nodes, closed up to switch boundaries
    seed = set()
    for p in plan_paths:
        seed.update(p)
    seed.update(n for n, d in dispatch.items() if d > 0 or residual.get(n, 0) > 0)
    island = _expand_to_switch_island(model, seed)

    # residual capacity restores non-critical load inside the island,
    # most-trusted first
    noncrit = {
        n: load[n] * (1.0 - crit_frac[n])
        for n in island
        if load.get(n, 0.0) > 1e-9
    }
    total_residual = sum(residual.values()) * (1.0 - LOSS_MARGIN)
    restored_noncrit: dict[str, float] = {}
    for n in sorted(noncrit, key=lambda n: (-ts.get(n, 0.5), n)):
        kw = noncrit[n]
        if kw <= 1e-9:
            continue
        take = min(kw, total_residual)
        if take > 1e-9:
            restored_noncrit[n] = take
            total_residual -= take
        if total_residual <= 1e-9:
            break
    extra = sum(restored_noncrit.values())
    if extra > 0:
        scale_plus = extra / (1.0 - LOSS_MARGIN) / max(sum(residual.values()), 1e-9)
        for n in residual:
            dispatch[n] = dispatch.get(n, 0.0) + residual[n] * scale_plus

    # shed table: non-critical remainder, ascending trust
    shed: list[tuple[str, float]] = []
    for n in sorted(island, key=lambda n: (ts.get(n, 0.5), n)):
        kw = load.get(n, 0.0)
        if kw <= 1e-9:
            continue
        noncrit_kw = kw * (1.0 - crit_frac[n])
        kept = restored_noncrit.get(n, 0.0)
        crit_shed = 0.0 if n in served_crit else crit_kw.get(n, 0.0)
        shed_kw = (noncrit_kw - kept) + crit_shed
        if shed_kw > 1e-9:
            shed.append((n, shed_kw / kw))

    # switch actions: open every boundary switch, close island-internal ones
    # that sit on a restoration path or feed a dispatched source
    states = model.switch_states()
    sw_open, sw_close = [], []
    path_edges = set()
    for p in plan_paths:
        path_edges.update(frozenset(e) for e in zip(p, p[1:]))
    for s in model.switches:
        inside = s.from_node in island and s.to_node in island
        crossing = (s.from_node in island) != (s.to_node in island)
        if crossing and states[s.key] == "CLOSED":
            sw_open.append(s.key)
        elif inside and states[s.key] == "OPEN" and frozenset(s.key) in path_edges:
            sw_close.append(s.key)

    scores = [pnr.get(n, 0.5) for p in plan_paths for n in p]
    resilience = float(np.mean(scores)) if scores else 0.0
    islands = {n: 0 for n in island}
    return RestorationPlan(
        switch_open=sorted(sw_open),
        switch_close=sorted(sw_close),
        islands=islands,
        dg_dispatch=dispatch,
        shed=shed,
        restored_critical_kw=sum(served_crit.values()),
        restored_noncritical_kw=sum(restored_noncrit.values()),
        path_resilience=resilience,
        paths=plan_paths,
    )


def _full_shed_plan(model: FeederModel) -> RestorationPlan:
    return RestorationPlan(
        switch_open=[],
        switch_close=[],
        islands={},
        dg_dispatch={},
        shed=sorted(
            (n.id, 1.0) for n in model.nodes if n.total_load_kw > 1e-9
        ),
        restored_critical_kw=0.0,
        restored_noncritical_kw=0.0,
        path_resilience=0.0,
        paths=[],
    )


def _island_injections(model: FeederModel, plan: RestorationPlan) -> dict[str, complex]:
    """Net kW injection per island node implied by the plan's accounting."""
    shed_frac = dict(plan.shed)
    inj: dict[str, complex] = {}
    for nid in plan.islands:
        node = model.node(nid)
        kw = node.total_load_kw * (1.0 - shed_frac.get(nid, 0.0))
        kvar = node.total_load_kvar * (1.0 - shed_frac.get(nid, 0.0))
        inj[nid] = complex(-kw, -kvar)
    return inj


def _validate_plan(model: FeederModel, plan: RestorationPlan, v_band: float = 0.06) -> bool:
    """Optimal power-flow feasibility of the islanded dispatch."""
    if not plan.islands:
        return False
    try:
        _solve_island(model, plan, v_band)
    except (PlanInfeasibleError, ValueError, KeyError):
        return False
    return True


def _apply_switches(model: FeederModel, plan: RestorationPlan) -> FeederModel:
    overrides: dict[tuple[str, str], str] = {}
    for key in plan.switch_open:
        overrides[key] = "OPEN"
    for key in plan.switch_close:
        overrides[key] = "CLOSED"
    return model.with_switch_states(overrides)


def _solve_island(model: FeederModel, plan: RestorationPlan, v_band: float = 0.06):
    """Balanced branch-flow solve of the energized island."""
    from .netmodel import to_balanced_single_phase

    switched = _apply_switches(model, plan)
    bal = to_balanced_single_phase(switched) if not switched.balanced else switched
    bal = _keep_switch_states(bal, switched)
    sources = sorted(plan.dg_dispatch, key=lambda n: -plan.dg_dispatch[n]) or sorted(plan.islands)
    root = sources[0]
    island_nodes = set(plan.islands)

    inj = _island_injections(bal, plan)
    s_base = bal.s_base_kva
    fixed = {
        nid: inj[nid] / s_base
        for nid in island_nodes
        if nid != root
    }
    bids = []
    for dg_node in sources:
        cap = plan.dg_dispatch.get(dg_node, 0.0) * 1.35 + 1e-6
        cap_node = next((n for n in bal.nodes if n.id == dg_node), None)
        cap_kvar = max(sum(d.cap_kvar for d in cap_node.ders), 0.4 * cap) if cap_node else 0.4 * cap
        if dg_node == root:
            continue
        base = fixed.pop(dg_node, 0.0)
        bids.append(
            pm_market.PmBid(
                node=dg_node,
                P0=plan.dg_dispatch.get(dg_node, 0.0) / s_base,
                Q0=0.0,
                P_lo=0.0,
                P_hi=cap / s_base,
                Q_lo=-cap_kvar / s_base,
                Q_hi=cap_kvar / s_base,
                alpha_P=0.05, alpha_Q=0.005, beta_P=0.0, beta_Q=0.0,
            )
        )
    objective = pm_market.assemble_objective(bids, pcc=root, lmp_P=0.05, xi=1.0)
    try:
        prog = pm_market.build_bf_socp(
            bal, bids, objective, v_band=v_band, root=root,
            fixed_injections=fixed,
        )
    except (pm_market.PmInfeasibleError, ValueError) as exc:
        raise PlanInfeasibleError(str(exc)) from exc
    # prune to the island: nodes outside stay de-energized and drop out of
    # the radial tree rooted at the island source
    res = distopt.solve_single_atom(prog, distopt.StopRule(
        tol_eq=2e-5, tol_consensus=2e-5, max_iter=30000, check_every=25,
    ))
    if not res.converged:
        raise PlanInfeasibleError(
            f"island solve did not converge (residual {res.eq_residual:.2e})"
        )
    root_gen = res.value(prog, f"PG:{root}") * s_base
    cap_root = plan.dg_dispatch.get(root, 0.0) * 1.35 + 1.0
    if root_gen > cap_root:
        raise PlanInfeasibleError(
            f"island source at {root} needs {root_gen:.1f} kW, cap {cap_root:.1f}"
        )
    return prog, res


def _keep_switch_states(bal: FeederModel, switched: FeederModel) -> FeederModel:
    """Balanced conversion resets switches to normal; re-impose the plan's."""
    states = {s.key: s.status for s in switched.switches}
    return replace(
        bal,
        switches=tuple(replace(s, status=states[s.key]) for s in bal.switches),
    )


def apply_plan(model: FeederModel, plan: RestorationPlan):
    """Apply switch actions and solve the island flows.

    Returns (reconfigured model, island solve artifacts).  On infeasibility
    the original model is untouched (models are immutable) and the caller
    moves to the next-ranked plan.
    """
    if plan.islands:
        prog, res = _solve_island(model, plan)
        solutions = {"program": prog, "result": res}
    else:
        solutions = {"program": None, "result": None}
    return _apply_switches(model, plan), solutions


def revert_plan(model: FeederModel, plan: RestorationPlan) -> FeederModel:
    """Exact involution of apply_plan's switch actions."""
    overrides: dict[tuple[str, str], str] = {}
    for key in plan.switch_open:
        overrides[key] = "CLOSED"
    for key in plan.switch_close:
        overrides[key] = "OPEN"
    return model.with_switch_states(overrides)


def apply_first_feasible(model: FeederModel, plans: list[RestorationPlan]):
    last_exc: Exception | None = None
    for plan in plans:
        try:
            new_model, solutions = apply_plan(model, plan)
            return plan, new_model, solutions
        except PlanInfeasibleError as exc:
            last_exc = exc
    raise NoFeasiblePlanError(f"no plan validated: {last_exc}")


def island_topology_dump(plan: RestorationPlan) -> str:
    lines = ["island nodes:"]
    for nid in sorted(plan.islands):
        lines.append(f"  {nid} (island {plan.islands[nid]})")
    lines.append("paths:")
    for p in plan.paths:
        lines.append("  " + " - ".join(p))
    return "\n".join(lines)
