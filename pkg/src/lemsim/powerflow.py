"""Radial backward/forward sweep power flow on the feeder model.

Used for baseline operating points (default ampacity assignment) and for
measuring the physical substation import implied by a set of actual
injections during scenario runs.  Works on balanced single-phase and
unbalanced multi-phase models alike; all quantities are per-unit on the
model's bases (total base for balanced models, per-phase base otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .netmodel import (
    BranchRecord,
    FeederModel,
    nominal_phasor,
    radial_tree,
)


@dataclass
class SweepResult:
    converged: bool
    iterations: int
    voltages: dict[tuple[str, str], complex]          # (node, phase) -> V
    branch_currents: dict[tuple[str, str], dict[str, complex]]  # (parent, child)
    slack_injection: complex                          # net S injected by the root

    def v_mag(self, node: str, phase: str = "a") -> float:
        return abs(self.voltages[(node, phase)])

    @property
    def root_import(self) -> complex:
        """Power drawn from upstream of the root; positive means import."""
        return self.slack_injection


def baseline_injections(
    model: FeederModel, scale: float = 1.0, der_rated: bool = False
) -> dict[tuple[str, str], complex]:
    """Net baseline injections: negated loads plus shunt reactive generation.

    With ``der_rated`` the grid-connected DER fleet injects at rating, which
    is the envelope the default branch ratings must cover.
    """
    inj: dict[tuple[str, str], complex] = {}
    per_phase = not model.balanced
    for n in model.nodes:
        der = sum(d.cap_kw for d in n.ders if not d.islanded_only) if der_rated else 0.0
        for p in n.phases:
            s = complex(-n.load_kw.get(p, 0.0), -n.load_kvar.get(p, 0.0))
            s += complex(der / len(n.phases), n.shunt_kvar.get(p, 0.0))
            inj[(n.id, p)] = s * (scale / (model.s_base_kva / (3.0 if per_phase else 1.0)))
    return inj


def solve_sweep(
    model: FeederModel,
    injections: dict[tuple[str, str], complex],
    root: str | None = None,
    switch_overrides: dict[tuple[str, str], str] | None = None,
    subset: set[str] | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> SweepResult:
    """Backward/forward sweep over the radial conducting tree.

    ``injections`` maps (node, phase) to net complex power injection in p.u.
    (generation positive).  The root is held at the nominal phasor voltage;
    its own injection entry is ignored and solved for.
    """
    root = root or model.pcc_node
    order, parent, parent_edge = radial_tree(model, root, switch_overrides, subset)
    children: dict[str, list[str]] = {}
    for child, par in parent.items():
        children.setdefault(par, []).append(child)

    volt: dict[tuple[str, str], complex] = {}
    for nid in order:
        for p in model.node(nid).phases:
            volt[(nid, p)] = nominal_phasor(p)

    branch_cur: dict[tuple[str, str], dict[str, complex]] = {}
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # backward: accumulate currents from the leaves toward the root
        node_cur: dict[str, dict[str, complex]] = {
            nid: {
                p: (
                    np.conj(injections.get((nid, p), 0.0) / volt[(nid, p)])
                    if nid != root
                    else 0.0
                )
                for p in model.node(nid).phases
            }
            for nid in order
        }
        branch_cur = {}
        for nid in reversed(order):
            if nid == root:
                continue
            par = parent[nid]
            rec = parent_edge[nid]
            phases = _edge_phases(model, rec, par, nid)
            # current flowing parent -> child equals minus the net injection
            # current of the subtree hanging at the child
            flow = {p: -node_cur[nid].get(p, 0.0) for p in phases}
            branch_cur[(par, nid)] = flow
            for p in phases:
                node_cur[par][p] = node_cur[par].get(p, 0.0) - flow[p]

        # forward: update voltages from the root down
        max_dv = 0.0
        for nid in order:
            if nid == root:
                continue
            par = parent[nid]
            rec = parent_edge[nid]
            phases = _edge_phases(model, rec, par, nid)
            z = _edge_zmatrix(rec, phases)
            iv = np.array([branch_cur[(par, nid)][p] for p in phases])
            vdrop = z @ iv
            for k, p in enumerate(phases):
                newv = volt[(par, p)] - vdrop[k]
                max_dv = max(max_dv, abs(newv - volt[(nid, p)]))
                volt[(nid, p)] = newv
        if max_dv < tol:
            converged = True
            break

    slack = 0.0 + 0.0j
    for child in children.get(root, []):
        flow = branch_cur.get((root, child), {})
        for p, i in flow.items():
            slack += volt[(root, p)] * np.conj(i)
    return SweepResult(converged, it, volt, branch_cur, slack)


def _edge_phases(model: FeederModel, rec, par: str, child: str) -> tuple[str, ...]:
    if isinstance(rec, BranchRecord):
        return rec.phases
    return tuple(p for p in model.node(par).phases if p in model.node(child).phases)


def _edge_zmatrix(rec, phases: tuple[str, ...]) -> np.ndarray:
    if isinstance(rec, BranchRecord):
        return rec.z_matrix()
    from .netmodel import SWITCH_R_PU, SWITCH_X_PU

    return np.diag([complex(SWITCH_R_PU, SWITCH_X_PU)] * len(phases))


def assign_default_ampacities(model: FeederModel, factor: float = 1.5) -> FeederModel:
    """Fill missing branch ratings as ``factor`` times baseline loading.

    The nominal loading envelope covers both DER regimes (fleet at rating
    and fleet offline), so post-outage flows stay within the default rating.
    Branches whose baseline current rounds to zero get a floor rating of
    ``factor`` times the mean loaded-branch current so they stay usable after
    reconfiguration.
    """
    if all(b.ampacity_pu is not None for b in model.branches):
        return model
    loading: dict[tuple[str, str], float] = {}
    for der_rated in (True, False):
        res = solve_sweep(model, baseline_injections(model, der_rated=der_rated))
        for (f, t), cur in res.branch_currents.items():
            mag = max(abs(i) for i in cur.values()) if cur else 0.0
            if mag > loading.get((f, t), 0.0):
                loading[(f, t)] = mag
                loading[(t, f)] = mag
    loaded = [v for v in loading.values() if v > 1e-9]
    floor = float(np.mean(loaded)) if loaded else 1.0
    new_branches = []
    for b in model.branches:
        if b.ampacity_pu is not None:
            new_branches.append(b)
            continue
        base = loading.get((b.from_node, b.to_node), 0.0)
        rating = factor * (base if base > 1e-9 else floor)
        new_branches.append(replace(b, ampacity_pu=rating))
    return replace(model, branches=tuple(new_branches))
