"""Secondary-market bidding, ranked multi-objective clearing, aggregation.

Each secondary operator clears its agents against the setpoint it was
allocated in the most recent primary clearing.  Four objectives apply in
fixed priority order: resilience-weighted adherence, net cost, total
flexibility, and flexibility disutility.  Clearing proceeds one objective at
a time; after each stage the achieved value is frozen into a relative
degradation band that later stages must respect.

The net-cost stage is bilinear in tariffs and setpoints and is resolved by
two coordinate passes: tariffs are optimized against the stage-one setpoints,
then setpoints are re-optimized under the fixed tariffs.  Flexibility ranges
are then maximized componentwise, and the final stage re-centers setpoints
toward minimum disutility inside all recorded bands while preserving the
granted flexibility ranges.

All stage subproblems reduce to separable QPs with a single balance
constraint, solved exactly by bisection on the balance multiplier; no
external solver is involved, which keeps per-tick clearing fast and
bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_W = 1e-12
DEFAULT_STAGE_BAND = 0.01   # relative degradation allowed per ranked stage
BAND_ABS_FLOOR = 1e-9


class SmInfeasibleError(RuntimeError):
    """Setpoint outside the aggregate bid range; names the violated bound."""


@dataclass(frozen=True)
class SmaBid:
    """Secondary agent bid: baseline injections, flexibility box, disutility."""

    agent: str
    P0: float
    Q0: float
    P_lo: float
    P_hi: float
    Q_lo: float
    Q_hi: float
    beta_P: float
    beta_Q: float

    def __post_init__(self):
        if not (self.P_lo <= self.P0 <= self.P_hi):
            raise ValueError(f"{self.agent}: P bounds do not bracket baseline")
        if not (self.Q_lo <= self.Q0 <= self.Q_hi):
            raise ValueError(f"{self.agent}: Q bounds do not bracket baseline")
        if self.beta_P < 0 or self.beta_Q < 0:
            raise ValueError(f"{self.agent}: negative disutility coefficient")


@dataclass(frozen=True)
class RankedObjectives:
    """Priority order is fixed; only the per-stage tolerance bands vary."""

    bands: tuple[float, float, float, float] = (
        DEFAULT_STAGE_BAND,
    ) * 4

    def __post_init__(self):
        if any(b < 0 for b in self.bands):
            raise ValueError("negative degradation band")


@dataclass
class SmSchedule:
    agents: list[str]
    P: np.ndarray
    Q: np.ndarray
    dP: np.ndarray
    dQ: np.ndarray
    mu_P: np.ndarray
    mu_Q: np.ndarray
    stage_values: dict[str, float]
    stage_bands: dict[str, float]
    setpoint: tuple[float, float]

    def validate(self, bids: list[SmaBid], ceiling_P: float, ceiling_Q: float,
                 budget_P: float | None = None, budget_Q: float | None = None,
                 tol: float = 1e-7) -> None:
        P_star, Q_star = self.setpoint
        assert abs(self.P.sum() - P_star) <= tol, "active balance violated"
        assert abs(self.Q.sum() - Q_star) <= tol, "reactive balance violated"
        for k, b in enumerate(bids):
            assert b.P_lo + self.dP[k] <= self.P[k] + tol
            assert self.P[k] <= b.P_hi - self.dP[k] + tol
            assert b.Q_lo + self.dQ[k] <= self.Q[k] + tol
            assert self.Q[k] <= b.Q_hi - self.dQ[k] + tol
        assert (self.dP >= -tol).all() and (self.dQ >= -tol).all()
        assert (self.mu_P >= -tol).all() and (self.mu_P <= ceiling_P + tol).all()
        assert (self.mu_Q >= -tol).all() and (self.mu_Q <= ceiling_Q + tol).all()
        if budget_P is not None:
            assert float(self.mu_P @ self.P) <= budget_P + tol, "P budget violated"
        if budget_Q is not None:
            assert float(self.mu_Q @ self.Q) <= budget_Q + tol, "Q budget violated"

    def as_rows(self):
        for k, agent in enumerate(self.agents):
            yield (agent, self.P[k], self.Q[k], self.dP[k], self.dQ[k],
                   self.mu_P[k], self.mu_Q[k])


# ---------------------------------------------------------------------------
# separable QP with one balance constraint


def _sep_qp(w: np.ndarray, center: np.ndarray, lin: np.ndarray,
            lo: np.ndarray, hi: np.ndarray, total: float) -> np.ndarray:
    """argmin sum w_j (x_j - center_j)² + lin_j x_j  s.t. sum x = total, box.

    Exact via bisection on the balance multiplier; x_j(nu) is the clipped
    stationary point and its sum is monotone in nu.
    """
    w = np.maximum(w, EPS_W)
    m = center - lin / (2.0 * w)

    def x_of(nu: float) -> np.ndarray:
        return np.clip(m + nu / (2.0 * w), lo, hi)

    lo_sum, hi_sum = float(lo.sum()), float(hi.sum())
    if not (lo_sum - 1e-9 <= total <= hi_sum + 1e-9):
        raise SmInfeasibleError(
            f"setpoint {total:.6g} outside aggregate range [{lo_sum:.6g}, {hi_sum:.6g}]"
        )
    span = float(np.max(2.0 * w * np.maximum(np.abs(hi - m), np.abs(m - lo)))) + 1.0
    a, b = -span, span
    for _ in range(200):
        mid = 0.5 * (a + b)
        if float(x_of(mid).sum()) < total:
            a = mid
        else:
            b = mid
    x = x_of(0.5 * (a + b))
    # exact repair of any residual balance gap on the unclamped coordinates
    gap = total - float(x.sum())
    free = (x > lo + 1e-12) & (x < hi - 1e-12)
    if abs(gap) > 0 and free.any():
        iw = 1.0 / (2.0 * w[free])
        x[free] += gap * iw / iw.sum()
        x = np.clip(x, lo, hi)
    return x


def _band(value: float, rel: float) -> float:
    return rel * abs(value) + BAND_ABS_FLOOR


def _greedy_tariffs(P: np.ndarray, ceiling: float, budget: float | None) -> np.ndarray:
    """Net-cost-minimal tariffs under the price ceiling and budget cap."""
    mu = np.where(P >= 0.0, 0.0, ceiling)
    if budget is not None and float(mu @ P) > budget + 1e-12:
        raise SmInfeasibleError(
            f"budget {budget:.6g} below the minimum payable {float(mu @ P):.6g}"
        )
    return mu


@dataclass
class _Commodity:
    """One commodity's (P or Q) bid data as arrays."""

    x0: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    beta: np.ndarray


def _stage_feasible(c: _Commodity, total: float, what: str) -> None:
    if total < c.lo.sum() - 1e-9:
        raise SmInfeasibleError(
            f"{what} setpoint {total:.6g} below aggregate lower bound {c.lo.sum():.6g}"
        )
    if total > c.hi.sum() + 1e-9:
        raise SmInfeasibleError(
            f"{what} setpoint {total:.6g} above aggregate upper bound {c.hi.sum():.6g}"
        )


def clear_sm(
    bids: list[SmaBid],
    rs: dict[str, float] | np.ndarray,
    smo_setpoint: tuple[float, float],
    pm_price: tuple[float, float],
    ceilings: tuple[float, float] | None = None,
    ranked: RankedObjectives | None = None,
    budget_P: float | None = None,
    budget_Q: float | None = None,
) -> SmSchedule:
    """Ranked-objective clearing of one operator's agents for one tick.

    ``smo_setpoint`` is the active/reactive allocation from the most recent
    primary clearing, ``pm_price`` the corresponding primary tariffs.  When
    the budgets are omitted they default to the per-tick slice of the primary
    settlement, price times setpoint.
    """
    ranked = ranked or RankedObjectives()
    n = len(bids)
    if n == 0:
        raise ValueError("no bids")
    if isinstance(rs, dict):
        rs_vec = np.array([rs[b.agent] for b in bids])
    else:
        rs_vec = np.asarray(rs, dtype=float)
    if ((rs_vec < 0) | (rs_vec > 1)).any():
        raise ValueError("resilience scores must lie in [0, 1]")
    P_star, Q_star = smo_setpoint
    mu_star_P, mu_star_Q = pm_price
    ceiling_P, ceiling_Q = ceilings if ceilings is not None else (
        2.0 * abs(mu_star_P), 2.0 * abs(mu_star_Q)
    )
    if budget_P is None:
        budget_P = mu_star_P * P_star
    if budget_Q is None:
        budget_Q = mu_star_Q * Q_star

    cp = _Commodity(
        x0=np.array([b.P0 for b in bids]),
        lo=np.array([b.P_lo for b in bids]),
        hi=np.array([b.P_hi for b in bids]),
        beta=np.array([b.beta_P for b in bids]),
    )
    cq = _Commodity(
        x0=np.array([b.Q0 for b in bids]),
        lo=np.array([b.Q_lo for b in bids]),
        hi=np.array([b.Q_hi for b in bids]),
        beta=np.array([b.beta_Q for b in bids]),
    )
    _stage_feasible(cp, P_star, "active")
    _stage_feasible(cq, Q_star, "reactive")

    zeros = np.zeros(n)

    def g1(P, Q):
        return float(rs_vec @ ((P - cp.x0) ** 2 + (Q - cq.x0) ** 2))

    # stage 1: resilience-weighted adherence
    P1 = _sep_qp(rs_vec, cp.x0, zeros, cp.lo, cp.hi, P_star)
    Q1 = _sep_qp(rs_vec, cq.x0, zeros, cq.lo, cq.hi, Q_star)
    f1_opt = g1(P1, Q1)
    band1 = _band(f1_opt, ranked.bands[0])

    # stage 2, tariff pass: minimize net cost at the stage-1 setpoints
    mu_P = _greedy_tariffs(P1, ceiling_P, budget_P)
    mu_Q = _greedy_tariffs(Q1, ceiling_Q, budget_Q)

    # stage 2, setpoint pass: linear objective inside the stage-1 band
    def pq_of_lambda(lam: float):
        P = _sep_qp(lam * rs_vec, cp.x0, mu_P, cp.lo, cp.hi, P_star)
        Q = _sep_qp(lam * rs_vec, cq.x0, mu_Q, cq.lo, cq.hi, Q_star)
        return P, Q

    P2, Q2 = pq_of_lambda(EPS_W)
    if g1(P2, Q2) > f1_opt + band1:
        lo_l, hi_l = EPS_W, 1.0
        while g1(*pq_of_lambda(hi_l)) > f1_opt + band1 and hi_l < 1e12:
            hi_l *= 8.0
        for _ in range(120):
            mid = 0.5 * (lo_l + hi_l)
            if g1(*pq_of_lambda(mid)) > f1_opt + band1:
                lo_l = mid
            else:
                hi_l = mid
        P2, Q2 = pq_of_lambda(hi_l)
    f2_opt = float(mu_P @ P2 + mu_Q @ Q2)
    band2 = _band(f2_opt, ranked.bands[1])

    # stage 3: componentwise-maximal flexibility at the cleared setpoints
    dP = np.maximum(0.0, np.minimum(P2 - cp.lo, cp.hi - P2))
    dQ = np.maximum(0.0, np.minimum(Q2 - cq.lo, cq.hi - Q2))
    f3_opt = -float(dP.sum() + dQ.sum())
    band3 = _band(f3_opt, ranked.bands[2])

    # stage 4: disutility re-centering inside all bands, preserving granted
    # flexibility (the boxes shrink by the stage-3 ranges)
    lo4_P, hi4_P = cp.lo + dP, cp.hi - dP
    lo4_Q, hi4_Q = cq.lo + dQ, cq.hi - dQ

    def stage4(lam1: float, lam2: float):
        P = _sep_qp(cp.beta + lam1 * rs_vec, cp.x0, lam2 * mu_P, lo4_P, hi4_P, P_star)
        Q = _sep_qp(cq.beta + lam1 * rs_vec, cq.x0, lam2 * mu_Q, lo4_Q, hi4_Q, Q_star)
        return P, Q

    def bands_ok(P, Q):
        ok1 = g1(P, Q) <= f1_opt + band1 + 1e-9
        ok2 = float(mu_P @ P + mu_Q @ Q) <= f2_opt + band2 + 1e-9
        return ok1, ok2

    P4, Q4 = stage4(0.0, 0.0)
    ok1, ok2 = bands_ok(P4, Q4)
    if not (ok1 and ok2):
        lam1 = lam2 = 0.0
        for _ in range(40):
            P4, Q4 = stage4(lam1, lam2)
            ok1, ok2 = bands_ok(P4, Q4)
            if ok1 and ok2:
                break
            if not ok1:
                lam1 = max(2.0 * lam1, 1e-4)
            if not ok2:
                lam2 = max(2.0 * lam2, 1e-4)
        else:
            P4, Q4 = P2, Q2  # stage-2 point satisfies every band by construction
    f4_val = float(cp.beta @ (P4 - cp.x0) ** 2 + cq.beta @ (Q4 - cq.x0) ** 2)

    schedule = SmSchedule(
        agents=[b.agent for b in bids],
        P=P4,
        Q=Q4,
        dP=dP,
        dQ=dQ,
        mu_P=mu_P,
        mu_Q=mu_Q,
        stage_values={"f1": g1(P4, Q4), "f2": float(mu_P @ P4 + mu_Q @ Q4),
                      "f3": -float(dP.sum() + dQ.sum()), "f4": f4_val,
                      "f1_opt": f1_opt, "f2_opt": f2_opt, "f3_opt": f3_opt},
        stage_bands={"f1": band1, "f2": band2, "f3": band3},
        setpoint=(P_star, Q_star),
    )
    return schedule


def clear_sm_three_phase(
    bids_by_phase: dict[str, list[SmaBid]],
    rs: dict[str, float],
    setpoints: dict[str, tuple[float, float]],
    pm_prices: dict[str, tuple[float, float]],
    ceilings: tuple[float, float] | None = None,
    ranked: RankedObjectives | None = None,
) -> dict[str, SmSchedule]:
    """Phase-indexed clearing; balance holds per phase, budget over phases.

    Agents absent from a phase simply do not appear in that phase's bid list.
    Per-phase infeasibility is reported naming the phase.  The budget
    constraint applies to the sum across phases, so each phase is cleared
    against its slice of the primary settlement and the combined inequality
    is verified afterwards.
    """
    schedules: dict[str, SmSchedule] = {}
    total_budget = 0.0
    total_paid = 0.0
    for phase, bids in bids_by_phase.items():
        if not bids:
            continue
        setp = setpoints[phase]
        price = pm_prices[phase]
        try:
            sched = clear_sm(bids, rs, setp, price, ceilings, ranked)
        except SmInfeasibleError as exc:
            raise SmInfeasibleError(f"phase {phase}: {exc}") from exc
        schedules[phase] = sched
        total_budget += price[0] * setp[0] + price[1] * setp[1]
        total_paid += float(sched.mu_P @ sched.P + sched.mu_Q @ sched.Q)
    if total_paid > total_budget + 1e-7:
        raise SmInfeasibleError(
            f"combined phase budget violated: paid {total_paid:.6g} > {total_budget:.6g}"
        )
    return schedules


# ---------------------------------------------------------------------------
# aggregation into the primary-market bid


def build_pm_bid(
    schedule: SmSchedule,
    bids: list[SmaBid],
    node: str,
    alpha_Q_fraction: float = 0.1,
):
    """Aggregate a cleared secondary schedule into the operator's PM bid.

    Baseline is the summed setpoints, the flexibility box is the summed
    setpoint-minus/plus-range, and the cost/disutility coefficients are the
    absolute-setpoint-weighted averages of the agent tariffs and disutilities
    (falling back to plain means when every setpoint is zero).
    """
    from .pm_market import PmBid

    P0 = float(schedule.P.sum())
    Q0 = float(schedule.Q.sum())
    P_lo = float((schedule.P - schedule.dP).sum())
    P_hi = float((schedule.P + schedule.dP).sum())
    Q_lo = float((schedule.Q - schedule.dQ).sum())
    Q_hi = float((schedule.Q + schedule.dQ).sum())
    wP = np.abs(schedule.P)
    wQ = np.abs(schedule.Q)
    beta_P_vec = np.array([b.beta_P for b in bids])
    beta_Q_vec = np.array([b.beta_Q for b in bids])

    def wavg(vals: np.ndarray, w: np.ndarray) -> float:
        tot = float(w.sum())
        if tot <= 0.0:
            return float(vals.mean())
        return float((vals * w).sum() / tot)

    alpha_P = wavg(schedule.mu_P, wP)
    alpha_Q = wavg(schedule.mu_Q, wQ) if wQ.sum() > 0 else alpha_Q_fraction * alpha_P
    beta_P = wavg(beta_P_vec, wP)
    beta_Q = wavg(beta_Q_vec, wQ) if wQ.sum() > 0 else beta_P
    return PmBid(
        node=node,
        P0=P0, Q0=Q0,
        P_lo=P_lo, P_hi=P_hi, Q_lo=Q_lo, Q_hi=Q_hi,
        alpha_P=alpha_P, alpha_Q=alpha_Q,
        beta_P=beta_P, beta_Q=beta_Q,
    )


def export_schedule_csv(path: str, rows: list[tuple]) -> None:
    """Cleared-schedule CSV: timestep, agent, P, Q, dP, dQ, mu_P, mu_Q."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "agent", "P", "Q", "dP", "dQ", "mu_P", "mu_Q"])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
