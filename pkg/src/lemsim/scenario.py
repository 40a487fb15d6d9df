"""Scenario definitions and the co-simulation loop.

One simulated minute per secondary tick, one primary clearing every five
ticks.  Each active feeder node hosts an operator with a handful of agents;
agents bid flexibility around their intrinsic demand and generation, the
secondary market disaggregates the operator setpoints, and the primary
market clears the feeder-level program through the distributed solver.
Monitoring compares scheduled with actual injections every tick, attacks
perturb the actuals (and the attacked agents' subsequent capabilities), and
a sustained substation deviation triggers the mitigation redispatch or, for
the islanding scenario, the reconfiguration planner.

Runs are bit-deterministic for a fixed (fixture, seed, config) triple.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import distopt, mitigation, pm_market, reconfig, resilience, sm_market
from .netmodel import FeederModel, load_feeder, to_balanced_single_phase
from .powerflow import solve_sweep

SM_DT_MIN = 1
PM_EVERY = 5


class ScenarioError(RuntimeError):
    def __init__(self, msg: str, tick: int | None = None):
        super().__init__(f"tick {tick}: {msg}" if tick is not None else msg)
        self.tick = tick


@dataclass(frozen=True)
class AttackScenario:
    id: str
    attack_type: str              # load-alteration | dg-outage | islanding
    surface: str                  # PMA | SMA | PCC
    magnitude_kw: float
    attack_minute: int
    compromised: tuple[str, ...]  # node ids (PMA surface) or agent ids (SMA)
    comm_severed: bool = False
    model_kind: str = "ci"        # bf | ci
    algorithm: str = "B"          # mitigation coefficient rule
    sm_first: bool = False        # secondary redispatch precedes primary
    mitigation_delay_min: int = 0  # ticks between detection and the PM step

    @staticmethod
    def from_file(path: str) -> "AttackScenario":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return AttackScenario(
            id=raw["id"],
            attack_type=raw["attack_type"],
            surface=raw["surface"],
            magnitude_kw=float(raw["magnitude_kw"]),
            attack_minute=int(raw["attack_minute"]),
            compromised=tuple(raw.get("compromised", [])),
            comm_severed=bool(raw.get("comm_severed", False)),
            model_kind=raw.get("model_kind", "ci"),
            algorithm=raw.get("algorithm", "B"),
            sm_first=bool(raw.get("sm_first", False)),
            mitigation_delay_min=int(raw.get("mitigation_delay_min", 0)),
        )


NULL_ATTACK = AttackScenario(
    id="none", attack_type="none", surface="PMA", magnitude_kw=0.0,
    attack_minute=10**9, compromised=(), model_kind="bf", algorithm="A",
)


@dataclass
class RunConfig:
    seed: int = 1
    horizon_min: int = 15
    flexibility: float = 0.3
    load_scale: float = 1.0
    lmp_usd_kwh: float = 0.05
    lmp_q_fraction: float = 0.1
    xi: float = 1.0
    alpha_scale: float = 1.0        # bridges tariff-units alpha into the p.u. objective
    beta_scale: float = 1.0
    ceiling_factor: float = 2.0
    v_band: float = 0.06
    partition: str = "zone4"        # zone4 | zone | node
    algo: str = "nst-pac"           # nst-pac | pac
    rho: float = 1.0
    gamma_abs: float = 2.0
    penalty: float = 2.0
    mask_cap: float = 0.0           # Nesterov cap; heavy feeders run unmasked
    inner_max: int = 10
    tol: float = 2e-4
    max_iter: int = 6000
    pre_curtail: float = 0.0        # fraction of load flexibility engaged pre-attack
    sma_beta_low: float = 0.02
    sma_beta_high: float = 0.5
    der_pv_frac: float = 1.0        # photovoltaics run at rating pre-attack
    der_batt_frac: float = 0.35     # storage keeps headroom
    sma_flexible_share: float = 0.5
    dg_alpha: float = 0.01
    anomaly: resilience.AnomalyConfig = field(
        default_factory=lambda: resilience.AnomalyConfig(window=5, horizon_windows=4)
    )
    rs_alpha: float = 0.5
    detect_threshold: float = 0.02
    detect_sustain: int = 1
    reserve_margin: float = 0.1     # operator headroom kept when clipping setpoints

    @staticmethod
    def from_file(path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = RunConfig()
        for k, v in raw.items():
            if not hasattr(cfg, k):
                raise ScenarioError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        return cfg


def load_price_series(path: str) -> dict[int, float]:
    """Five-minute price file: 'minute,usd_per_kwh' rows."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("minute"):
                continue
            minute, price = line.split(",")
            out[int(minute)] = float(price)
    return out


def price_at(prices: dict[int, float], minute: int, default: float) -> float:
    if not prices:
        return default
    keys = [k for k in prices if k <= minute]
    if not keys:
        return prices[min(prices)]
    return prices[max(keys)]


# ---------------------------------------------------------------------------
# agents


@dataclass
class SmaState:
    """One secondary agent's intrinsic state."""

    agent_id: str
    node: str
    load_kw: float = 0.0          # anchor demand, positive
    load_kvar: float = 0.0
    der_kw: float = 0.0           # currently available generation
    der_cap_kw: float = 0.0
    flex: float = 0.3
    beta_P: float = 0.1
    beta_Q: float = 0.01
    compromised: bool = False
    extra_load_kw: float = 0.0    # load-alteration injection
    scheduled_P: float = 0.0
    scheduled_Q: float = 0.0
    dP: float = 0.0
    dQ: float = 0.0

    @property
    def baseline_P(self) -> float:
        return -(self.load_kw + self.extra_load_kw) + self.der_kw

    @property
    def baseline_Q(self) -> float:
        return -self.load_kvar

    def bid(self) -> sm_market.SmaBid:
        p0 = self.baseline_P
        ref = abs(self.load_kw + self.extra_load_kw) + abs(self.der_kw)
        width = self.flex * max(ref, 0.1)
        p_hi = max(p0 + width, p0 + (self.der_cap_kw - self.der_kw))
        p_lo = p0 - width
        if self.der_cap_kw > 0:
            # dispatchable generation can back off completely
            p_lo = min(p_lo, p0 - self.der_kw)
        q0 = self.baseline_Q
        qw = self.flex * max(abs(q0), 0.05)
        return sm_market.SmaBid(
            agent=self.agent_id, P0=p0, Q0=q0,
            P_lo=p_lo, P_hi=p_hi, Q_lo=q0 - qw, Q_hi=q0 + qw,
            beta_P=self.beta_P, beta_Q=self.beta_Q,
        )

    def actual(self) -> tuple[float, float]:
        """Delivered injection: the schedule minus what the attack removed."""
        gap = 0.0
        if self.compromised:
            # outage: generation in the schedule that no longer exists;
            # load alteration: consumption the schedule did not include
            gap = self.scheduled_P - np.clip(
                self.scheduled_P, self.bid().P_lo, self.bid().P_hi
            )
        return self.scheduled_P - gap, self.scheduled_Q


@dataclass
class SmoState:
    node: str
    agents: list[SmaState]
    setpoint: tuple[float, float] = (0.0, 0.0)      # kW from the PM
    price: tuple[float, float] = (0.05, 0.005)      # $/kWh from the PM
    schedule: sm_market.SmSchedule | None = None
    rs: dict[str, float] = field(default_factory=dict)

    def bids(self) -> list[sm_market.SmaBid]:
        return [a.bid() for a in self.agents]

    def aggregate_baseline(self) -> tuple[float, float]:
        return (
            sum(a.baseline_P for a in self.agents),
            sum(a.baseline_Q for a in self.agents),
        )

    def actual_injection(self) -> complex:
        p = sum(a.actual()[0] for a in self.agents)
        q = sum(a.actual()[1] for a in self.agents)
        return complex(p, q)


def generate_bids(model: FeederModel, flexibility: float, seed: int,
                  cfg: RunConfig | None = None) -> dict[str, SmoState]:
    """Deterministic agent population for every active market site.

    Each operator node gets three to five agents splitting the node's load;
    dispatchable generation lands on the first agent.  Every bid box brackets
    its baseline by at least ±flexibility around the anchor magnitude.
    """
    cfg = cfg or RunConfig()
    rng = np.random.default_rng(seed)
    smos: dict[str, SmoState] = {}
    for node in model.nodes:
        if not node.is_smo_site:
            continue
        n_agents = int(rng.integers(3, 6))
        shares = rng.dirichlet(np.ones(n_agents) * 4.0)
        load = node.total_load_kw * cfg.load_scale
        load_q = node.total_load_kvar * cfg.load_scale
        der_cap = sum(d.cap_kw for d in node.ders if not d.islanded_only)
        der_kw = sum(
            d.cap_kw * (cfg.der_pv_frac if d.kind == "PV" else cfg.der_batt_frac)
            for d in node.ders if not d.islanded_only
        )
        agents = []
        for k in range(n_agents):
            flexible = rng.random() < cfg.sma_flexible_share
            beta = cfg.sma_beta_low if flexible else cfg.sma_beta_high
            beta = beta * float(rng.uniform(0.8, 1.2))
            agents.append(
                SmaState(
                    agent_id=f"{node.id}.{k + 1}",
                    node=node.id,
                    load_kw=load * float(shares[k]),
                    load_kvar=load_q * float(shares[k]),
                    der_kw=0.0,
                    der_cap_kw=0.0,
                    flex=flexibility * float(rng.uniform(0.6, 1.0)),
                    beta_P=beta,
                    beta_Q=0.1 * beta,
                )
            )
        if der_cap > 0:
            agents[0].der_cap_kw = der_cap
            agents[0].der_kw = der_kw
        smos[node.id] = SmoState(node=node.id, agents=agents)
        for a in agents:
            smos[node.id].rs[a.agent_id] = 1.0
    return smos


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RunMetrics:
    ticks: list[int] = field(default_factory=list)
    import_kw: list[float] = field(default_factory=list)
    expected_import_kw: list[float] = field(default_factory=list)
    total_load_kw: list[float] = field(default_factory=list)
    total_cost: list[float] = field(default_factory=list)
    dlmp: list[dict[str, tuple[float, float]]] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def snapshot(self, label: str) -> dict:
        idx = [i for i, ph in enumerate(self.phase) if ph == label]
        if not idx:
            return {}
        take = idx[-1]
        return {
            "import_kw": self.import_kw[take],
            "total_load_kw": self.total_load_kw[take],
            "total_cost": self.total_cost[take],
        }

    def write_csvs(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "timeseries.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "phase", "import_kw", "expected_import_kw",
                        "total_load_kw", "total_cost"])
            for i, t in enumerate(self.ticks):
                w.writerow([
                    t, self.phase[i], repr(self.import_kw[i]),
                    repr(self.expected_import_kw[i]),
                    repr(self.total_load_kw[i]), repr(self.total_cost[i]),
                ])
        with open(os.path.join(out_dir, "prices.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "node", "dlmp_p", "dlmp_q"])
            for i, t in enumerate(self.ticks):
                for node, (p, q) in sorted(self.dlmp[i].items()):
                    w.writerow([t, node, repr(p), repr(q)])


# ---------------------------------------------------------------------------
# the engine


class ScenarioEngine:
    def __init__(
        self,
        model: FeederModel,
        scenario: AttackScenario,
        cfg: RunConfig,
        prices: dict[int, float] | None = None,
    ):
        self.scenario = scenario
        self.cfg = cfg
        if scenario.model_kind == "bf" and not model.balanced:
            model = to_balanced_single_phase(model)
        from .powerflow import assign_default_ampacities

        self.model = assign_default_ampacities(model)
        self.prices = prices or {}
        self.smos = generate_bids(self.model, cfg.flexibility, cfg.seed, cfg)
        self.monitor = mitigation.PccMonitor(
            threshold=cfg.detect_threshold, sustain=cfg.detect_sustain
        )
        self.scoreboard = resilience.ScoreBoard(alpha=cfg.rs_alpha)
        self.forecaster = resilience.PersistenceForecaster()
        self.nar_history: dict[str, list[float]] = {}
        self.metrics = RunMetrics()
        self.objective: pm_market.PmObjective | None = None
        self.base_objective: pm_market.PmObjective | None = None
        self.dlmp: dict[str, tuple[float, float]] = {}
        self._warm: dict | None = None
        self._mitigated = False
        self.resilience_objective: pm_market.PmObjective | None = None
        self._attack_applied = False
        self._islanded = False
        self._phase = "pre"
        self._last_pm_solution = None
        self._last_program = None
        self._restoration: reconfig.RestorationPlan | None = None

    # -- agent-level helpers

    def _apply_attack(self, tick: int) -> None:
        if self._attack_applied or tick < self.scenario.attack_minute:
            return
        sc = self.scenario
        self._attack_applied = True
        self._phase = "post"
        if sc.attack_type == "islanding":
            self._islanded = True
            return
        targets: list[SmaState] = []
        if sc.surface == "SMA":
            wanted = set(sc.compromised)
            for smo in self.smos.values():
                targets += [a for a in smo.agents if a.agent_id in wanted]
        else:
            wanted = set(sc.compromised)
            for node, smo in self.smos.items():
                if node in wanted:
                    targets += [a for a in smo.agents if a.der_cap_kw > 0] or smo.agents[:1]
        if not targets:
            raise ScenarioError("attack has no valid targets", tick)
        if sc.attack_type == "dg-outage":
            total_der = sum(a.der_kw for a in targets)
            scale = sc.magnitude_kw / max(total_der, 1e-9)
            for a in targets:
                a.der_kw = max(0.0, a.der_kw * (1.0 - scale))
                a.der_cap_kw = a.der_kw
                a.compromised = True
        else:  # load alteration
            share = sc.magnitude_kw / len(targets)
            for a in targets:
                a.extra_load_kw += share
                a.flex = 0.0
                a.compromised = True

    def _measure(self) -> tuple[float, float]:
        """Physical substation import and total consumed load, in kW."""
        if self._islanded:
            served = 0.0
            if self._restoration is not None:
                shed = dict(self._restoration.shed)
                for nid in self._restoration.islands:
                    kw = self.model.node(nid).total_load_kw * self.cfg.load_scale
                    served += kw * (1.0 - shed.get(nid, 0.0))
            return 0.0, served
        inj: dict[tuple[str, str], complex] = {}
        per_phase = not self.model.balanced
        base = self.model.s_base_kva / (3.0 if per_phase else 1.0)
        for node in self.model.nodes:
            phases = node.phases
            smo = self.smos.get(node.id)
            s_node = smo.actual_injection() if smo else complex(0.0, 0.0)
            if smo is None and node.total_load_kw:
                s_node = -complex(node.total_load_kw, node.total_load_kvar) * self.cfg.load_scale
            shunt = sum(node.shunt_kvar.values())
            s_node += complex(0.0, shunt)
            for p in phases:
                inj[(node.id, p)] = s_node / len(phases) / base
        res = solve_sweep(self.model, inj)
        # the slack injection sums all phase flows, so the per-phase base
        # converts it straight to kW
        import_kw = res.root_import.real * base
        # consumption responds to curtailment schedules
        sched_load = 0.0
        for smo in self.smos.values():
            for a in smo.agents:
                actual_p, _ = a.actual()
                sched_load += max(0.0, -(actual_p - a.der_kw))
        return import_kw, sched_load

    def _true_cost(self, import_kw: float) -> float:
        """System operating cost at the pre-attack coefficients.

        Import energy at the prevailing price plus quadratic local generation
        cost and load-deviation disutility against the intrinsic anchors,
        evaluated on the physical state; one consistent function across the
        pre/post/mitigated snapshots.
        """
        lam = price_at(self.prices, self._now, self.cfg.lmp_usd_kwh)
        s = self.model.s_base_kva
        obj = self.base_objective
        cost_pu = lam * max(import_kw, 0.0) / s
        for node in sorted(self.smos):
            smo = self.smos[node]
            gen_kw = 0.0
            cons_kw = 0.0
            anchor_kw = 0.0
            for a in smo.agents:
                actual_p, _ = a.actual()
                own = a.load_kw + a.extra_load_kw
                gen_kw += max(0.0, actual_p + own)
                cons_kw += max(0.0, -(actual_p - max(0.0, actual_p + own)))
                anchor_kw += own
            alpha = obj.alpha_P.get(node, 0.0) if obj else 0.0
            beta = obj.beta_P.get(node, 0.0) if obj else 0.0
            cost_pu += alpha * (gen_kw / s) ** 2
            cost_pu += beta * ((cons_kw - anchor_kw) / s) ** 2
        return cost_pu * s

    # -- market layers

    def _sm_tick(self, tick: int) -> None:
        for node in sorted(self.smos):
            smo = self.smos[node]
            bids = smo.bids()
            lo = sum(b.P_lo for b in bids)
            hi = sum(b.P_hi for b in bids)
            qlo = sum(b.Q_lo for b in bids)
            qhi = sum(b.Q_hi for b in bids)
            # infeasible obligations clip to the aggregate range less an
            # operating margin, so some flexibility survives for the next
            # primary clearing
            mp = self.cfg.reserve_margin * (hi - lo)
            mq = self.cfg.reserve_margin * (qhi - qlo)
            target_p = min(max(smo.setpoint[0], lo + mp), hi - mp)
            target_q = min(max(smo.setpoint[1], qlo + mq), qhi - mq)
            rs = {a.agent_id: smo.rs.get(a.agent_id, 1.0) for a in smo.agents}
            ceil = (
                self.cfg.ceiling_factor * abs(smo.price[0]),
                self.cfg.ceiling_factor * abs(smo.price[1]),
            )
            try:
                sched = sm_market.clear_sm(
                    bids, rs, (target_p, target_q), smo.price, ceil
                )
            except sm_market.SmInfeasibleError as exc:
                raise ScenarioError(f"SM clearing at {node}: {exc}", tick) from exc
            smo.schedule = sched
            for a, p, q, dp, dq in zip(
                smo.agents, sched.P, sched.Q, sched.dP, sched.dQ
            ):
                a.scheduled_P = float(p)
                a.scheduled_Q = float(q)
                a.dP = float(dp)
                a.dQ = float(dq)

    def _pm_bids(self) -> list[pm_market.PmBid]:
        out = []
        s = self.model.s_base_kva
        for node in sorted(self.smos):
            smo = self.smos[node]
            raw = sm_market.build_pm_bid(smo.schedule, smo.bids(), node)
            out.append(
                pm_market.PmBid(
                    node=node,
                    P0=raw.P0 / s, Q0=raw.Q0 / s,
                    P_lo=raw.P_lo / s, P_hi=raw.P_hi / s,
                    Q_lo=raw.Q_lo / s, Q_hi=raw.Q_hi / s,
                    alpha_P=(self.cfg.dg_alpha if any(
                        a.der_cap_kw > 0 for a in smo.agents
                    ) else raw.alpha_P * self.cfg.alpha_scale),
                    alpha_Q=0.1 * max(raw.alpha_P, 1e-4) * self.cfg.alpha_scale,
                    beta_P=raw.beta_P * self.cfg.beta_scale,
                    beta_Q=max(raw.beta_Q, 0.1 * raw.beta_P) * self.cfg.beta_scale,
                    has_generation=any(a.der_cap_kw > 0 for a in smo.agents),
                )
            )
        return out

    def _partition(self) -> dict[str, str]:
        if self.cfg.partition == "node":
            return {n.id: n.id for n in self.model.nodes}
        if self.cfg.partition == "zone4":
            coarse = {1: "A", 2: "A", 3: "B", 4: "B", 5: "C", 6: "C", 7: "D"}
            return {n.id: coarse.get(n.zone, "A") for n in self.model.nodes}
        return {n.id: f"z{n.zone}" for n in self.model.nodes}

    def _pm_clear(self, tick: int, objective: pm_market.PmObjective | None = None) -> None:
        bids = self._pm_bids()
        lam = price_at(self.prices, tick, self.cfg.lmp_usd_kwh)
        s = self.model.s_base_kva
        if objective is None:
            objective = pm_market.assemble_objective(
                bids, self.model.pcc_node,
                lmp_P=lam, lmp_Q=self.cfg.lmp_q_fraction * lam,
                xi=self.cfg.xi,
            )
            # the pre-attack coefficient maps seed the mitigation rescale
            if self.base_objective is None or not self._attack_applied:
                self.base_objective = objective
        self.objective = objective
        if self.scenario.model_kind == "bf":
            prog = pm_market.build_bf_socp(
                self.model, bids, objective, v_band=self.cfg.v_band
            )
        else:
            bounds = pm_market.preprocess_ci_bounds(
                self.model, bids, v_band=self.cfg.v_band
            )
            prog = pm_market.build_ci_mce(self.model, bids, objective, bounds)
        adjacency = [(b.from_node, b.to_node) for b in self.model.branches]
        adjacency += [s_.key for s_ in self.model.switches]
        atz = distopt.atomize(prog, self._partition(), adjacency)
        if self.cfg.algo == "nst-pac":
            gains = distopt.Gains(
                rho=self.cfg.rho, gamma_abs=self.cfg.gamma_abs,
                penalty_scale=self.cfg.penalty / (self.cfg.rho * self.cfg.gamma_abs),
            )
        else:
            gains = distopt.Gains(rho=self.cfg.rho)
        stop = distopt.StopRule(
            tol_eq=self.cfg.tol, tol_consensus=self.cfg.tol,
            max_iter=self.cfg.max_iter, check_every=25,
            inner_max=self.cfg.inner_max,
        )
        warm = None
        if self._warm is not None and self._warm.get("n") == prog.n:
            warm = self._warm.get("state")
        if self.cfg.algo == "nst-pac":
            sched = np.minimum(
                distopt._nesterov_schedule(self.cfg.max_iter), self.cfg.mask_cap
            )
            res = distopt.solve_nst_pac(
                atz, gains, stop, alpha_schedule=sched,
                phi_schedule=sched, theta_schedule=sched, warm=warm,
            )
        else:
            res = distopt.solve_pac(atz, gains, stop, warm=warm)
        if not res.converged:
            raise ScenarioError(
                f"PM clearing did not converge (eq {res.eq_residual:.2e}, "
                f"cons {res.consensus_residual:.2e})", tick,
            )
        self._warm = {"n": prog.n, "state": res.stacked_state}
        self._last_pm_solution = res
        self._last_program = prog
        try:
            dl = pm_market.extract_dlmp(res)
        except pm_market.DualsNotConvergedError:
            dl = {}
        if self.scenario.model_kind == "bf":
            self.dlmp = dl
        else:
            agg: dict[str, tuple[float, float]] = {}
            for key, val in dl.items():
                node = key.split(":")[0]
                cur = agg.get(node, (0.0, 0.0))
                agg[node] = (cur[0] + val[0], cur[1] + val[1])
            self.dlmp = agg

        # new operator setpoints and prices
        for node in sorted(self.smos):
            smo = self.smos[node]
            if self.scenario.model_kind == "bf":
                p = res.value(prog, f"PG:{node}") - res.value(prog, f"PL:{node}")
                q = res.value(prog, f"QG:{node}") - res.value(prog, f"QL:{node}")
            else:
                p = sum(
                    res.value(prog, f"P:{node}:{ph}")
                    for ph in self.model.node(node).phases
                ) / (1.0 if self.model.balanced else 1.0)
                q = sum(
                    res.value(prog, f"Q:{node}:{ph}")
                    for ph in self.model.node(node).phases
                )
                base = self.model.s_base_kva / (3.0 if not self.model.balanced else 1.0)
                p *= base / self.model.s_base_kva
                q *= base / self.model.s_base_kva
            smo.setpoint = (p * s, q * s)
            price = self.dlmp.get(node)
            if price is not None:
                smo.price = (abs(price[0]), abs(price[1]))
        pcc_import = self._pm_import_kw()
        self.monitor.update_expected(-pcc_import)

    def _pm_import_kw(self) -> float:
        res, prog = self._last_pm_solution, self._last_program
        if res is None:
            return 0.0
        s = self.model.s_base_kva
        pcc = self.model.pcc_node
        if self.scenario.model_kind == "bf":
            return res.value(prog, f"PG:{pcc}") * s
        base = s / (3.0 if not self.model.balanced else 1.0)
        return sum(
            res.value(prog, f"P:{pcc}:{ph}") for ph in self.model.node(pcc).phases
        ) * base

    # -- monitoring

    def _monitor_tick(self, tick: int) -> bool:
        samples_by_smo: dict[str, list[resilience.MonitorSample]] = {}
        for node in sorted(self.smos):
            smo = self.smos[node]
            samples = []
            for a in smo.agents:
                actual_p, actual_q = a.actual()
                samples.append(
                    resilience.MonitorSample(
                        agent=a.agent_id,
                        P_set=a.scheduled_P, Q_set=a.scheduled_Q,
                        dP=a.dP, dQ=a.dQ,
                        P_actual=actual_p, Q_actual=actual_q,
                    )
                )
                # telemetry anomaly stream against the persistence forecast
                pred = self.forecaster.predict(a.agent_id, actual_p)
                rel = abs(actual_p - pred) / max(abs(pred), 1e-6)
                flagged = rel > self.cfg.anomaly.tol_rel_err
                hist = self.nar_history.setdefault(a.agent_id, [1.0] * 8)
                hist.append(0.0 if flagged else 1.0)
                self.forecaster.observe(a.agent_id, actual_p)
            samples_by_smo[node] = samples

        for node, samples in samples_by_smo.items():
            smo = self.smos[node]
            prior = {a: self.scoreboard.cs.get(a, 1.0) for a in smo.rs}
            new_cs = resilience.update_cs(samples, prior, tick)
            self.scoreboard.cs.update(new_cs)
            for a in smo.agents:
                hist = self.nar_history[a.agent_id]
                window = hist[-self.cfg.anomaly.horizon_windows:]
                nar_now = window[-1]
                ts = resilience.update_ts(nar_now, window, self.cfg.anomaly)
                self.scoreboard.ts[a.agent_id] = ts
        self.scoreboard.refresh_rs()
        for node in sorted(self.smos):
            smo = self.smos[node]
            for a in smo.agents:
                smo.rs[a.agent_id] = self.scoreboard.rs.get(a.agent_id, 1.0)

        import_kw, _ = self._measure()
        return self.monitor.observe(-import_kw)

    # -- mitigation

    def _mitigate(self, tick: int) -> None:
        if self._mitigated:
            return
        self._mitigated = True
        p_pre, p_post = self.monitor.import_pair
        del tick

        def update_objective():
            if self.scenario.algorithm == "A":
                _, new_obj = mitigation.update_coefficients_A(
                    p_pre, p_post, self.base_objective
                )
            else:
                rs_node = {
                    node: float(np.mean(list(self.smos[node].rs.values()) or [1.0]))
                    for node in sorted(self.smos)
                }
                flex_down = {}
                for node in sorted(self.smos):
                    smo = self.smos[node]
                    down = sum(a.dP for a in smo.agents)
                    flex_down[node] = np.full(3, down / 3.0)
                _, new_obj = mitigation.update_coefficients_B(
                    np.full(3, p_pre / 3.0), np.full(3, p_post / 3.0),
                    rs_node, flex_down, self.base_objective,
                )
            return new_obj

        def redispatch_pm(new_objective):
            self.resilience_objective = new_objective
            self._pm_clear(self._now, objective=new_objective)
            return self._last_pm_solution

        def redispatch_sm(_pm_result):
            self._sm_tick(self._now)
            return True

        mitigation.orchestrate_redispatch(
            True, update_objective, redispatch_pm, redispatch_sm,
            sm_first=self.scenario.sm_first,
        )
        self._phase = "mitigated"

    def _reconfigure(self, tick: int) -> None:
        if self._restoration is not None:
            return
        islanded = self.model.with_switch_states(
            {("150", "149"): "OPEN"} if ("150", "149") in
            {s.key for s in self.model.switches} else {}
        )
        ts_node = {
            node: float(np.mean([
                self.scoreboard.ts.get(a.agent_id, 1.0) for a in smo.agents
            ]))
            for node, smo in self.smos.items()
        }
        pnr_node = {
            node: float(np.mean([smo.rs.get(a.agent_id, 1.0) for a in smo.agents]))
            for node, smo in self.smos.items()
        }
        plans = reconfig.plan_restoration(islanded, pnr=pnr_node, ts=ts_node)
        plan, new_model, _ = reconfig.apply_first_feasible(islanded, plans)
        self._restoration = plan
        self._phase = "mitigated"

    # -- loop

    def run(self) -> RunMetrics:
        """Tick order: attack lands, scheduled clearings run, the physical
        state is measured and recorded, and only then does a raised flag
        engage mitigation, so its effect shows from the next tick on."""
        cfg = self.cfg
        self._now = 0
        for node in sorted(self.smos):
            smo = self.smos[node]
            smo.setpoint = smo.aggregate_baseline()
            smo.price = (cfg.lmp_usd_kwh, cfg.lmp_q_fraction * cfg.lmp_usd_kwh)
        detect_tick: int | None = None
        for tick in range(cfg.horizon_min):
            self._now = tick
            self._apply_attack(tick)
            if self._islanded and self._restoration is None:
                self._reconfigure(tick)
            if not self._islanded:
                if tick % PM_EVERY == 0:
                    self._sm_tick(tick)
                    self._pm_clear(tick, objective=self.resilience_objective)
                self._sm_tick(tick)
            flag = self._monitor_tick(tick)

            if self._attack_applied and not self._islanded:
                if self._mitigated:
                    self._phase = "mitigated"
                elif self.scenario.sm_first and detect_tick is not None and tick > detect_tick:
                    self._phase = "sm_only"
                else:
                    self._phase = "post"

            import_kw, load_kw = self._measure()
            self.metrics.ticks.append(tick)
            self.metrics.phase.append(self._phase)
            self.metrics.import_kw.append(import_kw)
            self.metrics.expected_import_kw.append(self._pm_import_kw())
            self.metrics.total_load_kw.append(load_kw)
            self.metrics.total_cost.append(self._true_cost(import_kw))
            self.metrics.dlmp.append(dict(self.dlmp))

            if flag and self._attack_applied and not self._islanded:
                if detect_tick is None:
                    detect_tick = tick
                ready = tick >= detect_tick + self.scenario.mitigation_delay_min
                if ready and not self._mitigated:
                    self._mitigate(tick)
        self.metrics.summary = self._summary()
        return self.metrics

    def _summary(self) -> dict:
        m = self.metrics
        out: dict = {}
        for phase in ("pre", "post", "sm_only", "mitigated"):
            snap = m.snapshot(phase)
            if snap:
                out[phase] = snap
        if self._restoration is not None:
            out["restoration"] = {
                "restored_critical_kw": self._restoration.restored_critical_kw,
                "restored_noncritical_kw": self._restoration.restored_noncritical_kw,
                "switch_open": self._restoration.switch_open,
                "switch_close": self._restoration.switch_close,
                "dg_dispatch": self._restoration.dg_dispatch,
            }
        return out


def run_scenario(
    feeder_path: str,
    scenario: AttackScenario | str,
    cfg: RunConfig | None = None,
    prices_path: str | None = None,
    out_dir: str | None = None,
) -> RunMetrics:
    if isinstance(scenario, str):
        scenario = AttackScenario.from_file(scenario)
    cfg = cfg or RunConfig()
    model = load_feeder(feeder_path)
    prices = load_price_series(prices_path) if prices_path else {}
    engine = ScenarioEngine(model, scenario, cfg, prices)
    metrics = engine.run()
    if out_dir:
        metrics.write_csvs(out_dir)
        write_summary(metrics, os.path.join(out_dir, "summary.txt"))
    return metrics


def write_summary(metrics: RunMetrics, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_summary(metrics))


def format_summary(metrics: RunMetrics) -> str:
    s = metrics.summary
    lines = ["metric, pre_attack, post_attack, mitigated"]
    if not s:
        return "no phases recorded\n"

    def row(name, key):
        pre = s.get("pre", {}).get(key)
        post = s.get("post", {}).get(key)
        mit = s.get("mitigated", {}).get(key)

        def fmt(v, ref):
            if v is None:
                return "-"
            if ref in (None, 0):
                return f"{v:,.0f}"
            return f"{v:,.0f} ({(v - ref) / ref:+.1%})"

        return f"{name}, {fmt(pre, None)}, {fmt(post, pre)}, {fmt(mit, pre)}"

    lines.append(row("Power import from main grid [kW]", "import_kw"))
    lines.append(row("Total cost [$]", "total_cost"))
    lines.append(row("Total load [kW]", "total_load_kw"))
    if "restoration" in s:
        r = s["restoration"]
        lines.append(f"restored critical kW: {r['restored_critical_kw']:.0f}")
        lines.append(
            "switches opened: "
            + "; ".join(f"{a}-{b}" for a, b in r["switch_open"])
        )
    return "\n".join(lines) + "\n"
