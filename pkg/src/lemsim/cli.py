"""Command-line interface: run scenarios, single clearings, score replays,
island planning, and report formatting."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import distopt, pm_market, reconfig, resilience, scenario
from .netmodel import load_feeder, to_balanced_single_phase


def _cmd_run(args) -> int:
    cfg = scenario.RunConfig.from_file(args.config) if args.config else scenario.RunConfig()
    cfg.seed = args.seed if args.seed is not None else cfg.seed
    if args.model:
        pass  # the scenario file pins its power-flow model; flag checked below
    if args.algo:
        cfg.algo = args.algo
    sc = scenario.AttackScenario.from_file(args.scenario)
    if args.model and args.model != sc.model_kind:
        print(f"warning: scenario {sc.id} pins model {sc.model_kind}; using it",
              file=sys.stderr)
    metrics = scenario.run_scenario(
        args.feeder, sc, cfg, prices_path=args.prices, out_dir=args.out_dir
    )
    print(scenario.format_summary(metrics), end="")
    return 0


def _cmd_opf(args) -> int:
    cfg = scenario.RunConfig.from_file(args.config) if args.config else scenario.RunConfig()
    if args.algo:
        cfg.algo = args.algo
    model = load_feeder(args.feeder)
    if args.model == "bf" and not model.balanced:
        model = to_balanced_single_phase(model)
    from .powerflow import assign_default_ampacities

    model = assign_default_ampacities(model)
    sc = scenario.AttackScenario(
        id="opf", attack_type="none", surface="PMA", magnitude_kw=0,
        attack_minute=10**9, compromised=(), model_kind=args.model,
    )
    engine = scenario.ScenarioEngine(model, sc, cfg)
    for node in sorted(engine.smos):
        smo = engine.smos[node]
        smo.setpoint = smo.aggregate_baseline()
        smo.price = (cfg.lmp_usd_kwh, cfg.lmp_q_fraction * cfg.lmp_usd_kwh)
    engine._now = 0
    engine._sm_tick(0)
    engine._pm_clear(0)
    res = engine._last_pm_solution
    print(f"objective: {res.objective:.6f}")
    print(f"iterations: {res.iterations}  converged: {res.converged}")
    print(f"import_kw: {engine._pm_import_kw():.1f}")
    if args.dump_program and engine._last_program is not None:
        with open(args.dump_program, "w", encoding="utf-8") as fh:
            fh.write(engine._last_program.dump())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        res.export_trace_csv(os.path.join(args.out_dir, "residuals.csv"))
    return 0 if res.converged else 3


def _cmd_score(args) -> int:
    """Replay a telemetry CSV (tick, agent, scheduled, band, actual)."""
    cfg = resilience.AnomalyConfig()
    rows: dict[int, list[resilience.MonitorSample]] = {}
    with open(args.telemetry, "r", encoding="utf-8") as fh:
        header = fh.readline()
        del header
        for line in fh:
            t, agent, sched_p, band, actual_p = line.strip().split(",")[:5]
            rows.setdefault(int(t), []).append(
                resilience.MonitorSample(
                    agent=agent, P_set=float(sched_p), Q_set=0.0,
                    dP=float(band), dQ=0.0,
                    P_actual=float(actual_p), Q_actual=0.0,
                )
            )
    scores: dict[str, float] = {}
    forecaster = resilience.PersistenceForecaster()
    nar: dict[str, list[float]] = {}
    board = resilience.ScoreBoard()
    for t in sorted(rows):
        scores = resilience.update_cs(rows[t], scores, t)
        board.cs.update(scores)
        for s in rows[t]:
            pred = forecaster.predict(s.agent, s.P_actual)
            rel = abs(s.P_actual - pred) / max(abs(pred), 1e-6)
            hist = nar.setdefault(s.agent, [1.0] * cfg.horizon_windows)
            hist.append(0.0 if rel > cfg.tol_rel_err else 1.0)
            board.ts[s.agent] = resilience.update_ts(
                hist[-1], hist[-cfg.horizon_windows:], cfg
            )
            forecaster.observe(s.agent, s.P_actual)
        board.refresh_rs()
        if args.out:
            board.export_csv(args.out, t)
    for agent in sorted(board.rs):
        print(f"{agent}: CS={board.cs.get(agent, 1.0):.4f} "
              f"TS={board.ts.get(agent, 1.0):.4f} RS={board.rs[agent]:.4f}")
    return 0


def _cmd_reconfig(args) -> int:
    model = load_feeder(args.feeder)
    overrides = json.loads(args.dg_overrides) if args.dg_overrides else None
    critical = json.loads(args.critical) if args.critical else None
    islanded = model.with_switch_states(
        {("150", "149"): "OPEN"}
        if any({s.from_node, s.to_node} == {"150", "149"} for s in model.switches)
        else {}
    )
    plans = reconfig.plan_restoration(
        islanded, critical_map=critical, dg_overrides=overrides
    )
    plan, _new_model, _ = reconfig.apply_first_feasible(islanded, plans)
    print(plan.describe())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "plan.txt"), "w", encoding="utf-8") as fh:
            fh.write(plan.describe() + "\n\n" + reconfig.island_topology_dump(plan))
    return 0


def _cmd_report(args) -> int:
    import csv as _csv

    with open(os.path.join(args.run_dir, "timeseries.csv"), encoding="utf-8") as fh:
        rows = list(_csv.DictReader(fh))
    m = scenario.RunMetrics()
    for r in rows:
        m.ticks.append(int(r["tick"]))
        m.phase.append(r["phase"])
        m.import_kw.append(float(r["import_kw"]))
        m.expected_import_kw.append(float(r["expected_import_kw"]))
        m.total_load_kw.append(float(r["total_load_kw"]))
        m.total_cost.append(float(r["total_cost"]))
        m.dlmp.append({})
    m.summary = {}
    for phase in ("pre", "post", "mitigated"):
        snap = m.snapshot(phase)
        if snap:
            m.summary[phase] = snap
    print(scenario.format_summary(m), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lemsim",
        description="local electricity market co-simulation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an attack scenario end to end")
    p_run.add_argument("--feeder", required=True)
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--prices")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out-dir")
    p_run.add_argument("--model", choices=["bf", "ci"])
    p_run.add_argument("--algo", choices=["pac", "nst-pac"])
    p_run.add_argument("--config")
    p_run.set_defaults(func=_cmd_run)

    p_opf = sub.add_parser("opf", help="single primary-market clearing")
    p_opf.add_argument("--feeder", required=True)
    p_opf.add_argument("--model", choices=["bf", "ci"], default="bf")
    p_opf.add_argument("--algo", choices=["pac", "nst-pac"])
    p_opf.add_argument("--config")
    p_opf.add_argument("--out-dir")
    p_opf.add_argument("--dump-program")
    p_opf.set_defaults(func=_cmd_opf)

    p_score = sub.add_parser("score", help="replay telemetry into scores")
    p_score.add_argument("--telemetry", required=True)
    p_score.add_argument("--out")
    p_score.set_defaults(func=_cmd_score)

    p_rc = sub.add_parser("reconfig", help="island restoration planning")
    p_rc.add_argument("--feeder", required=True)
    p_rc.add_argument("--dg-overrides", help='JSON map node -> kW cap')
    p_rc.add_argument("--critical", help="JSON map node -> critical fraction")
    p_rc.add_argument("--out-dir")
    p_rc.set_defaults(func=_cmd_reconfig)

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("--run-dir", required=True)
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (scenario.ScenarioError, reconfig.NoFeasiblePlanError,
            pm_market.PmInfeasibleError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
