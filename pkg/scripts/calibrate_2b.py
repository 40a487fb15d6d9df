"""Calibration harness for the large-outage fixture bands.

Runs the attack scenario for the minimum number of ticks needed to observe
the pre/post/mitigated snapshots and prints the band quantities, so the
config knobs (flexibility, beta placement, loss weight, generator cost) can
be dialed in without full-horizon runs.
"""

from __future__ import annotations

import json
import sys
import time

from lemsim import scenario


def probe(tag: str, **overrides) -> None:
    cfg = scenario.RunConfig(seed=3, horizon_min=8)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    t0 = time.time()
    try:
        m = scenario.run_scenario(
            "src/lemsim/data/ieee123_conc.txt",
            "src/lemsim/data/attack_2b.json",
            cfg,
            prices_path="src/lemsim/data/prices.csv",
        )
    except Exception as exc:
        print(f"[{tag}] FAILED: {exc}", flush=True)
        return
    s = m.summary
    pre, post, mit = (s.get(k, {}) for k in ("pre", "post", "mitigated"))
    dt = time.time() - t0
    if not (pre and post and mit):
        print(f"[{tag}] incomplete phases: {sorted(s)} ({dt:.0f}s)", flush=True)
        return
    imp_jump = post["import_kw"] / pre["import_kw"] - 1.0
    imp_mit = mit["import_kw"] / pre["import_kw"] - 1.0
    load_cut = 1.0 - mit["total_load_kw"] / pre["total_load_kw"]
    cost_ok = mit["total_cost"] >= post["total_cost"] >= pre["total_cost"]
    print(
        f"[{tag}] pre={pre['import_kw']:.0f} post={post['import_kw']:.0f} "
        f"mit={mit['import_kw']:.0f} | jump={imp_jump:+.1%} (want +30..45%) "
        f"mit={imp_mit:+.1%} (want 0±1%) cut={load_cut:+.1%} (want 10..18%) "
        f"cost_mono={cost_ok} ({dt:.0f}s)",
        flush=True,
    )


if __name__ == "__main__":
    trials = json.loads(sys.argv[1]) if len(sys.argv) > 1 else [
        {"tag": "base", "load_scale": 0.735, "flexibility": 0.4, "xi": 4.8,
         "dg_alpha": 1.5, "beta_scale": 120.0, "alpha_scale": 10.0,
         "sma_flexible_share": 0.7},
    ]
    for t in trials:
        tag = t.pop("tag")
        probe(tag, **t)
