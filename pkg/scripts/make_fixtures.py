"""Regenerates the bundled fixture files under src/lemsim/data/.

The feeder follows the familiar 123-node distribution test topology: the
substation at node 150 feeds 149 through the head breaker, sectionalizing
switches split the feeder into seven zones, and the tie between 151 and 300
is normally open.  Loads, impedances, and the DER inventory are synthesized
deterministically at values representative of a 4.16 kV feeder with heavy
DER penetration; the concentrated-generation variant moves all distributed
generation onto five primary nodes for the larger outage studies.
"""

from __future__ import annotations

import math
import os

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.normpath(os.path.join(HERE, "..", "src", "lemsim", "data"))

# trunk segments carry all three phases
EDGES_TRUNK = [
    ("149", "1"), ("1", "7"), ("7", "8"), ("8", "13"),
    ("18", "19"), ("18", "21"), ("21", "23"), ("23", "25"), ("25", "28"),
    ("28", "29"), ("29", "30"), ("30", "250"),
    ("135", "35"), ("35", "40"), ("40", "42"), ("42", "44"), ("44", "47"),
    ("47", "48"), ("47", "49"), ("49", "50"), ("50", "51"), ("51", "151"),
    ("152", "52"), ("52", "53"), ("53", "54"), ("54", "57"), ("57", "60"),
    ("60", "62"), ("62", "63"), ("63", "64"), ("64", "65"), ("65", "66"),
    ("160", "67"), ("67", "72"), ("72", "76"), ("76", "77"), ("77", "78"),
    ("78", "80"), ("80", "81"), ("81", "82"), ("81", "84"),
    ("86", "87"), ("87", "89"), ("89", "91"), ("91", "93"), ("93", "95"),
    ("67", "97"), ("97", "98"), ("98", "99"), ("99", "100"),
    ("197", "101"), ("101", "105"), ("105", "108"), ("108", "109"),
    ("108", "300"), ("109", "110"), ("110", "112"), ("112", "113"),
    ("113", "114"),
]
# single-phase laterals, phase assigned round-robin
EDGES_LATERAL = [
    ("1", "2"), ("1", "3"), ("3", "4"), ("3", "5"), ("5", "6"),
    ("8", "12"), ("8", "9"), ("9", "14"), ("14", "10"), ("14", "11"),
    ("13", "34"), ("34", "15"), ("15", "16"), ("15", "17"),
    ("19", "20"), ("21", "22"), ("23", "24"), ("25", "26"),
    ("26", "27"), ("26", "31"), ("27", "33"), ("31", "32"),
    ("35", "36"), ("36", "37"), ("36", "38"), ("38", "39"),
    ("40", "41"), ("42", "43"), ("44", "45"), ("45", "46"),
    ("54", "55"), ("55", "56"), ("57", "58"), ("58", "59"),
    ("60", "61"), ("67", "68"), ("68", "69"), ("69", "70"), ("70", "71"),
    ("72", "73"), ("73", "74"), ("74", "75"), ("77", "79"),
    ("82", "83"), ("84", "85"), ("87", "88"), ("89", "90"),
    ("91", "92"), ("93", "94"), ("95", "96"),
    ("101", "102"), ("102", "103"), ("103", "104"),
    ("105", "106"), ("106", "107"), ("109", "111"),
]
SWITCHES = [
    ("150", "149", "CLOSED", "yes"),
    ("13", "152", "CLOSED", "yes"),
    ("13", "18", "CLOSED", "yes"),
    ("18", "135", "CLOSED", "yes"),
    ("60", "160", "CLOSED", "yes"),
    ("97", "197", "CLOSED", "yes"),
    ("86", "76", "CLOSED", "yes"),
    ("151", "300", "OPEN", "no"),
    ("54", "94", "OPEN", "no"),
]
ZONES = {
    1: ["150", "149", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11",
        "12", "13", "14", "34", "15", "16", "17"],
    2: ["18", "19", "20", "21", "22", "23", "24", "25", "26", "27", "28",
        "29", "30", "31", "32", "33", "250"],
    3: ["135", "35", "36", "37", "38", "39", "40", "41", "42", "43", "44",
        "45", "46", "47", "48", "49", "50", "51", "151"],
    4: ["152", "52", "53", "54", "55", "56", "57", "58", "59"],
    5: ["60", "61", "62", "63", "64", "65", "66", "160"],
    6: ["67", "68", "69", "70", "71", "72", "73", "74", "75", "76", "77",
        "78", "79", "80", "81", "82", "83", "84", "85", "86", "87", "88",
        "89", "90", "91", "92", "93", "94", "95", "96"],
    7: ["97", "98", "99", "100", "101", "102", "103", "104", "105", "106",
        "107", "108", "109", "110", "111", "112", "113", "114", "197",
        "300"],
}
# junction nodes carry no spot load; the remaining 85 sites host operators
NO_LOAD = {
    "150", "149", "13", "18", "135", "151", "152", "160", "197", "250",
    "300", "3", "8", "14", "15", "23", "25", "26",
    "44", "54", "61", "78", "110", "67", "72", "97", "101", "108", "81",
    "93", "91", "89", "2", "37", "59", "96", "71", "39",
}


def all_nodes() -> list[str]:
    out: list[str] = []
    for z in sorted(ZONES):
        for n in ZONES[z]:
            if n not in out:
                out.append(n)
    return out


def node_zone() -> dict[str, int]:
    return {n: z for z, nodes in ZONES.items() for n in nodes}


def build_feeder(
    name: str,
    concentrated: bool,
    load_target_kw: float,
    critical_default: float = 0.25,
    critical_map: dict[str, float] | None = None,
) -> str:
    rng = np.random.default_rng(123)
    nodes = all_nodes()
    zone = node_zone()
    trunk_nodes = {n for e in EDGES_TRUNK for n in e} | {"150", "149", "13",
                                                         "18", "135", "151", "152", "160", "197"}
    phases: dict[str, str] = {}
    for n in nodes:
        phases[n] = "abc" if n in trunk_nodes else ""
    # laterals inherit from their parent; a full-phase parent hands each new
    # lateral one phase round-robin
    children: dict[str, list[str]] = {}
    for f, t in EDGES_TRUNK + EDGES_LATERAL:
        children.setdefault(f, []).append(t)
        children.setdefault(t, []).append(f)
    for f, t, *_ in SWITCHES:
        children.setdefault(f, []).append(t)
        children.setdefault(t, []).append(f)
    rr = 0
    stack = ["150"]
    seen = {"150"}
    while stack:
        cur = stack.pop()
        for nxt in sorted(children.get(cur, [])):
            if nxt in seen:
                continue
            seen.add(nxt)
            if not phases[nxt]:
                if len(phases[cur]) == 1:
                    phases[nxt] = phases[cur]
                else:
                    phases[nxt] = "abc"[rr % 3]
                    rr += 1
            stack.append(nxt)

    # spot loads scaled to the target
    load_nodes = [n for n in nodes if n not in NO_LOAD]
    raw = {}
    for k, n in enumerate(load_nodes):
        base = [20.0, 40.0, 35.0, 75.0][int(rng.integers(0, 4))]
        raw[n] = base
    total_raw = sum(raw.values())
    scale = load_target_kw / total_raw
    loads = {n: round(v * scale, 1) for n, v in raw.items()}

    lines = [f"# {name}: synthesized 123-node feeder fixture", "[base]"]
    lines += [
        "name = " + name,
        "power_kva = 5000",
        "voltage_kv = 4.16",
        "voltage_kv_substation = 115",
        "voltage_kv_secondary = 0.24",
        "pcc = 150",
        "",
        "[nodes]",
        "# id phases role zone critical p_kw q_kvar",
    ]
    crit_map = critical_map or {}
    for n in nodes:
        role = "PCC" if n == "150" else "PMA-node"
        kw = loads.get(n, 0.0)
        kvar = round(kw * 0.5, 1)
        crit = crit_map.get(n, critical_default if kw else 0.0)
        ph = phases[n]
        if len(ph) == 3 and kw:
            third = round(kw / 3.0, 2)
            third_q = round(kvar / 3.0, 2)
            p_s = f"{third}:{third}:{third}"
            q_s = f"{third_q}:{third_q}:{third_q}"
        elif kw:
            vals = {c: 0.0 for c in "abc"}
            vals[ph] = kw
            p_s = ":".join(str(vals[c]) for c in "abc")
            valsq = {c: 0.0 for c in "abc"}
            valsq[ph] = kvar
            q_s = ":".join(str(valsq[c]) for c in "abc")
        else:
            p_s = q_s = "0"
        extra = ""
        if n in ("83", "88", "90", "92"):
            cap = 300.0 if n == "83" else 50.0
            extra = f" shunt_kvar={round(cap / (3 if len(ph) == 3 else 1), 1)}"
        lines.append(f"{n} {ph} {role} {zone[n]} {crit} {p_s} {q_s}{extra}")

    lines += ["", "[branches]", "# from to r x rm xm (ohm), ampacity (A)"]
    for f, t in EDGES_TRUNK:
        r = round(float(rng.uniform(0.035, 0.075)), 4)
        x = round(2.1 * r, 4)
        lines.append(
            f"{f} {t} r={r} x={x} rm={round(0.25 * r, 4)} xm={round(0.45 * x, 4)} phases=abc"
        )
    for f, t in EDGES_LATERAL:
        common = "".join(c for c in phases[f] if c in phases[t]) or phases[t]
        r = round(float(rng.uniform(0.18, 0.35)), 4)
        x = round(1.05 * r, 4)
        lines.append(f"{f} {t} r={r} x={x} phases={common}")

    lines += ["", "[switches]", "# from to status normally_closed"]
    for f, t, status, nc in SWITCHES:
        lines.append(f"{f} {t} {status} {nc}")

    lines += ["", "[ders]", "# node kind cap_kw cap_kvar flags"]
    if concentrated:
        for node, kw in (("25", 185.0), ("40", 170.0), ("81", 155.0), ("94", 140.0)):
            lines.append(f"{node} PV {kw} {round(0.35 * kw, 1)}")
        lines.append("67 battery 500 200")
    else:
        must_have = {"9", "28", "45", "55", "56", "58", "62", "73", "82", "94"}
        der_sites = [
            n for n in load_nodes
            if n in must_have or int(rng.integers(0, 10)) < 7
        ]
        for n in der_sites:
            kw = round(float(rng.uniform(6.0, 28.0)), 1)
            kind = "PV" if rng.random() < 0.55 else "battery"
            lines.append(f"{n} {kind} {kw} {round(0.3 * kw, 1)}")
    lines.append("48 diesel 560 250 dispatchable=yes islanded_only=yes")
    lines.append("66 microgrid 1700 700 dispatchable=yes islanded_only=yes")
    return "\n".join(lines) + "\n"


def build_compact_ci_feeder(name: str, load_target_kw: float) -> str:
    """Small unbalanced feeder for the current-injection scenarios."""
    rng = np.random.default_rng(77)
    chain = ["1", "2", "3", "4", "5", "6", "7", "8"]
    laterals = [("2", "21", "a"), ("2", "22", "b"), ("3", "31", "c"),
                ("4", "41", "ab"), ("5", "51", "b"), ("6", "61", "abc"),
                ("7", "71", "c"), ("8", "81", "abc"), ("8", "82", "a"),
                ("61", "62", "abc"), ("81", "83", "b"), ("41", "42", "a")]
    nodes = ["150"] + chain + [t for _, t, _ in laterals]
    load_nodes = [n for n in nodes if n not in ("150", "1")]
    raw = {n: float(rng.uniform(40, 120)) for n in load_nodes}
    scale = load_target_kw / sum(raw.values())
    loads = {n: round(v * scale, 1) for n, v in raw.items()}
    phase_of = {n: "abc" for n in ["150"] + chain}
    for f, t, ph in laterals:
        phase_of[t] = ph

    lines = [f"# {name}: compact unbalanced feeder", "[base]",
             "name = " + name, "power_kva = 3000", "voltage_kv = 4.16",
             "voltage_kv_substation = 69", "pcc = 150", "", "[nodes]"]
    for n in nodes:
        role = "PCC" if n == "150" else "PMA-node"
        ph = phase_of[n]
        kw = loads.get(n, 0.0)
        kvar = round(0.45 * kw, 1)
        if kw:
            per = {c: (round(kw / len(ph), 2) if c in ph else 0.0) for c in "abc"}
            perq = {c: (round(kvar / len(ph), 2) if c in ph else 0.0) for c in "abc"}
            p_s = ":".join(str(per[c]) for c in "abc")
            q_s = ":".join(str(perq[c]) for c in "abc")
        else:
            p_s = q_s = "0"
        lines.append(f"{n} {ph} {role} 1 0.25 {p_s} {q_s}")
    lines += ["", "[branches]"]
    for f, t in zip(chain, chain[1:]):
        r = round(float(rng.uniform(0.04, 0.08)), 4)
        lines.append(f"{f} {t} r={r} x={round(2.0 * r, 4)} rm={round(0.2 * r, 4)} "
                     f"xm={round(0.8 * r, 4)} phases=abc")
    for f, t, ph in laterals:
        r = round(float(rng.uniform(0.1, 0.25)), 4)
        lines.append(f"{f} {t} r={r} x={round(1.1 * r, 4)} phases={ph}")
    lines += ["", "[switches]", "150 1 CLOSED yes", "", "[ders]"]
    for n in ("61", "62", "81", "41", "22", "31", "51", "71", "83"):
        kw = round(loads.get(n, 50.0) * 0.8, 1)
        lines.append(f"{n} PV {kw} {round(0.3 * kw, 1)}")
    return "\n".join(lines) + "\n"


def build_prices(path: str, hours: float = 24.0, base: float = 0.05) -> None:
    rows = ["minute,usd_per_kwh"]
    for m in range(0, int(hours * 60), 5):
        price = base * (1.0 + 0.35 * math.sin(2 * math.pi * (m / 60.0 - 6.0) / 24.0))
        rows.append(f"{m},{price:.5f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


SCENARIOS = {
    "attack_none.json": {
        "id": "none", "attack_type": "none", "surface": "PMA",
        "magnitude_kw": 0, "attack_minute": 10 ** 9, "compromised": [],
        "model_kind": "bf", "algorithm": "A",
    },
    "attack_1a.json": {
        "id": "1a", "attack_type": "load-alteration", "surface": "PMA",
        "magnitude_kw": 36, "attack_minute": 6,
        "compromised": ["12", "17", "21", "36", "65", "75", "95", "105", "112", "113"],
        "comm_severed": True, "model_kind": "ci", "algorithm": "B",
    },
    "attack_1b.json": {
        "id": "1b", "attack_type": "dg-outage", "surface": "PMA",
        "magnitude_kw": 45, "attack_minute": 6,
        "compromised": ["9", "28", "45", "55", "56", "58", "62", "73", "82", "94"],
        "comm_severed": True, "model_kind": "ci", "algorithm": "B",
    },
    "attack_1c.json": {
        "id": "1c", "attack_type": "dg-outage", "surface": "SMA",
        "magnitude_kw": 157, "attack_minute": 6,
        "compromised": [],  # filled per-fixture below
        "comm_severed": True, "model_kind": "ci", "algorithm": "B",
        "sm_first": True,
    },
    "attack_2a.json": {
        "id": "2a", "attack_type": "dg-outage", "surface": "PMA",
        "magnitude_kw": 261, "attack_minute": 6,
        "compromised": ["94"], "model_kind": "bf", "algorithm": "A",
    },
    "attack_2b.json": {
        "id": "2b", "attack_type": "dg-outage", "surface": "PMA",
        "magnitude_kw": 650, "attack_minute": 6,
        "compromised": ["25", "40", "81", "94"], "model_kind": "bf",
        "algorithm": "A",
    },
    "attack_3.json": {
        "id": "3", "attack_type": "islanding", "surface": "PCC",
        "magnitude_kw": 2500, "attack_minute": 6,
        "compromised": [], "model_kind": "ci", "algorithm": "B",
    },
}


def main() -> None:
    import json

    os.makedirs(DATA, exist_ok=True)
    with open(os.path.join(DATA, "ieee123.txt"), "w", encoding="utf-8") as fh:
        fh.write(build_feeder("ieee123", concentrated=False, load_target_kw=3490.0))
    with open(os.path.join(DATA, "ieee123_conc.txt"), "w", encoding="utf-8") as fh:
        fh.write(build_feeder("ieee123_conc", concentrated=True, load_target_kw=3490.0))
    zone3 = set(ZONES[3])
    crit = {n: (0.9 if n in zone3 else 0.0) for n in all_nodes()}
    with open(os.path.join(DATA, "ieee123_zone3crit.txt"), "w", encoding="utf-8") as fh:
        fh.write(build_feeder("ieee123_zone3crit", concentrated=False,
                              load_target_kw=3490.0, critical_default=0.0,
                              critical_map=crit))
    with open(os.path.join(DATA, "feeder_ci.txt"), "w", encoding="utf-8") as fh:
        fh.write(build_compact_ci_feeder("feeder_ci", load_target_kw=1600.0))
    build_prices(os.path.join(DATA, "prices.csv"))
    for name, raw in SCENARIOS.items():
        with open(os.path.join(DATA, name), "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=1)
            fh.write("\n")
    print(f"fixtures written to {DATA}")


if __name__ == "__main__":
    main()
