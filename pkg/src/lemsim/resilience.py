"""Commitment, trustability, and resilience scores plus the node/system
resiliency hierarchy.

Commitment tracks how well each secondary agent keeps its cleared injection
inside the granted flexibility band; trustability tracks how anomaly-free the
agent's telemetry stream is against a pluggable forecaster; their affine
blend is the resilience score the markets consume.  Above the agent level,
weighted geometric aggregation produces per-transformer and per-primary-node
resiliency, and a weight-optimizing aggregation produces the system metric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DEVIATION_NORM_FLOOR_KW = 0.1   # stands in for |P*| when the setpoint is zero


# ---------------------------------------------------------------------------
# commitment scores


@dataclass(frozen=True)
class MonitorSample:
    agent: str
    P_set: float
    Q_set: float
    dP: float
    dQ: float
    P_actual: float
    Q_actual: float


def band_deviation(actual: float, set_point: float, half_range: float) -> float:
    """Piecewise deviation of an actual injection from its granted band.

    Above the band it is the overshoot, below it the undershoot, and inside
    it the (nonpositive) distance to the nearer edge, which rewards points
    well inside the band when the scores are updated.
    """
    hi = set_point + half_range
    lo = set_point - half_range
    if actual > hi:
        return actual - hi
    if actual < lo:
        return lo - actual
    return max(actual - hi, lo - actual)


def update_cs(
    samples: list[MonitorSample],
    prior: dict[str, float] | None,
    t_s: int,
    skip_unit_norm_single: bool = True,
    norm_floor: float = DEVIATION_NORM_FLOOR_KW,
) -> dict[str, float]:
    """One commitment-score update across an operator's agents.

    At the first tick every score is one.  Later ticks compute the band
    deviations, divide by the setpoint magnitudes (with a floor standing in
    for zero setpoints), normalize the deviation vectors to unit length
    across agents, decrement the running scores by the averaged normalized
    deviations, and min-max rescale into [0, 1].
    """
    agents = [s.agent for s in samples]
    if t_s == 0 or prior is None:
        return {a: 1.0 for a in agents}

    eP = np.array([band_deviation(s.P_actual, s.P_set, s.dP) for s in samples])
    eQ = np.array([band_deviation(s.Q_actual, s.Q_set, s.dQ) for s in samples])
    denP = np.array([max(abs(s.P_set), norm_floor) for s in samples])
    denQ = np.array([max(abs(s.Q_set), norm_floor) for s in samples])
    rP = eP / denP
    rQ = eQ / denQ

    single = len(samples) == 1 and skip_unit_norm_single
    nP = float(np.linalg.norm(rP))
    nQ = float(np.linalg.norm(rQ))
    tP = rP if (single or nP == 0.0) else rP / nP
    tQ = rQ if (single or nQ == 0.0) else rQ / nQ

    raw = np.array([prior.get(a, 1.0) for a in agents]) - (tP + tQ) / 2.0
    span = raw.max() - raw.min()
    if span <= 1e-15:
        scores = np.clip(raw, 0.0, 1.0)
    else:
        scores = (raw - raw.min()) / span
    return dict(zip(agents, scores.tolist()))


# ---------------------------------------------------------------------------
# anomaly detection and trustability scores


class PersistenceForecaster:
    """Pluggable telemetry forecaster; this baseline repeats the last value."""

    def __init__(self) -> None:
        self._last: dict[str, float] = {}

    def predict(self, stream_id: str, fallback: float = 0.0) -> float:
        return self._last.get(stream_id, fallback)

    def observe(self, stream_id: str, value: float) -> None:
        self._last[stream_id] = value


@dataclass(frozen=True)
class AnomalyConfig:
    tol_rel_err: float = 0.10
    window: int = 10                 # samples per reporting period
    horizon_windows: int = 4         # T / window
    w_now: float = 0.6
    w_past: float = 0.4
    rel_err_floor: float = 1e-6

    def __post_init__(self):
        if self.w_now < self.w_past:
            raise ValueError("current-window weight must dominate")
        if abs(self.w_now + self.w_past - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        if self.horizon_windows < 1 or self.window < 1:
            raise ValueError("window configuration rejected")


def detect_anomalies(
    stream: np.ndarray,
    forecast: np.ndarray,
    config: AnomalyConfig,
) -> tuple[np.ndarray, list[float]]:
    """Flag points whose relative error exceeds the tolerance; window ratios.

    Returns the boolean flag array and the non-anomaly ratio of every full
    window.  An empty window carries the previous ratio forward (ratio one
    when there is no history at all).
    """
    stream = np.asarray(stream, dtype=float)
    forecast = np.asarray(forecast, dtype=float)
    if stream.shape != forecast.shape:
        raise ValueError("forecast not aligned with stream")
    den = np.maximum(np.abs(forecast), config.rel_err_floor)
    rel = np.abs(stream - forecast) / den
    flags = rel > config.tol_rel_err
    ratios: list[float] = []
    prev = 1.0
    for start in range(0, len(stream), config.window):
        chunk = flags[start: start + config.window]
        if len(chunk) == 0:
            ratios.append(prev)
            continue
        if len(chunk) < config.window:
            break  # trailing partial window is not reported
        ratio = 1.0 - float(chunk.sum()) / len(chunk)
        ratios.append(ratio)
        prev = ratio
    return flags, ratios


def cnar(history: list[float], config: AnomalyConfig) -> float:
    """Weighted cumulative ratio over the horizon: sum of (T/j·dt)·NAR_{t-j}."""
    k = config.horizon_windows
    if len(history) < k:
        raise ValueError(f"history covers {len(history)} windows, horizon needs {k}")
    total = 0.0
    for j in range(1, k + 1):
        total += (k / j) * history[-j]
    return total


def cnar_max(config: AnomalyConfig) -> float:
    return sum(config.horizon_windows / j for j in range(1, config.horizon_windows + 1))


def update_ts(nar_now: float, history: list[float], config: AnomalyConfig) -> float:
    """Device trustability: blend of the current ratio and the normalized
    cumulative ratio over the horizon."""
    c = cnar(history, config)
    return config.w_now * nar_now + config.w_past * c / cnar_max(config)


def node_ts(device_ts: list[float]) -> float:
    if not device_ts:
        return 1.0
    return float(np.mean(device_ts))


def blend_rs(cs: float, ts: float, alpha: float = 0.5) -> float:
    """Resilience score: affine blend of commitment and trustability."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    return alpha * cs + (1.0 - alpha) * ts


# ---------------------------------------------------------------------------
# node and system resiliency metrics


@dataclass(frozen=True)
class CveEntry:
    cve_id: str
    cvss: float


def load_cve_list(path: str) -> list[CveEntry]:
    """CVE file: one 'id,cvss' pair per line, '#' comments allowed."""
    out: list[CveEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cve_id, score = line.split(",")
            out.append(CveEntry(cve_id.strip(), float(score)))
    return out


def dcvs(cves: list[CveEntry]) -> float:
    """Inverse summed severity of the known vulnerabilities; one when clean."""
    total = sum(c.cvss for c in cves)
    if total <= 0.0:
        return 1.0
    return 1.0 / total


def compute_stnr(factors: dict[str, float], weights: dict[str, float]) -> float:
    """Weighted geometric mean of the positive resiliency factors."""
    keys = sorted(factors)
    w = np.array([weights[k] for k in keys])
    f = np.array([factors[k] for k in keys])
    if (f <= 0).any():
        raise ValueError("resiliency factors must be positive")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be normalized")
    return float(np.prod(f**w))


def compute_pnr(stnr: dict[str, float], weights: dict[str, float]) -> float:
    """Weighted average of the secondary-transformer resiliency values."""
    keys = sorted(stnr)
    w = np.array([weights[k] for k in keys])
    s = np.array([stnr[k] for k in keys])
    return float((s * w).sum() / w.sum())


def compute_dsr(factor_matrix: np.ndarray, weight_floor: float = 0.05):
    """System resiliency via per-node weight selection on the simplex.

    Each node picks the weight vector maximizing its relative contribution,
    a linear-fractional objective whose optimum sits at a vertex of the
    floored simplex; all vertices are enumerated exactly.  Ties (as with a
    uniform factor matrix) fall back to uniform weights.  The system metric
    sums the per-node weighted geometric factor means.
    """
    F = np.asarray(factor_matrix, dtype=float)
    if F.ndim != 2 or F.size == 0:
        raise ValueError("factor matrix must be 2-D and nonempty")
    if (F < 0).any():
        raise ValueError("factors must be nonnegative")
    m, n = F.shape
    if m * weight_floor > 1.0 + 1e-12:
        raise ValueError("weight floor infeasible for this many factors")
    row_tot = F.sum(axis=1)
    if (row_tot <= 0).any():
        raise ValueError("all-zero factor row")
    weights = np.zeros((m, n))
    slack = 1.0 - m * weight_floor
    for p in range(n):
        best_val = -np.inf
        vals = []
        for i in range(m):
            w = np.full(m, weight_floor)
            w[i] += slack
            rc = float(w @ F[:, p]) / float(w @ row_tot)
            vals.append(rc)
            if rc > best_val + 1e-15:
                best_val = rc
                best_i = i
        if max(vals) - min(vals) <= 1e-12:
            weights[:, p] = 1.0 / m
        else:
            w = np.full(m, weight_floor)
            w[best_i] += slack
            weights[:, p] = w
    terms = np.zeros(n)
    for p in range(n):
        fp = np.maximum(F[:, p], 1e-300)
        terms[p] = float(np.prod(fp ** weights[:, p]))
    return float(terms.sum()), weights


# ---------------------------------------------------------------------------
# book-keeping


@dataclass
class ScoreBoard:
    """Per-agent score snapshots plus the node/system aggregates."""

    alpha: float = 0.5
    cs: dict[str, float] = field(default_factory=dict)
    ts: dict[str, float] = field(default_factory=dict)
    rs: dict[str, float] = field(default_factory=dict)
    stnr: dict[str, float] = field(default_factory=dict)
    pnr: dict[str, float] = field(default_factory=dict)
    dsr: float = float("nan")

    def refresh_rs(self) -> None:
        for agent in set(self.cs) | set(self.ts):
            self.rs[agent] = blend_rs(
                self.cs.get(agent, 1.0), self.ts.get(agent, 1.0), self.alpha
            )

    def export_csv(self, path: str, tick: int) -> None:
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(["tick", "agent", "cs", "ts", "rs"])
            for agent in sorted(set(self.cs) | set(self.ts)):
                w.writerow([
                    tick, agent,
                    repr(self.cs.get(agent, 1.0)),
                    repr(self.ts.get(agent, 1.0)),
                    repr(self.rs.get(agent, 1.0)),
                ])
