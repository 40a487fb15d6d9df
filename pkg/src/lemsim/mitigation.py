"""Attack detection at the substation and objective-coefficient redispatch.

A sustained relative deviation of the observed substation exchange from the
cleared expectation raises the resilience flag.  Two multiplicative update
rules then rescale the market objective: the balanced-feeder rule scales all
generation-cost and disutility coefficients by the import ratio (and the loss
weight by its reciprocal), while the three-phase rule additionally weighs in
each operator's resilience score and flexibility so trusted agents carry more
of the redispatch.

Sign convention: substation exchange is expressed as the feeder's net
injection seen from the transmission grid, negative when importing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .pm_market import PmObjective

DEFAULT_THRESHOLD = 0.02
DEFAULT_SUSTAIN = 1
Z_FLOOR = 0.05


@dataclass
class PccMonitor:
    """Sliding detector on the substation exchange stream."""

    threshold: float = DEFAULT_THRESHOLD
    sustain: int = DEFAULT_SUSTAIN
    expected: float = 0.0
    _hits: int = 0
    _last_observed: float = 0.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    def update_expected(self, value: float) -> None:
        self.expected = value

    def observe(self, observed: float) -> bool:
        """Feed one tick's observed exchange; True once the flag raises."""
        self._last_observed = observed
        den = max(abs(self.expected), 1e-9)
        rel = abs(observed - self.expected) / den
        if rel > self.threshold:
            self._hits += 1
        else:
            self._hits = 0
        return self._hits >= self.sustain

    @property
    def import_pair(self) -> tuple[float, float]:
        """(pre, post) exchange pair for the update rules."""
        return self.expected, self._last_observed


def detect(monitor: PccMonitor, stream: list[float]) -> tuple[bool, tuple[float, float]]:
    """Run the detector over a tick stream; returns flag and exchange pair."""
    flag = False
    for value in stream:
        flag = monitor.observe(value)
        if flag:
            break
    return flag, monitor.import_pair


@dataclass(frozen=True)
class CoefficientUpdate:
    algorithm: str                       # "A" | "B"
    delta_alpha: float = 1.0
    delta_beta: float = 1.0
    delta_xi: float = 1.0
    gamma: dict[str, float] = field(default_factory=dict)   # per node, algorithm B
    xi_scale: float = 1.0

    def broadcast_payload(self) -> dict:
        if self.algorithm == "A":
            return {
                "delta_alpha": self.delta_alpha,
                "delta_beta": self.delta_beta,
                "delta_xi": self.delta_xi,
            }
        return {"gamma": dict(self.gamma), "xi_scale": self.xi_scale}


def update_coefficients_A(
    p_pcc: float,
    p_pcc_post: float,
    objective: PmObjective,
) -> tuple[CoefficientUpdate, PmObjective]:
    """Balanced-network rule: scale costs by the import ratio.

    A larger post-attack import magnitude gives a scale below one on the
    generation and disutility coefficients (cheaper local response) and its
    exact reciprocal above one on the loss weight (imports from far away get
    penalized).
    """
    if p_pcc == 0.0 or p_pcc_post == 0.0:
        raise ValueError("update rule undefined for zero substation exchange")
    d_alpha = abs(p_pcc) / abs(p_pcc_post)
    d_xi = 1.0 / d_alpha
    update = CoefficientUpdate("A", delta_alpha=d_alpha, delta_beta=d_alpha, delta_xi=d_xi)
    new_obj = replace(
        objective,
        alpha_P={k: d_alpha * v for k, v in objective.alpha_P.items()},
        alpha_Q={k: d_alpha * v for k, v in objective.alpha_Q.items()},
        beta_P={k: d_alpha * v for k, v in objective.beta_P.items()},
        beta_Q={k: d_alpha * v for k, v in objective.beta_Q.items()},
        xi=tuple(d_xi * x for x in objective.xi),
    )
    return update, new_obj


def update_coefficients_B(
    p_pcc_3ph: np.ndarray,
    p_pcc_post_3ph: np.ndarray,
    rs: dict[str, float],
    flex_down: dict[str, np.ndarray],
    objective: PmObjective,
    mu_scale: float | None = None,
    z_floor: float = Z_FLOOR,
) -> tuple[CoefficientUpdate, PmObjective]:
    """Three-phase rule weighing each operator's resilience and flexibility.

    Z_i = 1 + RS_i·(delta·flex_i)/(mu·sum RS); the per-node coefficient scale
    is 1/Z_i and the loss weight is rescaled by the inverse mean of those
    scales.  ``mu_scale`` defaults to |delta|_1·n / sum(RS), which keeps Z
    near one for small exchanges.  Nonpositive Z values are clamped to a
    floor with a warning flag in the payload.
    """
    delta = np.asarray(p_pcc_3ph, dtype=float) - np.asarray(p_pcc_post_3ph, dtype=float)
    nodes = sorted(rs)
    rs_sum = sum(rs.values())
    if rs_sum <= 0:
        raise ValueError("sum of resilience scores must be positive")
    n = len(nodes)
    if mu_scale is None:
        mu_scale = max(float(np.abs(delta).sum()) * n / rs_sum, 1e-9)
    if mu_scale <= 0:
        raise ValueError("mu_scale must be positive")
    gamma: dict[str, float] = {}
    for node in nodes:
        d_i = np.asarray(flex_down.get(node, np.zeros(3)), dtype=float)
        z = 1.0 + rs[node] * float(delta @ d_i) / (mu_scale * rs_sum)
        if z <= 0.0:
            z = z_floor
        gamma[node] = 1.0 / z
    mean_gamma = sum(2.0 * gamma[nd] for nd in nodes) / (2.0 * n)
    xi_scale = 1.0 / mean_gamma
    update = CoefficientUpdate("B", gamma=gamma, xi_scale=xi_scale)
    new_obj = replace(
        objective,
        alpha_P={k: gamma.get(k, 1.0) * v for k, v in objective.alpha_P.items()},
        alpha_Q={k: gamma.get(k, 1.0) * v for k, v in objective.alpha_Q.items()},
        beta_P={k: gamma.get(k, 1.0) * v for k, v in objective.beta_P.items()},
        beta_Q={k: gamma.get(k, 1.0) * v for k, v in objective.beta_Q.items()},
        xi=tuple(xi_scale * x for x in objective.xi),
    )
    return update, new_obj


@dataclass
class MitigationReport:
    """Pre/post/mitigated snapshot matching the summary-table columns."""

    import_kw: tuple[float, float, float]
    total_load_kw: tuple[float, float, float]
    total_cost: tuple[float, float, float]

    def deltas(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name, (pre, post, mit) in (
            ("import_kw", self.import_kw),
            ("total_load_kw", self.total_load_kw),
            ("total_cost", self.total_cost),
        ):
            den = pre if pre != 0 else 1.0
            out[name] = ((post - pre) / den, (mit - pre) / den)
        return out

    def export_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "pre_attack", "post_attack", "mitigated",
                        "post_delta", "mitigated_delta"])
            d = self.deltas()
            for name, vals in (
                ("import_kw", self.import_kw),
                ("total_cost", self.total_cost),
                ("total_load_kw", self.total_load_kw),
            ):
                w.writerow([name, repr(vals[0]), repr(vals[1]), repr(vals[2]),
                            f"{d[name][0]:+.4f}", f"{d[name][1]:+.4f}"])


def orchestrate_redispatch(
    flag: bool,
    update_objective,
    redispatch_pm,
    redispatch_sm,
    sm_first: bool = False,
) -> dict:
    """Run the redispatch sequence after a raised flag.

    ``update_objective`` applies the broadcast coefficient update and returns
    the new objective; ``redispatch_pm`` solves the primary market for given
    objective; ``redispatch_sm`` disaggregates operator setpoints.  For the
    secondary-surface attack the secondary redispatch runs first.  Returns
    the collected artifacts; with no flag the markets are left untouched.
    """
    if not flag:
        return {"engaged": False}
    out: dict = {"engaged": True}
    if sm_first:
        out["sm_pre"] = redispatch_sm(None)
    new_objective = update_objective()
    out["objective"] = new_objective
    out["pm"] = redispatch_pm(new_objective)
    out["sm"] = redispatch_sm(out["pm"])
    return out
