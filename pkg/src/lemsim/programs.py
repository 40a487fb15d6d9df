"""Container for the convex programs built by the market layer.

A program couples a separable quadratic objective with linear equalities,
linear inequalities, and second-order-cone blocks.  Every variable and every
constraint row carries the id of the feeder node it belongs to, which is what
the atomization step in :mod:`lemsim.distopt` partitions on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ConeBlock:
    """x² + y² ≤ u·w (rotated, u and w variables) or x² + y² ≤ rhs² (disk)."""

    kind: str  # "rotated" | "disk"
    x: int
    y: int
    u: int = -1
    w: int = -1
    rhs: float = 0.0
    owner: str = ""

    def var_indices(self) -> tuple[int, ...]:
        if self.kind == "rotated":
            return (self.x, self.y, self.u, self.w)
        return (self.x, self.y)


class ProgramBuilder:
    """Incrementally assembles a :class:`ConvexProgram`."""

    def __init__(self) -> None:
        self.names: list[str] = []
        self.owner: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.c2: list[float] = []
        self.c1: list[float] = []
        self.c0: float = 0.0
        self._eq_rows: list[dict[int, float]] = []
        self.b_eq: list[float] = []
        self.eq_labels: list[str] = []
        self.eq_owner: list[str] = []
        self._in_rows: list[dict[int, float]] = []
        self.b_in: list[float] = []
        self.in_labels: list[str] = []
        self.in_owner: list[str] = []
        self.cones: list[ConeBlock] = []
        self._index: dict[str, int] = {}

    def add_var(
        self,
        name: str,
        owner: str,
        lb: float = -np.inf,
        ub: float = np.inf,
        c2: float = 0.0,
        c1: float = 0.0,
    ) -> int:
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        if lb > ub:
            raise ValueError(f"empty box for {name!r}: [{lb}, {ub}]")
        idx = len(self.names)
        self._index[name] = idx
        self.names.append(name)
        self.owner.append(owner)
        self.lb.append(lb)
        self.ub.append(ub)
        self.c2.append(c2)
        self.c1.append(c1)
        return idx

    def var(self, name: str) -> int:
        return self._index[name]

    def has_var(self, name: str) -> bool:
        return name in self._index

    def add_eq(self, coeffs: dict[int, float], rhs: float, label: str, owner: str) -> int:
        self._eq_rows.append(coeffs)
        self.b_eq.append(rhs)
        self.eq_labels.append(label)
        self.eq_owner.append(owner)
        return len(self.b_eq) - 1

    def add_ineq(self, coeffs: dict[int, float], rhs: float, label: str, owner: str) -> int:
        """Row  sum coeffs[i]*x[i] <= rhs."""
        self._in_rows.append(coeffs)
        self.b_in.append(rhs)
        self.in_labels.append(label)
        self.in_owner.append(owner)
        return len(self.b_in) - 1

    def add_cone(self, cone: ConeBlock) -> None:
        self.cones.append(cone)

    def build(self) -> "ConvexProgram":
        n = len(self.names)

        def to_csr(rows: list[dict[int, float]]) -> sp.csr_matrix:
            data, ri, ci = [], [], []
            for r, row in enumerate(rows):
                for c, val in row.items():
                    ri.append(r)
                    ci.append(c)
                    data.append(val)
            return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

        return ConvexProgram(
            names=tuple(self.names),
            var_owner=tuple(self.owner),
            lb=np.array(self.lb),
            ub=np.array(self.ub),
            c2=np.array(self.c2),
            c1=np.array(self.c1),
            c0=self.c0,
            A_eq=to_csr(self._eq_rows),
            b_eq=np.array(self.b_eq),
            eq_labels=tuple(self.eq_labels),
            eq_owner=tuple(self.eq_owner),
            A_in=to_csr(self._in_rows),
            b_in=np.array(self.b_in),
            in_labels=tuple(self.in_labels),
            in_owner=tuple(self.in_owner),
            cones=tuple(self.cones),
        )


@dataclass(frozen=True)
class ConvexProgram:
    names: tuple[str, ...]
    var_owner: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_labels: tuple[str, ...]
    eq_owner: tuple[str, ...]
    A_in: sp.csr_matrix
    b_in: np.ndarray
    in_labels: tuple[str, ...]
    in_owner: tuple[str, ...]
    cones: tuple[ConeBlock, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.names)

    def var(self, name: str) -> int:
        obj = object.__getattribute__(self, "__dict__")
        if "_idx" not in obj:
            obj["_idx"] = {nm: i for i, nm in enumerate(self.names)}
        return obj["_idx"][name]

    def objective(self, x: np.ndarray) -> float:
        return float(self.c2 @ (x * x) + self.c1 @ x + self.c0)

    def eq_residual(self, x: np.ndarray) -> np.ndarray:
        if self.A_eq.shape[0] == 0:
            return np.zeros(0)
        return self.A_eq @ x - self.b_eq

    def ineq_violation(self, x: np.ndarray) -> np.ndarray:
        if self.A_in.shape[0] == 0:
            return np.zeros(0)
        return np.maximum(self.A_in @ x - self.b_in, 0.0)

    def cone_residual(self, x: np.ndarray) -> np.ndarray:
        """Positive part of x²+y²−u·w (rotated) or x²+y²−rhs² (disk)."""
        out = []
        for c in self.cones:
            lhs = x[c.x] ** 2 + x[c.y] ** 2
            cap = x[c.u] * x[c.w] if c.kind == "rotated" else c.rhs**2
            out.append(max(lhs - cap, 0.0))
        return np.array(out)

    def box_violation(self, x: np.ndarray) -> float:
        return float(
            max(
                np.max(np.maximum(self.lb - x, 0.0), initial=0.0),
                np.max(np.maximum(x - self.ub, 0.0), initial=0.0),
            )
        )

    def dump(self) -> str:
        """Human-readable constraint listing for audit."""
        lines = [f"variables: {self.n}"]
        for i, nm in enumerate(self.names):
            obj_bits = []
            if self.c2[i]:
                obj_bits.append(f"{self.c2[i]:+.6g}*{nm}^2")
            if self.c1[i]:
                obj_bits.append(f"{self.c1[i]:+.6g}*{nm}")
            box = f"[{self.lb[i]:.6g}, {self.ub[i]:.6g}]"
            lines.append(f"  {nm} in {box}" + (f"  obj {' '.join(obj_bits)}" if obj_bits else ""))
        lines.append(f"equalities: {len(self.b_eq)}")
        A = self.A_eq.tocoo()
        rows: dict[int, list[str]] = {}
        for r, c, v in zip(A.row, A.col, A.data):
            rows.setdefault(r, []).append(f"{v:+.6g}*{self.names[c]}")
        for r in range(len(self.b_eq)):
            lines.append(
                f"  [{self.eq_labels[r]}] " + " ".join(rows.get(r, [])) + f" = {self.b_eq[r]:.6g}"
            )
        lines.append(f"inequalities: {len(self.b_in)}")
        A = self.A_in.tocoo()
        rows = {}
        for r, c, v in zip(A.row, A.col, A.data):
            rows.setdefault(r, []).append(f"{v:+.6g}*{self.names[c]}")
        for r in range(len(self.b_in)):
            lines.append(
                f"  [{self.in_labels[r]}] " + " ".join(rows.get(r, [])) + f" <= {self.b_in[r]:.6g}"
            )
        lines.append(f"cones: {len(self.cones)}")
        for c in self.cones:
            if c.kind == "rotated":
                lines.append(
                    f"  {self.names[c.x]}^2 + {self.names[c.y]}^2 <= "
                    f"{self.names[c.u]}*{self.names[c.w]}"
                )
            else:
                lines.append(f"  {self.names[c.x]}^2 + {self.names[c.y]}^2 <= {c.rhs:.6g}^2")
        return "\n".join(lines)
