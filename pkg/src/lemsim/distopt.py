"""Atomized distributed solution of the market programs.

The global convex program is decomposed into per-agent subproblems (atoms)
holding owned variables plus local copies of the neighbour variables their
constraints touch.  Copies are tied to owners through consensus rows, and the
whole thing is driven by a proximal primal-dual iteration with two simulated
peer-to-peer exchange rounds per iteration: primal values out, consensus
duals back.  An accelerated variant adds Nesterov extrapolation (masking) on
both primal and dual variables plus quadratic penalty terms in the local
proximal objective.

The engine is single-threaded and bit-deterministic: identical inputs, gains
and schedules reproduce identical iterate logs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .programs import ConeBlock, ConvexProgram

DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 20000
INNER_TOL = 1e-9
INNER_MAX = 40


class AtomizationError(ValueError):
    pass


class SolverDivergence(RuntimeError):
    def __init__(self, msg: str, trace: list[tuple[int, float, float]]):
        super().__init__(msg)
        self.trace = trace


@dataclass
class AtomProblem:
    """One agent's local share of the atomized program.

    Local variable layout is ``[owned..., copies...]``; ``gmap`` maps local
    positions back to global program indices.  ``copy_owner`` gives, for each
    copy, the atom that owns the original variable.
    """

    atom_id: int
    key: str
    gmap: np.ndarray
    n_owned: int
    c2: np.ndarray
    c1: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    G: np.ndarray
    b: np.ndarray
    eq_labels: list[str]
    eq_scale: np.ndarray
    H: np.ndarray
    d: np.ndarray
    cones: list[ConeBlock]
    copy_owner: np.ndarray

    @property
    def n(self) -> int:
        return len(self.gmap)

    @property
    def owned_global(self) -> np.ndarray:
        return self.gmap[: self.n_owned]

    @property
    def copies_global(self) -> np.ndarray:
        return self.gmap[self.n_owned:]


@dataclass
class Atomization:
    program: ConvexProgram
    atoms: list[AtomProblem]
    # consensus rows over the stacked local vectors: +1 copy, -1 owned
    B: sp.csr_matrix
    row_atom: np.ndarray            # atom updating each consensus row's dual
    offsets: np.ndarray             # atom -> offset into the stacked vector
    neighbors: list[set[int]]

    @property
    def n_stacked(self) -> int:
        return int(self.offsets[-1])

    @property
    def coupling_norm_sq(self) -> float:
        """sigma_max² of the stacked normalized-equality plus consensus matrix.

        The stable dual gain scales inversely with this; computed once by
        deterministic power iteration and cached.
        """
        obj = object.__getattribute__(self, "__dict__")
        if "_sig2" not in obj:
            mats = [m for m in (self._stacked_G(), self.B) if m.shape[0] > 0]
            A = sp.vstack(mats) if mats else None
            if A is None or A.shape[0] == 0:
                obj["_sig2"] = 1.0
            else:
                v = np.random.default_rng(7).standard_normal(A.shape[1])
                v /= np.linalg.norm(v)
                s = 1.0
                for _ in range(80):
                    w = A.T @ (A @ v)
                    s = float(np.linalg.norm(w))
                    if s == 0.0:
                        break
                    v = w / s
                obj["_sig2"] = max(s, 1.0)
        return obj["_sig2"]

    def _stacked_G(self) -> sp.csr_matrix:
        data, ri, ci = [], [], []
        nrow = 0
        for atom, off in zip(self.atoms, self.offsets[:-1]):
            G = atom.G
            for r in range(G.shape[0]):
                for c in np.nonzero(G[r])[0]:
                    ri.append(nrow)
                    ci.append(off + c)
                    data.append(G[r, c])
                nrow += 1
        return sp.csr_matrix((data, (ri, ci)), shape=(nrow, self.n_stacked))

    def stack_slices(self):
        return [slice(self.offsets[j], self.offsets[j + 1]) for j in range(len(self.atoms))]

    def assemble(self, stacked: np.ndarray) -> np.ndarray:
        """Global solution vector from owned entries."""
        x = np.zeros(self.program.n)
        for atom, sl in zip(self.atoms, self.stack_slices()):
            loc = stacked[sl]
            x[atom.owned_global] = loc[: atom.n_owned]
        return x


def atomize(
    program: ConvexProgram,
    partition: dict[str, str],
    adjacency: list[tuple[str, str]] | None = None,
) -> Atomization:
    """Split a program into atoms following a node-to-atom partition.

    Every node owner appearing in the program must be covered by
    ``partition``.  When ``adjacency`` (feeder node edges) is given, any
    constraint whose variables span atoms that are not graph-adjacent is
    rejected, since the exchange protocol only links neighbours.
    """
    owners = set(program.var_owner) | set(program.eq_owner) | set(program.in_owner)
    owners |= {c.owner for c in program.cones}
    missing = {o for o in owners if o not in partition}
    if missing:
        raise AtomizationError(f"partition does not cover nodes: {sorted(missing)[:5]}")

    atom_keys = sorted(set(partition[o] for o in owners))
    key_to_id = {k: i for i, k in enumerate(atom_keys)}
    m = len(atom_keys)

    atom_adj: set[tuple[int, int]] | None = None
    if adjacency is not None:
        atom_adj = set()
        for a, b in adjacency:
            if a in partition and b in partition:
                ja, jb = key_to_id[partition[a]], key_to_id[partition[b]]
                atom_adj.add((ja, jb))
                atom_adj.add((jb, ja))

    var_atom = np.array([key_to_id[partition[o]] for o in program.var_owner])
    owned_lists: list[list[int]] = [[] for _ in range(m)]
    for v in range(program.n):
        owned_lists[var_atom[v]].append(v)

    # collect copies required by each atom's constraint rows
    copies: list[dict[int, None]] = [dict() for _ in range(m)]

    def note_vars(atom_j: int, gvars, what: str) -> None:
        for v in gvars:
            vj = var_atom[v]
            if vj == atom_j:
                continue
            if atom_adj is not None and (atom_j, int(vj)) not in atom_adj:
                raise AtomizationError(
                    f"{what} spans non-adjacent atoms "
                    f"{atom_keys[atom_j]} and {atom_keys[vj]}"
                )
            copies[atom_j][int(v)] = None

    A_eq = program.A_eq.tocsr()
    eq_atom = np.array([key_to_id[partition[o]] for o in program.eq_owner], dtype=int)
    for r in range(A_eq.shape[0]):
        cols = A_eq.indices[A_eq.indptr[r]: A_eq.indptr[r + 1]]
        note_vars(int(eq_atom[r]), cols, f"equality {program.eq_labels[r]}")
    A_in = program.A_in.tocsr()
    in_atom = np.array([key_to_id[partition[o]] for o in program.in_owner], dtype=int)
    for r in range(A_in.shape[0]):
        cols = A_in.indices[A_in.indptr[r]: A_in.indptr[r + 1]]
        note_vars(int(in_atom[r]), cols, f"inequality {program.in_labels[r]}")
    cone_atom = [key_to_id[partition[c.owner]] for c in program.cones]
    for c, j in zip(program.cones, cone_atom):
        note_vars(j, c.var_indices(), "cone")

    atoms: list[AtomProblem] = []
    local_of: list[dict[int, int]] = []
    offsets = [0]
    for j in range(m):
        gmap = np.array(owned_lists[j] + sorted(copies[j]), dtype=int)
        lmap = {int(g): i for i, g in enumerate(gmap)}
        local_of.append(lmap)
        n_owned = len(owned_lists[j])
        nloc = len(gmap)
        c2 = np.zeros(nloc)
        c1 = np.zeros(nloc)
        c2[:n_owned] = program.c2[gmap[:n_owned]]
        c1[:n_owned] = program.c1[gmap[:n_owned]]
        lb = program.lb[gmap].copy()
        ub = program.ub[gmap].copy()
        atoms.append(
            AtomProblem(
                atom_id=j,
                key=atom_keys[j],
                gmap=gmap,
                n_owned=n_owned,
                c2=c2,
                c1=c1,
                lb=lb,
                ub=ub,
                G=np.zeros((0, nloc)),
                b=np.zeros(0),
                eq_labels=[],
                eq_scale=np.ones(0),
                H=np.zeros((0, nloc)),
                d=np.zeros(0),
                cones=[],
                copy_owner=np.array([var_atom[g] for g in gmap[n_owned:]], dtype=int),
            )
        )
        offsets.append(offsets[-1] + nloc)

    # distribute constraint rows into local coordinates, normalized to unit
    # L2 norm so one dual gain suits heterogeneous rows
    eq_rows: list[list[tuple[dict[int, float], float, str, float]]] = [[] for _ in range(m)]
    for r in range(A_eq.shape[0]):
        j = int(eq_atom[r])
        cols = A_eq.indices[A_eq.indptr[r]: A_eq.indptr[r + 1]]
        vals = A_eq.data[A_eq.indptr[r]: A_eq.indptr[r + 1]]
        nrm = float(np.linalg.norm(vals)) or 1.0
        row = {local_of[j][int(c)]: float(v) / nrm for c, v in zip(cols, vals)}
        eq_rows[j].append((row, float(program.b_eq[r]) / nrm, program.eq_labels[r], nrm))
    in_rows: list[list[tuple[dict[int, float], float]]] = [[] for _ in range(m)]
    for r in range(A_in.shape[0]):
        j = int(in_atom[r])
        cols = A_in.indices[A_in.indptr[r]: A_in.indptr[r + 1]]
        vals = A_in.data[A_in.indptr[r]: A_in.indptr[r + 1]]
        row = {local_of[j][int(c)]: float(v) for c, v in zip(cols, vals)}
        in_rows[j].append((row, float(program.b_in[r])))
    for c, j in zip(program.cones, cone_atom):
        lm = local_of[j]
        atoms[j].cones.append(
            ConeBlock(
                c.kind,
                x=lm[c.x],
                y=lm[c.y],
                u=lm[c.u] if c.kind == "rotated" else -1,
                w=lm[c.w] if c.kind == "rotated" else -1,
                rhs=c.rhs,
                owner=c.owner,
            )
        )

    for j in range(m):
        nloc = atoms[j].n
        if eq_rows[j]:
            G = np.zeros((len(eq_rows[j]), nloc))
            b = np.zeros(len(eq_rows[j]))
            labels = []
            scales = np.ones(len(eq_rows[j]))
            for r, (row, rhs, label, nrm) in enumerate(eq_rows[j]):
                for c, v in row.items():
                    G[r, c] = v
                b[r] = rhs
                labels.append(label)
                scales[r] = nrm
            atoms[j].G, atoms[j].b, atoms[j].eq_labels = G, b, labels
            atoms[j].eq_scale = scales
        if in_rows[j]:
            H = np.zeros((len(in_rows[j]), nloc))
            d = np.zeros(len(in_rows[j]))
            for r, (row, rhs) in enumerate(in_rows[j]):
                for c, v in row.items():
                    H[r, c] = v
                d[r] = rhs
            atoms[j].H, atoms[j].d = H, d

    # consensus incidence over the stacked vector
    data, ri, ci = [], [], []
    row_atom = []
    nrow = 0
    neighbors: list[set[int]] = [set() for _ in range(m)]
    for j in range(m):
        for k, g in enumerate(atoms[j].copies_global):
            owner = int(atoms[j].copy_owner[k])
            pos_copy = offsets[j] + atoms[j].n_owned + k
            pos_owned = offsets[owner] + local_of[owner][int(g)]
            ri += [nrow, nrow]
            ci += [pos_copy, pos_owned]
            data += [1.0, -1.0]
            row_atom.append(j)
            neighbors[j].add(owner)
            neighbors[owner].add(j)
            nrow += 1
    B = sp.csr_matrix((data, (ri, ci)), shape=(nrow, offsets[-1]))

    return Atomization(
        program=program,
        atoms=atoms,
        B=B,
        row_atom=np.array(row_atom, dtype=int),
        offsets=np.array(offsets, dtype=int),
        neighbors=neighbors,
    )


# ---------------------------------------------------------------------------
# cone projections


def project_disk(x: float, y: float, rhs: float) -> tuple[float, float]:
    nrm = math.hypot(x, y)
    if nrm <= rhs:
        return x, y
    s = rhs / nrm
    return x * s, y * s


def project_rotated_cones(P: np.ndarray, iters: int = 60) -> np.ndarray:
    """Batched Euclidean projection onto {(x,y,u,w): x²+y² ≤ u·w, u,w ≥ 0}.

    Works in the orthogonally rotated coordinates t=(u+w)/√2, r=(u−w)/√2
    where the set becomes the elliptic cone 2x²+2y²+r² ≤ t², and solves the
    scalar KKT equation for the active constraint multiplier by vectorized
    bisection on lambda in [0, 1).
    """
    P = np.atleast_2d(P)
    x, y, u, w = P[:, 0], P[:, 1], P[:, 2], P[:, 3]
    feas = (u >= 0) & (w >= 0) & (x * x + y * y <= u * w + 1e-300)
    s2 = math.sqrt(2.0)
    t = (u + w) / s2
    r = (u - w) / s2
    dsq = np.array([2.0, 2.0, 1.0])
    Z = np.stack([x, y, r], axis=1)

    apex = (~feas) & (t <= 0.0)
    solve = (~feas) & (t > 0.0)
    lam_lo = np.zeros(len(P))
    lam_hi = np.full(len(P), 1.0 - 1e-15)
    tsafe = np.where(t > 0, t, 1.0)
    for _ in range(iters):
        lam = 0.5 * (lam_lo + lam_hi)
        ZZ = Z / (1.0 + lam[:, None] * dsq[None, :])
        tt = tsafe / (1.0 - lam)
        gap = np.sum(dsq[None, :] * ZZ * ZZ, axis=1) - tt * tt
        grow = gap > 0.0
        lam_lo = np.where(grow, lam, lam_lo)
        lam_hi = np.where(grow, lam_hi, lam)
    lam = 0.5 * (lam_lo + lam_hi)
    ZP = Z / (1.0 + lam[:, None] * dsq[None, :])
    TP = tsafe / (1.0 - lam)

    out = P.copy()
    if solve.any():
        xp, yp, rp = ZP[:, 0], ZP[:, 1], ZP[:, 2]
        up = np.maximum((TP + rp) / s2, 0.0)
        wp = np.maximum((TP - rp) / s2, 0.0)
        cand = np.stack([xp, yp, up, wp], axis=1)
        out[solve] = cand[solve]
    if apex.any():
        out[apex] = 0.0
    return out


def project_rotated_cone(p: np.ndarray) -> np.ndarray:
    return project_rotated_cones(np.asarray(p, dtype=float)[None, :])[0]


# ---------------------------------------------------------------------------
# local proximal step


class _ProxWorkspace:
    """Per-atom prefactored inner solver (operator splitting).

    Minimizes ½ aᵀM a + gᵀa over box ∩ {Ha ≤ d} ∩ cones with an ADMM whose
    linear system is factored once.  Cone blocks are batched into index
    matrices so every projection is one vectorized call; the z/u splitting
    variables persist across outer iterations for warm starts.
    """

    RELAX = 1.6

    def __init__(self, atom: AtomProblem, M: np.ndarray, rho_in: float = 4.0):
        self.atom = atom
        self.rho_in = rho_in
        n = atom.n
        self.H = atom.H if atom.H.shape[0] else None
        rot = [c for c in atom.cones if c.kind == "rotated"]
        disk = [c for c in atom.cones if c.kind == "disk"]
        self.RI = np.array([[c.x, c.y, c.u, c.w] for c in rot], dtype=int) \
            if rot else np.zeros((0, 4), dtype=int)
        self.DI = np.array([[c.x, c.y] for c in disk], dtype=int) \
            if disk else np.zeros((0, 2), dtype=int)
        self.Drhs = np.array([c.rhs for c in disk])
        EtE = np.eye(n)
        if self.H is not None:
            EtE += self.H.T @ self.H
        for idx in (self.RI, self.DI):
            if idx.size:
                np.add.at(EtE, (idx.ravel(), idx.ravel()), 1.0)
        K = M + rho_in * EtE
        self.chol = cho_factor(K)
        self.z_box = np.zeros(n)
        self.u_box = np.zeros(n)
        self.z_h = np.zeros(self.H.shape[0]) if self.H is not None else None
        self.u_h = np.zeros(self.H.shape[0]) if self.H is not None else None
        self.z_r = np.zeros_like(self.RI, dtype=float)
        self.u_r = np.zeros_like(self.RI, dtype=float)
        self.z_d = np.zeros_like(self.DI, dtype=float)
        self.u_d = np.zeros_like(self.DI, dtype=float)
        self._ri_flat = self.RI.ravel()
        self._di_flat = self.DI.ravel()
        self._warm = False

    def _project_disks(self, V: np.ndarray) -> np.ndarray:
        if not len(V):
            return V
        nrm = np.hypot(V[:, 0], V[:, 1])
        scale = np.where(nrm > self.Drhs, self.Drhs / np.maximum(nrm, 1e-300), 1.0)
        return V * scale[:, None]

    def seed(self, a: np.ndarray) -> None:
        if self._warm:
            return
        self.z_box = np.clip(a, self.atom.lb, self.atom.ub)
        if self.H is not None:
            self.z_h = np.minimum(self.H @ a, self.atom.d)
        if self.RI.size:
            self.z_r = project_rotated_cones(a[self.RI])
        if self.DI.size:
            self.z_d = self._project_disks(a[self.DI])
        self._warm = True

    def solve(self, g: np.ndarray, tol: float = INNER_TOL, max_iter: int = INNER_MAX) -> np.ndarray:
        rho = self.rho_in
        al = self.RELAX
        a = np.zeros(self.atom.n)
        for _ in range(max_iter):
            rhs = -g + rho * (self.z_box - self.u_box)
            if self.H is not None:
                rhs += rho * (self.H.T @ (self.z_h - self.u_h))
            if self.RI.size:
                rhs += rho * np.bincount(
                    self._ri_flat, (self.z_r - self.u_r).ravel(), minlength=len(rhs)
                )
            if self.DI.size:
                rhs += rho * np.bincount(
                    self._di_flat, (self.z_d - self.u_d).ravel(), minlength=len(rhs)
                )
            a = cho_solve(self.chol, rhs)
            r_prim = 0.0
            r_dual = 0.0

            ax = al * a + (1.0 - al) * self.z_box
            z_new = np.clip(ax + self.u_box, self.atom.lb, self.atom.ub)
            r_dual = max(r_dual, rho * float(np.max(np.abs(z_new - self.z_box), initial=0.0)))
            self.u_box += ax - z_new
            r_prim = max(r_prim, float(np.max(np.abs(a - z_new), initial=0.0)))
            self.z_box = z_new

            if self.H is not None:
                ha = self.H @ a
                hx = al * ha + (1.0 - al) * self.z_h
                z_new = np.minimum(hx + self.u_h, self.atom.d)
                r_dual = max(r_dual, rho * float(np.max(np.abs(z_new - self.z_h), initial=0.0)))
                self.u_h += hx - z_new
                r_prim = max(r_prim, float(np.max(np.abs(ha - z_new), initial=0.0)))
                self.z_h = z_new

            if self.RI.size:
                ar = a[self.RI]
                axr = al * ar + (1.0 - al) * self.z_r
                z_new = project_rotated_cones(axr + self.u_r)
                r_dual = max(r_dual, rho * float(np.max(np.abs(z_new - self.z_r), initial=0.0)))
                self.u_r += axr - z_new
                r_prim = max(r_prim, float(np.max(np.abs(ar - z_new), initial=0.0)))
                self.z_r = z_new

            if self.DI.size:
                ad = a[self.DI]
                axd = al * ad + (1.0 - al) * self.z_d
                z_new = self._project_disks(axd + self.u_d)
                r_dual = max(r_dual, rho * float(np.max(np.abs(z_new - self.z_d), initial=0.0)))
                self.u_d += axd - z_new
                r_prim = max(r_prim, float(np.max(np.abs(ad - z_new), initial=0.0)))
                self.z_d = z_new

            if r_prim <= tol and r_dual <= tol:
                break
        # final feasibility polish: land exactly in the box
        return np.clip(a, self.atom.lb, self.atom.ub)


def local_prox_step(
    atom: AtomProblem,
    a_prev: np.ndarray,
    g_lin: np.ndarray,
    rho: float,
    penalty: float = 0.0,
    B_loc: np.ndarray | None = None,
    r_fixed: np.ndarray | None = None,
    workspace: _ProxWorkspace | None = None,
    inner_tol: float = INNER_TOL,
) -> np.ndarray:
    """One proximal minimization for an atom.

    Solves argmin f_j(a) + g_linᵀa + (penalty/2)(‖Ga−b‖² + ‖B_loc a + r‖²)
    + (1/2ρ)‖a − a_prev‖² subject to the atom's box, linear inequalities and
    cones.  ``g_lin`` carries the dual linear terms.
    """
    n = atom.n
    M = np.diag(2.0 * atom.c2 + 1.0 / rho)
    g = atom.c1 + g_lin - a_prev / rho
    if penalty > 0.0:
        if atom.G.shape[0]:
            M = M + penalty * (atom.G.T @ atom.G)
            g = g - penalty * (atom.G.T @ atom.b)
        if B_loc is not None and B_loc.shape[0]:
            M = M + penalty * (B_loc.T @ B_loc)
            g = g + penalty * (B_loc.T @ r_fixed)
    if workspace is None:
        workspace = _ProxWorkspace(atom, M)
    workspace.seed(a_prev)
    return workspace.solve(g, tol=inner_tol)


# ---------------------------------------------------------------------------
# message log


@dataclass
class MessageLog:
    record: bool = False
    entries: list = field(default_factory=list)
    primal_count: int = 0
    dual_count: int = 0

    def log(self, iteration: int, sender: int, receiver: int, kind: str, values) -> None:
        if kind == "primal":
            self.primal_count += 1
        else:
            self.dual_count += 1
        if self.record:
            self.entries.append((iteration, sender, receiver, kind, tuple(values)))

    def export_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "sender", "receiver", "kind", "values"])
            for it, s, r, kind, vals in self.entries:
                w.writerow([it, s, r, kind, ";".join(repr(v) for v in vals)])


@dataclass
class SolveResult:
    x: np.ndarray
    stacked: np.ndarray
    objective: float
    iterations: int
    converged: bool
    eq_residual: float
    consensus_residual: float
    duals_stationary: bool
    eq_duals: dict[str, float]
    nu: np.ndarray
    trace: list[tuple[int, float, float]]
    messages: MessageLog
    stacked_state: dict | None = None

    def value(self, program: ConvexProgram, name: str) -> float:
        return float(self.x[program.var(name)])

    def export_trace_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "eq_residual", "consensus_residual"])
            for row in self.trace:
                w.writerow(row)


# ---------------------------------------------------------------------------
# the coordination engine


@dataclass
class Gains:
    rho: float = 1.0
    gamma: dict[int, float] | None = None      # per-atom overrides
    gamma_scale: float = 0.8                   # stable fraction of 1/(rho² sigma²)
    gamma_abs: float | None = None             # direct uniform dual gain
    gamma_hat: float | None = None             # PAC dual extrapolation, default gamma
    penalty_scale: float = 1.0                 # NST quadratic penalty = scale*rho*gamma


@dataclass
class StopRule:
    tol_eq: float = DEFAULT_TOL
    tol_consensus: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    check_every: int = 1
    divergence_window: int = 50
    inner_tol: float = INNER_TOL
    inner_max: int = INNER_MAX


def _gamma_defaults(atz: Atomization, gains: Gains) -> np.ndarray:
    """Uniform dual gain inside the stability region of the coupled dynamics.

    The scalar analysis of the extrapolated dual update is contractive for
    rho²·gamma·sigma² below one, where sigma is the largest singular value of
    the stacked (normalized) constraint matrix; the degree-based default from
    the design notes is recovered only on loosely coupled partitions and is
    unstable on tight ones, so the spectral rule is used instead.
    """
    m = len(atz.atoms)
    if gains.gamma_abs is not None:
        base = gains.gamma_abs
    else:
        base = gains.gamma_scale / (gains.rho**2 * atz.coupling_norm_sq)
    g = np.full(m, base)
    if gains.gamma:
        for j, val in gains.gamma.items():
            g[j] = val
    return g


def _nesterov_schedule(max_iter: int) -> np.ndarray:
    t = np.ones(max_iter + 2)
    for k in range(1, max_iter + 2):
        t[k] = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t[k - 1] ** 2))
    alpha = np.zeros(max_iter + 1)
    for k in range(max_iter + 1):
        alpha[k] = (t[k] - 1.0) / t[k + 1]
    return alpha


def _solve(
    atz: Atomization,
    gains: Gains,
    stop: StopRule,
    accelerated: bool,
    alpha_schedule=None,
    phi_schedule=None,
    theta_schedule=None,
    record_messages: bool = False,
    warm: dict | None = None,
) -> SolveResult:
    prog = atz.program
    atoms = atz.atoms
    m = len(atoms)
    slices = atz.stack_slices()
    rho = gains.rho
    gamma = _gamma_defaults(atz, gains)
    gamma_hat = gains.gamma_hat if gains.gamma_hat is not None else None

    B = atz.B
    Bt = B.T.tocsr()
    nrow = B.shape[0]
    row_gamma = gamma[atz.row_atom] if nrow else np.zeros(0)

    # per-atom local consensus structure: rows touching the atom
    rows_touching: list[np.ndarray] = []
    Bloc: list[np.ndarray] = []
    Bc = B.tocsc()
    for j in range(m):
        sl = slices[j]
        cols = range(sl.start, sl.stop)
        rows = set()
        for c in cols:
            rows.update(Bc.indices[Bc.indptr[c]: Bc.indptr[c + 1]].tolist())
        rows = np.array(sorted(rows), dtype=int)
        rows_touching.append(rows)
        Bloc.append(B[rows][:, sl.start: sl.stop].toarray() if len(rows) else np.zeros((0, atoms[j].n)))

    if accelerated:
        if alpha_schedule is None:
            alpha_schedule = _nesterov_schedule(stop.max_iter)
        if phi_schedule is None:
            phi_schedule = alpha_schedule
        if theta_schedule is None:
            theta_schedule = alpha_schedule

    # state
    if warm is not None:
        a = [w.copy() for w in warm["a"]]
        mu = [w.copy() for w in warm["mu"]]
        nu = warm["nu"].copy()
        mu_mask = [v.copy() for v in mu]
        nu_mask = nu.copy()
    else:
        a = [np.zeros(at.n) for at in atoms]
        for j, at in enumerate(atoms):
            lo = np.where(np.isfinite(at.lb), at.lb, 0.0)
            hi = np.where(np.isfinite(at.ub), at.ub, 0.0)
            a[j] = np.clip(0.0, lo, hi)
        mu = [rho * gamma[j] * (at.G @ a[j] - at.b) if at.G.shape[0] else np.zeros(0)
              for j, at in enumerate(atoms)]
        nu = np.zeros(nrow)
        if accelerated:
            mu_mask = [v.copy() for v in mu]
            nu_mask = nu.copy()
        else:
            gh0 = np.array([gamma_hat if gamma_hat is not None else gamma[j] for j in range(m)])
            mu_mask = [
                mu[j] + rho * gh0[j] * (at.G @ a[j] - at.b) if at.G.shape[0] else np.zeros(0)
                for j, at in enumerate(atoms)
            ]
            nu_mask = nu.copy()
    a_prev = [v.copy() for v in a]
    stacked = np.concatenate(a) if m else np.zeros(0)
    dual_pairs = _dual_pairs(atz) if nrow else []

    penalty = [gains.penalty_scale * rho * gamma[j] if accelerated else 0.0 for j in range(m)]
    workspaces: list[_ProxWorkspace] = []
    for j, at in enumerate(atoms):
        M = np.diag(2.0 * at.c2 + 1.0 / rho)
        if penalty[j] > 0.0:
            if at.G.shape[0]:
                M = M + penalty[j] * (at.G.T @ at.G)
            if Bloc[j].shape[0]:
                M = M + penalty[j] * (Bloc[j].T @ Bloc[j])
        workspaces.append(_ProxWorkspace(at, M))

    msglog = MessageLog(record=record_messages)
    trace: list[tuple[int, float, float]] = []
    best_res = np.inf
    stall = 0
    converged = False
    it = 0

    def residuals(stk: np.ndarray) -> tuple[float, float]:
        r_eq = 0.0
        for j, at in enumerate(atoms):
            if at.G.shape[0]:
                scaled = (at.G @ stk[slices[j]] - at.b) * at.eq_scale
                r_eq = max(r_eq, float(np.max(np.abs(scaled))))
        r_c = float(np.max(np.abs(B @ stk), initial=0.0)) if nrow else 0.0
        return r_eq, r_c

    for it in range(1, stop.max_iter + 1):
        if accelerated:
            al = float(alpha_schedule[min(it, len(alpha_schedule) - 1)])
            ph = float(phi_schedule[min(it, len(phi_schedule) - 1)])
            th = float(theta_schedule[min(it, len(theta_schedule) - 1)])
        # primal local steps
        nu_eff = nu_mask
        nu_col = Bt @ nu_eff if nrow else np.zeros(atz.n_stacked)
        a_new = []
        for j, at in enumerate(atoms):
            g_lin = (at.G.T @ mu_mask[j] if at.G.shape[0] else 0.0) + nu_col[slices[j]]
            if penalty[j] > 0.0 and Bloc[j].shape[0]:
                rows = rows_touching[j]
                # consensus residual contribution of the neighbours, frozen
                r_full = (B[rows] @ stacked) - (Bloc[j] @ stacked[slices[j]])
                g = at.c1 + g_lin - a[j] / rho
                g = g - penalty[j] * (at.G.T @ at.b) if at.G.shape[0] else g
                g = g + penalty[j] * (Bloc[j].T @ r_full)
            else:
                g = at.c1 + g_lin - a[j] / rho
            workspaces[j].seed(a[j])
            a_new.append(workspaces[j].solve(g, tol=stop.inner_tol, max_iter=stop.inner_max))
        a_prev, a = a, a_new

        # masking / extrapolation of the primal
        if accelerated:
            a_hat = [a[j] + al * (a[j] - a_prev[j]) for j in range(m)]
        else:
            a_hat = a
        stacked = np.concatenate(a_hat) if m else np.zeros(0)

        # primal exchange round
        for j in range(m):
            for k in sorted(atz.neighbors[j]):
                msglog.log(it, j, k, "primal", a_hat[j][: min(4, atoms[j].n)])

        # dual updates
        mu_new = []
        mu_mask_new = []
        for j, at in enumerate(atoms):
            if at.G.shape[0]:
                resid = at.G @ a_hat[j] - at.b
                if accelerated:
                    mj = mu_mask[j] + rho * gamma[j] * resid
                    mh = mj + ph * (mj - mu[j])
                else:
                    mj = mu[j] + rho * gamma[j] * resid
                    gh = gamma_hat if gamma_hat is not None else gamma[j]
                    mh = mj + rho * gh * resid
            else:
                mj = mu[j]
                mh = mu_mask[j]
            mu_new.append(mj)
            mu_mask_new.append(mh)
        mu = mu_new
        mu_mask = mu_mask_new

        if nrow:
            b_res = B @ stacked
            if accelerated:
                nu_new = nu_mask + rho * row_gamma * b_res
                nu_mask = nu_new + th * (nu_new - nu)
            else:
                nu_new = nu + rho * row_gamma * b_res
                gh_row = row_gamma if gamma_hat is None else gamma_hat
                nu_mask = nu_new + rho * gh_row * b_res
            nu = nu_new
            # dual exchange round
            for r_atom, other in dual_pairs:
                msglog.log(it, r_atom, other, "dual", ())

        if it % stop.check_every == 0 or it == stop.max_iter:
            stk_base = np.concatenate(a) if m else np.zeros(0)
            r_eq, r_c = residuals(stk_base)
            trace.append((it, r_eq, r_c))
            res = max(r_eq, r_c)
            if not np.isfinite(res):
                raise SolverDivergence(f"non-finite residual at iteration {it}", trace)
            if res <= max(stop.tol_eq, stop.tol_consensus) and r_eq <= stop.tol_eq and r_c <= stop.tol_consensus:
                converged = True
                break
            if res < best_res * (1.0 - 1e-12):
                best_res = res
                stall = 0
            else:
                stall += stop.check_every
                if accelerated and stall >= stop.divergence_window and res > 10.0 * best_res:
                    raise SolverDivergence(
                        f"residual growth over {stop.divergence_window} iterations "
                        f"(best {best_res:.3e}, now {res:.3e})",
                        trace,
                    )

    stacked_final = np.concatenate(a) if m else np.zeros(0)
    r_eq, r_c = residuals(stacked_final)
    x = atz.assemble(stacked_final)

    # dual stationarity probe: one more dual step must move duals less than tol
    dual_step = 0.0
    for j, at in enumerate(atoms):
        if at.G.shape[0]:
            dual_step = max(
                dual_step,
                float(np.max(np.abs(rho * gamma[j] * (at.G @ a[j] - at.b)), initial=0.0)),
            )
    if nrow:
        dual_step = max(
            dual_step,
            float(np.max(np.abs(rho * row_gamma * (B @ stacked_final)), initial=0.0)),
        )
    duals_stationary = dual_step <= 10.0 * max(stop.tol_eq, stop.tol_consensus)

    # duals of the original (unnormalized) rows
    eq_duals: dict[str, float] = {}
    for j, at in enumerate(atoms):
        for r, label in enumerate(at.eq_labels):
            eq_duals[label] = float(mu[j][r] / at.eq_scale[r])

    return SolveResult(
        x=x,
        stacked=stacked_final,
        objective=prog.objective(x),
        iterations=it,
        converged=converged,
        eq_residual=r_eq,
        consensus_residual=r_c,
        duals_stationary=duals_stationary,
        eq_duals=eq_duals,
        nu=nu.copy(),
        trace=trace,
        messages=msglog,
        stacked_state={"a": [v.copy() for v in a], "mu": [v.copy() for v in mu], "nu": nu.copy()},
    )


def _dual_pairs(atz: Atomization):
    """Ordered (row owner, counterparty) pairs for the dual exchange round."""
    pairs = []
    B = atz.B.tocsr()
    bounds = atz.offsets
    for r in range(B.shape[0]):
        owner = int(atz.row_atom[r])
        cols = B.indices[B.indptr[r]: B.indptr[r + 1]]
        for c in cols:
            k = int(np.searchsorted(bounds, c, side="right") - 1)
            if k != owner:
                pairs.append((owner, k))
    return pairs


def solve_pac(
    atz: Atomization,
    gains: Gains | None = None,
    stop: StopRule | None = None,
    record_messages: bool = False,
    warm: dict | None = None,
) -> SolveResult:
    """Proximal atomic coordination with extrapolated (bar) dual terms."""
    return _solve(
        atz,
        gains or Gains(),
        stop or StopRule(),
        accelerated=False,
        record_messages=record_messages,
        warm=warm,
    )


def solve_nst_pac(
    atz: Atomization,
    gains: Gains | None = None,
    stop: StopRule | None = None,
    alpha_schedule=None,
    phi_schedule=None,
    theta_schedule=None,
    record_messages: bool = False,
    warm: dict | None = None,
) -> SolveResult:
    """Nesterov-accelerated, variable-masked variant of the coordination loop.

    With all masking schedules identically zero and a zero penalty scale the
    iterate sequence coincides with :func:`solve_pac` run with zero dual
    extrapolation (``gamma_hat=0``).
    """
    return _solve(
        atz,
        gains or Gains(),
        stop or StopRule(),
        accelerated=True,
        alpha_schedule=alpha_schedule,
        phi_schedule=phi_schedule,
        theta_schedule=theta_schedule,
        record_messages=record_messages,
        warm=warm,
    )


def solve_single_atom(program: ConvexProgram, stop: StopRule | None = None) -> SolveResult:
    """Centralized-equivalent solve: one atom, no consensus rows."""
    partition = {o: "all" for o in
                 set(program.var_owner) | set(program.eq_owner) | set(program.in_owner)
                 | {c.owner for c in program.cones}}
    atz = atomize(program, partition)
    stop = stop or StopRule(tol_eq=1e-7, tol_consensus=1e-7, max_iter=60000, check_every=20)
    gains = Gains(rho=5.0, gamma={0: 1.0})
    return solve_nst_pac(atz, gains, stop)
