"""Damped Gauss-Newton over per-vertex 6-blocks with a block-Jacobi PCG inner solve."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .energy import TERMS, evaluate_terms, term_energies

logger = logging.getLogger(__name__)

BLOCK = 6


class SolverError(RuntimeError):
    """Unrecoverable numerical failure inside the solver."""


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 20
    mu0: float = 1e-4
    mu_grow: float = 4.0
    mu_shrink: float = 0.5
    mu_max: float = 1e10
    step_tol: float = 1e-6
    pcg_iters: int = 200
    pcg_tol: float = 1e-5
    max_retries: int = 8

    def __post_init__(self):
        if self.max_iters < 1 or self.pcg_iters < 1:
            raise ValueError("max_iters and pcg_iters must be >= 1")
        if self.mu0 < 0 or self.step_tol <= 0 or self.pcg_tol <= 0:
            raise ValueError("mu0 must be >= 0; step_tol and pcg_tol must be > 0")
        if self.mu_grow <= 1 or not 0 < self.mu_shrink < 1:
            raise ValueError("need mu_grow > 1 and 0 < mu_shrink < 1")


@dataclass
class SparseNormalSystem:
    """J^T J (block-sparse, 6x6 blocks) and J^T r, plus Levenberg damping ``mu``."""

    JtJ: sp.bsr_matrix
    gradient: np.ndarray
    n_vertices: int
    mu: float = 0.0

    def damped(self, mu):
        return SparseNormalSystem(self.JtJ, self.gradient, self.n_vertices, float(mu))

    def matrix(self):
        if self.mu == 0:
            return self.JtJ
        return (self.JtJ + self.mu * sp.identity(self.JtJ.shape[0], format="bsr",
                                                 dtype=np.float64)).tobsr(blocksize=(BLOCK, BLOCK))

    def diagonal_blocks(self):
        """(N, 6, 6) diagonal blocks of the damped matrix."""
        A = self.JtJ
        out = np.zeros((self.n_vertices, BLOCK, BLOCK))
        rows = np.repeat(np.arange(self.n_vertices), np.diff(A.indptr))
        on_diag = A.indices == rows
        out[rows[on_diag]] = A.data[on_diag]
        out += self.mu * np.eye(BLOCK)
        return out

    def block_pattern(self):
        """Set of (row_vertex, col_vertex) pairs holding a stored block."""
        A = self.JtJ
        rows = np.repeat(np.arange(self.n_vertices), np.diff(A.indptr))
        return set(zip(rows.tolist(), A.indices.tolist()))


def _scatter_rows(n, idx, vals):
    out = np.zeros((n, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n)
    return out


def assemble_normal_equations(terms, weights, n_vertices):
    """Accumulate lambda-weighted J^T J and J^T r from per-group Jacobian blocks.

    ``terms`` maps term name to :class:`~fabtrack.energy.TermResult`, all
    evaluated at the same linearisation point. The sparsity pattern follows
    the vertex groups of the terms (mesh adjacency, faces, single vertices).
    """
    n = n_vertices
    grad = np.zeros((n, BLOCK))
    rows, cols, datas = [], [], []
    for name, t in terms.items():
        lam = weights.weight(name)
        if lam == 0:
            continue
        if not np.all(np.isfinite(t.residuals)):
            raise SolverError(f"non-finite residual in term '{name}'")
        if t.blocks is None or not np.all(np.isfinite(t.blocks)):
            raise SolverError(f"non-finite or missing Jacobian in term '{name}'")
        ids = t.vertex_ids
        k = ids.shape[1]
        for a in range(k):
            ja = t.blocks[:, :, a, :]
            grad += _scatter_rows(n, ids[:, a], lam * np.einsum("grc,gr->gc", ja, t.residuals))
            for b in range(k):
                jb = t.blocks[:, :, b, :]
                rows.append(ids[:, a])
                cols.append(ids[:, b])
                datas.append(lam * np.einsum("grc,grd->gcd", ja, jb))

    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        d = np.concatenate(datas)
        key = r * n + c
        uniq, inv = np.unique(key, return_inverse=True)
        data = np.zeros((uniq.size, BLOCK * BLOCK))
        flat = d.reshape(-1, BLOCK * BLOCK)
        for e in range(BLOCK * BLOCK):
            data[:, e] = np.bincount(inv, weights=flat[:, e], minlength=uniq.size)
        brow, bcol = uniq // n, uniq % n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, brow + 1, 1)
        indptr = np.cumsum(indptr)
        JtJ = sp.bsr_matrix((data.reshape(-1, BLOCK, BLOCK), bcol, indptr),
                            shape=(BLOCK * n, BLOCK * n))
    else:
        JtJ = sp.bsr_matrix((BLOCK * n, BLOCK * n), blocksize=(BLOCK, BLOCK))
    return SparseNormalSystem(JtJ, grad.ravel(), n)


@dataclass
class PcgResult:
    step: np.ndarray
    iterations: int
    relative_residual: float
    mu: float


def _block_inverses(blocks):
    if np.any(~(np.linalg.cond(blocks) <= 1e14)):
        return None
    return np.linalg.inv(blocks)


def solve_normal_equations(system, pcg_iters=200, pcg_tol=1e-5, max_retries=8):
    """Solve (J^T J + mu I) delta = -J^T r by block-Jacobi PCG.

    Unknowns that no term touches (zero row and zero gradient) get a zero
    step. A preconditioner block that cannot be inverted raises ``mu`` by 10x
    and retries, up to ``max_retries`` times.
    """
    n = system.n_vertices
    b = -system.gradient
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return PcgResult(np.zeros_like(b), 0, 0.0, system.mu)

    for _ in range(max_retries + 1):
        diag = system.diagonal_blocks()
        # unknowns not touched by any term: pin them with a unit diagonal
        free = np.abs(np.diagonal(diag, axis1=1, axis2=2)) == 0
        pin = free.ravel() & (b == 0)
        pin_mat = np.where(pin, 1.0, 0.0)
        diag = diag + np.einsum("ni,ij->nij", pin_mat.reshape(n, BLOCK), np.eye(BLOCK))
        Minv = _block_inverses(diag)
        if Minv is not None:
            break
        system = system.damped(max(system.mu * 10.0, 1e-8))
        logger.debug("singular preconditioner block, mu -> %g", system.mu)
    else:
        raise SolverError(f"preconditioner singular after {max_retries} damping increases")

    A = system.matrix()

    def matvec(x):
        return A @ x + pin_mat * x

    def precond(r):
        return np.einsum("nij,nj->ni", Minv, r.reshape(n, BLOCK)).ravel()

    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = r @ z
    rel = 1.0
    it = 0
    for it in range(1, pcg_iters + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= pcg_tol:
            break
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, it, float(rel), system.mu)


@dataclass
class IterationRecord:
    frame: int
    iteration: int
    energies: dict
    total: float
    mu: float
    accepted: bool


@dataclass
class GaussNewtonResult:
    state: object
    log: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = ""
    gates: object = None

    def accepted_energies(self):
        return [rec.total for rec in self.log if rec.accepted]


def gauss_newton(state, mesh, inputs, weights, options=None, frame=0):
    """Levenberg-damped Gauss-Newton from ``state``.

    The log starts with the initial energy (iteration 0) and records every
    tried step; accepted entries are non-increasing by construction.
    """
    opt = options or SolverOptions()
    n = state.n_vertices

    def energies(s):
        terms, _ = evaluate_terms(s, mesh, inputs, weights, jacobian=False)
        e = term_energies(terms, weights)
        return e, float(sum(e.values()))

    e_terms, energy = energies(state)
    if not np.isfinite(energy):
        raise SolverError(f"non-finite energy at initial state (frame {frame})")
    result = GaussNewtonResult(state)
    result.log.append(IterationRecord(frame, 0, e_terms, energy, opt.mu0, True))
    mu = opt.mu0
    gates = None

    for it in range(1, opt.max_iters + 1):
        result.iterations = it
        terms, gates = evaluate_terms(state, mesh, inputs, weights, jacobian=True)
        system = assemble_normal_equations(terms, weights, n)
        if not np.any(system.gradient):
            result.converged, result.reason = True, "zero gradient"
            break
        while True:
            sol = solve_normal_equations(system.damped(mu), opt.pcg_iters, opt.pcg_tol,
                                         opt.max_retries)
            mu = sol.mu
            if np.max(np.abs(sol.step)) < opt.step_tol:
                result.converged, result.reason = True, "step below tolerance"
                break
            cand = state.apply_step(sol.step)
            c_terms, c_energy = energies(cand)
            if np.isfinite(c_energy) and c_energy < energy:
                result.log.append(IterationRecord(frame, it, c_terms, c_energy, mu, True))
                state, energy = cand, c_energy
                mu *= opt.mu_shrink
                break
            result.log.append(IterationRecord(frame, it, c_terms, c_energy, mu, False))
            mu = max(mu * opt.mu_grow, 1e-8)
            if mu > opt.mu_max:
                result.converged, result.reason = True, "damping limit reached"
                break
        if result.converged:
            break
    else:
        result.reason = "max iterations"
    result.state = state
    result.gates = gates
    return result


ENERGY_LOG_FIELDS = (["frame", "iteration"] + [f"E_{t}" for t in TERMS]
                     + ["total", "mu", "accepted"])


def write_energy_log(path, records, append=False):
    """CSV with one row per tried step."""
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ENERGY_LOG_FIELDS)
        for rec in records:
            w.writerow([rec.frame, rec.iteration]
                       + [repr(float(rec.energies.get(t, 0.0))) for t in TERMS]
                       + [repr(float(rec.total)), repr(float(rec.mu)), int(rec.accepted)])
