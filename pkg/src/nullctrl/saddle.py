"""First-order primal-dual iteration for the assembled saddle systems.

The iteration needs matrix-vector products only; nothing is factorized.  A
direct sparse factorization of the full KKT matrix exists as an oracle and
fallback for small systems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import SaddleSystem


class SolverDiverged(RuntimeError):
    """Raised when an iterate stops being finite (step sizes too large)."""

    def __init__(self, iteration, log):
        super().__init__(f"iteration diverged at step {iteration}; "
                         "reduce the primal/dual step sizes")
        self.iteration = iteration
        self.log = log


@dataclass(frozen=True)
class AHParams:
    """Step sizes and stopping control for the primal-dual iteration.

    equilibrate renormalizes the discrete bases before iterating (primal
    basis functions to unit L2 norm, constraint rows to unit 2-norm): a
    diagonal rescaling that leaves every function-space quantity unchanged
    and inverts nothing, but moves the iteration's stable step sizes to an
    O(1), mesh-independent range.  The raw assembled scaling is so stiff
    (constraint rows grow like the inverse square root of the time to the
    horizon) that the plain iteration stalls at any step choice; see the
    default r, s which are calibrated for the equilibrated system.
    """

    r: float = 0.5
    s: float = 1.0
    tol: float = 1e-5
    max_iter: int = 500
    equilibrate: bool = True

    def __post_init__(self):
        if self.r <= 0 or self.s <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("need r > 0, s > 0, tol > 0, max_iter >= 1")


@dataclass
class IterationLog:
    """Per-iteration relative errors plus final residual norms."""

    iters: list = field(default_factory=list)
    rel_err1: list = field(default_factory=list)
    rel_err2: list = field(default_factory=list)
    converged: bool = False
    residual_primal: float = np.nan   # |A x + B^T lam - L|
    residual_constraint: float = np.nan   # |B x|

    def rows(self):
        return zip(self.iters, self.rel_err1, self.rel_err2)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,rel_err1,rel_err2\n")
            for k, e1, e2 in self.rows():
                fh.write(f"{k},{e1:.12e},{e2:.12e}\n")


def _mnorm(M, v):
    if M is None or M.shape[0] == 0:
        return float(np.linalg.norm(v))
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def _rel_change(M, new, old):
    """Relative increment in the function-space norm, guarded near zero."""
    num = _mnorm(M, new - old)
    den = _mnorm(M, new)
    if den < 1e-14:
        return num
    return num / den


def _equilibration(system):
    """Diagonal basis renormalization (dp, dl) for the iteration.

    dp makes each primal basis function unit in L2(Q_T); dl then makes each
    constraint row of B unit in the Euclidean norm, except that rows whose
    norm is far below the median (near-dependent constraints such as
    slice-constant divergence pairings) are left small rather than amplified
    into unreachable dual directions.  Pure rescaling: the underlying
    Galerkin problem and its solution functions are untouched.
    """
    mass_diag = np.maximum(system.M_primal.diagonal(), 1e-300)
    dp = 1.0 / np.sqrt(mass_diag)
    Bp = (system.B @ sp.diags(dp)).tocsr()
    rn = np.sqrt(np.asarray(Bp.multiply(Bp).sum(axis=1)).ravel())
    med = np.median(rn[rn > 0]) if np.any(rn > 0) else 1.0
    dl = 1.0 / np.maximum(rn, 0.05 * med)
    return dp, dl


def arrow_hurwicz(system: SaddleSystem, params: AHParams = AHParams(),
                  start=None):
    """Iterate the primal-dual scheme, by default from the zero guess.

    x^{k+1} = x^k - r (A x^k - L + B^T lam^k)
    lam^{k+1} = lam^k + r s B x^{k+1}

    Stops when both relative errors (L2(Q_T) mass-matrix norms of the
    increments over the iterates) fall below tol, or at max_iter.  Fields
    carrying the zero-mean-per-slice convention are re-projected after every
    update.  start=(x0, lam0) warm-starts the iteration (used by the outer
    fixed-point loop); the returned iterate and log always refer to the
    original assembled scaling.
    """
    if params.equilibrate:
        dp, dl = _equilibration(system)
    else:
        dp = np.ones(system.n_primal)
        dl = np.ones(system.n_dual)
    Dp, Dl = sp.diags(dp), sp.diags(dl)
    A = (Dp @ system.A @ Dp).tocsr()
    B = (Dl @ system.B @ Dp).tocsr()
    L = dp * system.L
    BT = B.T.tocsr()
    Mp, Md = system.M_primal, system.M_dual

    if start is None:
        x = np.zeros(system.n_primal)
        lam = np.zeros(system.n_dual)
    else:
        x = np.asarray(start[0], dtype=float) / dp
        lam = np.asarray(start[1], dtype=float) / dl
    log = IterationLog()

    def project(vec, scale, fn):
        return fn(scale * vec) / scale

    for k in range(1, params.max_iter + 1):
        x_new = x - params.r * (A @ x - L + BT @ lam)
        x_new = project(x_new, dp, system.project_primal)
        lam_new = lam + params.r * params.s * (B @ x_new)
        lam_new = project(lam_new, dl, system.project_dual)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(lam_new))):
            raise SolverDiverged(k, log)
        if k % 64 == 0 and max(np.abs(x_new).max(),
                               np.abs(lam_new).max()) > 1e130:
            raise SolverDiverged(k, log)   # slow exponential blow-up
        e1 = _rel_change(Mp, dp * x_new, dp * x)
        e2 = _rel_change(Md, dl * lam_new, dl * lam)
        log.iters.append(k)
        log.rel_err1.append(e1)
        log.rel_err2.append(e2)
        x, lam = x_new, lam_new
        if e1 <= params.tol and e2 <= params.tol:
            log.converged = True
            break
    x, lam = dp * x, dl * lam
    log.residual_primal = float(np.linalg.norm(
        system.A @ x - system.L + system.B.T @ lam))
    log.residual_constraint = float(np.linalg.norm(system.B @ x))
    return x, lam, log


class KktSolver:
    """Factorized solver for the (possibly singular) KKT system, reusable as
    a preconditioner across mild system updates.

    The factorization is of the equilibrated, quasi-definite regularization
    [[A + eps I, B^T], [B, -eps I]]; iterative refinement against the true
    matrix removes the O(eps |x|) bias, converging to the minimal-energy
    element of the solution manifold when the exact system is singular.
    `resolve` solves a *different* system with the same sparsity (e.g. the
    next outer fixed-point iterate) by preconditioned refinement, and
    refactorizes automatically when the operator has drifted too far.
    """

    def __init__(self, system: SaddleSystem, eps: float = 1e-8):
        self.eps = eps
        self._factorize(system)

    def _scaled(self, system):
        dp, dl = self.dp, self.dl
        A = (sp.diags(dp) @ system.A @ sp.diags(dp)).tocsr()
        B = (sp.diags(dl) @ system.B @ sp.diags(dp)).tocsr()
        return A, B, dp * system.L

    def _factorize(self, system):
        self.dp, self.dl = _equilibration(system)
        A, B, L = self._scaled(system)
        n, m = A.shape[0], B.shape[0]
        K = sp.bmat([[A + self.eps * sp.identity(n), B.T],
                     [B, (-self.eps) * sp.identity(m)]], format="csc")
        self.lu = spla.splu(K)
        self.n, self.m = n, m

    def resolve(self, system, max_refine=40, tol=1e-9, start=None):
        """Solve the given system, refining with the stored factorization."""
        A, B, L = self._scaled(system)
        n, m = self.n, self.m
        rhs = np.concatenate([L, np.zeros(m)])
        scale = np.linalg.norm(rhs) + 1e-300

        def residual(sol):
            return rhs - np.concatenate([
                A @ sol[:n] + B.T @ sol[n:],
                B @ sol[:n]])

        sol = np.zeros(n + m)
        if start is not None:
            sol[:n] = np.asarray(start[0]) / self.dp
            sol[n:] = np.asarray(start[1]) / self.dl
        for attempt in range(2):
            best = np.inf
            for _ in range(max_refine):
                r = residual(sol)
                rn = np.linalg.norm(r) / scale
                if rn <= tol:
                    break
                if rn > 2.0 * best:      # drifted operator: refinement fails
                    break
                best = min(best, rn)
                sol = sol + self.lu.solve(r)
            rn = np.linalg.norm(residual(sol)) / scale
            if rn <= tol or attempt == 1:
                break
            self._factorize(system)      # refresh the preconditioner
            A, B, L = self._scaled(system)
            rhs = np.concatenate([L, np.zeros(m)])
        x = system.project_primal(self.dp * sol[:n])
        lam = system.project_dual(self.dl * sol[n:])
        return x, lam, rn


def lsq_solve(system: SaddleSystem, start=None, tol=1e-12, max_iter=40000,
              gamma=1.0):
    """Minimal-norm least-squares solve of the (augmented) KKT system.

    The iteration runs on the equilibrated basis with the constraint block
    augmented into the primal one (same solution set: the constraint
    vanishes at any solution); this is the workhorse for the flow systems,
    whose KKT matrices are numerically singular, and it supports warm starts
    across outer fixed-point iterations.  Returns (x, lam, info_dict).
    """
    dp, dl = _equilibration(system)
    Dp, Dl = sp.diags(dp), sp.diags(dl)
    A = (Dp @ system.A @ Dp).tocsr()
    B = (Dl @ system.B @ Dp).tocsr()
    L = dp * system.L
    n, mdim = system.n_primal, system.n_dual
    rhs = np.concatenate([L, np.zeros(mdim)])
    if np.abs(rhs).max() == 0.0:
        return np.zeros(n), np.zeros(mdim), {"iterations": 0, "residual": 0.0}
    K = sp.bmat([[A + gamma * (B.T @ B), B.T], [B, None]], format="csr")
    x0 = None
    if start is not None:
        x0 = np.concatenate([np.asarray(start[0]) / dp,
                             np.asarray(start[1]) / dl])
    out = spla.lsmr(K, rhs, atol=tol, btol=tol, maxiter=max_iter, x0=x0)
    sol = out[0]
    x = system.project_primal(dp * sol[:n])
    lam = system.project_dual(dl * sol[n:])
    info = {"iterations": int(out[2]), "residual": float(out[3]),
            "istop": int(out[1])}
    return x, lam, info


def direct_solve(system: SaddleSystem, max_dim: int = 120_000,
                 regularization: float = 1e-8):
    """Factorize the full symmetric indefinite KKT matrix (oracle/fallback).

    The factorization runs on the equilibrated basis (better pivots); if the
    matrix is numerically singular -- the discrete pair carries no inf-sup
    guarantee, so this happens on the flow systems -- the dual block is
    regularized quasi-definitely ([A B^T; B -delta I]) and the solve is
    flagged; a least-squares pass is the last resort.  Returns
    (x, lam, flagged).
    """
    n, mdim = system.n_primal, system.n_dual
    if n + mdim > max_dim:
        raise ValueError(f"system of dimension {n + mdim} exceeds the "
                         f"direct-solve guard {max_dim}")
    if np.abs(system.L).max() == 0.0:
        return np.zeros(n), np.zeros(mdim), False
    dp, dl = _equilibration(system)
    Dp, Dl = sp.diags(dp), sp.diags(dl)
    A = (Dp @ system.A @ Dp).tocsr()
    B = (Dl @ system.B @ Dp).tocsr()
    L = dp * system.L
    rhs = np.concatenate([L, np.zeros(mdim)])

    scale = np.linalg.norm(L) + 1.0

    def attempt_exact():
        K = sp.bmat([[A, B.T], [B, None]], format="csc")
        try:
            sol = spla.spsolve(K, rhs)
        except RuntimeError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        if np.linalg.norm(A @ sol[:n] - L + B.T @ sol[n:]) > 1e-8 * scale:
            return None
        if np.linalg.norm(B @ sol[:n]) > 1e-8 * scale:
            return None
        return sol

    sol = attempt_exact()
    if sol is not None:
        x = system.project_primal(dp * sol[:n])
        lam = system.project_dual(dl * sol[n:])
        return x, lam, False
    # numerically singular: regularized factorization with refinement picks
    # the minimal-energy element of the solution manifold, flagged
    solver = KktSolver(system, eps=regularization)
    x, lam, _rn = solver.resolve(system)
    return x, lam, True
