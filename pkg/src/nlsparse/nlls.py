"""Nonlinear least squares: Levenberg-Marquardt fits and a penalty solver.

`lm_fit` solves the support-restricted fit min ||y - f(x)||_2^2 over a
coordinate subset, the inner step of the greedy solvers.
`penalty_constrained_fit` solves min ||R x||_2^2 subject to y = f(x) by
minimizing the stacked residual [R x ; sqrt(beta) (y - f(x))] with LM and
escalating beta, the inner step of the cosparse solver.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import LinearMap, NonFiniteModelError, _matvec, _rmatvec

__all__ = [
    "LmOptions",
    "LmInfo",
    "lm_fit",
    "PenaltyOptions",
    "PenaltyInfo",
    "penalty_constrained_fit",
]

_DAMPING_CEIL = 1e18
_DIAG_FLOOR = 1e-12


@dataclass
class LmOptions:
    max_iters: int = 100
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    # matrix-free path only: conjugate-gradient controls for the damped step
    cg_rtol: float = 1e-3
    cg_maxiter: int = 80

    def __post_init__(self):
        for name in ("max_iters", "grad_tol", "step_tol", "damping_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.damping_up > 1.0 > self.damping_down > 0.0):
            raise ValueError("need damping_up > 1 > damping_down > 0")


@dataclass
class LmInfo:
    converged_by: str = "max_iters"  # grad_tol | step_tol | max_iters | stalled
    iterations: int = 0
    residual_norm: float = np.inf
    grad_inf_norm: float = np.inf
    cost_history: list = field(default_factory=list)
    underdetermined: bool = False


def _cg(apply_mat, b, rtol, maxiter):
    """Conjugate gradients for an SPD operator; returns the approximate solve."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    if rs == 0.0:
        return x
    tol2 = (rtol ** 2) * rs
    for _ in range(maxiter):
        Ap = apply_mat(p)
        pAp = float(p @ Ap)
        if pAp <= 0 or not np.isfinite(pAp):
            break
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        if rs_new <= tol2:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _dense_step(J, e, lam):
    """Damped Gauss-Newton step via the augmented least-squares system."""
    s = J.shape[1]
    d = np.maximum(np.einsum("ij,ij->j", J, J), _DIAG_FLOOR)
    aug = np.vstack([J, np.diag(np.sqrt(lam * d))])
    rhs = np.concatenate([-e, np.zeros(s)])
    delta, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
    return delta


def _run_lm(z0, residual_fn, make_step, opts):
    """Shared LM loop.

    residual_fn(z) -> residual vector e (minimize ||e||^2); may raise
    NonFiniteModelError at trial points, which rejects the step.
    make_step(z, e) -> (grad, solver) with grad = d||e||^2/dz and
    solver(lam) -> damped step delta.
    """
    z = np.asarray(z0, dtype=float).copy()
    e = residual_fn(z)
    cost = float(e @ e)
    lam = opts.damping_init
    info = LmInfo(cost_history=[cost])
    for it in range(1, opts.max_iters + 1):
        grad, solver = make_step(z, e)
        info.grad_inf_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if info.grad_inf_norm <= opts.grad_tol:
            info.converged_by = "grad_tol"
            info.iterations = it - 1
            break
        info.iterations = it
        accepted = False
        while True:
            delta = solver(lam)
            if not np.all(np.isfinite(delta)) or float(np.max(np.abs(delta))) <= opts.step_tol:
                info.converged_by = "step_tol"
                break
            try:
                e_try = residual_fn(z + delta)
                cost_try = float(e_try @ e_try)
                if not np.isfinite(cost_try):
                    cost_try = np.inf
            except NonFiniteModelError:
                cost_try = np.inf
            if cost_try <= cost:
                z = z + delta
                e = e_try
                cost = cost_try
                lam = max(lam * opts.damping_down, 1e-15)
                info.cost_history.append(cost)
                accepted = True
                break
            lam *= opts.damping_up
            if lam > _DAMPING_CEIL:
                info.converged_by = "stalled"
                break
        if not accepted:
            break
    else:
        info.converged_by = "max_iters"
    info.residual_norm = float(np.sqrt(cost))
    return z, e, info


def lm_fit(model, y, support, x0=None, opts=None, full_output=False):
    """Fit x over the coordinates in `support`, zero elsewhere.

    Finds a stationary point of ||y - f(x)||_2^2 restricted to `support`
    with the Levenberg-Marquardt method: the restricted gradient inf-norm
    drops to grad_tol, or the step/iteration budget runs out (the info
    object reports which).

    Parameters
    ----------
    model : MeasurementModel
    y : measurement vector of length m
    support : nonempty index set
    x0 : optional warm start; only its `support` entries are used
    opts : LmOptions
    full_output : when True also return the LmInfo diagnostics

    Returns
    -------
    x : ndarray of length n, zero off support (plus info if requested)
    """
    opts = opts or LmOptions()
    support = np.asarray(support, dtype=int).ravel()
    if support.size == 0:
        raise ValueError("support must be nonempty")
    if np.unique(support).size != support.size:
        raise ValueError("support contains duplicate indices")
    y = np.asarray(y, dtype=float).ravel()
    n = model.n

    def embed(z):
        xf = np.zeros(n)
        xf[support] = z
        return xf

    z0 = np.zeros(support.size)
    if x0 is not None:
        z0 = np.asarray(x0, dtype=float).ravel()[support].copy()

    def residual(z):
        return y - model.apply(embed(z))

    if isinstance(model.A, np.ndarray):

        def make_step(z, e):
            J = model.restricted_jacobian(embed(z), support)  # d f / d z
            grad = -2.0 * (J.T @ e)
            return grad, lambda lam: _dense_step(-J, e, lam)

    else:

        def make_step(z, e):
            jmat, jtmat = model.jacobian_ops(embed(z), support)
            jte = jtmat(e)
            grad = -2.0 * jte

            def solver(lam):
                return _cg(
                    lambda v: jtmat(jmat(v)) + lam * v,
                    jte,
                    opts.cg_rtol,
                    opts.cg_maxiter,
                )

            return grad, solver

    z, _, info = _run_lm(z0, residual, make_step, opts)
    info.underdetermined = support.size > model.m
    x = embed(z)
    if full_output:
        return x, info
    return x


@dataclass
class PenaltyOptions:
    beta_init: float = 1.0
    beta_growth: float = 10.0
    constraint_tol: float = 1e-8
    max_outer: int = 12
    inner: LmOptions = field(default_factory=LmOptions)

    def __post_init__(self):
        if self.beta_growth <= 1.0:
            raise ValueError("beta_growth must exceed 1")
        if self.constraint_tol < 0:
            raise ValueError("constraint_tol must be nonnegative")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class PenaltyInfo:
    feasible: bool = False
    constraint_norm: float = np.inf
    analysis_norm: float = np.inf
    outer_stages: int = 0
    beta_final: float = 0.0


def _rows_matvec(rows, x):
    if rows is None or rows.shape[0] == 0:
        return np.zeros(0)
    return np.asarray(rows @ x).ravel()


def _rows_rmatvec(rows, u):
    if rows is None or rows.shape[0] == 0:
        return None
    return np.asarray(rows.T @ u).ravel()


def penalty_constrained_fit(rows, model, y, x0=None, opts=None, full_output=False):
    """Minimize ||rows @ x||_2^2 subject to y = f(x), by escalating penalty.

    Each outer stage minimizes the stacked residual
    [rows @ x ; sqrt(beta) (y - f(x))] with LM, warm-started from the
    previous stage, and beta grows by beta_growth until the constraint
    residual ||y - f(x)||_2 drops to constraint_tol or max_outer stages
    have run. `rows` may be a dense array, a scipy.sparse matrix, or None
    (r = 0, pure feasibility).

    Raises RuntimeError("infeasible or stalled") when the constraint
    residual fails to decrease across two consecutive escalations.
    """
    opts = opts or PenaltyOptions()
    y = np.asarray(y, dtype=float).ravel()
    n = model.n
    if rows is not None and rows.shape[1] != n:
        raise ValueError(f"rows have {rows.shape[1]} columns, model expects {n}")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()

    dense = isinstance(model.A, np.ndarray) and (rows is None or isinstance(rows, np.ndarray))
    ident = isinstance(model.A, LinearMap) and getattr(model.A, "is_identity", False)
    sparse_direct = ident and (rows is None or sp.issparse(rows))
    gram = None
    gram_diag = None
    if sparse_direct:
        if rows is None or rows.shape[0] == 0:
            gram = sp.csr_matrix((n, n))
        else:
            gram = (rows.T @ rows).tocsr()
        gram_diag = np.asarray(gram.diagonal()).ravel()

    info = PenaltyInfo()
    beta = opts.beta_init
    not_reduced = 0
    c_prev = None
    for stage in range(1, opts.max_outer + 1):
        sq = np.sqrt(beta)

        def residual(xv, _sq=sq):
            return np.concatenate([_rows_matvec(rows, xv), _sq * (y - model.apply(xv))])

        if dense:

            def make_step(xv, e, _sq=sq):
                Jf = model.restricted_jacobian(xv, np.arange(n))
                top = rows if rows is not None else np.zeros((0, n))
                Je = np.vstack([top, -_sq * Jf])
                grad = 2.0 * (Je.T @ e)
                return grad, lambda lam: _dense_step(Je, e, lam)

        elif sparse_direct:

            def make_step(xv, e, _sq=sq, _b=beta):
                w = model.g.dg(xv)
                r = 0 if rows is None else rows.shape[0]
                jte_top = _rows_rmatvec(rows, e[:r])
                jte = -_sq * w * e[r:]
                if jte_top is not None:
                    jte = jte_top + jte
                grad = 2.0 * jte

                def solver(lam):
                    d = np.maximum(gram_diag + _b * w * w, _DIAG_FLOOR)
                    N = gram + sp.diags(_b * w * w + lam * d)
                    return spla.splu(N.tocsc()).solve(-jte)

                return grad, solver

        else:

            def make_step(xv, e, _sq=sq):
                jmat, jtmat = model.jacobian_ops(xv, np.arange(n))
                r = 0 if rows is None else rows.shape[0]

                def je(v):
                    return np.concatenate([_rows_matvec(rows, v), -_sq * jmat(v)])

                def jet(u):
                    top = _rows_rmatvec(rows, u[:r])
                    bot = -_sq * jtmat(u[r:])
                    return bot if top is None else top + bot

                jte = jet(e)
                grad = 2.0 * jte
                inner = opts.inner

                def solver(lam):
                    return _cg(lambda v: jet(je(v)) + lam * v, -jte, inner.cg_rtol, inner.cg_maxiter)

                return grad, solver

        x, _, _ = _run_lm(x, residual, make_step, opts.inner)
        c = float(np.linalg.norm(y - model.apply(x)))
        info.outer_stages = stage
        info.beta_final = beta
        info.constraint_norm = c
        if c <= opts.constraint_tol:
            info.feasible = True
            break
        if c_prev is not None:
            if c > c_prev * (1.0 - 1e-12):
                not_reduced += 1
                if not_reduced >= 2:
                    raise RuntimeError(
                        "infeasible or stalled: constraint residual "
                        f"{c:.3e} not decreasing under penalty escalation"
                    )
            else:
                not_reduced = 0
        c_prev = c
        beta *= opts.beta_growth

    info.analysis_norm = float(np.linalg.norm(_rows_matvec(rows, x)))
    if full_output:
        return x, info
    return x
