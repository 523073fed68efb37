"""Entropic optimal transport between discrete distributions on K classes.

The solver works on dual potentials in the log domain so that the Gibbs kernel
exp(-C / lambda) never has to be formed explicitly; this keeps it stable for
small regularization. A batched variant solves one problem per row of ``h``
and ``y`` with a shared cost matrix, which is what the Wasserstein loss needs.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from camri.errors import InvalidInputError, UnsupportedSizeError

SINKHORN_TOL = 1e-9
SINKHORN_MAX_ITER = 10_000
MARGINAL_SMOOTHING = 1e-6
LP_ORACLE_MAX_K = 6


@dataclass
class TransportPlan:
    T: np.ndarray
    f: np.ndarray
    g: np.ndarray
    lam: float
    iterations: int
    converged: bool
    marginal_error: float

    @property
    def u(self):
        """Row scaling vector, exp(f / lambda)."""
        return np.exp(self.f / self.lam)

    @property
    def v(self):
        """Column scaling vector, exp(g / lambda)."""
        return np.exp(self.g / self.lam)


@dataclass
class BatchSinkhornResult:
    T: np.ndarray  # (N, K, K)
    f: np.ndarray  # (N, K)
    g: np.ndarray  # (N, K)
    iterations: int
    converged: np.ndarray  # (N,) bool
    marginal_error: np.ndarray  # (N,)


def smooth_marginal(y, eps=MARGINAL_SMOOTHING):
    """Mix a probability vector with the uniform distribution: (1-eps) y + eps/K."""
    y = np.asarray(y, dtype=np.float64)
    if eps <= 0:
        raise InvalidInputError("smoothing eps must be positive")
    k = y.shape[-1]
    return (1.0 - eps) * y + eps / k


def _check_marginals(h, y, C, lam):
    if lam <= 0:
        raise InvalidInputError("entropic regularization lambda must be positive")
    if np.any(h <= 0) or np.any(y <= 0):
        raise InvalidInputError("Sinkhorn marginals must be strictly positive")
    k = h.shape[-1]
    if y.shape[-1] != k or C.shape != (k, k):
        raise InvalidInputError(f"shape mismatch: h {h.shape}, y {y.shape}, C {C.shape}")


def sinkhorn_batch(h, y, C, lam, tol=SINKHORN_TOL, max_iter=SINKHORN_MAX_ITER):
    """Solve N entropic transport problems sharing the cost matrix ``C``.

    ``h`` and ``y`` are (N, K) arrays of strictly positive probability vectors.
    Iterates until every problem's row-marginal L1 error is at most ``tol``
    (column marginals are exact after each column update) or ``max_iter``.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    C = np.asarray(C, dtype=np.float64)
    _check_marginals(h, y, C, lam)

    log_h = np.log(h)
    log_y = np.log(y)
    neg_c = -C / lam
    f = np.zeros_like(h)
    g = np.zeros_like(y)
    err = np.full(h.shape[0], np.inf)
    it = 0
    while it < max_iter:
        it += 1
        f = lam * (log_h - logsumexp(g[:, None, :] / lam + neg_c[None], axis=2))
        g = lam * (log_y - logsumexp(f[:, :, None] / lam + neg_c[None], axis=1))
        log_t = (f[:, :, None] + g[:, None, :]) / lam + neg_c[None]
        err = np.abs(np.exp(logsumexp(log_t, axis=2)) - h).sum(axis=1)
        if np.all(err <= tol):
            break
    T = np.exp((f[:, :, None] + g[:, None, :]) / lam + neg_c[None])
    return BatchSinkhornResult(T, f, g, it, err <= tol, err)


def sinkhorn(h, y, C, lam, tol=SINKHORN_TOL, max_iter=SINKHORN_MAX_ITER):
    """Entropic transport plan between ``h`` (rows) and ``y`` (columns).

    Returns a plan with ``converged=False`` instead of raising when the
    iteration budget runs out; callers decide whether that is fatal.
    """
    res = sinkhorn_batch(h, y, C, lam, tol=tol, max_iter=max_iter)
    return TransportPlan(
        T=res.T[0],
        f=res.f[0],
        g=res.g[0],
        lam=float(lam),
        iterations=res.iterations,
        converged=bool(res.converged[0]),
        marginal_error=float(res.marginal_error[0]),
    )


def entropy(T):
    """H(T) = -sum T (log T - 1), with 0 log 0 taken as 0."""
    T = np.asarray(T, dtype=np.float64)
    safe = np.where(T > 0, T, 1.0)
    return -np.sum(np.where(T > 0, T * (np.log(safe) - 1.0), 0.0), axis=(-2, -1))


def entropic_objective(T, C, lam):
    """<T, C> - lambda * H(T)."""
    T = np.asarray(T, dtype=np.float64)
    if np.any(T < 0):
        raise InvalidInputError("transport plan must be nonnegative")
    return np.sum(T * C, axis=(-2, -1)) - lam * entropy(T)


def transport_lp_oracle(h, y, C):
    """Exact unregularized optimum min <T, C> over plans with marginals (h, y).

    Solved as a dense linear program on the K*K plan entries. Intended for
    small K only, as a reference for testing the entropic solver.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    k = h.shape[0]
    if k > LP_ORACLE_MAX_K:
        raise UnsupportedSizeError(f"LP oracle supports K <= {LP_ORACLE_MAX_K}, got {k}")
    if y.shape != (k,) or C.shape != (k, k):
        raise InvalidInputError("shape mismatch in LP oracle inputs")
    rows = np.kron(np.eye(k), np.ones((1, k)))
    cols = np.kron(np.ones((1, k)), np.eye(k))
    a_eq = np.vstack([rows, cols])[:-1]
    b_eq = np.concatenate([h, y])[:-1]
    res = linprog(
        C.ravel(),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise InvalidInputError(f"transport LP failed: {res.message}")
    return float(C.ravel() @ res.x)
