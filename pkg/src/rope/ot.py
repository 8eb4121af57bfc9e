"""Semi-balanced entropic optimal transport.

The observation side carries a hard uniform marginal; the simulation side
is softly tied to the uniform marginal through a KL penalty of weight
``rho``, parameterised by ``tau = rho / (rho + gamma)``. ``tau = 1`` is the
balanced problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tableio import read_table, write_table


@dataclass
class CostMatrix:
    values: np.ndarray
    description: str = ""

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost matrix has non-finite entries")
        if np.any(self.values < 0):
            raise ValueError("cost matrix has negative entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class Coupling:
    P: np.ndarray
    gamma: float
    tau: float
    iterations: int
    converged: bool
    marginal_error: float
    f: np.ndarray = field(repr=False, default=None)
    g: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape

    @property
    def row_sums(self) -> np.ndarray:
        return self.P.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.P.sum(axis=0)

    def entropy(self) -> float:
        P = self.P[self.P > 0]
        return float(-np.sum(P * np.log(P)))

    def diagnostics(self) -> dict:
        n_o, n_s = self.P.shape
        return {
            "n_o": n_o, "n_s": n_s, "gamma": self.gamma, "tau": self.tau,
            "iterations": self.iterations, "converged": bool(self.converged),
            "marginal_error": self.marginal_error,
            "col_error": float(np.max(np.abs(self.col_sums - 1.0 / n_s))),
            "entropy": self.entropy(),
        }

    def save(self, path) -> None:
        n_o, n_s = self.P.shape
        write_table(path, {"kind": "coupling", "n_o": n_o, "n_s": n_s, "gamma": self.gamma,
                           "tau": self.tau, "iterations": self.iterations,
                           "converged": bool(self.converged),
                           "marginal_error": self.marginal_error}, self.P)

    @classmethod
    def load(cls, path) -> Coupling:
        header, P = read_table(path)
        if header.get("kind") != "coupling":
            raise ValueError(f"{path}: not a coupling dump")
        return cls(P, header["gamma"], header["tau"], header["iterations"], header["converged"],
                   header["marginal_error"])


def rho_from_tau(tau: float, gamma: float) -> float:
    """Invert ``tau = rho / (rho + gamma)``; ``tau = 1`` gives ``inf`` (balanced)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if tau == 1.0:
        return math.inf
    return tau * gamma / (1.0 - tau)


def tau_from_rho(rho: float, gamma: float) -> float:
    return 1.0 if math.isinf(rho) else rho / (rho + gamma)


def sinkhorn_semibalanced(C, gamma: float, tau: float = 1.0, max_iters: int = 10_000,
                          tol: float = 1e-9) -> Coupling:
    """Log-domain scaling iterations for the semi-balanced entropic problem.

    Stops once the observation-side marginal violation drops below
    ``tol``; a final row normalisation then enforces that marginal exactly,
    also when ``max_iters`` is hit.
    """
    C = C.values if isinstance(C, CostMatrix) else np.atleast_2d(np.asarray(C, dtype=float))
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    n_o, n_s = C.shape
    log_a, log_b = -math.log(n_o), -math.log(n_s)
    K = -C / gamma
    f = np.zeros(n_o)
    g = np.zeros(n_s)
    converged = False
    err = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        # row_lse[i] = log sum_j exp((g_j - C_ij) / gamma)
        row_lse = logsumexp(K + g[None, :] / gamma, axis=1)
        err = float(np.max(np.abs(np.exp(f / gamma + row_lse) - 1.0 / n_o)))
        f = gamma * (log_a - row_lse)
        if err < tol and it > 1:
            converged = True
            break
        col_lse = logsumexp(K + f[:, None] / gamma, axis=0)
        g = tau * gamma * (log_b - col_lse)
    else:
        # loop ran out after a column update: project rows once more
        row_lse = logsumexp(K + g[None, :] / gamma, axis=1)
        f = gamma * (log_a - row_lse)
    P = np.exp(K + f[:, None] / gamma + g[None, :] / gamma)
    marginal_error = float(np.max(np.abs(P.sum(axis=1) - 1.0 / n_o)))
    return Coupling(P, float(gamma), float(tau), it, converged, marginal_error, f, g)


def _xlogx(P: np.ndarray) -> float:
    pos = P > 0
    return float(np.sum(P[pos] * np.log(P[pos])))


def objective_value(P, C, gamma: float, rho: float) -> float:
    """<P, C> + rho KL(P^T 1 || 1/n_s) + gamma <P, log P>, with 0 log 0 = 0.

    ``rho = inf`` means the column marginal is a constraint and the KL
    term is dropped.
    """
    P = np.asarray(P, dtype=float)
    C = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=float)
    if P.shape != C.shape:
        raise ValueError(f"coupling shape {P.shape} does not match cost shape {C.shape}")
    if np.any(P < 0):
        raise ValueError("coupling has negative entries")
    value = float(np.sum(P * C)) + gamma * _xlogx(P)
    if not math.isinf(rho) and rho > 0:
        q = P.sum(axis=0)
        b = 1.0 / P.shape[1]
        value += rho * (_xlogx(q) - float(np.sum(q)) * math.log(b) - float(np.sum(q)) + 1.0)
    return value


def dense_oracle(C, gamma: float, tau: float, max_iters: int = 200) -> np.ndarray:
    """Primal Newton solver on the explicit constraint set, for tiny instances.

    Works on vec(P) with the equality constraints written out as a dense
    matrix and the KKT system solved directly, so it shares no machinery
    with the scaling iterations above.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n_o, n_s = C.shape
    rho = rho_from_tau(tau, gamma)
    rows = np.kron(np.eye(n_o), np.ones((1, n_s)))
    cols = np.kron(np.ones((1, n_o)), np.eye(n_s))
    if math.isinf(rho):
        E = np.vstack([rows, cols[:-1]])
    else:
        E = rows
    c = C.ravel()
    p = np.full(n_o * n_s, 1.0 / (n_o * n_s))
    b = 1.0 / n_s

    def value(p):
        return objective_value(p.reshape(n_o, n_s), C, gamma, rho)

    m = len(E)
    for _ in range(max_iters):
        grad = c + gamma * (np.log(p) + 1.0)
        H = gamma * np.diag(1.0 / p)
        if not math.isinf(rho):
            q = cols @ p
            grad = grad + rho * cols.T @ np.log(q / b)
            H = H + rho * cols.T @ np.diag(1.0 / q) @ cols
        kkt = np.block([[H, E.T], [E, np.zeros((m, m))]])
        rhs = np.concatenate([-grad, np.zeros(m)])
        step = np.linalg.solve(kkt, rhs)[: len(p)]
        decrement = float(-grad @ step)
        if decrement < 1e-24:
            break
        t = 1.0
        neg = step < 0
        if neg.any():
            t = min(1.0, 0.99 * float(np.min(-p[neg] / step[neg])))
        f0 = value(p)
        while value(p + t * step) > f0 - 0.25 * t * decrement and t > 1e-16:
            t *= 0.5
        p = p + t * step
    return p.reshape(n_o, n_s)
