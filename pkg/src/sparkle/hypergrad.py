"""Exact reference solutions for the lower, auxiliary and upper problems.

Everything here averages exact per-agent oracles; no stochastic estimate ever
enters a reference value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

RESIDUAL_TOL = 1e-10
MAX_ITER = 1_000_000


class NonConvergenceError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceSolution:
    y_star: np.ndarray
    z_star: np.ndarray
    grad_phi: np.ndarray
    residual_lower: float
    residual_aux: float


def mean_oracle(inst, x, y):
    """Agent-averaged exact oracle at a common point ``(x, y)``."""
    xs = np.broadcast_to(np.asarray(x, float), (inst.n, inst.p))
    ys = np.broadcast_to(np.asarray(y, float), (inst.n, inst.q))
    stacked = inst.exact_oracle_all(xs, ys)
    return type(stacked)(*(np.mean(a, axis=0) for a in stacked))


def _lower_grad(inst, x, y) -> np.ndarray:
    return mean_oracle(inst, x, y).v


def solve_lower(inst, x, tol: float = RESIDUAL_TOL) -> np.ndarray:
    """y*(x): one linear solve when g is quadratic in y, else gradient descent."""
    x = np.asarray(x, float)
    y0 = np.zeros(inst.q)
    if inst.quadratic_in_y:
        mo = mean_oracle(inst, x, y0)
        y = linalg.solve(mo.h_mat, -mo.v, assume_a="sym")
        # one refinement sweep keeps the residual at round-off for badly scaled x
        y = y - linalg.solve(mo.h_mat, _lower_grad(inst, x, y), assume_a="sym")
        res = float(np.linalg.norm(_lower_grad(inst, x, y)))
        if res > tol * max(1.0, float(np.linalg.norm(mo.v))):
            raise NonConvergenceError(f"lower residual {res:.3g} above tolerance")
        return y
    y = y0
    for _ in range(MAX_ITER):
        mo = mean_oracle(inst, x, y)
        if np.linalg.norm(mo.v) <= tol:
            return y
        lip = float(np.linalg.eigvalsh(mo.h_mat).max())
        y = y - mo.v / lip
    raise NonConvergenceError(f"lower solver hit {MAX_ITER} iterations")


def solve_aux(inst, x, y_star, tol: float = RESIDUAL_TOL) -> np.ndarray:
    """z*(x) solving ``H z = grad_y f`` at ``(x, y*)`` by Cholesky."""
    mo = mean_oracle(inst, x, y_star)
    try:
        factor = linalg.cho_factor(mo.h_mat)
    except linalg.LinAlgError as exc:
        raise DomainError("lower-level Hessian is not positive definite") from exc
    z = linalg.cho_solve(factor, mo.b)
    z = z + linalg.cho_solve(factor, mo.b - mo.h_mat @ z)
    res = float(np.linalg.norm(mo.h_mat @ z - mo.b))
    if res > tol * max(1.0, float(np.linalg.norm(mo.b))):
        raise NonConvergenceError(f"auxiliary residual {res:.3g} above tolerance")
    return z


def reference_solution(inst, x) -> ReferenceSolution:
    x = np.asarray(x, float)
    y_star = solve_lower(inst, x)
    mo = mean_oracle(inst, x, y_star)
    z_star = solve_aux(inst, x, y_star)
    grad_phi = mo.l - mo.j_mat @ z_star
    return ReferenceSolution(
        y_star=y_star,
        z_star=z_star,
        grad_phi=grad_phi,
        residual_lower=float(np.linalg.norm(mo.v)),
        residual_aux=float(np.linalg.norm(mo.h_mat @ z_star - mo.b)),
    )


def hypergradient(inst, x) -> np.ndarray:
    """grad Phi(x) = grad_x f(x, y*) - grad_xy g(x, y*) z*(x)."""
    return reference_solution(inst, x).grad_phi


def upper_objective(inst, x) -> float:
    x = np.asarray(x, float)
    y = solve_lower(inst, x)
    return float(np.mean([inst.upper_value(i, x, y) for i in range(inst.n)]))


def fd_hypergradient(inst, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of Phi(x) = f(x, y*(x)), one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, float)
    grad = np.empty_like(x)
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        grad[j] = (upper_objective(inst, x + step) - upper_objective(inst, x - step)) / (2 * h)
    return grad


def upper_argmin(inst, tol: float = 1e-12) -> np.ndarray:
    """Minimum-norm stationary point of Phi for instances with affine grad Phi.

    Every shipped family is quadratic in (x, y), so grad Phi(x) = Q x + c.  Q is
    assembled column by column and the least-squares solution is refined
    until ``||grad Phi|| <= tol * max(1, ||c||)``.
    """
    c = hypergradient(inst, np.zeros(inst.p))
    cols = [hypergradient(inst, e) - c for e in np.eye(inst.p)]
    Q = np.column_stack(cols)
    Q = 0.5 * (Q + Q.T)
    x = -np.linalg.lstsq(Q, c, rcond=None)[0]
    scale = max(1.0, float(np.linalg.norm(c)))
    for _ in range(5):
        g = hypergradient(inst, x)
        if np.linalg.norm(g) <= tol * scale:
            return x
        x = x - np.linalg.lstsq(Q, g, rcond=None)[0]
    if np.linalg.norm(hypergradient(inst, x)) > 1e-8 * scale:
        raise NonConvergenceError("upper minimizer refinement did not converge")
    return x
