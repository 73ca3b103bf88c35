"""Per-iteration measurements of a swarm against exact reference solutions."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .hypergrad import reference_solution

CSV_COLUMNS = ("k", "grad_phi_sq", "cons_x", "cons_y", "cons_z", "err_y", "err_z", "est_err", "wall_ns")


@dataclass(frozen=True)
class MetricsRow:
    k: int
    grad_phi_sq: float
    cons_x: float
    cons_y: float
    cons_z: float
    err_y: float
    err_z: float
    est_err: float
    wall_ns: int = 0

    def as_tuple(self) -> tuple:
        return astuple(self)


assert tuple(f.name for f in fields(MetricsRow)) == CSV_COLUMNS


def consensus_error(s: np.ndarray) -> float:
    """(1/n) sum_i ||s_i - s_bar||^2."""
    dev = s - s.mean(axis=0)
    return float(np.sum(dev * dev)) / s.shape[0]


def consensus_error_projector(s: np.ndarray) -> float:
    """Same quantity via ||(I - 11^T/n) s||_F^2 / n."""
    n = s.shape[0]
    proj = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.linalg.norm(proj @ s) ** 2) / n


def measure(state, problem, x_hat=None, wall_ns: int = 0) -> MetricsRow:
    """Measure ``state`` (iterates after ``state.k`` steps).

    ``err_y``/``err_z`` compare the newest lower/auxiliary means with y*, z*
    at the upper mean the step was taken from, ``x_prev``.
    """
    exact = problem.with_mode("deterministic") if problem.mode != "deterministic" else problem
    x_bar = state.x.mean(axis=0)
    ref = reference_solution(exact, x_bar)
    ref_prev = reference_solution(exact, state.x_prev.mean(axis=0)) if state.k > 0 else ref
    err_y = state.y.mean(axis=0) - ref_prev.y_star
    err_z = state.z.mean(axis=0) - ref_prev.z_star
    if x_hat is None:
        est = float("nan")
    else:
        dev = state.x - np.asarray(x_hat)
        est = float(np.sum(dev * dev))
    return MetricsRow(
        k=int(state.k),
        grad_phi_sq=float(ref.grad_phi @ ref.grad_phi),
        cons_x=consensus_error(state.x),
        cons_y=consensus_error(state.y),
        cons_z=consensus_error(state.z),
        err_y=float(err_y @ err_y),
        err_z=float(err_z @ err_z),
        est_err=est,
        wall_ns=int(wall_ns),
    )


def running_average(series) -> float:
    """Arithmetic mean of a non-empty series of ``grad_phi_sq`` values."""
    values = np.asarray(list(series), dtype=float)
    if values.size == 0:
        raise ValueError("running_average needs a non-empty series")
    return float(values.mean())
