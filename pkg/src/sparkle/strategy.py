"""Communication matrices (A, B^2, C) for each heterogeneity-correction strategy.

The primal-dual update only ever touches the dual through ``B d``; tracking
``e = B d`` instead gives ``e+ = e + B^2 x+``, so B itself (a matrix square
root for ED and EXTRA) is never formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .topology import STOCHASTIC_TOL, MixingMatrix, TopologyError, validate_mixing

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    ED = "ed"
    EXTRA = "extra"
    ATC_GT = "atc-gt"
    SEMI_ATC_GT = "semi-atc-gt"
    NON_ATC_GT = "non-atc-gt"
    DGD_BASELINE = "dgd"

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, Strategy):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"gt": "atc-gt", "dgd-baseline": "dgd", "d-sgd": "dgd"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown strategy {name!r}; expected one of: {valid}") from None

    @property
    def corrected(self) -> bool:
        return self is not Strategy.DGD_BASELINE

    @property
    def needs_pd(self) -> bool:
        return self in (Strategy.ED, Strategy.EXTRA)


@dataclass(frozen=True, eq=False)
class StrategyMatrices:
    a_mat: np.ndarray
    b_sq: np.ndarray
    c_mat: np.ndarray
    strategy: str
    uses_dual: bool = True

    def check(self, tol: float = STOCHASTIC_TOL) -> None:
        """Raise ValueError unless the triple satisfies the framework's invariants."""
        n = self.a_mat.shape[0]
        ones = np.ones(n)
        for name, mat in (("a_mat", self.a_mat), ("c_mat", self.c_mat)):
            if np.max(np.abs(mat @ ones - 1)) > tol or np.max(np.abs(ones @ mat - 1)) > tol:
                raise ValueError(f"{self.strategy}: {name} is not doubly stochastic")
        if np.max(np.abs(self.b_sq @ ones)) > tol:
            raise ValueError(f"{self.strategy}: b_sq does not annihilate the ones vector")
        if np.max(np.abs(self.b_sq - self.b_sq.T)) > tol:
            raise ValueError(f"{self.strategy}: b_sq is not symmetric")
        if np.linalg.eigvalsh(0.5 * (self.b_sq + self.b_sq.T)).min() < -1e-10:
            raise ValueError(f"{self.strategy}: b_sq is not positive semidefinite")
        if not self.uses_dual and np.any(self.b_sq != 0):
            raise ValueError(f"{self.strategy}: dual-free strategy must have b_sq = 0")


def _as_mixing(w) -> MixingMatrix:
    if isinstance(w, MixingMatrix):
        return w
    for check in validate_mixing(w):
        if not check.passed and not check.informational:
            raise TopologyError(f"check '{check.name}' failed ({check.detail})")
    return MixingMatrix(np.asarray(w, dtype=float))


def strategy_matrices(strategy, w) -> StrategyMatrices:
    """Return ``(A, B^2, C)`` for ``strategy`` built from mixing matrix ``w``.

    >>> from sparkle.topology import build_topology
    >>> m = strategy_matrices("ed", build_topology("complete", 4))
    >>> float(m.b_sq[0, 0])
    0.75
    """
    strategy = Strategy.parse(strategy)
    mix = _as_mixing(w)
    W = np.array(mix.w)
    eye = np.eye(mix.n)
    lap = eye - W
    if strategy is Strategy.ED:
        triple = (W, lap, W)
    elif strategy is Strategy.EXTRA:
        triple = (eye, lap, W)
    else:
        W2 = W @ W
        lap2 = lap @ lap
        if strategy is Strategy.ATC_GT:
            triple = (W2, lap2, W2)
        elif strategy is Strategy.SEMI_ATC_GT:
            triple = (W, lap2, W2)
        elif strategy is Strategy.NON_ATC_GT:
            triple = (eye, lap2, W2)
        else:
            return StrategyMatrices(W, np.zeros_like(W), W, strategy.value, uses_dual=False)
    return StrategyMatrices(*triple, strategy=strategy.value)


def custom_strategy(a_mat, b_sq, c_mat, name: str = "custom") -> StrategyMatrices:
    """Wrap a user-supplied triple after checking the type invariants.

    No convergence promise comes with it.
    """
    m = StrategyMatrices(
        np.asarray(a_mat, dtype=float),
        np.asarray(b_sq, dtype=float),
        np.asarray(c_mat, dtype=float),
        strategy=name,
        uses_dual=bool(np.any(np.asarray(b_sq) != 0)),
    )
    m.check()
    return m


@dataclass(frozen=True)
class RecursionForm:
    """How the efficient stepper advances one level.

    ``two-step``: ``s+ = M1 (2 s - s_prev) - M2 (d - d_prev)`` where ``d`` is
    the step-scaled direction; ``mix_direction`` says whether W also
    multiplies the direction difference (ED) or not (EXTRA).

    ``tracker``: a tracker ``h`` of the averaged direction, with
    ``atc_tracker`` selecting ``h+ = W(h + dd)`` over ``h+ = W h + dd``,
    ``atc_iterate`` selecting ``s+ = W(s - h)`` over ``s+ = W s - h``, and
    ``mix_initial`` selecting ``h0 = W d0`` over ``h0 = d0``.
    """

    kind: str
    mix_direction: bool = False
    atc_tracker: bool = False
    atc_iterate: bool = False
    mix_initial: bool = False


def recursion_form(strategy) -> RecursionForm:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.ED:
        return RecursionForm("two-step", mix_direction=True)
    if strategy is Strategy.EXTRA:
        return RecursionForm("two-step", mix_direction=False)
    if strategy is Strategy.ATC_GT:
        return RecursionForm("tracker", atc_tracker=True, atc_iterate=True, mix_initial=True)
    if strategy is Strategy.SEMI_ATC_GT:
        return RecursionForm("tracker", atc_tracker=True, atc_iterate=False, mix_initial=True)
    if strategy is Strategy.NON_ATC_GT:
        return RecursionForm("tracker", atc_tracker=False, atc_iterate=False, mix_initial=False)
    raise ValueError("dgd has no corrected recursion form; it is plain diffusion")


def prepare_mixing(strategy, mix: MixingMatrix, pd_shift: bool = True) -> MixingMatrix:
    """Apply ``W <- (I + W)/2`` for ED/EXTRA when W is not positive definite."""
    strategy = Strategy.parse(strategy)
    if pd_shift and strategy.needs_pd and mix.n > 1 and mix.lambda_min <= 0:
        log.info("%s: lambda_min(W)=%.3g <= 0, using (I + W)/2", strategy.value, mix.lambda_min)
        return mix.shifted()
    return mix
