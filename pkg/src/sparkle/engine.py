"""Single-loop decentralized bilevel iterations over simulated agents.

Two steppers advance the same recursion:

* :func:`step_generic` runs the primal-dual form with per-level ``(A, B^2, C)``
  and a transformed dual ``e = B d``;
* :func:`step_recursive` runs the memory-light per-strategy recursions
  (two-step for ED/EXTRA, tracker for the GT family).

Both consume oracle draws in the same order from the same per-agent streams,
so their traces coincide up to round-off.  Within an iteration the order is
y, z, momentum, x; every oracle quantity is drawn once at ``(x^k, y^k)``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .metrics import MetricsRow, measure
from .problems import OracleSample
from .rng import agent_stream
from .strategy import (
    RecursionForm,
    Strategy,
    StrategyMatrices,
    prepare_mixing,
    recursion_form,
    strategy_matrices,
)
from .topology import MixingMatrix

log = logging.getLogger(__name__)

LEVELS = ("x", "y", "z")
DIVERGENCE_BOUND = 1e12


class DivergenceError(FloatingPointError):
    def __init__(self, k: int, name: str, detail: str = ""):
        super().__init__(f"iteration {k}: field '{name}' diverged {detail}".rstrip())
        self.k = k
        self.field = name


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class StepSize:
    """``c0 / (c1 + c2 k)``; constant when ``c2 == 0``."""

    c0: float
    c1: float = 1.0
    c2: float = 0.0

    def __call__(self, k: int) -> float:
        return self.c0 / (self.c1 + self.c2 * k)

    @classmethod
    def coerce(cls, value) -> "StepSize":
        if isinstance(value, StepSize):
            return value
        if isinstance(value, Mapping):
            return cls(**{k: float(v) for k, v in value.items()})
        return cls(float(value))

    def to_config(self):
        if self.c1 == 1.0 and self.c2 == 0.0:
            return self.c0
        return {"c0": self.c0, "c1": self.c1, "c2": self.c2}


@dataclass(frozen=True)
class Hyperparams:
    alpha: StepSize
    beta: StepSize
    gamma: StepSize
    theta: float = 1.0
    iterations: int = 1000
    batch_size: int = 1
    mode: str = "stochastic"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, StepSize.coerce(getattr(self, name)))
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.mode not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("alpha", "beta", "gamma"):
            step = getattr(self, name)
            if step.c0 <= 0 or step.c1 <= 0 or step.c2 < 0:
                raise ValueError(f"{name} must stay positive for every k")


@dataclass(frozen=True, eq=False)
class Level:
    strategy: Strategy
    mixing: MixingMatrix
    matrices: StrategyMatrices

    @property
    def w(self) -> np.ndarray:
        return self.mixing.w

    @property
    def form(self) -> Optional[RecursionForm]:
        return recursion_form(self.strategy) if self.strategy.corrected else None


@dataclass(frozen=True, eq=False)
class LevelSetup:
    x: Level
    y: Level
    z: Level

    def __getitem__(self, name: str) -> Level:
        return getattr(self, name)

    @property
    def n(self) -> int:
        return self.x.mixing.n

    def label(self) -> str:
        lower = self.y.strategy.value
        upper = self.x.strategy.value
        return lower if lower == upper else f"{lower}-{upper}"


def _per_level(value, name: str):
    if isinstance(value, Mapping):
        return value[name]
    return value


def make_levels(strategies, mixings, pd_shift: bool = True) -> LevelSetup:
    """Prepare per-level matrices.

    ``strategies`` and ``mixings`` are either one value shared by all levels
    or a mapping with keys ``x``, ``y``, ``z``.
    """
    levels = {}
    for name in LEVELS:
        strat = Strategy.parse(_per_level(strategies, name))
        mix = prepare_mixing(strat, _per_level(mixings, name), pd_shift=pd_shift)
        levels[name] = Level(strat, mix, strategy_matrices(strat, mix))
    sizes = {lvl.mixing.n for lvl in levels.values()}
    if len(sizes) != 1:
        raise ValueError(f"per-level mixing matrices disagree on n: {sorted(sizes)}")
    return LevelSetup(**levels)


# ------------------------------------------------------------------- state


@dataclass
class SwarmState:
    """Stacked per-agent iterates; row i belongs to agent i."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    # transformed duals e = B d; stay zero under the recursive stepper
    e_x: np.ndarray
    e_y: np.ndarray
    e_z: np.ndarray
    x_prev: np.ndarray
    y_prev: np.ndarray
    z_prev: np.ndarray
    # step-scaled directions of the previous iteration and GT trackers
    d_prev: dict = field(default_factory=dict)
    trackers: dict = field(default_factory=dict)
    # directions consumed by the last step, kept for diagnostics
    v: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    k: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "SwarmState":
        def cp(a):
            return None if a is None else a.copy()

        return replace(
            self,
            **{f: cp(getattr(self, f)) for f in ("x", "y", "z", "r", "e_x", "e_y", "e_z", "x_prev", "y_prev", "z_prev", "v", "p", "u")},
            d_prev={k: v.copy() for k, v in self.d_prev.items()},
            trackers={k: v.copy() for k, v in self.trackers.items()},
        )

    def iterate(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def dual(self, name: str) -> np.ndarray:
        return getattr(self, f"e_{name}")


def init_state(n: int, p: int, q: int) -> SwarmState:
    if min(n, p, q) < 1:
        raise ValueError("dimensions must be >= 1")
    zx, zy = np.zeros((n, p)), np.zeros((n, q))
    return SwarmState(
        x=zx.copy(), y=zy.copy(), z=zy.copy(), r=zx.copy(),
        e_x=zx.copy(), e_y=zy.copy(), e_z=zy.copy(),
        # s^{-1} = s^0
        x_prev=zx.copy(), y_prev=zy.copy(), z_prev=zy.copy(),
        # previous direction 0 before the first step
        d_prev={"x": zx.copy(), "y": zy.copy(), "z": zy.copy()},
    )


# ------------------------------------------------------------------ oracle


def evaluate_oracles(problem, x, y, k: int, seed: int, batch_size: int = 1,
                     deterministic: bool = False, pool: Optional[ThreadPoolExecutor] = None) -> OracleSample:
    """Evaluate every agent's oracle at its own ``(x_i, y_i)`` and stack them."""

    if deterministic:
        return problem.exact_oracle_all(x, y)

    def one(i):
        return problem.sample_oracle(i, x[i], y[i], agent_stream(seed, i, k), batch_size)

    agents = range(problem.n)
    samples = list(pool.map(one, agents)) if pool is not None else [one(i) for i in agents]
    return OracleSample(*(np.stack([s[f] for s in samples]) for f in range(5)))


# ----------------------------------------------------------------- steppers


def _mix(mat: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``mat @ s`` for a doubly stochastic ``mat``, applied to the deviation
    from the agent mean so the mean passes through without round-off drift."""
    mean = s.mean(axis=0)
    return mean + mat @ (s - mean)


def _annihilate(b_sq: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``b_sq @ s`` using ``b_sq 1 = 0``; the column sums of the result then
    scale with the consensus error instead of accumulating a bias."""
    return b_sq @ (s - s.mean(axis=0))


def _check_finite(k: int, name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(k, name, "(non-finite values)")
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak > DIVERGENCE_BOUND:
        raise DivergenceError(k, name, f"(max |entry| = {peak:.3g})")


def _advance(state, problem, hp: Hyperparams, seed, pool, update: Callable) -> SwarmState:
    k = state.k
    new = state.copy()
    orc = evaluate_oracles(problem, state.x, state.y, k, seed, hp.batch_size,
                           hp.mode == "deterministic", pool)
    alpha, beta, gamma = hp.alpha(k), hp.beta(k), hp.gamma(k)

    new.v = orc.v
    new.y = update("y", state, new, beta * orc.v)

    new.p = np.einsum("nij,nj->ni", orc.h_mat, state.z) - orc.b
    new.z = update("z", state, new, gamma * new.p)

    # the upper direction uses the freshly updated z
    new.u = orc.l - np.einsum("npq,nq->np", orc.j_mat, new.z)
    new.r = (1.0 - hp.theta) * state.r + hp.theta * new.u
    new.x = update("x", state, new, alpha * new.r)

    new.x_prev, new.y_prev, new.z_prev = state.x, state.y, state.z
    new.k = k + 1
    for name in ("y", "z", "r", "x"):
        _check_finite(k, name, getattr(new, name))
    return new


def step_generic(state: SwarmState, problem, levels: LevelSetup, hp: Hyperparams,
                 seed: int = 0, pool: Optional[ThreadPoolExecutor] = None) -> SwarmState:
    """One iteration of ``s+ = C s - A d - e``, ``e+ = e + B^2 s+`` per level."""

    def update(name, old, new, direction):
        mats = levels[name].matrices
        s, e = old.iterate(name), old.dual(name)
        s_new = _mix(mats.c_mat, s) - _mix(mats.a_mat, direction) - e
        setattr(new, f"e_{name}", e + _annihilate(mats.b_sq, s_new))
        new.d_prev[name] = direction
        return s_new

    return _advance(state, problem, hp, seed, pool, update)


def step_recursive(state: SwarmState, problem, levels: LevelSetup, hp: Hyperparams,
                   seed: int = 0, pool: Optional[ThreadPoolExecutor] = None) -> SwarmState:
    """One iteration of the per-strategy recursions.

    Directions enter already multiplied by their step size, so decaying
    schedules telescope the same way they do in the primal-dual form.  The
    upper-level tracker consumes the momentum computed in the current
    iteration (it lags the textbook index by one), so it never needs a value
    that does not exist yet.
    """
    for name in LEVELS:
        if not levels[name].strategy.corrected:
            raise ValueError(f"level {name}: step_recursive does not run strategy 'dgd'")

    def update(name, old, new, d):
        lvl = levels[name]
        W, form = lvl.w, lvl.form
        s, s_prev, d_prev = old.iterate(name), old.iterate(f"{name}_prev"), old.d_prev[name]
        new.d_prev[name] = d
        if form.kind == "two-step":
            base = 2.0 * s - s_prev
            if form.mix_direction:
                return _mix(W, base - (d - d_prev))
            return _mix(W, base) - (d - d_prev)
        if old.k == 0:
            h = _mix(W, d) if form.mix_initial else d.copy()
        elif form.atc_tracker:
            h = _mix(W, old.trackers[name] + d - d_prev)
        else:
            h = _mix(W, old.trackers[name]) + d - d_prev
        new.trackers[name] = h
        return _mix(W, s - h) if form.atc_iterate else _mix(W, s) - h

    return _advance(state, problem, hp, seed, pool, update)


STEPPERS = {"generic": step_generic, "recursive": step_recursive}


# ---------------------------------------------------------------------- run


@dataclass(frozen=True)
class RunConfig:
    levels: LevelSetup
    hp: Hyperparams
    seed: int = 0
    metrics_stride: int = 10
    engine: str = "generic"
    threads: int = 1
    wall_clock: bool = False
    check_identities: bool = True
    record_initial: bool = True


@dataclass
class RunResult:
    rows: list
    state: SwarmState
    x_hat: Optional[np.ndarray]
    # worst violation of the mean-dynamics identities over the run
    identity_max: dict = field(default_factory=dict)


def mean_identity_residuals(old: SwarmState, new: SwarmState, hp: Hyperparams) -> dict:
    """Agent-mean identities: every mixing matrix is doubly stochastic and the
    duals sum to zero, so the averages follow plain centralized steps."""
    k = old.k
    res = {
        "x": np.max(np.abs(new.x.mean(0) - (old.x.mean(0) - hp.alpha(k) * new.r.mean(0)))),
        "y": np.max(np.abs(new.y.mean(0) - (old.y.mean(0) - hp.beta(k) * new.v.mean(0)))),
        "z": np.max(np.abs(new.z.mean(0) - (old.z.mean(0) - hp.gamma(k) * new.p.mean(0)))),
    }
    for name in LEVELS:
        res[f"dual_{name}"] = np.max(np.abs(new.dual(name).sum(0)))
    return {key: float(val) for key, val in res.items()}


def run(problem, config: RunConfig, x_hat: Optional[np.ndarray] = None,
        on_row: Optional[Callable[[MetricsRow], None]] = None) -> RunResult:
    """Iterate ``config.hp.iterations`` times, measuring every ``metrics_stride``.

    A row is recorded after every multiple of the stride, plus one at k = 0
    when ``record_initial`` is set.
    """
    if config.levels.n != problem.n:
        raise ValueError(f"topology has n={config.levels.n}, problem has n={problem.n}")
    if config.metrics_stride < 1:
        raise ValueError("metrics_stride must be >= 1")
    stepper = STEPPERS[config.engine]
    if x_hat is None:
        from .hypergrad import upper_argmin

        x_hat = upper_argmin(problem.with_mode("deterministic"))
    hp = config.hp
    state = init_state(problem.n, problem.p, problem.q)
    worst = {}
    rows = []
    t0 = time.perf_counter_ns()

    def record(st):
        wall = time.perf_counter_ns() - t0 if config.wall_clock else 0
        row = measure(st, problem, x_hat=x_hat, wall_ns=wall)
        rows.append(row)
        if on_row is not None:
            on_row(row)

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        if config.record_initial:
            record(state)
        for _ in range(hp.iterations):
            new = stepper(state, problem, config.levels, hp, config.seed, pool)
            if config.check_identities:
                for key, val in mean_identity_residuals(state, new, hp).items():
                    worst[key] = max(worst.get(key, 0.0), val)
            state = new
            if state.k % config.metrics_stride == 0:
                record(state)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(rows, state, x_hat, worst)
