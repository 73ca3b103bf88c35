"""Bilevel problem instances with stochastic and exact first/second-order oracles.

Each instance answers, per agent, the five quantities an agent needs per
iteration: ``l = grad_x F``, ``b = grad_y F`` from one upper-level sample and
``v = grad_y G``, ``j_mat = grad_xy G`` (p x q), ``h_mat = grad_yy G`` from one
lower-level sample.  ``exact_oracle`` returns their expectations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

MODES = ("stochastic", "deterministic")


class OracleSample(NamedTuple):
    l: np.ndarray
    b: np.ndarray
    v: np.ndarray
    j_mat: np.ndarray
    h_mat: np.ndarray


class BilevelProblem:
    """Common surface of the shipped instances.

    Subclasses set ``n, p, q, mu_g, mode`` and implement ``exact_oracle``,
    ``_sample`` and ``upper_value``.
    """

    n: int
    p: int
    q: int
    mu_g: float
    mode: str
    family: str = "bilevel"
    # lower level is quadratic in y, so y*(x) is one linear solve
    quadratic_in_y: bool = True

    def _check_agent(self, agent: int) -> None:
        if not 0 <= agent < self.n:
            raise IndexError(f"agent {agent} out of range for n={self.n}")

    def sample_oracle(self, agent: int, x, y, rng: np.random.Generator, batch_size: int = 1) -> OracleSample:
        """Draw one upper sample and one lower sample (each a mini-batch)."""
        self._check_agent(agent)
        if self.mode == "deterministic":
            return self.exact_oracle(agent, x, y)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self._sample(agent, np.asarray(x, float), np.asarray(y, float), rng, batch_size)

    def exact_oracle(self, agent: int, x, y) -> OracleSample:  # pragma: no cover - abstract
        raise NotImplementedError

    def exact_oracle_all(self, x, y) -> OracleSample:
        """Exact oracles of every agent at its own row of ``x`` and ``y``, stacked."""
        samples = [self.exact_oracle(i, x[i], y[i]) for i in range(self.n)]
        return OracleSample(*(np.stack([s[f] for s in samples]) for f in range(5)))

    def _sample(self, agent, x, y, rng, batch_size) -> OracleSample:  # pragma: no cover - abstract
        raise NotImplementedError

    def upper_value(self, agent: int, x, y) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def with_mode(self, mode: str):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        return replace(self, mode=mode)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True, eq=False)
class SyntheticBilevel(BilevelProblem):
    """Streaming least-squares pair

        f_i(x, y) = E ||A_i y - b_i||^2
        g_i(x, y) = E ||A_i y - x||^2 + c_r ||y||^2

    with ``A_i = A* + noise`` and ``b_i = t_i + noise`` (std ``sigma_g``), where
    the targets ``t_i = A* y_true + offset_i`` carry agent-specific offsets of
    std ``sigma_h``.  Shapes: ``A_i`` is p x q, ``x, b_i`` in R^p, ``y`` in R^q.
    """

    a_star: np.ndarray
    targets: np.ndarray
    c_r: float
    sigma_g: float
    sigma_h: float
    mode: str = "stochastic"
    family: str = "synthetic"

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def p(self) -> int:
        return self.a_star.shape[0]

    @property
    def q(self) -> int:
        return self.a_star.shape[1]

    @property
    def mu_g(self) -> float:
        return 2.0 * self.c_r

    @property
    def c_eff(self) -> float:
        return self.c_r + self.p * self.sigma_g**2

    @cached_property
    def _gram(self) -> np.ndarray:
        # E[A^T A] = A*^T A* + p sigma_g^2 I
        return self.a_star.T @ self.a_star + self.p * self.sigma_g**2 * np.eye(self.q)

    @cached_property
    def _reg(self) -> np.ndarray:
        return 2.0 * self.c_r * np.eye(self.q)

    @cached_property
    def _hess(self) -> np.ndarray:
        return 2.0 * (self._gram + self.c_r * np.eye(self.q))

    def exact_oracle(self, agent, x, y) -> OracleSample:
        self._check_agent(agent)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        gram = self._gram
        At = self.a_star.T
        return OracleSample(
            l=np.zeros(self.p),
            b=2.0 * (gram @ y - At @ self.targets[agent]),
            v=2.0 * (gram @ y - At @ x) + 2.0 * self.c_r * y,
            j_mat=-2.0 * self.a_star,
            h_mat=self._hess.copy(),
        )

    def exact_oracle_all(self, x, y) -> OracleSample:
        n = self.n
        gy = y @ self._gram
        return OracleSample(
            l=np.zeros((n, self.p)),
            b=2.0 * (gy - self.targets @ self.a_star),
            v=2.0 * (gy - x @ self.a_star) + 2.0 * self.c_r * y,
            j_mat=np.broadcast_to(-2.0 * self.a_star, (n, self.p, self.q)),
            h_mat=np.broadcast_to(self._hess, (n, self.q, self.q)),
        )

    def _sample(self, agent, x, y, rng, batch_size) -> OracleSample:
        p, q, s = self.p, self.q, self.sigma_g
        # one draw covers the upper sample xi = (A, b) and the lower sample zeta = A
        noise = s * rng.standard_normal((batch_size, 2 * p * q + p))
        # stack the batch as (batch * p) x q so every contraction is one matmul
        a_xi = (self.a_star + noise[:, : p * q].reshape(batch_size, p, q)).reshape(-1, q)
        b_xi = (self.targets[agent] + noise[:, p * q : p * q + p]).reshape(-1)
        a_ze = (self.a_star + noise[:, p * q + p :].reshape(batch_size, p, q)).reshape(-1, q)
        b = (2.0 / batch_size) * (a_xi.T @ (a_xi @ y - b_xi))
        v = (2.0 / batch_size) * (a_ze.T @ (a_ze @ y - np.tile(x, batch_size))) + 2.0 * self.c_r * y
        j_mat = (-2.0 / batch_size) * a_ze.reshape(batch_size, p, q).sum(axis=0)
        h_mat = (2.0 / batch_size) * (a_ze.T @ a_ze) + self._reg
        return OracleSample(np.zeros(p), b, v, j_mat, h_mat)

    def upper_value(self, agent, x, y) -> float:
        y = np.asarray(y, float)
        res = self.a_star @ y - self.targets[agent]
        return float(res @ res + self.p * self.sigma_g**2 * (y @ y + 1.0))


def make_synthetic_bilevel(
    n: int = 16,
    p: int = 20,
    q: int = 10,
    sigma_g: float = 0.001,
    sigma_h: float = 0.1,
    c_r: float = 0.001,
    seed: int = 0,
    a_scale: float = 3.0,
    mode: str = "stochastic",
) -> SyntheticBilevel:
    """Draw A* (entries N(0, a_scale^2), default variance 9), a shared
    ground-truth ``y_true ~ N(0, I_q)`` and per-agent target offsets."""
    if n < 1 or p < 1 or q < 1:
        raise ValueError("n, p, q must be >= 1")
    if sigma_g < 0 or sigma_h < 0:
        raise ValueError("noise levels must be non-negative")
    if c_r <= 0:
        raise ValueError(f"c_r must be positive for a strongly convex lower level, got {c_r}")
    rng = np.random.default_rng(seed)
    a_star = a_scale * rng.standard_normal((p, q))
    y_true = rng.standard_normal(q)
    targets = a_star @ y_true + sigma_h * rng.standard_normal((n, p))
    inst = SyntheticBilevel(a_star, targets, float(c_r), float(sigma_g), float(sigma_h))
    return inst.with_mode(mode)


# ---------------------------------------------------------- policy evaluation


@dataclass(frozen=True, eq=False)
class PolicyEvaluation(BilevelProblem):
    """Linear value-function fitting as a bilevel program.

        f_i(x, y) = 1/(2|S|) sum_s (phi_s^T x - y_s)^2
        g_i(x, y) = sum_s (y_s - E[r^i(s, s') + gamma phi_{s'}^T x | s])^2

    The conditional expected reward ``c_i(s) = sum_s' P(s, s') rbar_i(s, s')``
    is stored per agent.  A stochastic lower sample perturbs every reward
    ``r^i(s, s')`` by ``N(0, reward_noise_std^2)``, which shifts ``c_i(s)`` by a
    normal with variance ``reward_noise_std^2 * sum_s' P(s, s')^2``.
    """

    features: np.ndarray
    transitions: np.ndarray
    mean_reward: np.ndarray
    gamma: float
    reward_noise_std: float
    mode: str = "stochastic"
    family: str = "policy_eval"
    mu_g: float = 2.0

    @property
    def n(self) -> int:
        return self.mean_reward.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def q(self) -> int:
        return self.features.shape[0]

    @property
    def num_states(self) -> int:
        return self.q

    @cached_property
    def _pphi(self) -> np.ndarray:
        return self.transitions @ self.features

    @cached_property
    def _noise_scale(self) -> np.ndarray:
        return self.reward_noise_std * np.sqrt(np.sum(self.transitions**2, axis=1))

    def _exact_upper(self, x, y):
        res = x @ self.features.T - y
        return res @ self.features / self.num_states, -res / self.num_states

    def exact_oracle(self, agent, x, y) -> OracleSample:
        self._check_agent(agent)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        l, b = self._exact_upper(x, y)
        v = 2.0 * (y - self.mean_reward[agent] - self.gamma * self._pphi @ x)
        return OracleSample(l, b, v, -2.0 * self.gamma * self._pphi.T, 2.0 * np.eye(self.q))

    def exact_oracle_all(self, x, y) -> OracleSample:
        n = self.n
        l, b = self._exact_upper(x, y)
        v = 2.0 * (y - self.mean_reward - self.gamma * x @ self._pphi.T)
        j_mat = np.broadcast_to(-2.0 * self.gamma * self._pphi.T, (n, self.p, self.q))
        return OracleSample(l, b, v, j_mat, np.broadcast_to(2.0 * np.eye(self.q), (n, self.q, self.q)))

    def _sample(self, agent, x, y, rng, batch_size) -> OracleSample:
        l, b = self._exact_upper(x, y)
        noise = (self._noise_scale * rng.standard_normal((batch_size, self.q))).mean(axis=0)
        v = 2.0 * (y - self.mean_reward[agent] - noise - self.gamma * self._pphi @ x)
        return OracleSample(l, b, v, -2.0 * self.gamma * self._pphi.T, 2.0 * np.eye(self.q))

    def upper_value(self, agent, x, y) -> float:
        res = self.features @ np.asarray(x, float) - np.asarray(y, float)
        return float(res @ res / (2.0 * self.num_states))


def make_policy_eval(
    n: int = 10,
    num_states: int = 200,
    m: int = 10,
    gamma: float = 0.95,
    reward_noise_std: float = 0.02,
    seed: int = 0,
    mode: str = "stochastic",
) -> PolicyEvaluation:
    if num_states < 2:
        raise ValueError("num_states must be >= 2")
    if not 0.0 <= gamma < 1.0:
        # gamma = 0 is kept as the decoupled limit
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    rng = np.random.default_rng(seed)
    features = rng.uniform(0.0, 1.0, (num_states, m))
    raw = rng.uniform(0.0, 1.0, (num_states, num_states))
    transitions = raw / raw.sum(axis=1, keepdims=True)
    mean_reward = np.empty((n, num_states))
    for i in range(n):
        rbar = rng.uniform(0.0, 1.0, (num_states, num_states))
        mean_reward[i] = np.sum(transitions * rbar, axis=1)
    inst = PolicyEvaluation(features, transitions, mean_reward, float(gamma), float(reward_noise_std))
    return inst.with_mode(mode)


# --------------------------------------------------------------- single level


@dataclass(frozen=True, eq=False)
class QuadraticInner:
    """f_i(x) = ||x - c_i||^2 / 2 with additive Gaussian gradient noise."""

    centers: np.ndarray
    noise_std: float = 0.1

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def p(self) -> int:
        return self.centers.shape[1]

    def grad(self, agent: int, x) -> np.ndarray:
        return np.asarray(x, float) - self.centers[agent]

    def sample_grad(self, agent: int, x, rng: np.random.Generator, batch_size: int = 1) -> np.ndarray:
        noise = self.noise_std * rng.standard_normal((batch_size, self.p)).mean(axis=0)
        return self.grad(agent, x) + noise

    def value(self, agent: int, x) -> float:
        d = np.asarray(x, float) - self.centers[agent]
        return 0.5 * float(d @ d)

    def minimizer(self) -> np.ndarray:
        return self.centers.mean(axis=0)


@dataclass(frozen=True, eq=False)
class SingleLevel(BilevelProblem):
    """Single-level problem embedded as ``G = ||y||^2 / 2``, ``F_i(x, y) = f_i(x)``.

    ``inner`` needs ``n, p, grad(agent, x)``, ``sample_grad(agent, x, rng,
    batch_size)`` and ``value(agent, x)``.
    """

    inner: object
    q: int = 1
    mode: str = "stochastic"
    family: str = "single_level"
    mu_g: float = 1.0

    @property
    def n(self) -> int:
        return self.inner.n

    @property
    def p(self) -> int:
        return self.inner.p

    def _rest(self, y):
        y = np.asarray(y, float)
        return np.zeros(self.q), y.copy(), np.zeros((self.p, self.q)), np.eye(self.q)

    def exact_oracle(self, agent, x, y) -> OracleSample:
        self._check_agent(agent)
        return OracleSample(self.inner.grad(agent, x), *self._rest(y))

    def _sample(self, agent, x, y, rng, batch_size) -> OracleSample:
        return OracleSample(self.inner.sample_grad(agent, x, rng, batch_size), *self._rest(y))

    def upper_value(self, agent, x, y) -> float:
        return self.inner.value(agent, x)


def make_single_level(
    n: int = 8,
    p: int = 5,
    inner_problem: Optional[object] = None,
    seed: int = 0,
    q: int = 1,
    noise_std: float = 0.1,
    mode: str = "stochastic",
) -> SingleLevel:
    """Wrap ``inner_problem``, or a random :class:`QuadraticInner` when None."""
    if inner_problem is None:
        rng = np.random.default_rng(seed)
        inner_problem = QuadraticInner(rng.standard_normal((n, p)), noise_std)
    if inner_problem.n != n or inner_problem.p != p:
        raise ValueError(f"inner problem is {inner_problem.n}x{inner_problem.p}, expected {n}x{p}")
    return SingleLevel(inner_problem, q=q).with_mode(mode)


def make_problem(family: str, **params) -> BilevelProblem:
    """Build an instance by family name, as used by config files."""
    family = family.replace("-", "_")
    if family == "synthetic":
        return make_synthetic_bilevel(**params)
    if family == "policy_eval":
        return make_policy_eval(**params)
    if family == "single_level":
        return make_single_level(**params)
    raise ValueError(f"unknown problem family {family!r}; expected synthetic, policy_eval or single_level")
