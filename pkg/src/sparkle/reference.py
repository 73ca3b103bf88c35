"""Standalone decentralized single-level solver used as a cross-check.

It runs ``x+ = C x - alpha A u - B d``, ``d+ = d + B x+`` with B formed
explicitly (a symmetric square root for ED and EXTRA, ``I - W`` for the GT
family), so it shares no update code with :mod:`sparkle.engine`.  Gradients
come from the same per-agent streams as the engine, which makes the two
traces comparable draw for draw.
"""

from __future__ import annotations

import numpy as np

from .rng import agent_stream
from .strategy import Strategy, prepare_mixing
from .topology import MixingMatrix


def explicit_triple(strategy, mix: MixingMatrix):
    """``(A, B, C)`` with B itself rather than its square."""
    strategy = Strategy.parse(strategy)
    W = np.array(mix.w)
    eye = np.eye(mix.n)
    lap = eye - W
    if strategy.needs_pd:
        vals, vecs = np.linalg.eigh(lap)
        root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        return (W if strategy is Strategy.ED else eye), root, W
    W2 = W @ W
    if strategy is Strategy.ATC_GT:
        return W2, lap, W2
    if strategy is Strategy.SEMI_ATC_GT:
        return W, lap, W2
    if strategy is Strategy.NON_ATC_GT:
        return eye, lap, W2
    return W, np.zeros_like(W), W


def single_level_trace(inner, strategy, mix: MixingMatrix, alpha, iterations: int,
                       seed: int = 0, batch_size: int = 1, pd_shift: bool = True) -> np.ndarray:
    """Return the stacked iterates ``x^0, ..., x^K`` as a ``(K+1, n, p)`` array.

    ``alpha`` is a callable of k or a constant.
    """
    step = alpha if callable(alpha) else (lambda k: float(alpha))
    mix = prepare_mixing(strategy, mix, pd_shift=pd_shift)
    A, B, C = explicit_triple(strategy, mix)
    n, p = inner.n, inner.p
    x = np.zeros((n, p))
    d = np.zeros((n, p))
    trace = [x.copy()]
    for k in range(iterations):
        u = np.stack([inner.sample_grad(i, x[i], agent_stream(seed, i, k), batch_size) for i in range(n)])
        x = C @ x - step(k) * (A @ u) - B @ d
        d = d + B @ x
        trace.append(x.copy())
    return np.array(trace)
