# %% [markdown]
# # Network size, spectral gap and averaging
#
# Two quantities drive decentralized behaviour: how well connected the graph
# is (its spectral gap) and how many agents average their noise.

# %%
import numpy as np

from sparkle.engine import Hyperparams, init_state, make_levels, step_generic
from sparkle.problems import make_synthetic_bilevel
from sparkle.topology import build_topology, ring_rho

# %% [markdown]
# On an adjusted ring the gap shrinks roughly fourfold each time n doubles.

# %%
for n in (8, 16, 32, 64):
    m = build_topology("ring_adjusted", n, a=0.4)
    print(f"n={n:3d}  gap={m.gap:.5f}  closed form={1 - ring_rho(n, 0.4):.5f}")

# %% [markdown]
# Averaging: at a fixed state, one stochastic step produces a direction per
# agent.  Its agent average has variance that falls like 1/n.

# %%
hp = Hyperparams(alpha=1e-3, beta=1e-3, gamma=1e-3, iterations=1)
base = None
for n in (1, 4, 16):
    inst = make_synthetic_bilevel(n=n, p=4, q=3, sigma_g=0.5, sigma_h=0.0, seed=3)
    levels = make_levels("ed", build_topology("complete", n))
    state = init_state(n, 4, 3)
    state.z[:] = 1.0
    r_bar = np.array([step_generic(state, inst, levels, hp, seed=s).r.mean(axis=0) for s in range(500)])
    var = r_bar.var(axis=0, ddof=1).sum()
    base = base or var
    print(f"n={n:2d}  var={var:.4e}  n*var/var(1)={n * var / base:.3f}")
