"""
The forward noising process and its reversal
============================================

Looks at the linear noise schedule, checks the closed-form marginal by
sampling, and shows that the posterior chain recovers a known clean latent.
"""

import numpy as np

from latent_sdf.diffusion import make_schedule, posterior_step, q_sample

s = make_schedule()
rng = np.random.default_rng(0)

# %%
# Signal kept after t steps: sqrt(alpha_bar_t).
for t in (1, 50, 100, 250, 500):
    print(f"t={t:3d}  alpha_bar={s.alpha_bars[t]:.4f}  signal scale={np.sqrt(s.alpha_bars[t]):.3f}")

# %%
# One shot to step t versus the closed form: the mean is sqrt(abar) z0, the variance 1 - abar.
z0 = np.array([1.0, -0.5])
n = 10_000
for t in (10, 200, 500):
    draws = q_sample(np.tile(z0, (n, 1)), np.full(n, t), rng.standard_normal((n, 2)), s)
    print(f"t={t:3d}  mean={draws.mean(0).round(3)} (want {(np.sqrt(s.alpha_bars[t]) * z0).round(3)})"
          f"  var={draws.var(0).round(3)} (want {1 - s.alpha_bars[t]:.3f})")

# %%
# With a perfect denoiser the noise-free posterior chain lands exactly on z0.
z = rng.standard_normal(2)
for t in range(s.T, 0, -1):
    z = posterior_step(z0, z, t, s, noise=np.zeros(2))
print("recovered:", z, "target:", z0)

# %%
# With noise the chain still ends at z0, because the last step is deterministic.
z = rng.standard_normal(2)
for t in range(s.T, 0, -1):
    z = posterior_step(z0, z, t, s, rng)
print("recovered with noise:", z)
