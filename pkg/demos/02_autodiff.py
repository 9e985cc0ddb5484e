"""
A tape-based autodiff in a few lines of use
===========================================

Records a small computation, runs the reverse pass and checks the result
against central differences.
"""

import numpy as np

from latent_sdf.autodiff import GradientTape, Tensor, finite_diff_check
from latent_sdf.nn import MLP, Adam

rng = np.random.default_rng(0)

# %%
# Operations on tensors that require gradients are recorded while a tape is open.
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
with GradientTape() as tape:
    y = (x.tanh() * x).sum()
grads = tape.backward(y)
expected = np.tanh(x.data) + x.data * (1 - np.tanh(x.data) ** 2)
print("max |analytic - closed form| =", np.abs(grads[x] - expected).max())

# %%
# The same check, done numerically for an arbitrary function of x.
print("finite-difference gap:", finite_diff_check(lambda t: t.gelu().square().sum(), x.data))

# %%
# Fit a small MLP to sin(3x) with Adam.
net = MLP([1, 32, 32, 1], rng, activation="tanh")
opt = Adam(net.named_parameters(), lr=1e-2)
xs = np.linspace(-1, 1, 64).reshape(-1, 1)
target = Tensor(np.sin(3 * xs))
for step in range(1500):
    with GradientTape() as tape:
        loss = (net(xs) - target).square().mean()
    tape.backward(loss)
    opt.step()
    opt.zero_grad()
    if step % 500 == 0 or step == 1499:
        print(f"step {step:4d}  mse {loss.item():.2e}")
