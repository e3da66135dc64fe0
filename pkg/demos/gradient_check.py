"""Finite-difference check of the whole tiny generator, one tensor at a time.

Runs in float64 with fixed reparameterization noise so the loss is a smooth
deterministic function of the weights.  Prints the worst relative error per
tensor over a handful of sampled entries.
"""

import numpy as np

from cvad import losses, models
from cvad.gradcheck import numerical_gradient, rel_error

cfg = models.PRESETS["tiny"]
gp = models.init_generator(cfg, np.random.default_rng(0), np.float64)
rng = np.random.default_rng(1)
x = rng.random((3, 1, cfg.image_size, cfg.image_size))
eps1 = rng.standard_normal((3, cfg.latent_dim))
eps2 = rng.standard_normal((3, cfg.branch_latent_dim))
w = losses.LossWeights()


def loss():
    out = models.generator_forward(x, gp, eps1, eps2, train=True)
    return float(losses.generator_loss(out, x, w).total.mean())


tape = {}
out = models.generator_forward(x, gp, eps1, eps2, train=True, tape=tape)
grads = models.generator_backward(gp, tape, losses.generator_loss_grad(out, x, w))

worst = 0.0
for name in sorted(gp.params):
    p = gp.params[name]
    idx = rng.choice(p.size, size=min(6, p.size), replace=False)
    num = numerical_gradient(loss, p, h=1e-6, indices=idx)
    err = rel_error(grads[name].reshape(-1)[idx], num)
    worst = max(worst, err)
    print(f"{name:28s} {err:.2e}")
print(f"worst relative error {worst:.2e} (tolerance 1e-4)")
