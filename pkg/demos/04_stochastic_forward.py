# coding: utf-8

# # Propagating noise through a network
#
# Gaussian noise is added to the input and to every layer. For purely linear
# layers the output mean and covariance are available in closed form, which
# makes a good check on the Monte Carlo estimate.

import numpy as np

from bayesinv.stochastic_forward import LayerSpec, analytic_propagation, mc_predictive

rng = np.random.default_rng(4)
layers = [
    LayerSpec(rng.standard_normal((4, 3)) / np.sqrt(3), rng.standard_normal(4), tau=0.1),
    LayerSpec(rng.standard_normal((2, 4)) / 2, rng.standard_normal(2), tau=0.05),
]
x = np.array([0.5, -1.0, 2.0])

mean, cov = analytic_propagation(layers, x, tau0=0.2)
for n in (1_000, 100_000):
    s = mc_predictive(layers, x, 0.2, n, 7)
    print(f"n={n:>7}: mean {np.round(s.mean, 4)}  variance {np.round(s.variance, 4)}  se {np.round(s.standard_error, 4)}")
print("analytic:  mean", np.round(mean, 4), " variance", np.round(np.diag(cov), 4))

# A ReLU makes the output non-Gaussian; only the sampling estimate applies.
relu = [LayerSpec(l.weights, l.bias, tau=l.tau, activation="relu") for l in layers]
print("relu network mean", np.round(mc_predictive(relu, x, 0.2, 100_000, 7).mean, 4))
