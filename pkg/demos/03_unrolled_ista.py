# coding: utf-8

# # ISTA as a network
#
# K iterations of iterative shrinkage-thresholding are a K-layer network
# whose weights start at their analytic values. Training on example pairs
# then adjusts those weights.

import numpy as np

from bayesinv.forward_model import DenseOperator
from bayesinv.unrolled_net import TrainConfig, build_ista_net, forward, ista_reference, loss, spectral_bound, train

rng = np.random.default_rng(3)
M, N = 12, 8
H = DenseOperator(rng.standard_normal((M, N)) / np.sqrt(N))


def sample(n):
    pairs = []
    for _ in range(n):
        f = rng.standard_normal(N) * (rng.uniform(size=N) < 0.4)
        pairs.append((H.apply(f) + 0.05 * rng.standard_normal(M), f))
    return pairs


alpha = 0.9 / spectral_bound(H)
net = build_ista_net(H, alpha, threshold=0.02, K=5)

# With analytic weights the network is exactly ISTA.
g, _ = sample(1)[0]
print("net vs ISTA:", np.max(np.abs(forward(net, g)[0] - ista_reference(H, g, alpha, 0.02, 5))))

train_set, heldout = sample(300), sample(100)
trained, trace = train(net, train_set, TrainConfig(learning_rate=0.5, epochs=100))
print("training loss", trace[0], "->", trace[-1])
print("held-out loss: ISTA", loss(net, heldout), " trained", loss(trained, heldout))
