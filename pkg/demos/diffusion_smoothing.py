"""Diffusion on a small path graph.

A spike on one end of a 6-node path spreads along the graph.  The residual
term alpha keeps a share of the original signal at every step.  The final
1/gamma rescaling would leave a constant signal untouched on a regular graph;
on a path the two end nodes have fewer neighbours, so the ones vector sags there.

    python demos/diffusion_smoothing.py
"""
import numpy as np

from gramalign import tensor as T
from gramalign.diffusion import DiffusionConfig, diffuse, gamma
from gramalign.kgdata import MultiModalKG, build_adjacency

n = 6
triples = [[i, 0, i + 1] for i in range(n - 1)]
kg = MultiModalKG(n, 1, triples, np.zeros((n, 0)), np.zeros((n, 0)), np.zeros((n, 1)), np.ones(n, dtype=bool))
adj = build_adjacency(kg)

spike = np.zeros((n, 1))
spike[0] = 1.0
flat = np.ones((n, 1))

np.set_printoptions(precision=3, suppress=True)
for alpha, beta, k in ((0.1, 0.9, 4), (0.5, 0.5, 2), (0.0, 1.0, 8)):
    cfg = DiffusionConfig(alpha=alpha, beta=beta, k=k, dropout_rate=0.0)
    with T.no_grad():
        out = diffuse(T.constant(spike), adj, cfg).values.ravel()
        const = diffuse(T.constant(flat), adj, cfg).values.ravel()
    print(f"alpha={alpha} beta={beta} k={k} gamma={gamma(cfg):.4f}")
    print("  spike ->", out)
    print("  ones  ->", const)
