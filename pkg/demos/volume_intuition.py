"""How the Gram volume scores agreement between modalities.

Four unit vectors that point the same way span almost no volume; four
unrelated ones span close to the maximum of 1.  The contrastive volume loss
uses this as a distance: a matching entity should collapse the parallelotope
built from its joint embedding and the other entity's modality embeddings.

    python demos/volume_intuition.py
"""
import numpy as np

from gramalign import tensor as T
from gramalign.objective import gram_volume

rng = np.random.default_rng(0)
d = 16
anchor = rng.standard_normal(d)

print(f"{'spread':>8}  {'volume':>10}")
for spread in (0.0, 0.05, 0.2, 0.5, 1.0, 3.0):
    edges = anchor + spread * rng.standard_normal((4, d))
    edges /= np.linalg.norm(edges, axis=1, keepdims=True)
    with T.no_grad():
        vol = gram_volume(T.constant(edges.T), 1e-8).item()
    print(f"{spread:8.2f}  {vol:10.6f}")

# the same number from singular values, for comparison
m = rng.standard_normal((d, 4))
with T.no_grad():
    print("\nvolume", gram_volume(T.constant(m), 0.0).item(),
          "vs product of singular values", np.prod(np.linalg.svd(m, compute_uv=False)))
