"""Numerical self-checks run by ``gramalign check``.

Each check compares library output against an independent reference
(SVD, dense matrix algebra, finite differences, closed forms) and returns a
:class:`CheckResult`.  Nothing here is used during training.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .config import TrainConfig
from .diffusion import DiffusionConfig, diffuse, gamma
from .fusion import FusionConfig
from .kgdata import MultiModalKG, NormalizedAdjacency, SyntheticSpec, build_adjacency, generate_synthetic
from .model import ModelParams, batch_loss, forward
from .objective import GramBatch, LossConfig, gram_loss, gram_volume, gram_volume_rows, infonce_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def check_volume_oracle(count=1000, seed=11, tol=1e-8, budget=10.0) -> CheckResult:
    """sqrt(|det(m^T m)|) against the product of singular values of m."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    with T.no_grad():
        for _ in range(count):
            m = rng.standard_normal((16, 4))
            vol = gram_volume(T.constant(m), 0.0).item()
            ref = np.prod(np.linalg.svd(m, compute_uv=False))
            worst = max(worst, abs(vol - ref) / ref)
    elapsed = time.perf_counter() - start
    ok = worst < tol and elapsed < budget
    return CheckResult("volume vs singular values", ok,
                       f"max rel err {worst:.2e} (< {tol:g}), {elapsed:.2f}s (< {budget:g}s)")


def check_hadamard_bound(count=10_000, seed=12, eps=1e-8) -> CheckResult:
    """Unit-column volumes stay within [sqrt(eps), sqrt(1 + eps)]."""
    rng = np.random.default_rng(seed)
    d = 16
    edges = rng.standard_normal((4, count, d))
    # a share of degenerate stacks (repeated edge) and exactly orthonormal ones
    deg = rng.random(count) < 0.1
    edges[3, deg] = edges[0, deg]
    ortho = rng.random(count) < 0.05
    for j in range(4):
        edges[j, ortho] = 0.0
        edges[j, ortho, j] = 1.0
    edges /= np.linalg.norm(edges, axis=2, keepdims=True)
    with T.no_grad():
        vol = gram_volume_rows([T.constant(e) for e in edges], eps).values.ravel()
    lo, hi = np.sqrt(eps), np.sqrt(1.0 + eps)
    bad = int(np.sum((vol < lo) | (vol > hi)))
    return CheckResult("Hadamard bound", bad == 0,
                       f"{bad} violations in {count} stacks, range [{vol.min():.3e}, {vol.max():.6f}]")


def gradient_fixture(seed=5):
    """A 12-entity benchmark and a small config that exercises every layer."""
    from .pipeline import AlignmentData
    spec = SyntheticSpec(n=12, relations=3, avg_degree=2.0, attr_vocab=10, attrs_per_entity=3,
                         visual_dim=6, feature_noise=0.05, duplicate_fraction=0.25, train_ratio=0.5)
    kg1, kg2, seeds = generate_synthetic(spec, rng_seed=seed)
    data = AlignmentData.from_graphs(kg1, kg2, seeds)
    cfg = TrainConfig(hidden_dim=8, epochs=1, batch_size=64, seed=seed,
                      fusion=FusionConfig(heads=2, ffn_dim=6),
                      loss=LossConfig(lam=0.5, K=12),
                      diffusion=DiffusionConfig(alpha=0.2, beta=0.7, k=3, dropout_rate=0.2))
    return data, cfg


def check_gradients(h=1e-5, tol=1e-4, seed=5) -> CheckResult:
    """Analytic gradients of the total loss against central differences.

    Error per parameter tensor: |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|).
    K covers every candidate so the top-K set cannot change under a nudge.
    """
    data, cfg = gradient_fixture(seed)
    params = ModelParams.init(data.g1, data.g2, cfg, np.random.default_rng(seed))
    pairs = data.seeds.train_pairs

    def loss_value():
        rng = np.random.default_rng(99)  # same dropout masks on every call
        enc1, enc2, _ = forward(params, data.g1, data.g2, cfg, True, rng)
        return batch_loss(enc1, enc2, pairs, cfg)[0]

    T.zero_grads(params.values())
    T.backward(loss_value())
    worst, worst_name = 0.0, ""
    with T.no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
            numeric = np.zeros_like(p.values)
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = loss_value().item()
                flat[i] = keep - h
                down = loss_value().item()
                flat[i] = keep
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            err = 0.0 if scale == 0 else np.linalg.norm(analytic - numeric) / scale
            if err > worst:
                worst, worst_name = err, name
    T.zero_grads(params.values())
    return CheckResult("gradients vs finite differences", worst < tol,
                       f"{len(params.tensors)} tensors, worst rel err {worst:.2e} ({worst_name})")


def _dense_path_oracle(cfg: DiffusionConfig, h0):
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float) + np.eye(3)
    dinv = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
    a_hat = dinv @ a @ dinv
    b, al = cfg.beta, cfg.alpha
    poly = b * b * a_hat @ a_hat + al * b * a_hat + al * np.eye(3)
    return poly @ h0 / (b * b + al * (1.0 + b))


GAMMA_TARGET = 0.9999


def check_diffusion(seed=13) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_id = 0.0
    with T.no_grad():
        for _ in range(20):
            n, d = rng.integers(2, 30), rng.integers(1, 10)
            cfg = DiffusionConfig(alpha=rng.uniform(0.0, 1.0), beta=rng.uniform(0.05, 1.0),
                                  k=int(rng.integers(1, 8)), dropout_rate=0.0)
            h0 = rng.standard_normal((n, d))
            adj = NormalizedAdjacency(int(n), sp.identity(int(n), format="csr"))
            out = diffuse(T.constant(h0), adj, cfg).values
            worst_id = max(worst_id, np.abs(out - h0).max())

        kg = MultiModalKG(3, 1, [[0, 0, 1], [1, 0, 2]], np.zeros((3, 0)), np.zeros((3, 0)),
                          np.zeros((3, 1)), np.ones(3, dtype=bool))
        cfg = DiffusionConfig(alpha=0.5, beta=0.5, k=2, dropout_rate=0.0)
        h0 = rng.standard_normal((3, 4))
        path_err = np.abs(diffuse(T.constant(h0), build_adjacency(kg), cfg).values
                          - _dense_path_oracle(cfg, h0)).max()
    # the stated target for gamma(0.1, 0.9, 4) is 0.9999; note that
    # 0.9^4 + 0.1 * (1 + 0.9 + 0.81 + 0.729) = 0.6561 + 0.3439 is 1 in exact arithmetic
    g = gamma(DiffusionConfig(alpha=0.1, beta=0.9, k=4))
    ok = worst_id < 1e-12 and path_err < 1e-10 and g == GAMMA_TARGET
    return CheckResult("diffusion identities", ok,
                       f"identity err {worst_id:.1e}, path err {path_err:.1e}, "
                       f"gamma(0.1, 0.9, 4) = {g!r} (target {GAMMA_TARGET})")


def random_graph(rng, n_max=100):
    n = int(rng.integers(1, n_max + 1))
    t = int(rng.integers(0, 3 * n + 1))
    triples = np.stack([rng.integers(0, n, t), rng.integers(0, 4, t), rng.integers(0, n, t)], axis=1)
    return MultiModalKG(n, 4, triples, np.zeros((n, 0)), np.zeros((n, 0)),
                        np.zeros((n, 1)), np.ones(n, dtype=bool))


def dense_normalized(kg: MultiModalKG) -> np.ndarray:
    n = kg.entity_count
    a = np.zeros((n, n))
    for h, _, t in kg.triples:
        a[h, t] = a[t, h] = 1.0
    np.fill_diagonal(a, 1.0)
    dinv = np.diag(a.sum(axis=1) ** -0.5)
    return dinv @ a @ dinv


def check_adjacency(seed=14, graphs=50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(graphs):
        kg = random_graph(rng)
        worst = max(worst, np.abs(build_adjacency(kg).to_dense() - dense_normalized(kg)).max())
    return CheckResult("normalized adjacency", worst < 1e-12,
                       f"{graphs} graphs, max entry err {worst:.1e}")


def reference_infonce_training(data, cfg: TrainConfig):
    """Adam on InfoNCE alone, written without the combined loss path."""
    from .encoders import renormalize_relations
    from .pipeline import Adam, _rngs
    init_rng, drop_rng, shuffle_rng = _rngs(cfg.seed)
    params = ModelParams.init(data.g1, data.g2, cfg, init_rng)
    opt = Adam(params.values(), lr=cfg.learning_rate)
    pairs = data.seeds.train_pairs
    bs = max(cfg.batch_size, 2)
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(len(pairs))
        batches = [order[i:i + bs] for i in range(0, len(order), bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        for idx in batches:
            opt.zero_grad()
            enc1, enc2, _ = forward(params, data.g1, data.g2, cfg, True, drop_rng)
            b = pairs[idx]
            loss = infonce_loss(T.gather_rows(enc1.joint, b[:, 0]),
                                T.gather_rows(enc2.joint, b[:, 1]), cfg.loss)
            T.backward(loss)
            opt.step()
            renormalize_relations(params["struct.rel"])
    opt.zero_grad()
    return params


def check_loss_fixtures(seed=15) -> CheckResult:
    from .pipeline import train
    rng = np.random.default_rng(seed)
    notes, ok = [], True
    with T.no_grad():
        # every candidate spans the same parallelotope
        M, K, d = 5, 7, 6
        v, a, r = (rng.standard_normal((1, d)) for _ in range(3))
        batch = GramBatch.build(T.constant(rng.standard_normal((M, d))),
                                T.constant(np.repeat(v, 10, axis=0)), T.constant(np.repeat(a, 10, axis=0)),
                                T.constant(np.repeat(r, 10, axis=0)), np.arange(M), K)
        g_err = abs(gram_loss(batch, LossConfig(K=K)).item() - np.log(K))
        ok &= g_err < 1e-12
        notes.append(f"uniform volume |L - ln K| {g_err:.1e}")

        # every source/target pair equally similar
        B = 6
        x = T.constant(np.tile(rng.standard_normal((1, 5)), (B, 1)))
        for include, expect in ((True, np.log(B)), (False, np.log(B - 1))):
            err = abs(infonce_loss(x, x, LossConfig(include_positive=include)).item() - expect)
            ok &= err < 1e-12
            notes.append(f"uniform InfoNCE ({'with' if include else 'without'} positive) err {err:.1e}")

    data, cfg = gradient_fixture(seed)
    cfg = replace(cfg, epochs=3, loss=replace(cfg.loss, lam=0.0))
    trained = train(data, cfg).params
    same = trained.same_as(reference_infonce_training(data, cfg))
    ok &= same
    notes.append(f"lambda=0 matches InfoNCE-only training bit for bit: {same}")
    return CheckResult("loss fixtures", bool(ok), "; ".join(notes))


CHECKS = (check_volume_oracle, check_hadamard_bound, check_gradients, check_diffusion,
          check_adjacency, check_loss_fixtures)


def run_all(stream=None) -> bool:
    passed = True
    for fn in CHECKS:
        res = fn()
        passed &= res.passed
        if stream is not None:
            print(res.line(), file=stream, flush=True)
    return passed
