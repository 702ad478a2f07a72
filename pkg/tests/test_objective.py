import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gramalign import tensor as T
from gramalign.objective import (GramBatch, LossConfig, batch_volumes, build_parallelotope, gram_loss,
                                 gram_volume, gram_volume_rows, infonce_loss, similarity_matrix,
                                 topk_candidates, total_loss)
from conftest import directional_gradcheck

EPS = 1e-8


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---- similarity and candidates ----------------------------------------------

def test_similarity_examples():
    assert similarity_matrix([[0.6, 0.8]], [[0.6, 0.8]])[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert similarity_matrix([[1.0, 0.0]], [[0.0, 2.0]])[0, 0] == 0.0
    assert abs(similarity_matrix([[3.0, 4.0]], [[4.0, 3.0]])[0, 0] - 0.96) < 1e-15


def test_topk_examples(rng):
    assert topk_candidates([[0.1, 0.9, 0.5]], 2).tolist() == [[1, 2]]
    assert topk_candidates([[0.3, 0.3, 0.3]], 2).tolist() == [[0, 1]]
    sim = rng.standard_normal((20, 30))
    ref = np.array([sorted(range(30), key=lambda j: (-row[j], j))[:5] for row in sim])
    assert np.array_equal(topk_candidates(sim, 5), ref)
    with pytest.raises(ValueError):
        topk_candidates(sim, 31)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 9), elements=st.integers(-400, 400).map(lambda i: i / 4)),
       st.integers(1, 9))
def test_topk_invariant_under_increasing_map(sim, k):
    # quarter-step values keep 2x + 1 exact, so the map stays strictly increasing
    assert np.array_equal(topk_candidates(sim, k), topk_candidates(2 * sim + 1, k))


# ---- volumes -----------------------------------------------------------------

def test_volume_examples(rng):
    q, _ = np.linalg.qr(rng.standard_normal((8, 4)))
    assert abs(gram_volume(T.constant(q), EPS).item() - np.sqrt(1 + EPS)) < 1e-14
    rep = rng.standard_normal((8, 4))
    rep[:, 3] = rep[:, 1]
    assert abs(gram_volume(T.constant(rep), EPS).item() - np.sqrt(EPS)) < 1e-9
    scaled = q * np.array([1.0, 2.0, 3.0, 4.0])
    assert abs(gram_volume(T.constant(scaled), EPS).item() - np.sqrt(576 + EPS)) < 1e-11
    m = rng.standard_normal((16, 4))
    vol = gram_volume(T.constant(m), EPS).item()
    sv = np.linalg.svd(m, compute_uv=False)
    assert abs((vol ** 2 - EPS) - np.prod(sv) ** 2) <= 1e-8 * np.prod(sv) ** 2


def test_volume_needs_four_columns():
    with pytest.raises(ValueError):
        gram_volume(T.constant(np.ones((5, 3))), EPS)


def test_rows_match_single(rng):
    cols = [rng.standard_normal((6, 5)) for _ in range(4)]
    rows = gram_volume_rows([T.constant(c) for c in cols], EPS).values.ravel()
    single = [gram_volume(T.constant(np.stack([c[b] for c in cols], axis=1)), EPS).item() for b in range(6)]
    assert np.allclose(rows, single, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_hadamard_bound(seed):
    rng = np.random.default_rng(seed)
    cols = [_unit(rng.standard_normal((50, 7))) for _ in range(4)]
    vol = gram_volume_rows([T.constant(c) for c in cols], EPS).values
    assert np.all(vol >= np.sqrt(EPS)) and np.all(vol <= np.sqrt(1 + EPS))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 3))
def test_copying_a_column_never_increases_volume(seed, src, dst):
    rng = np.random.default_rng(seed)
    m = _unit(rng.standard_normal((4, 6))).T
    before = gram_volume(T.constant(m), EPS).item()
    m2 = m.copy()
    m2[:, dst] = m[:, src]
    assert gram_volume(T.constant(m2), EPS).item() <= before + 1e-12


def test_volume_gradient(rng):
    assert directional_gradcheck(lambda m: gram_volume(m, EPS), [rng.standard_normal((6, 4))]) < 1e-5


# ---- parallelotopes and the volume loss -----------------------------------------

def _batch(rng, M=3, n2=6, d=8, K=4):
    src = T.constant(rng.standard_normal((M, d)))
    tv, ta, tr = (T.constant(rng.standard_normal((n2, d))) for _ in range(3))
    return GramBatch.build(src, tv, ta, tr, np.arange(M), K)


def test_batch_mask(rng):
    b = _batch(rng)
    assert np.all(b.mask.sum(axis=1) <= 1)
    assert np.array_equal(b.mask, (b.topk_idx == b.target[:, None]).astype(float))


def test_parallelotope_examples(rng):
    d = 8
    same = np.tile(rng.standard_normal((1, d)), (4, 1))
    b = GramBatch.build(T.constant(same[:1]), T.constant(same), T.constant(same), T.constant(same), [0], 2)
    assert abs(gram_volume(build_parallelotope(b, 0, 0), EPS).item() - np.sqrt(EPS)) < 1e-9
    e = np.eye(d)
    b = GramBatch.build(T.constant(e[:1] * 3), T.constant(e[1:2] * 2), T.constant(e[2:3]), T.constant(e[3:4] * 5),
                        [0], 1)
    assert abs(gram_volume(build_parallelotope(b, 0, 0), EPS).item() - np.sqrt(1 + EPS)) < 1e-15


def test_parallelotope_fixture_by_hand():
    # fixed 8-dim rows, volume computed directly from the normalised Gram matrix
    s = np.array([[1, 2, 0, 0, 1, 0, 0, 1.0]])
    v = np.array([[0, 1, 1, 0, 0, 2, 0, 0.0], [1, 0, 0, 0, 0, 0, 0, 0.0]])
    a = np.array([[1, 0, 0, 3, 0, 0, 1, 0.0], [0, 1, 0, 0, 0, 0, 0, 0.0]])
    r = np.array([[0, 0, 2, 0, 1, 1, 0, 1.0], [0, 0, 1, 0, 0, 0, 0, 0.0]])
    b = GramBatch.build(T.constant(s), T.constant(v), T.constant(a), T.constant(r), [0], 2)
    c = b.topk_idx[0, 0]
    m = np.stack([_unit(s[0]), _unit(v[c]), _unit(a[c]), _unit(r[c])], axis=1)
    expect = np.sqrt(abs(np.linalg.det(m.T @ m)) + EPS)
    assert abs(gram_volume(build_parallelotope(b, 0, 0), EPS).item() - expect) < 1e-14
    assert abs(batch_volumes(b, LossConfig(K=2)).values[0, 0] - expect) < 1e-14


def test_uniform_volumes_give_log_k(rng):
    d, K = 6, 5
    v, a, r = (np.tile(rng.standard_normal((1, d)), (9, 1)) for _ in range(3))
    b = GramBatch.build(T.constant(rng.standard_normal((4, d))), T.constant(v), T.constant(a), T.constant(r),
                        np.arange(4), K)
    assert abs(gram_loss(b, LossConfig(K=K)).item() - np.log(K)) < 1e-12


def test_saturated_volume_loss(rng):
    # target columns coincide, other candidates are orthonormal: loss ~ 0
    d = 8
    e = np.eye(d)
    src = e[:1]
    tv = np.vstack([e[:1], e[4:5]])
    ta = np.vstack([e[:1], e[5:6]])
    tr = np.vstack([e[:1], e[6:7]])
    b = GramBatch.build(T.constant(src), T.constant(tv), T.constant(ta), T.constant(tr), [0], 2)
    loss = gram_loss(b, LossConfig(K=2, tau=0.01)).item()
    assert 0 <= loss < 1e-40


def test_small_numeric_fixture(rng):
    b = _batch(rng, M=2, n2=5, K=3)
    cfg = LossConfig(K=3, tau=0.3)
    loss = gram_loss(b, cfg).item()
    per = []
    for i in range(2):
        if b.mask[i].sum() == 0:
            continue
        vols = [gram_volume(build_parallelotope(b, i, k), EPS).item() for k in range(3)]
        logits = -np.array(vols) / 0.3
        k = int(np.argmax(b.mask[i]))
        per.append(np.log(np.exp(logits).sum()) - logits[k])
    assert per and abs(loss - np.mean(per)) < 1e-12


def test_missed_targets_give_zero(rng):
    b = _batch(rng, M=3, n2=9, K=2)
    b.mask[:] = 0.0
    assert gram_loss(b, LossConfig(K=2)).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_volume_loss_non_negative(seed):
    b = _batch(np.random.default_rng(seed), M=4, n2=7, K=5)
    assert gram_loss(b, LossConfig(K=5)).item() >= 0.0


def test_volume_loss_gradient(rng):
    M, n2, d, K = 3, 5, 4, 5

    def fn(src, tv, ta, tr):
        return gram_loss(GramBatch.build(src, tv, ta, tr, [0, 1, 2], K), LossConfig(K=K, tau=0.5))

    inputs = [rng.standard_normal((M, d))] + [rng.standard_normal((n2, d)) for _ in range(3)]
    assert directional_gradcheck(fn, inputs) < 1e-5


# ---- InfoNCE -------------------------------------------------------------------------

def test_infonce_uniform_pairs():
    x = T.constant(np.ones((2, 3)))
    assert abs(infonce_loss(x, x, LossConfig(include_positive=True)).item() - np.log(2)) < 1e-15
    assert abs(infonce_loss(x, x, LossConfig(include_positive=False)).item()) < 1e-15


def test_infonce_saturates():
    e = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert infonce_loss(T.constant(e), T.constant(e), LossConfig(T=0.1)).item() < 1e-8


def test_infonce_three_pairs_by_hand(rng):
    s, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cfg = LossConfig(T=0.2)
    sim = _unit(s) @ _unit(t).T / 0.2

    def direction(m):
        return np.mean([np.log(np.exp(m[i]).sum()) - m[i, i] for i in range(3)])

    expect = 0.5 * (direction(sim) + direction(sim.T))
    assert abs(infonce_loss(T.constant(s), T.constant(t), cfg).item() - expect) < 1e-13

    def direction_excl(m):
        return np.mean([np.log(np.exp(np.delete(m[i], i)).sum()) - m[i, i] for i in range(3)])

    expect = 0.5 * (direction_excl(sim) + direction_excl(sim.T))
    got = infonce_loss(T.constant(s), T.constant(t), LossConfig(T=0.2, include_positive=False)).item()
    assert abs(got - expect) < 1e-13


def test_infonce_needs_two_pairs():
    with pytest.raises(ValueError):
        infonce_loss(T.constant(np.ones((1, 3))), T.constant(np.ones((1, 3))), LossConfig())


def test_infonce_gradient(rng):
    fn = lambda s, t: infonce_loss(s, t, LossConfig(T=0.3))
    assert directional_gradcheck(fn, [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]) < 1e-5


# ---- combination and config ------------------------------------------------------------

def test_total_loss_examples():
    a, g = T.constant([[0.7]]), T.constant([[0.3]])
    assert abs(total_loss(a, g, 0.1).item() - 0.73) < 1e-15
    assert total_loss(a, g, 0.0).item() == 0.7
    assert total_loss(a, T.constant([[0.0]]), 0.4).item() == 0.7


@pytest.mark.parametrize("kwargs", [dict(tau=0), dict(T=-1), dict(lam=-0.1), dict(K=1), dict(epsilon=0)])
def test_loss_config_ranges(kwargs):
    with pytest.raises(ValueError):
        LossConfig(**kwargs)
