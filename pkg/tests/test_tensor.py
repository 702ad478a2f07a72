import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gramalign import tensor as T
from conftest import directional_gradcheck


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


# ---- forward examples -----------------------------------------------------

def test_matmul_identity(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal((T.constant(np.eye(3)) @ T.constant(x)).values, x)


def test_matmul_small_case_matches_loops():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.array_equal((T.constant(a) @ T.constant(b)).values, ref)
    assert ref.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.constant(np.ones((2, 3))) @ T.constant(np.ones((2, 3)))


def test_softmax_examples(rng):
    assert np.allclose(T.row_softmax(T.constant([[2.0, 2.0, 2.0, 2.0]])).values, 0.25)
    out = T.row_softmax(T.constant([[0.0, np.log(3.0)]]), 1.0).values
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)
    rows = T.row_softmax(T.constant(rng.standard_normal((20, 7)) * 30), 0.7).values
    assert np.abs(rows.sum(axis=1) - 1).max() < 1e-12


def test_det4_examples(rng):
    assert T.det4(T.constant(np.eye(4))).item() == 1.0
    assert T.det4(T.constant(np.diag([2.0, 3.0, 4.0, 5.0]))).item() == 120.0
    import scipy.linalg
    for _ in range(50):
        g = rng.standard_normal((4, 4))
        lu, piv = scipy.linalg.lu_factor(g)
        sign = (-1) ** np.sum(piv != np.arange(4))
        ref = sign * np.prod(np.diag(lu))
        assert abs(T.det4(T.constant(g)).item() - ref) <= 1e-10 * abs(ref)


def test_det4_rows_matches_single(rng):
    g = rng.standard_normal((6, 16))
    batched = T.det4_rows(T.constant(g)).values.ravel()
    single = [T.det4(T.constant(row.reshape(4, 4))).item() for row in g]
    assert np.allclose(batched, single, rtol=1e-13)


def test_det4_gradient_at_singular_matrix():
    g = np.ones((4, 4))
    p = T.parameter(g)
    T.backward(T.det4(p))
    # cofactors of a rank-1 matrix vanish
    assert np.allclose(p.grad, 0.0)


def test_layer_norm_examples(rng):
    one, zero = T.constant(np.ones((1, 2))), T.constant(np.zeros((1, 2)))
    assert np.array_equal(T.layer_norm(T.constant([[5.0, 5.0]]), one, zero).values, [[0.0, 0.0]])
    out = T.layer_norm(T.constant([[1.0, 3.0]]), one, zero, 1e-6).values
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)
    x = rng.standard_normal((10, 6))
    bias = rng.standard_normal((1, 6))
    y = T.layer_norm(T.constant(x), T.constant(np.ones((1, 6))), T.constant(bias)).values
    assert np.allclose(y.mean(axis=1), bias.mean(), atol=1e-12)


def test_dropout_modes(rng):
    x = T.constant(rng.standard_normal((5, 5)))
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.5, False, rng) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, rng)


def test_dropout_expectation():
    x = np.array([[1.0, -2.0, 0.5]])
    gen = np.random.default_rng(7)
    draws = np.stack([T.dropout(T.constant(x), 0.3, True, gen).values for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 0.02 * np.abs(x))


def test_backward_examples(rng):
    w = T.parameter(rng.standard_normal((3, 2)))
    T.backward(T.sum(w))
    assert np.array_equal(w.grad, np.ones((3, 2)))
    w.zero_grad()
    T.backward(T.sum(w * w))
    assert np.allclose(w.grad, 2 * w.values)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(T.parameter(np.ones((2, 2))))


def test_backward_accumulates(rng):
    w = T.parameter(rng.standard_normal((2, 2)))
    T.backward(T.sum(w))
    T.backward(T.sum(w))
    assert np.array_equal(w.grad, 2 * np.ones((2, 2)))


def test_chain_nodes_visited_once(rng):
    x = T.parameter(rng.standard_normal((2, 3)))
    y = x
    for _ in range(30):
        y = T.tanh(y * 0.9)
    loss = T.sum(y)
    order = T.record(loss)
    assert len(order) == len({id(n) for n in order})
    assert T.backward(loss) == 1 + 60 + 1  # input, 30 x (scale, tanh), sum


def test_record_is_topological(rng):
    a = T.parameter(rng.standard_normal((2, 2)))
    b = a @ a
    c = b + a
    order = T.record(T.sum(c * b))
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_every_reachable_parameter_gets_grad(rng):
    a, b = T.parameter(rng.standard_normal((2, 3))), T.parameter(rng.standard_normal((3, 1)))
    unused = T.parameter(np.ones((1, 1)))
    T.backward(T.sum(T.tanh(a @ b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert unused.grad is None


def test_no_grad_records_nothing(rng):
    a = T.parameter(rng.standard_normal((2, 2)))
    with T.no_grad():
        out = a @ a
    assert not out.requires_grad and out._parents == ()


def test_sqrt_contract():
    with pytest.raises(ValueError):
        T.sqrt(T.parameter([[0.0]]))
    assert T.sqrt(T.constant([[0.0]])).item() == 0.0


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        T.log(T.constant([[0.0, 1.0]]))


def test_broadcast_limits():
    with pytest.raises(ValueError):
        T.constant(np.ones((2, 3))) + T.constant(np.ones((3, 2)))
    out = T.constant(np.ones((2, 3))) + T.constant(np.arange(3.0).reshape(1, 3))
    assert out.values.tolist() == [[1, 2, 3], [1, 2, 3]]


# ---- gradients by finite differences ---------------------------------------

GRADCASES = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "add": (lambda a, b: a + b, [(3, 4), (1, 4)]),
    "add_col": (lambda a, b: a + b, [(3, 4), (3, 1)]),
    "subtract": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "hadamard": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "row_dot": (lambda a, b: T.row_dot(a, b), [(5, 3), (5, 3)]),
    "scalar_scale": (lambda a: a * -2.5, [(3, 3)]),
    "add_scalar": (lambda a: T.add_scalar(a, 3.0), [(2, 3)]),
    "transpose": (lambda a: T.transpose(a), [(2, 5)]),
    "reshape": (lambda a: T.reshape(a, 3, 4), [(2, 6)]),
    "concat_cols": (lambda a, b: T.concat_cols([a, b]), [(3, 2), (3, 4)]),
    "concat_rows": (lambda a, b: T.concat_rows([a, b]), [(2, 3), (4, 3)]),
    "slice_cols": (lambda a: T.slice_cols(a, 1, 3), [(3, 5)]),
    "tanh": (lambda a: T.tanh(a), [(3, 4)]),
    "exp": (lambda a: T.exp(a), [(3, 4)]),
    "sum_all": (lambda a: T.sum(a), [(3, 4)]),
    "sum_rows": (lambda a: T.sum(a, axis=1), [(3, 4)]),
    "sum_cols": (lambda a: T.sum(a, axis=0), [(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=0), [(3, 4)]),
    "gather_rows": (lambda a: T.gather_rows(a, [2, 0, 2, 1]), [(3, 4)]),
    "segment_sum": (lambda a: T.segment_sum(a, [0, 2, 2, 1, 0], 3), [(5, 2)]),
    "l2_normalize_rows": (lambda a: T.l2_normalize_rows(a), [(4, 5)]),
    "row_softmax": (lambda a: T.row_softmax(a, 0.7), [(3, 5)]),
    "logsumexp_rows": (lambda a: T.logsumexp_rows(a), [(3, 5)]),
    "segment_softmax": (lambda a: T.segment_softmax(a, [0, 1, 0, 1, 1], 2), [(5, 1)]),
    "det4": (lambda a: T.det4(a), [(4, 4)]),
    "det4_rows": (lambda a: T.det4_rows(a), [(3, 16)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, 1e-6), [(4, 5), (1, 5), (1, 5)]),
    "block_scores": (lambda q, k: T.block_scores(q, k, 4, 2), [(8, 6), (8, 6)]),
    "block_apply": (lambda p, v: T.block_apply(p, v, 4, 2), [(8, 8), (8, 6)]),
}


@pytest.mark.parametrize("name", sorted(GRADCASES))
def test_primitive_gradients(name, rng):
    fn, shapes = GRADCASES[name]
    inputs = [rng.standard_normal(s) for s in shapes]
    assert directional_gradcheck(fn, inputs) < 1e-5


@pytest.mark.parametrize("name,fn", [
    ("relu", T.relu),
    ("leaky_relu", lambda a: T.leaky_relu(a, 0.2)),
    ("absolute", T.absolute),
])
def test_kinked_gradients(name, fn, rng):
    # probe away from the kink at zero
    assert directional_gradcheck(fn, [_away_from_zero(rng, (4, 5))]) < 1e-5


def test_positive_domain_gradients(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    assert directional_gradcheck(T.log, [x]) < 1e-5
    assert directional_gradcheck(T.sqrt, [x]) < 1e-5


def test_spmm_gradient(rng):
    import scipy.sparse as sp
    adj = sp.random(5, 5, density=0.5, random_state=3, format="csr")
    assert directional_gradcheck(lambda x: T.spmm(adj, x), [rng.standard_normal((5, 3))]) < 1e-5


def test_matmul_gradient_elementwise(rng):
    # every entry, not just random directions: rel. err < 1e-6
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    a, b = T.parameter(a0), T.parameter(b0)
    w = rng.standard_normal((3, 2))
    T.backward(T.sum((a @ b) * T.constant(w)))
    num = np.zeros_like(a0)
    h = 1e-5
    for i in np.ndindex(a0.shape):
        up, down = a0.copy(), a0.copy()
        up[i] += h
        down[i] -= h
        num[i] = (np.sum((up @ b0) * w) - np.sum((down @ b0) * w)) / (2 * h)
    assert np.linalg.norm(num - a.grad) / np.linalg.norm(num) < 1e-6


# ---- properties -------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=8), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = T.row_softmax(T.constant(x)).values
    assert np.all(p >= 0)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(-5, 5)))
def test_det4_matches_numpy(g):
    ref = np.linalg.det(g)
    assert abs(T.det4(T.constant(g)).item() - ref) <= 1e-9 * max(1.0, np.abs(g).max() ** 4)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_l2_normalize_rows_unit_or_zero(x):
    # norms are floored at 1e-12, so only rows above the floor become unit length
    y = T.l2_normalize_rows(T.constant(x)).values
    norms = np.linalg.norm(y, axis=1)
    big = np.linalg.norm(x, axis=1) >= 1e-12
    assert np.allclose(norms[big], 1.0, atol=1e-12)
    assert np.all(norms[~big] < 1.0)
    assert np.all(norms[np.linalg.norm(x, axis=1) == 0] == 0)


# ---- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    params = {"w": T.parameter(rng.standard_normal((3, 2))), "naïve.b": T.parameter(rng.standard_normal((1, 5)))}
    path = tmp_path / "p.bin"
    T.save_params(path, params)
    back = T.load_params(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].values.tobytes() == params[k].values.tobytes()
    T.save_params(tmp_path / "q.bin", back)
    assert (tmp_path / "q.bin").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    import struct
    path = tmp_path / "p.bin"
    T.save_params(path, {"ab": T.parameter([[1.5, -2.0]])})
    raw = path.read_bytes()
    assert raw == struct.pack("<II", 1, 2) + b"ab" + struct.pack("<II2d", 1, 2, 1.5, -2.0)


def test_checkpoint_trailing_bytes(tmp_path):
    path = tmp_path / "p.bin"
    T.save_params(path, {"a": T.parameter([[1.0]])})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        T.load_params(path)
