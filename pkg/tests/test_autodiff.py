import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from quadlab import autodiff as ad
from quadlab.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    p = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(p.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    x = 7.3
    a = ad.softmax_rows(Tensor([[x, x + 2.0]])).data
    b = ad.softmax_rows(Tensor([[0.0, 2.0]])).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], e / e.sum(), atol=1e-12)


def test_cross_entropy_examples():
    assert ad.cross_entropy_soft(Tensor([[0.0, 0.0]]), [[0.5, 0.5]]).item() == pytest.approx(math.log(2), abs=1e-6)
    assert ad.cross_entropy_soft(Tensor([[40.0, 0.0]]), [[1.0, 0.0]]).item() < 1e-9
    p1 = math.e / (math.e + 1.0)
    hand = -(0.3 * math.log(p1) + 0.7 * math.log(1.0 - p1))
    assert ad.cross_entropy_soft(Tensor([[1.0, 0.0]]), [[0.3, 0.7]]).item() == pytest.approx(hand, abs=1e-9)


def test_cross_entropy_rejects_unnormalised_target():
    with pytest.raises(ValueError):
        ad.cross_entropy_soft(Tensor([[0.0, 0.0]]), [[0.5, 0.6]])


def test_backward_linear_and_dead_branch():
    w = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_(w))
    assert np.array_equal(w.grad, np.ones((2, 3)))

    v = leaf(np.ones(4))
    ad.zero_grads([v])
    ad.backward(ad.mul(ad.sum_(ad.gelu(v)), Tensor(0.0)))
    assert np.array_equal(v.grad, np.zeros(4))


def test_backward_non_scalar_root():
    with pytest.raises(ValueError):
        ad.backward(ad.mul(leaf([1.0, 2.0]), Tensor(2.0)))


def test_grads_accumulate_until_reset():
    w = leaf([1.0, 2.0])
    loss = lambda: ad.sum_(ad.mul(w, w))
    ad.backward(loss())
    ad.backward(loss())
    np.testing.assert_allclose(w.grad, 4 * w.data)
    ad.zero_grads([w])
    ad.backward(loss())
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_unreached_param_has_zero_grad():
    a, b = leaf([1.0]), leaf([2.0])
    ad.zero_grads([a, b])
    ad.backward(ad.sum_(ad.mul(a, a)))
    assert b.grad.tolist() == [0.0]


def test_two_layer_network_finite_differences():
    rng = np.random.default_rng(0)
    p = {"w1": leaf(rng.normal(size=(5, 6))), "b1": leaf(rng.normal(size=6)),
         "w2": leaf(rng.normal(size=(6, 3))), "b2": leaf(rng.normal(size=3))}
    x = Tensor(rng.normal(size=(4, 5)))
    target = np.full((4, 3), 1 / 3)

    def loss():
        h = ad.gelu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        return ad.cross_entropy_soft(ad.add(ad.matmul(h, p["w2"]), p["b2"]), target)

    assert ad.gradient_check(loss, p) < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "softmax", "layer_norm", "gelu",
                                  "relu", "abs", "log", "embedding", "concat", "slice", "reshape",
                                  "transpose", "sum", "mean", "ce"])
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(3, 4)))
    r = Tensor(rng.normal(size=(3, 4)))  # random projection makes every output entry matter
    ids = np.array([[0, 2], [1, 0]])
    build = {
        "add": lambda: ad.add(a, b),
        "sub": lambda: ad.sub(a, b),
        "mul": lambda: ad.mul(a, b),
        "matmul": lambda: ad.matmul(a, ad.transpose(b, (1, 0))),
        "softmax": lambda: ad.softmax_rows(a),
        "layer_norm": lambda: ad.layer_norm(a, b[0], b[1]),
        "gelu": lambda: ad.gelu(a),
        "relu": lambda: ad.relu(a),
        "abs": lambda: ad.abs_(a),
        "log": lambda: ad.log_clamped(ad.softmax_rows(a)),
        "embedding": lambda: ad.embedding(a, ids),
        "concat": lambda: ad.concat([a, b], axis=1),
        "slice": lambda: a[1:, ::2],
        "reshape": lambda: ad.reshape(a, (2, 6)),
        "transpose": lambda: ad.transpose(a, (1, 0)),
        "sum": lambda: ad.sum_(a, axis=0),
        "mean": lambda: ad.mean(a, axis=1),
        "ce": lambda: ad.cross_entropy_soft(a, ad.softmax_rows(b).data),
    }[name]

    def loss():
        out = build()
        proj = Tensor(np.resize(r.data, out.shape))
        return ad.sum_(ad.mul(out, proj))

    # the CE target is a constant, so only the logits are checked there
    params = {"a": a} if name == "ce" else {"a": a, "b": b}
    assert ad.gradient_check(loss, params) < 1e-4


def test_adam_zero_gradient_is_fixed_point():
    p = leaf([1.0, -2.0])
    st_ = ad.AdamState()
    ad.adam_step([p], [np.zeros(2)], st_, 1e-3)
    assert p.data.tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [1e-4, 0.3, 50.0])
def test_adam_first_step_is_lr(g):
    p = leaf([0.0])
    ad.adam_step([p], [np.array([g])], ad.AdamState(), 1e-3)
    assert abs(p.data[0]) == pytest.approx(1e-3, rel=1e-4)


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_two_steps_match_scalar_oracle():
    p = leaf([0.5, -1.5])
    s = ad.AdamState()
    gs = [np.array([0.2, -3.0]), np.array([-0.1, 1.0])]
    for g in gs:
        ad.adam_step([p], [g], s, 0.01)
    assert s.step == 2
    for i, start in enumerate([0.5, -1.5]):
        assert p.data[i] == pytest.approx(scalar_adam(start, [g[i] for g in gs], 0.01), abs=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.adam_step([leaf([1.0, 2.0])], [np.zeros(3)], ad.AdamState(), 1e-3)


def test_non_finite_values_rejected():
    with pytest.raises(FloatingPointError):
        Tensor([np.nan])
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        ad.mul(Tensor([1e300]), Tensor([1e300]))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"w": rng.normal(size=(2, 3)), "scalar": np.array(1.5), "büas": rng.normal(size=4)}
    path = tmp_path / "ck.bin"
    ad.save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"QUAD"
    assert int.from_bytes(raw[8:12], "little") == 3
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        ad.parse_tensors(b"NOPE" + bytes(8))


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-30, 30))


@settings(max_examples=200, deadline=None)
@given(finite_rows, st.floats(-50, 50))
def test_softmax_rows_are_distributions_and_shift_invariant(x, c):
    p = ad.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-9)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(ad.softmax_rows(Tensor(x + c)).data, p, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-8, 8)),
       arrays(np.float64, (3, 5), elements=st.floats(-8, 8)))
def test_cross_entropy_gibbs(logits, target_logits):
    p = ad.softmax_rows(Tensor(target_logits)).data
    entropy = -np.mean(np.sum(p * np.log(np.maximum(p, 1e-9)), axis=1))
    assert ad.cross_entropy_soft(Tensor(logits), p).item() >= entropy - 1e-9
    assert ad.cross_entropy_soft(Tensor(target_logits), p).item() == pytest.approx(entropy, abs=1e-6)


def test_determinism_of_training_steps():
    def run():
        rng = np.random.default_rng(5)
        w = leaf(rng.normal(size=(4, 3)))
        x = rng.normal(size=(8, 4))
        s = ad.AdamState()
        for _ in range(5):
            ad.zero_grads([w])
            ad.backward(ad.cross_entropy_soft(ad.matmul(Tensor(x), w), np.full((8, 3), 1 / 3)))
            ad.adam_step([w], [w.grad], s, 0.01)
        return w.data.tobytes()

    assert run() == run()
