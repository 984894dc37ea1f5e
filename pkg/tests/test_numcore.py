import zlib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from q2l import numcore as nc
from q2l.numcore import Tensor

from conftest import check_grad


def test_matmul_identity_and_hand_case():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nc.matmul(Tensor(np.eye(2)), m).data, m.data)
    out = nc.matmul(m, Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, np.log(2.0)]), 0).data, [1 / 3, 2 / 3], rtol=1e-6)
    with pytest.raises(ValueError):
        nc.softmax(Tensor([1.0, 2.0]), axis=1)


def test_softmax_large_inputs_stay_finite():
    out = nc.softmax(Tensor([1000.0, 1001.0]), 0).data
    assert np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance_and_simplex(xs, c):
    with nc.default_dtype(np.float64):
        a = nc.softmax(Tensor(xs), 0).data
        b = nc.softmax(Tensor(np.asarray(xs) + c), 0).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1) < 1e-6
    assert np.all((a >= 0) & (a <= 1))


def test_layer_norm_examples(rng):
    one, zero = Tensor([1.0]), Tensor([0.0])
    out = nc.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])
    const = nc.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.full(3, 0.25)), eps=1e-5)
    np.testing.assert_allclose(const.data, 0.25)
    x = Tensor(rng.normal(size=(10, 16)))
    y = nc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.all(np.abs(y.data.mean(axis=1)) < 1e-6)
    with pytest.raises(ValueError):
        nc.layer_norm(Tensor(np.ones((2, 3))), one, zero)


def test_backward_examples():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    nc.backward(nc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x = Tensor([1.0, 2.0], requires_grad=True)
    nc.backward(nc.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        nc.backward(x * 2.0)
    with pytest.raises(RuntimeError):
        nc.backward(nc.sum(Tensor([1.0, 2.0])))


def test_gradients_accumulate_across_fanout_and_calls():
    x = Tensor([3.0], requires_grad=True)
    nc.backward(nc.sum(x * x + x))  # 2x + 1
    np.testing.assert_allclose(x.grad, [7.0])
    nc.backward(nc.sum(x * 2.0))
    np.testing.assert_allclose(x.grad, [9.0])


def test_tape_visits_each_op_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = y + y
    loss = nc.sum(z * y)
    tape = nc.Tape(loss)
    assert len(tape) == len({id(n) for n in tape.nodes}) == 4
    position = {id(t): i for i, t in enumerate(tape.tensors)}
    for t in tape.tensors:
        if t._node is not None:
            assert all(position[id(i)] < position[id(t)] for i in t._node.inputs if i.requires_grad)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_debug_mode_flags_nan():
    with nc.debug_mode(True), pytest.raises(FloatingPointError):
        nc.log(Tensor([-1.0]))


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with nc.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        nc.set_default_dtype(np.int32)


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = (Tensor(rng.normal(size=s)) for s in ((4, 5), (5, 3), (3, 6)))
        left = nc.matmul(nc.matmul(a, b), c).data
        right = nc.matmul(a, nc.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-5)


def test_forward_determinism(rng):
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    r1 = nc.softmax(nc.matmul(Tensor(a), Tensor(b)), -1).data
    r2 = nc.softmax(nc.matmul(Tensor(a), Tensor(b)), -1).data
    assert r1.tobytes() == r2.tobytes()


def test_patchify_layout():
    img = np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3)
    out = nc.patchify(Tensor(img), 2).data
    assert out.shape == (2, 2, 2, 12)
    np.testing.assert_array_equal(out[1, 0, 1], img[1, 0:2, 2:4, :].reshape(-1))
    with pytest.raises(ValueError):
        nc.patchify(Tensor(np.zeros((1, 5, 4, 3))), 2)


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 5, 2))
    for n in range(2):
        for i in range(4):
            for j in range(5):
                ref[n, i, j] = np.einsum("abc,abco->o", xp[n, i : i + 3, j : j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_concat_and_slice_errors():
    with pytest.raises(ValueError):
        nc.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)
    with pytest.raises(ValueError):
        Tensor(np.ones(3))[5:]


# -- finite-difference gradient suite (64-bit, rtol 1e-5) ---------------------

N_TRIALS = 20


def _shapes(rng):
    return tuple(int(v) for v in rng.integers(1, 4, size=2))


GRAD_CASES = {
    "add": (lambda a, b: a + b, lambda r, s: [r.normal(size=s), r.normal(size=s[1:])]),
    "sub": (lambda a, b: a - b, lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    "mul": (lambda a, b: a * b, lambda r, s: [r.normal(size=s), r.normal(size=(1, s[1]))]),
    "div": (lambda a, b: a / b, lambda r, s: [r.normal(size=s), r.uniform(0.5, 2.0, size=s)]),
    "scalar_ops": (lambda a: (a * 3.0 - 1.5) / 2.0 + 0.25, lambda r, s: [r.normal(size=s)]),
    "neg": (lambda a: -a, lambda r, s: [r.normal(size=s)]),
    "power": (lambda a: nc.power(a, 1.7), lambda r, s: [r.uniform(0.5, 2.0, size=s)]),
    "exp": (nc.exp, lambda r, s: [r.normal(size=s)]),
    "log": (nc.log, lambda r, s: [r.uniform(0.5, 3.0, size=s)]),
    "sqrt": (nc.sqrt, lambda r, s: [r.uniform(0.5, 3.0, size=s)]),
    "sigmoid": (nc.sigmoid, lambda r, s: [r.normal(size=s)]),
    "tanh": (nc.tanh, lambda r, s: [r.normal(size=s)]),
    "relu": (nc.relu, lambda r, s: [r.choice([-1, 1], size=s) * r.uniform(0.1, 2.0, size=s)]),
    "clip": (lambda a: nc.clip(a, -0.5, 0.5),
             lambda r, s: [r.choice([-1, 1], size=s) * r.choice([0.2, 1.0], size=s) + r.uniform(-0.05, 0.05, s)]),
    "matmul": (nc.matmul, lambda r, s: [r.normal(size=s), r.normal(size=(s[1], 3))]),
    "matmul_batched_shared": (nc.matmul, lambda r, s: [r.normal(size=(2,) + s), r.normal(size=(s[1], 2))]),
    "matmul_batched": (nc.matmul, lambda r, s: [r.normal(size=(2,) + s), r.normal(size=(2, s[1], 2))]),
    "transpose": (lambda a: nc.transpose(a, (1, 0)), lambda r, s: [r.normal(size=s)]),
    "reshape": (lambda a: nc.reshape(a, (-1,)), lambda r, s: [r.normal(size=s)]),
    "getitem": (lambda a: a[:, :1], lambda r, s: [r.normal(size=s)]),
    "getitem_fancy": (lambda a: a[np.array([0, 0]), :], lambda r, s: [r.normal(size=s)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=1), lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    "stack": (lambda a, b: nc.stack([a, b], axis=0), lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    "sum": (lambda a: nc.sum(a, axis=0), lambda r, s: [r.normal(size=s)]),
    "mean": (lambda a: nc.mean(a, axis=(0, 1), keepdims=True), lambda r, s: [r.normal(size=s)]),
    "softmax": (lambda a: nc.softmax(a, -1), lambda r, s: [r.normal(size=s)]),
    "layer_norm": (lambda a, g, b: nc.layer_norm(a, g, b, 1e-5),
                   lambda r, s: [r.normal(size=(s[0], s[1] + 3)), r.normal(size=s[1] + 3), r.normal(size=s[1] + 3)]),
    "max_pool2d": (nc.max_pool2d, lambda r, s: [r.permutation(8 * s[0] * s[1]).reshape(1, 2 * s[0], 2 * s[1], 2) / 4.0]),
    "conv2d": (nc.conv2d, lambda r, s: [r.normal(size=(1,) + s + (2,)), r.normal(size=(3, 3, 2, 2)), r.normal(size=2)]),
    "patchify": (lambda a: nc.patchify(a, 2), lambda r, s: [r.normal(size=(1, 2 * s[0], 2 * s[1], 3))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(name):
    build, make = GRAD_CASES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(N_TRIALS):
        check_grad(build, make(r, _shapes(r)), rtol=1e-5, atol=1e-8)


def test_composite_graph_gradient(rng):
    def build(x, w, g, b):
        h = nc.tanh(nc.matmul(x, w))
        h = nc.layer_norm(h + 0.1, g, b)
        att = nc.softmax(nc.matmul(h, nc.transpose(h, (1, 0))) * 0.5, -1)
        return nc.sigmoid(nc.matmul(att, h)) * nc.log(nc.exp(h) + 1.0)

    for _ in range(5):
        check_grad(build, [rng.normal(size=(3, 6)), 0.5 * rng.normal(size=(6, 6)),
                           rng.normal(size=6), rng.normal(size=6)], rtol=1e-5, atol=1e-8)


def test_serialization_round_trip(tmp_path, rng):
    for dtype in (np.float32, np.float64):
        t = Tensor(rng.normal(size=(3, 1, 4)).astype(dtype))
        path = tmp_path / f"t_{np.dtype(dtype).name}.bin"
        nc.save_tensor(path, t)
        raw = path.read_bytes()
        assert raw[:4] == b"Q2LT"
        assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [1, 3, 3, 1]
        back = nc.load_tensor(path)
        assert back.dtype == dtype and back.data.tobytes() == t.data.tobytes()


def test_serialization_rejects_garbage():
    with pytest.raises(nc.FormatError):
        nc.tensor_from_bytes(b"XXXX" + bytes(12))
    good = nc.tensor_to_bytes(Tensor(np.ones((2, 2))))
    with pytest.raises(nc.FormatError):
        nc.tensor_from_bytes(good[:-3])
