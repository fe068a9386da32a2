import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ezvsl import tensor as T
from ezvsl.tensor import DimensionError, GraphError, Tensor

from oracles import central_diff, conv2d_loops, cosine_loop, rel_error


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestConv2d:
    def test_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding), atol=1e-12)

    def test_output_size(self):
        out = T.conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 4, 32, 32)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="channel"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError, match="H, W"):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_all_negative_zero_grad(self):
        x = leaf(-np.arange(1, 6, dtype=float))
        y = T.relu(x)
        T.tsum(y).backward()
        assert not y.data.any()
        assert not x.grad.any()

    def test_relu_tie_rule(self):
        x = leaf([0.0, 1.0])
        T.tsum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
    def test_relu_oracle(self, a):
        np.testing.assert_array_equal(T.relu(Tensor(a)).data, [max(v, 0.0) for v in a])


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_arithmetic(self):
        out = T.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 3.0])

    def test_batching_consistency(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
        batched = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(5):
            np.testing.assert_allclose(batched[i], T.linear(Tensor(x[i]), Tensor(w), Tensor(b)).data, atol=1e-14)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestCosine:
    def test_equal(self):
        assert T.cosine_sim(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert T.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_diag(self):
        assert T.cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(0.70710678, abs=1e-8)

    def test_zero_vectors_floor(self):
        u = leaf([0.0, 0.0])
        v = leaf([0.0, 0.0])
        s = T.cosine_sim(u, v)
        assert s.item() == 0.0
        s.backward()
        assert np.isfinite(u.grad).all() and np.isfinite(v.grad).all()

    @given(
        arrays(np.float64, 4, elements=st.floats(-10, 10)),
        arrays(np.float64, 4, elements=st.floats(-10, 10)),
    )
    def test_oracle_and_range(self, u, v):
        s = T.cosine_sim(Tensor(u), Tensor(v)).item()
        assert s == pytest.approx(cosine_loop(u, v), abs=1e-12)
        assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


class TestSpatialMax:
    def test_constant_first_occurrence(self):
        vals, idx = T.spatial_max(Tensor(np.full((2, 3, 3), 4.0)))
        np.testing.assert_array_equal(vals.data, [4.0, 4.0])
        np.testing.assert_array_equal(idx, [[0, 0], [0, 0]])

    def test_one_hot(self):
        x = np.zeros((1, 4, 5))
        x[0, 2, 3] = 7.0
        vals, idx = T.spatial_max(Tensor(x))
        assert vals.data[0] == 7.0
        assert tuple(idx[0]) == (2, 3)

    def test_linear_scan_oracle(self):
        x = np.random.default_rng(3).normal(size=(5, 4, 6))
        vals, idx = T.spatial_max(Tensor(x))
        for c in range(5):
            best, where = -np.inf, None
            for y in range(4):
                for z in range(6):
                    if x[c, y, z] > best:
                        best, where = x[c, y, z], (y, z)
            assert vals.data[c] == best
            assert tuple(idx[c]) == where

    def test_gradient_mass_at_argmax(self):
        x = leaf(np.random.default_rng(4).normal(size=(3, 4, 4)))
        vals, idx = T.spatial_max(x)
        T.tsum(vals).backward()
        for c in range(3):
            assert x.grad[c].sum() == 1.0
            assert x.grad[c][tuple(idx[c])] == 1.0


class TestBackward:
    def test_sum(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = leaf([1.0, -2.0, 3.0])
        T.tsum(x * x).backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_non_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_double_backward(self):
        x = leaf([1.0, 2.0])
        loss = T.tsum(x * x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_shared_subgraph_visited_once(self):
        x = leaf([2.0])
        y = x * 3.0
        loss = T.tsum(y * y + y)
        loss.backward()
        # d/dx (9x^2 + 3x) = 18x + 3
        np.testing.assert_allclose(x.grad, [39.0])

    def test_forward_determinism(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        a = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        c = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        assert a.tobytes() == c.tobytes()


def _check_op_gradient(build, inputs, seed):
    """Random scalar projection of ``build(*inputs)`` versus central differences."""
    rng = np.random.default_rng(seed)
    tensors = [leaf(a) for a in inputs]
    out = build(*tensors)
    proj = rng.normal(size=out.shape)
    T.tsum(out * Tensor(proj)).backward()

    def f():
        return float((build(*[Tensor(t.data) for t in tensors]).data * proj).sum())

    for t in tensors:
        num = central_diff(f, t.data)
        assert rel_error(t.grad.ravel(), [num[i] for i in range(t.data.size)]) < 1e-4


OPS = {
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_rect": (lambda x, w, b: T.conv2d(x, w, b, stride=(1, 2), padding=(0, 1)), [(2, 3, 1, 7), (2, 3, 1, 3), (2,)]),
    "relu": (T.relu, [(4, 5)]),
    "linear": (T.linear, [(3, 4), (2, 4), (2,)]),
    "cosine": (T.cosine_sim, [(3, 5), (3, 5)]),
    "spatial_max": (lambda x: T.spatial_max(x)[0], [(3, 4, 4)]),
    "spatial_avg": (T.spatial_avg, [(3, 4, 4)]),
    "exp": (T.exp, [(6,)]),
    "mul": (T.mul, [(3, 4), (4,)]),
    "div": (T.div, [(3, 4), (3, 1)]),
    "matmul": (T.matmul, [(2, 3, 4), (4, 5)]),
    "log_softmax": (lambda x: T.log_softmax(x, axis=1), [(3, 5)]),
    "normalize": (lambda x: T.normalize(x, axis=0), [(4, 3)]),
    "add": (T.add, [(3, 4), (4,)]),
    "sub": (T.sub, [(3, 1), (3, 4)]),
    "tsum": (lambda x: T.tsum(x, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda x: T.mean(x, axis=0), [(3, 4)]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), [(3, 4)]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    "index": (lambda x: x[np.array([0, 2, 2]), np.array([1, 0, 1])], [(3, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [(3, 2), (3, 2)]),
    "amax": (lambda x: T.amax(x, axis=1)[0], [(4, 5)]),
    "l2norm": (lambda x: T.l2norm(x, axis=1), [(3, 4)]),
    "logsumexp": (lambda x: T.logsumexp(x, axis=0), [(4, 3)]),
    "softmax": (lambda x: T.softmax(x, axis=1), [(3, 5)]),
    "log": (lambda x: T.log(T.add(T.mul(x, x), 0.5)), [(5,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients(name, seed):
    build, shapes = OPS[name]
    rng = np.random.default_rng(100 + seed)
    inputs = [rng.normal(size=s) for s in shapes]
    if name == "div":
        inputs[1] = np.abs(inputs[1]) + 0.5
    _check_op_gradient(build, inputs, seed)


def test_log_gradient():
    _check_op_gradient(T.log, [np.random.default_rng(0).uniform(0.5, 2.0, size=5)], 0)


def test_composed_conv_relu_linear_cosine():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 6, 6))
    params = [rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=4)]
    target = rng.normal(size=4)

    def loss_of(w, b, lw, lb):
        h = T.relu(T.conv2d(Tensor(x), w, b, stride=1, padding=1))
        feat = T.spatial_avg(T.reshape(h, (3, 6, 6)))
        return T.cosine_sim(T.linear(feat, lw, lb), Tensor(target))

    tensors = [leaf(p) for p in params]
    loss_of(*tensors).backward()
    for t in tensors:
        num = central_diff(lambda: loss_of(*[Tensor(q.data) for q in tensors]).item(), t.data)
        assert rel_error(t.grad.ravel(), list(num.values())) < 1e-4
