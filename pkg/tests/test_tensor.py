import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reo import tensor as T
from reo.tensor import Tensor, finite_diff_check


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def naive_attention(q, k, v, heads):
    nq, c = q.shape
    dh = c // heads
    out = np.zeros((nq, c))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(nq):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(k.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for j in range(k.shape[0]):
                out[i, sl] += w[j] * v[j, sl]
    return out


def naive_conv(x, w, stride, dilation, pad):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                for a in range(k):
                    for b in range(k):
                        out[o, i, j] += (w[o, :, a, b] * xp[:, i * stride + a * dilation, j * stride + b * dilation]).sum()
    return out


class TestLinear:
    def test_identity(self):
        x = Tensor(np.eye(2))
        y = T.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, np.eye(2))

    def test_zero_input_broadcasts_bias(self):
        b = Tensor([1.5, -2.0])
        y = T.linear(Tensor(np.zeros((3, 4))), Tensor(np.ones((4, 2))), b)
        np.testing.assert_array_equal(y.data, np.tile([1.5, -2.0], (3, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))

    def test_gradients_3x4(self):
        rng = np.random.default_rng(0)
        x, w, b = rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)
        rep = finite_diff_check(lambda: (T.linear(x, w, b) ** 2).sum(), [x, w, b])
        assert rep.max_rel_err < 1e-3


class TestSoftmax:
    def test_equal_logits(self):
        out = T.softmax(Tensor([2.0, 2.0, 2.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_dominance(self):
        with T.precision(np.float64):
            out = T.softmax(Tensor([30.0, 0.0, 0.0])).data
        assert abs(out[0] - 1) < 1e-9 and out[1] < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-20, 20))
    def test_shift_invariance_and_rows_sum_to_one(self, seed, c):
        x = np.random.default_rng(seed).uniform(-50, 50, (4, 7))
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
        assert (a >= 0).all()


class TestCrossAttention:
    def test_single_key(self):
        rng = np.random.default_rng(1)
        q, kv = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((1, 8)))
        w, b = Tensor(rng.standard_normal((8, 8))), Tensor(rng.standard_normal(8))
        out = T.cross_attention(q, kv, kv, 2, w, b).data
        expected = kv.data @ w.data + b.data
        np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), rtol=1e-5, atol=1e-5)

    def test_identical_keys_give_mean_of_values(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.standard_normal((3, 8)))
        k = Tensor(np.tile(rng.standard_normal(8), (6, 1)))
        v = Tensor(rng.standard_normal((6, 8)))
        out, weights = T.cross_attention(q, k, v, 4, return_weights=True)
        np.testing.assert_allclose(weights.data, 1 / 6, atol=1e-6)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(0), (3, 1)), atol=1e-5)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal(s) for s in [(4, 8), (6, 8), (6, 8)])
        out = T.cross_attention(Tensor(q), Tensor(k), Tensor(v), 2).data
        np.testing.assert_allclose(out, naive_attention(q, k, v, 2), atol=1e-5)

    def test_heads_must_divide(self):
        x = Tensor(np.zeros((2, 6)))
        with pytest.raises(T.ConfigError):
            T.cross_attention(x, x, x, 4)

    def test_convex_hull_single_head(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((5, 3))
        out = T.cross_attention(Tensor(rng.standard_normal((7, 3))), Tensor(rng.standard_normal((5, 3))),
                                Tensor(v), 1).data
        assert (out <= v.max(0) + 1e-6).all() and (out >= v.min(0) - 1e-6).all()

    def test_gradients(self):
        rng = np.random.default_rng(5)
        q, k, v, w = rand(rng, 4, 8), rand(rng, 6, 8), rand(rng, 6, 8), rand(rng, 8, 8)
        b = rand(rng, 8)
        rep = finite_diff_check(lambda: (T.cross_attention(q, k, v, 2, w, b) ** 2).sum(), [q, k, v, w, b])
        assert rep.max_rel_err < 1e-3


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((3, 5, 6))
        kern = np.zeros((3, 3, 1, 1))
        kern[np.arange(3), np.arange(3)] = 1
        out = T.conv2d(Tensor(x), Tensor(kern)).data
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_constant_field(self):
        out = T.conv2d(Tensor(np.full((1, 6, 6), 2.5)), Tensor(np.ones((1, 1, 3, 3)))).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * 2.5)

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 2)])
    def test_matches_naive(self, stride, dilation):
        rng = np.random.default_rng(stride * 10 + dilation)
        x, w = rng.standard_normal((2, 7, 8)), rng.standard_normal((3, 2, 3, 3))
        pad = dilation
        out = T.conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation, pad=pad).data
        np.testing.assert_allclose(out, naive_conv(x, w, stride, dilation, pad), atol=1e-4)

    def test_bad_config(self):
        x, w = Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(T.ConfigError):
            T.conv2d(x, w, stride=0)
        with pytest.raises(T.ConfigError):
            T.conv2d(x, Tensor(np.zeros((1, 1, 2, 2))))

    def test_gradients_2x5x5(self):
        rng = np.random.default_rng(6)
        x, w, b = rand(rng, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 3)
        for stride, dil in [(1, 1), (2, 1), (1, 2)]:
            rep = finite_diff_check(lambda: (T.conv2d(x, w, b, stride=stride, dilation=dil) ** 2).sum(),
                                    [x, w, b])
            assert rep.max_rel_err < 1e-3, (stride, dil, rep)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_zero_times_f(self):
        x = Tensor(np.random.default_rng(0).standard_normal(4), requires_grad=True)
        (T.exp(x).sum() * 0.0).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(x * 2)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_graph_visits_each_node_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2
        loss = (y + y * y).sum()
        g = T.Graph.from_output(loss)
        assert len(g.nodes) == len({id(n) for n in g.nodes})
        assert g.leaves() == [x]

    def test_nan_is_an_error(self):
        with pytest.raises(T.NumericError):
            T.log(Tensor([-1.0]))

    def test_determinism(self):
        rng = np.random.default_rng(9)
        x, w = rng.standard_normal((16, 8)), rng.standard_normal((8, 8))
        a = T.softmax(T.linear(Tensor(x), Tensor(w))).data
        b = T.softmax(T.linear(Tensor(x), Tensor(w))).data
        assert a.tobytes() == b.tobytes()


class TestFiniteDiff:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        rep = finite_diff_check(lambda: (x * x).sum(), [x])
        assert rep.max_rel_err < 1e-6
        x.grad = None
        with T.precision(np.float64):
            (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_constant(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        rep = finite_diff_check(lambda: (x * 0.0).sum() + 4.0, [x])
        assert rep.max_rel_err == 0.0

    def test_smooth_l1_kink_excluded(self):
        from reo.losses import smooth_l1
        x = Tensor([0.3, 1.0005, -1.0, 2.0, -0.5], requires_grad=True)
        target = np.zeros(5)
        rep = finite_diff_check(lambda: smooth_l1(x, target), [x],
                                kink_distance=lambda pi, j: abs(abs(x.data[j]) - 1.0))
        assert rep.n_excluded == 2 and rep.n_checked == 3
        assert rep.max_rel_err < 1e-3


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.exp(b) + 0.5),
    "matmul": lambda a, b: a @ b.T,
    "exp": lambda a, b: T.exp(a * 0.3),
    "log": lambda a, b: T.log(a * a + 1.0),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "tanh": lambda a, b: T.tanh(a),
    "softplus": lambda a, b: T.softplus(a),
    "gelu": lambda a, b: T.gelu(a),
    "softmax": lambda a, b: T.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: T.log_softmax(a, axis=0) * b,
    "logsumexp": lambda a, b: T.logsumexp(a, axis=-1),
    "mean": lambda a, b: T.mean(a * b, axis=0),
    "max": lambda a, b: T.max_(a, axis=1),
    "transpose": lambda a, b: T.transpose(a) @ b,
    "getitem": lambda a, b: a[1:, ::2] * b[1:, ::2],
    "concat": lambda a, b: T.concat([a, b * 2], axis=1) ** 2,
    "stack": lambda a, b: T.stack([a, b], axis=0) ** 2,
    "layer_norm": lambda a, b: T.layer_norm(a, b[0], b[1]) ** 2,
    "upsample": lambda a, b: T.upsample2x(a) ** 2,
}


def _row_gap(a, pi, j):
    # distance from coordinate j to the runner-up of its row (max kink)
    if pi != 0:
        return np.inf
    row = a.data[j // a.shape[1]]
    top = np.sort(row)[-2:]
    return top[1] - top[0]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_seeds(name):
    fn = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)

        def loss():
            out = fn(a, b)
            return (out * Tensor(np.linspace(0.5, 1.5, out.size).reshape(out.shape))).sum()

        kink = (lambda pi, j: _row_gap(a, pi, j)) if name == "max" else None
        rep = finite_diff_check(loss, [a, b], kink_distance=kink)
        worst = max(worst, rep.max_rel_err)
    assert worst < 1e-3, (name, worst)
