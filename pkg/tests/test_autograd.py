import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bisimlab.autograd import Tensor, concat, linear, where

from conftest import gradcheck

UNARY = {
    "exp": lambda t: t.exp(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "elu": lambda t: t.elu(),
    "relu": lambda t: t.relu(),
    "abs": lambda t: t.abs(),
    "huber": lambda t: t.huber(0.7),
    "square": lambda t: t ** 2,
    "neg": lambda t: -t,
    "clamp": lambda t: t.clamp_max(0.3),
}


def away_from_kinks(x, kinks=(0.0, 0.3, 0.7, -0.7), margin=1e-3):
    for k in kinks:
        x = np.where(np.abs(x - k) < margin, k + margin * 2, x)
    return x


class TestElementwise:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_gradients(self, name, rng):
        x = Tensor(away_from_kinks(rng.normal(size=(4, 3))), requires_grad=True)
        w = rng.normal(size=(4, 3))
        assert gradcheck(lambda: (UNARY[name](x) * Tensor(w)).sum(), [x]) <= 1e-6

    def test_positive_domain_ops(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)
        assert gradcheck(lambda: (x.log() + x.sqrt() + x ** 1.5).sum(), [x]) <= 1e-6

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_binary(self, op, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 1.5, size=(1, 3)), requires_grad=True)
        fn = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
        w = Tensor(rng.normal(size=(4, 3)))
        assert gradcheck(lambda: (fn() * w).sum(), [a, b]) <= 1e-6

    def test_scalar_on_left(self, rng):
        a = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        assert gradcheck(lambda: (2.0 - a + 3.0 / a + 2.0 * a).sum(), [a]) <= 1e-6

    def test_kinks_have_zero_subgradient(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        (x.abs().sum() + x.relu().sum() + x.norm(2, axis=0) + x.sqrt().sum()).backward()
        np.testing.assert_array_equal(x.grad, 0.0)


class TestStructural:
    def test_matmul_and_linear(self, rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 2)))
        assert gradcheck(lambda: ((x @ W + b) * w).sum(), [x, W, b]) <= 1e-6
        assert gradcheck(lambda: (linear(x, W, b) * w).sum(), [x, W, b]) <= 1e-6
        np.testing.assert_allclose(linear(x, W, b).data, x.data @ W.data + b.data)

    def test_indexing_with_repeats(self, rng):
        x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        idx = np.array([0, 0, 3, 1])
        assert gradcheck(lambda: (x[idx] ** 2).sum(), [x]) <= 1e-6

    def test_reshape_transpose_concat(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(10,)))
        assert gradcheck(lambda: (concat([a, b], axis=1).T.reshape(-1) * w).sum(), [a, b]) <= 1e-6

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_reductions(self, axis, keepdims, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=np.sum(x.data, axis=axis, keepdims=keepdims).shape)
        assert gradcheck(lambda: (x.sum(axis=axis, keepdims=keepdims) * Tensor(w)).sum(), [x]) <= 1e-6
        assert gradcheck(lambda: (x.mean(axis=axis, keepdims=keepdims) * Tensor(w)).sum(), [x]) <= 1e-6

    @pytest.mark.parametrize("q", [1, 2])
    def test_norms(self, q, rng):
        x = Tensor(away_from_kinks(rng.normal(size=(4, 3))), requires_grad=True)
        assert gradcheck(lambda: (x.norm(q, axis=1) * Tensor([1.0, -2.0, 0.5, 3.0])).sum(), [x]) <= 1e-6

    def test_unsupported_norm(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(2)).norm(3)

    def test_where(self, rng):
        a = Tensor(rng.normal(size=4), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        cond = np.array([True, False, True, False])
        assert gradcheck(lambda: (where(cond, a, b) ** 2).sum(), [a, b]) <= 1e-6

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y * x).sum().backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [4.0 + 12.0])

    def test_constants_do_not_track(self):
        out = Tensor(np.ones(2)) * 3.0
        assert not out.requires_grad and out._parents == ()

    def test_backward_needs_scalar(self):
        with pytest.raises(ValueError):
            (Tensor(np.ones(2), requires_grad=True) * 2.0).backward()

    def test_detach_cuts_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        (x.detach() * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


@given(seed=st.integers(0, 2 ** 32 - 1), rows=st.integers(1, 5), cols=st.integers(1, 5))
def test_random_composite_graph(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
    W = Tensor(rng.normal(size=(cols, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)

    def loss():
        h = linear(x, W, b).tanh()
        return (h.sigmoid() * h).mean() + (h ** 2).sum(axis=0).exp().mean() * 0.01

    assert gradcheck(loss, [x, W, b]) <= 1e-5
