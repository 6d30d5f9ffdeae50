import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcmesh import autodiff as ad
from vcmesh.autodiff import Parameter, Tensor, backward, grad_check
from vcmesh.errors import InputError


def test_elu_values():
    out = ad.elu(Tensor(np.array([-1.0, 0.0, 2.0]))).data
    np.testing.assert_allclose(out, [np.exp(-1) - 1, 0.0, 2.0], rtol=0, atol=1e-15)


def test_abs_subgradient_at_zero():
    p = Parameter(np.array([0.0, -2.0, 3.0]))
    backward(ad.reduce_sum(ad.absolute(p)))
    assert p.grad.tolist() == [0.0, -1.0, 1.0]


def test_gradients_accumulate():
    p = Parameter(np.array([1.5, -0.5]))
    backward(ad.reduce_sum(p * p))
    first = p.grad.copy()
    backward(ad.reduce_sum(p * p))
    np.testing.assert_array_equal(p.grad, 2 * first)
    p.zero_grad()
    assert not p.grad.any()


def test_shared_subexpression():
    p = Parameter(np.array(3.0))
    y = p * p
    backward(y * y)  # p**4
    assert p.grad == pytest.approx(4 * 27.0)


def test_quadratic_grad_check():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    p = Parameter(rng.normal(size=(4, 1)))
    assert grad_check(lambda: ad.reduce_sum(p * ad.matmul(Tensor(a), p)), [p]) < 1e-8


def test_grad_check_without_parameters():
    assert grad_check(lambda: Tensor(np.array(1.0)), []) == 0.0


def test_nonscalar_loss_rejected():
    with pytest.raises(InputError):
        backward(Parameter(np.ones(3)) * 2.0)


def test_masked_parameter():
    p = Parameter(np.ones((2, 2)), trainable=np.array([[True, False], [True, True]]))
    assert p.num_trainable == 3 and p.data[0, 1] == 0.0
    backward(ad.reduce_sum(p * 5.0))
    assert p.grad[0, 1] == 0.0 and p.grad[1, 1] == 5.0


def test_einsum_rejects_self_summed_index():
    with pytest.raises(InputError):
        ad.einsum("ij,jk->k", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(InputError):
        ad.einsum("ij", Tensor(np.ones((2, 2))))


def test_gather_bounds():
    with pytest.raises(InputError):
        ad.gather(Tensor(np.ones((3, 2))), np.array([[0, 3]]))


def test_reduce_max_routes_to_first():
    p = Parameter(np.array([[1.0, 3.0, 3.0]]))
    backward(ad.reduce_sum(ad.reduce_max(p, axis=1)))
    assert p.grad.tolist() == [[0.0, 1.0, 0.0]]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n_in=st.integers(1, 12), n=st.integers(1, 8), k=st.integers(1, 5))
def test_gather_scatter_are_adjoint(seed, n_in, n, k):
    rng = np.random.default_rng(seed)
    index = rng.integers(0, n_in, size=(n, k))
    w = rng.normal(size=(n, k))
    x = rng.normal(size=(2, n_in, 3))
    y = rng.normal(size=(2, n, 3))
    # <scatter(y), x> == <y, weighted gather-sum(x)>
    lhs = np.sum(ad.weighted_scatter_add(Tensor(y), Tensor(w), index, n_in).data * x)
    gathered = ad.gather(Tensor(x), index, axis=1).data
    rhs = np.sum(y * np.einsum("bnkc,nk->bnc", gathered, w))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
    # the gather backward is its transpose
    px = Parameter(x)
    g = rng.normal(size=(2, n, k, 3))
    backward(ad.reduce_sum(ad.gather(px, index, axis=1) * g))
    assert abs(np.sum(px.grad * x) - np.sum(g * gathered)) < 1e-10 * max(1.0, abs(np.sum(g * gathered)))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "elu", "sqrt", "concat",
                                "transpose", "mean", "scatter", "einsum"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(1)
    a = Parameter(rng.uniform(0.5, 1.5, size=(3, 4)))
    b = Parameter(rng.uniform(0.5, 1.5, size=(4,)))
    m = Parameter(rng.normal(size=(4, 2)))
    w = Parameter(rng.normal(size=(3, 2)))
    idx = np.array([[0, 1], [2, 2], [4, 0]])
    fns = {
        "add": lambda: a + b,
        "sub": lambda: b - a,
        "mul": lambda: a * b,
        "div": lambda: a / b,
        "matmul": lambda: ad.matmul(a, m),
        "elu": lambda: ad.elu(a - 1.0),
        "sqrt": lambda: ad.sqrt(a),
        "concat": lambda: ad.concat([a, a * 2.0], axis=0),
        "transpose": lambda: ad.transpose(a),
        "mean": lambda: ad.reduce_mean(a, axis=0, keepdims=True),
        "scatter": lambda: ad.weighted_scatter_add(a, w, idx, 5),
        "einsum": lambda: ad.einsum("ij,jk->ik", a, m),
    }
    probe = rng.normal(size=fns[op]().shape)
    assert grad_check(lambda: ad.reduce_sum(fns[op]() * probe), [a, b, m, w]) < 1e-7
