import numpy as np
import pytest

from fragmix import tensor_core as tc
from fragmix.errors import DimensionError, SymmetryError
from fragmix.tensor_core import Tensor


def test_product_gradient_is_other_factor(rng):
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data)


def test_product_gradient_matches_finite_differences(rng):
    b = rng.standard_normal((3, 3))
    assert tc.gradcheck(lambda a: (a * b).sum(), [rng.standard_normal((3, 3))]) < 1e-6


@pytest.mark.parametrize("name,fn", [
    ("exp", tc.exp),
    ("log", lambda x: tc.log(x * x + 1.0)),
    ("sqrt", lambda x: tc.sqrt(x * x + 1.0)),
    ("sigmoid", tc.sigmoid),
    ("silu", tc.silu),
    ("power", lambda x: tc.power(x * x + 1.0, -0.5)),
    ("div", lambda x: x / (x * x + 2.0)),
    ("softmax", lambda x: tc.softmax(x, axis=-1)),
    ("log_softmax", lambda x: tc.log_softmax(x, axis=0)),
    ("logsumexp", lambda x: tc.logsumexp(x, axis=1)),
    ("mean", lambda x: x.mean(axis=0)),
    ("transpose", lambda x: x.T * tc.as_tensor(np.arange(8.0).reshape(4, 2))),
    ("reshape", lambda x: x.reshape(4, 2) * x.reshape(4, 2)),
    ("getitem", lambda x: x[:, 1:3] * x[:, :2]),
    ("concat", lambda x: tc.concat([x, x * x], axis=1)),
    ("matmul", lambda x: x @ x.T),
    ("scatter_add", lambda x: tc.scatter_add(x.T, np.array([0, 2, 2, 1]), 3)),
])
def test_jacobian_vector_products(rng, name, fn):
    assert tc.gradcheck(fn, [rng.standard_normal((2, 4))]) < 1e-6, name


def test_layer_norm_gradient(rng):
    err = tc.gradcheck(lambda x, w, b: tc.layer_norm(x, w, b), [rng.standard_normal((3, 5)),
                                                                rng.standard_normal(5), rng.standard_normal(5)])
    assert err < 1e-6


def test_broadcast_gradient_is_reduced(rng):
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)
    (x + bias).sum().backward()
    np.testing.assert_allclose(bias.grad, np.full(3, 4.0))


def test_mismatched_shapes_raise():
    with pytest.raises(DimensionError):
        tc.add(np.zeros((2, 3)), np.zeros(4))
    with pytest.raises(DimensionError):
        tc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with tc.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y.is_leaf


def test_shared_subexpression_accumulates(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4.0 * x.data)


def test_sym_eig_reconstructs(rng):
    m = rng.standard_normal((8, 8))
    a = m + m.T
    values, vectors = tc.sym_eig(a)
    v, lam = vectors.data, values.data
    assert np.all(np.diff(lam) >= 0)
    assert np.linalg.norm(v @ np.diag(lam) @ v.T - a) < 1e-8
    np.testing.assert_allclose(v.T @ v, np.eye(8), atol=1e-10)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(SymmetryError):
        tc.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eig_gradient(rng):
    m = rng.standard_normal((4, 4))
    start = np.diag([1.0, 2.0, 4.0, 7.0]) + 0.1 * (m + m.T)

    def fn(a):
        values, vectors = tc.sym_eig((a + a.T) * 0.5)
        return values * values + (vectors * vectors * tc.as_tensor(np.arange(16.0).reshape(4, 4))).sum(axis=0)
    assert tc.gradcheck(fn, [start]) < 1e-6


def test_dropout_masks_are_keyed():
    first = tc.dropout_keep_mask((64, 64), 0.25, seed=3, step=7, op_id=1)
    again = tc.dropout_keep_mask((64, 64), 0.25, seed=3, step=7, op_id=1)
    other = tc.dropout_keep_mask((64, 64), 0.25, seed=3, step=8, op_id=1)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
    assert abs(first.mean() - 0.75) < 0.05


def test_dropout_is_identity_in_eval(rng):
    x = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(tc.dropout(x, 0.5, (0, 0, 0), training=False).data, x)
