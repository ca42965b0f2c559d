import numpy as np
import pytest

from fragmix import tensor_core as tc
from fragmix.errors import ConfigError, DimensionError
from fragmix.nn import MLP, Adam, Dropout, Linear, Module, dropout_context, grad_norm


class TwoLayers(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = MLP(3, 5, 2, rng, dropout=0.5)
        self.second = Linear(2, 1, rng, bias=False)

    def forward(self, x):
        return self.second(self.first(x))


def test_parameters_are_named_by_path(rng):
    model = TwoLayers(rng)
    names = [name for name, _ in model.named_parameters()]
    assert "first.layers.0.weight" in names
    assert "second.weight" in names
    assert "second.bias" not in names
    assert model.n_parameters() == 3 * 5 + 5 + 5 * 2 + 2 + 2


def test_state_dict_round_trip(rng):
    model = TwoLayers(rng)
    state = model.state_dict()
    other = TwoLayers(np.random.default_rng(99))
    other.load_state_dict(state)
    x = rng.standard_normal((4, 3))
    model.eval(), other.eval()
    np.testing.assert_allclose(model(x).data, other(x).data)


def test_state_dict_mismatch_is_rejected(rng):
    model = TwoLayers(rng)
    state = model.state_dict()
    state.pop("second.weight")
    with pytest.raises(ConfigError):
        model.load_state_dict(state)
    state = model.state_dict()
    state["second.weight"] = np.zeros((3, 1))
    with pytest.raises(DimensionError):
        model.load_state_dict(state)


def test_dropout_follows_context(rng):
    model = TwoLayers(rng)
    assert model.index_dropout_sites() == 1
    x = rng.standard_normal((16, 3))
    with dropout_context(5, 1):
        a = model(x).data
    with dropout_context(5, 1):
        b = model(x).data
    with dropout_context(5, 2):
        c = model(x).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    model.eval()
    np.testing.assert_array_equal(model(x).data, model(x).data)


def test_dropout_rate_is_validated():
    with pytest.raises(ConfigError):
        Dropout(1.0)


def test_adam_first_step_moves_by_learning_rate():
    p = Linear(1, 1, np.random.default_rng(0), bias=False).weight
    p.grad = np.array([[3.0]])
    before = p.data.copy()
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(before - p.data, [[0.1]], rtol=1e-6)


def test_adam_fits_least_squares(rng):
    x = rng.standard_normal((200, 2))
    y = x @ np.array([[2.0], [-1.0]]) + 0.5
    layer = Linear(2, 1, rng)
    opt = Adam(layer.parameters(), lr=0.05)
    for _ in range(1500):
        opt.zero_grad()
        err = layer(x) - y
        (err * err).mean().backward()
        opt.step()
    np.testing.assert_allclose(layer.weight.data.ravel(), [2.0, -1.0], atol=1e-2)
    np.testing.assert_allclose(layer.bias.data, [0.5], atol=1e-2)


def test_grad_norm(rng):
    layer = Linear(2, 2, rng)
    layer.weight.grad = np.full((2, 2), 1.0)
    layer.bias.grad = np.zeros(2)
    assert grad_norm(layer.parameters()) == pytest.approx(2.0)


def test_three_layer_mlp_gradcheck(rng):
    mlp = MLP(4, 6, 3, rng, n_layers=3)
    x = rng.standard_normal((5, 4))
    assert tc.gradcheck(mlp, [x]) < 1e-6


def test_adam_with_zero_learning_rate_keeps_parameters(rng):
    model = TwoLayers(rng)
    before = model.state_dict()
    opt = Adam(model.parameters(), lr=0.0)
    for step in range(3):
        opt.zero_grad()
        with dropout_context(0, step):
            (model(rng.standard_normal((4, 3))) ** 2).sum().backward()
        opt.step()
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[name])
