import math
from pathlib import Path

import numpy as np
import pytest

from fragmix import synth
from fragmix import tensor_core as tc
from fragmix.encoder import TokenMeanEncoder
from fragmix.errors import DegenerateFeaturesError, DimensionError, NumericalFailureError
from fragmix.models import RunConfig, SpibConfig
from fragmix.nn import MLP
from fragmix.objectives import (SpibModel, assign_states, compact_labels, kmeans, refine_labels, spib_loss,
                                spib_terms, vamp2_from_covariances, vamp2_score)
from fragmix.pipeline import embed, split, train_spib

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _chain_covariances(with_constant=False):
    """Exact covariances of one-hot features of the symmetric two-state chain at one step"""
    pi = np.array([0.5, 0.5])
    t = np.array([[0.9, 0.1], [0.1, 0.9]])
    feats = np.eye(2)
    if with_constant:
        feats = np.hstack([feats, np.ones((2, 1))])
    mean = pi @ feats
    centred = feats - mean
    c00 = centred.T @ np.diag(pi) @ centred
    c0t = centred.T @ (np.diag(pi) @ t) @ centred
    return c00, c0t, c00


def test_two_state_chain_oracle():
    assert vamp2_from_covariances(*_chain_covariances()).item() == pytest.approx(1.64, abs=1e-10)


def test_constant_column_is_absorbed():
    assert vamp2_from_covariances(*_chain_covariances(True)).item() == pytest.approx(1.64, abs=1e-10)


def test_identical_lag_gives_k_plus_one(rng):
    f = rng.standard_normal((500, 3))
    assert vamp2_score(f, f).item() == pytest.approx(4.0, abs=1e-8)


def test_score_bounds_and_linear_invariance(rng):
    x = np.cumsum(rng.standard_normal((2001, 4)), axis=0) * 0.1
    f0, ft = np.sin(x[:-1]), np.sin(x[1:])
    score = vamp2_score(f0, ft).item()
    assert 1.0 - 1e-6 <= score <= 5.0 + 1e-6
    a = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
    assert vamp2_score(f0 @ a, ft @ a).item() == pytest.approx(score, abs=1e-8)


def test_vamp_errors(rng):
    with pytest.raises(DimensionError):
        vamp2_score(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
    with pytest.raises(DimensionError):
        vamp2_score(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)), eps=0.0)
    with pytest.raises(DegenerateFeaturesError):
        vamp2_score(np.ones((10, 2)), np.ones((10, 2)))


def test_vamp_gradient_through_network(rng):
    net = MLP(2, 4, 2, rng)
    x = rng.standard_normal((41, 2))
    weight = net.layers[0].weight

    def score(w):
        h = tc.silu(tc.matmul(tc.as_tensor(x), w) + net.layers[0].bias)
        out = net.layers[1](h)
        return vamp2_score(out[:-1], out[1:])
    assert tc.gradcheck(score, [weight.data.copy()]) < 1e-4


def test_kmeans_small_cases():
    line = np.array([[0.0], [1.0], [9.0], [10.0]])
    result = kmeans(line, k=2, seed=0)
    assert sorted(result.centroids.ravel().tolist()) == pytest.approx([0.5, 9.5])
    assert result.assignments[0] == result.assignments[1] != result.assignments[2] == result.assignments[3]
    single = kmeans(line, k=1)
    np.testing.assert_allclose(single.centroids, [[5.0]])
    every = kmeans(line, k=4)
    assert every.inertia == pytest.approx(0.0)


def test_kmeans_reduces_k_for_duplicates(rng):
    points = np.repeat(rng.standard_normal((3, 2)), 5, axis=0)
    result = kmeans(points, k=6)
    assert result.k == 3
    distances = ((points[:, None] - result.centroids[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(result.assignments, distances.argmin(axis=1))


def _spib(rng, n_states=3, **overrides):
    config = SpibConfig(**{"latent_dim": 2, "n_pseudo_inputs": 4, **overrides})
    return SpibModel(TokenMeanEncoder(), 3, n_states, config, rng)


def _log_normal(z, mu, logvar):
    return -0.5 * np.sum(math.log(2 * math.pi) + logvar + (z - mu) ** 2 / np.exp(logvar))


def test_spib_loss_matches_scalar_recomputation(rng):
    model = _spib(rng, beta=0.3)
    h = rng.standard_normal((1, 3))
    label = np.array([2])
    loss = spib_loss(model, h, label, seed=11).item()

    mu, logvar = (a.data[0] for a in model.posterior(h))
    eps = np.random.default_rng(11).standard_normal((1, 2))[0]
    z = mu + np.exp(0.5 * logvar) * eps
    logits = model.decoder(z[None]).data[0]
    log_q = logits[2] - math.log(np.sum(np.exp(logits)))
    mu_p, logvar_p = (a.data for a in model.posterior(model.pseudo_inputs))
    prior = math.log(np.mean([math.exp(_log_normal(z, mu_p[p], logvar_p[p])) for p in range(4)]))
    expected = -(log_q - 0.3 * (_log_normal(z, mu, logvar) - prior))
    assert loss == pytest.approx(expected, abs=1e-10)


def test_beta_zero_is_cross_entropy(rng):
    model = _spib(rng, beta=0.0)
    h = rng.standard_normal((20, 3))
    labels = rng.integers(0, 3, size=20)
    reconstruction, _ = spib_terms(model, h, labels, seed=3)
    assert spib_loss(model, h, labels, seed=3).item() == pytest.approx(-reconstruction.item())


def test_kl_vanishes_when_posterior_equals_prior(rng):
    model = _spib(rng, n_pseudo_inputs=1)
    for net in (model.mean_net, model.logvar_net):
        net.output_layer.weight.data[...] = 0.0
    _, kl = spib_terms(model, rng.standard_normal((10, 3)), np.zeros(10, dtype=int))
    assert kl.item() == pytest.approx(0.0, abs=1e-12)


def test_decoder_rows_sum_to_one(rng):
    model = _spib(rng)
    probs = model.decode_probs(rng.standard_normal((6, 2))).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-8)


def test_spib_rejects_bad_labels(rng):
    model = _spib(rng)
    with pytest.raises(DimensionError):
        spib_loss(model, rng.standard_normal((2, 3)), np.array([0, 3]))


def test_non_finite_loss_names_term(rng):
    model = _spib(rng)
    model.decoder.output_layer.bias.data[0] = np.nan
    with pytest.raises(NumericalFailureError) as info:
        spib_loss(model, rng.standard_normal((2, 3)), np.array([0, 1]))
    assert info.value.term == "reconstruction"


def test_refinement_is_brute_force_argmax(rng):
    model = _spib(rng, n_states=4)
    h = rng.standard_normal((200, 3))
    logits = model.decoder(model.mean_net(h)).data
    np.testing.assert_array_equal(assign_states(model, h), logits.argmax(axis=1))


def test_uniform_decoder_assigns_state_zero(rng):
    model = _spib(rng)
    model.decoder.output_layer.weight.data[...] = 0.0
    model.decoder.output_layer.bias.data[...] = 0.0
    assert np.all(assign_states(model, rng.standard_normal((5, 3))) == 0)


def test_refinement_compacts_and_is_idempotent(rng):
    model = _spib(rng, n_states=4)
    layer = model.decoder.output_layer
    w = rng.standard_normal(layer.weight.shape[0])
    layer.weight.data[...] = 0.0
    layer.weight.data[:, 0], layer.weight.data[:, 2] = w, -w
    layer.bias.data[...] = [0.0, -50.0, 0.0, -50.0]
    h = rng.standard_normal((30, 3))
    first = refine_labels(model, h)
    assert model.n_states == len(np.unique(first)) <= 2
    assert set(first.tolist()) <= {0, 1}
    np.testing.assert_array_equal(refine_labels(model, h), first)


def test_compact_labels_renumbers(rng):
    model = _spib(rng, n_states=5)
    labels = compact_labels(model, np.array([4, 1, 4, 1]))
    np.testing.assert_array_equal(labels, [1, 0, 1, 0])
    assert model.n_states == 2


@pytest.mark.slow
def test_spib_recovers_double_well(featurized):
    system = synth.DoubleWell1D()
    data = featurized(system, 2000, 16)
    run = RunConfig.parse((CONFIGS / "doublewell.cfg").read_text())
    train_data, val_data = split(data, run.split)
    result = train_spib(run, train_data, val_data)
    assert result.converged
    assert len(result.rounds) <= run.spib.max_refinements
    assert 2 <= result.n_states <= 3

    labels = np.concatenate([result.train_labels, result.val_labels])
    wells = system.well(np.concatenate([train_data.coordinates(), val_data.coordinates()])[:, 0])
    agreeing = sum(np.bincount(wells[labels == s], minlength=2).max() for s in np.unique(labels))
    assert agreeing / len(labels) >= 0.95

    batch = run.training.batch_size
    h = np.concatenate([embed(result.model.encoder, train_data, batch), embed(result.model.encoder, val_data, batch)])
    np.testing.assert_array_equal(refine_labels(result.model, h), labels)
