"""
Training objectives: the VAMP-2 score and the SPIB loss with a VampPrior.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Optional, Tuple

import numpy as np
from sklearn.cluster import KMeans

from . import tensor_core as tc
from .errors import DegenerateFeaturesError, DimensionError, NumericalFailureError
from .models import SpibConfig
from .nn import MLP, Module, Parameter
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


# -- VAMP-2 ---------------------------------------------------------------

def covariances(f0: Tensor, ft: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Batch-averaged C_00, C_0t, C_tt of mean-centred features"""
    f0, ft = tc.as_tensor(f0), tc.as_tensor(ft)
    if f0.ndim != 2 or f0.shape != ft.shape:
        raise DimensionError("lagged features must both have shape (B, k)", f0.shape, ft.shape)
    n = f0.shape[0]
    x = f0 - f0.mean(axis=0, keepdims=True)
    y = ft - ft.mean(axis=0, keepdims=True)
    return (x.T @ x) * (1.0 / n), (x.T @ y) * (1.0 / n), (y.T @ y) * (1.0 / n)


def inverse_sqrt(c: Tensor, eps: float) -> Tensor:
    """C^{-1/2} restricted to the eigenspace with eigenvalues above eps"""
    values, vectors = tc.sym_eig(c)
    kept = np.nonzero(values.data > eps)[0]
    if kept.size == 0:
        raise DegenerateFeaturesError(
            f"every covariance eigenvalue is below eps={eps:g} (largest {float(np.max(values.data)):.3e})")
    basis = vectors[:, kept]
    return (basis * tc.power(values[kept], -0.5)) @ basis.T


def vamp2_from_covariances(c00: Tensor, c0t: Tensor, ctt: Tensor, eps: float = 1e-6) -> Tensor:
    koopman = inverse_sqrt(c00, eps) @ c0t @ inverse_sqrt(ctt, eps)
    return (koopman * koopman).sum() + 1.0


def vamp2_score(f0: Tensor, ft: Tensor, eps: float = 1e-6) -> Tensor:
    """
    ||C_00^{-1/2} C_0t C_tt^{-1/2}||_F^2 + 1; the +1 restores the constant
    singular function removed by centring
    """
    if eps <= 0:
        raise DimensionError(f"eps must be positive, got {eps}")
    f0 = tc.as_tensor(f0)
    if f0.ndim == 2 and f0.shape[0] < f0.shape[1]:
        raise DimensionError("VAMP-2 needs at least as many pairs as outputs", f0.shape)
    score = vamp2_from_covariances(*covariances(f0, ft), eps=eps)
    if not np.isfinite(score.data):
        raise NumericalFailureError("VAMP-2 score is not finite", term="vamp2")
    return score


class VampHead(Module):
    """chi: pooled H-vector -> k outputs, shared between both lag times"""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, n_hidden: Optional[int] = None):
        super().__init__()
        self.n_out = n_out
        self.mlp = MLP(n_in, n_hidden or n_in, n_out, rng, n_layers=2)

    def forward(self, h: Tensor) -> Tensor:
        return self.mlp(h)


class VampModel(Module):
    def __init__(self, encoder: Module, head: VampHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, batch) -> Tensor:
        return self.head(self.encoder(batch))


# -- k-means label initialisation ---------------------------------------------

@dataclass
class KMeansInit:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float


def kmeans(points: np.ndarray, k: int = 100, seed: int = 0) -> KMeansInit:
    """Lloyd iterations from k-means++ seeds; k shrinks to the number of distinct points"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise DimensionError(f"k must be >= 1, got {k}")
    if points.shape[0] < k:
        raise DimensionError(f"k-means with k={k} needs at least k points", points.shape)
    distinct = len(np.unique(points, axis=0))
    if distinct < k:
        logger.warning("only %d distinct points, reducing k-means k from %d to %d", distinct, k, distinct)
        k = distinct
    model = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300, tol=1e-6,
                   random_state=seed, algorithm="lloyd").fit(points)
    # assignments against the final centroids
    distances = np.sum((points[:, None, :] - model.cluster_centers_[None]) ** 2, axis=-1)
    assignments = np.argmin(distances, axis=1)
    inertia = float(np.sum(distances[np.arange(len(points)), assignments]))
    return KMeansInit(k, model.cluster_centers_.copy(), assignments, inertia)


# -- SPIB -----------------------------------------------------------------

class SpibModel(Module):
    """
    Gaussian encoder q(z|x), label decoder q(s|z) and a VampPrior built from P
    learned pseudo-inputs in the pooled feature space
    """

    def __init__(self, encoder: Module, n_in: int, n_states: int, config: SpibConfig, rng: np.random.Generator,
                 n_hidden: Optional[int] = None):
        super().__init__()
        n_hidden = n_hidden or n_in
        self.encoder = encoder
        self.n_in = n_in
        self.beta = config.beta
        self.latent_dim = config.latent_dim
        self.mean_net = MLP(n_in, n_hidden, config.latent_dim, rng)
        self.logvar_net = MLP(n_in, n_hidden, config.latent_dim, rng)
        self.decoder = MLP(config.latent_dim, n_hidden, n_states, rng)
        self.pseudo_inputs = Parameter(rng.standard_normal((config.n_pseudo_inputs, n_in)))
        self.mixture_logits = Parameter(np.zeros(config.n_pseudo_inputs))

    @property
    def n_states(self) -> int:
        return self.decoder.output_layer.weight.shape[1]

    def forward(self, batch) -> Tensor:
        return self.encoder(batch)

    def posterior(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        return self.mean_net(h), self.logvar_net(h)

    def decode_log_probs(self, z: Tensor) -> Tensor:
        return tc.log_softmax(self.decoder(z), axis=-1)

    def decode_probs(self, z: Tensor) -> Tensor:
        return tc.softmax(self.decoder(z), axis=-1)

    def prior_log_density(self, z: Tensor) -> Tensor:
        """log r(z) = log sum_p w_p N(z; mu(u_p), Sigma(u_p))"""
        mu_p, logvar_p = self.posterior(self.pseudo_inputs)
        n, d = z.shape
        n_pseudo = mu_p.shape[0]
        diff = z.reshape(n, 1, d) - mu_p.reshape(1, n_pseudo, d)
        log_normal = -0.5 * (_LOG_2PI + logvar_p.reshape(1, n_pseudo, d)
                             + diff * diff / tc.exp(logvar_p).reshape(1, n_pseudo, d)).sum(axis=-1)
        return tc.logsumexp(log_normal + tc.log_softmax(self.mixture_logits), axis=-1)

    def compact_states(self, kept: np.ndarray) -> None:
        """Drop decoder outputs for states outside ``kept``"""
        layer = self.decoder.output_layer
        layer.weight = Parameter(layer.weight.data[:, kept])
        layer.bias = Parameter(layer.bias.data[kept])


def spib_terms(model: SpibModel, h: Tensor, target_labels: np.ndarray, seed: int = 0) -> Tuple[Tensor, Tensor]:
    """(mean log q(s_t|z), mean [log p(z|x) - log r(z)]) for one reparameterised sample per frame"""
    labels = np.asarray(target_labels, dtype=np.int64)
    h = tc.as_tensor(h)
    if labels.shape != (h.shape[0],):
        raise DimensionError("one target label per frame", labels.shape, h.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= model.n_states):
        raise DimensionError(f"labels must lie in [0, {model.n_states})", labels.shape)
    mu, logvar = model.posterior(h)
    noise = np.random.default_rng(seed).standard_normal(mu.shape)
    z = mu + tc.exp(logvar * 0.5) * noise
    reconstruction = model.decode_log_probs(z)[np.arange(len(labels)), labels].mean()
    diff = z - mu
    log_posterior = (-0.5 * (_LOG_2PI + logvar + diff * diff / tc.exp(logvar))).sum(axis=-1)
    kl = (log_posterior - model.prior_log_density(z)).mean()
    return reconstruction, kl


def spib_loss(model: SpibModel, h: Tensor, target_labels: np.ndarray, seed: int = 0) -> Tensor:
    """-(E[log q(s_t|z)] - beta * E[log p(z|x) - log r(z)])"""
    reconstruction, kl = spib_terms(model, h, target_labels, seed)
    for term, value in (("reconstruction", reconstruction), ("kl", kl)):
        if not np.isfinite(value.data):
            logger.error("SPIB %s term is not finite", term)
            raise NumericalFailureError("SPIB loss is not finite", term=term)
    return kl * model.beta - reconstruction


def assign_states(model: SpibModel, h: Tensor) -> np.ndarray:
    """argmax_s q(s | mu(h)) per frame using the encoder mean; ties go to the lower state"""
    with tc.no_grad():
        logits = model.decoder(model.mean_net(tc.as_tensor(h))).data
    return np.argmax(logits, axis=1)


def compact_labels(model: SpibModel, labels: np.ndarray) -> np.ndarray:
    """Remove states no frame is assigned to and renumber the rest in order"""
    kept = np.unique(labels)
    if len(kept) < model.n_states:
        logger.warning("label refinement emptied %d of %d states", model.n_states - len(kept), model.n_states)
        model.compact_states(kept)
        labels = np.searchsorted(kept, labels)
    return labels


def refine_labels(model: SpibModel, h: Tensor) -> np.ndarray:
    return compact_labels(model, assign_states(model, h))
