"""Amortized posterior network and the Gaussian reparameterization.

A small fully connected network maps a one-hot-encoded response pattern to
the parameters (mu, log sigma) of an isotropic normal approximate
posterior over the latent factors.  The default architecture has a single
hidden layer of width 2 * J with ELU activation; both the hidden layout
and the activation width are configurable.  Gradients are computed by
hand with reverse-mode accumulation.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np


def elu(x):
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_deriv(x):
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def one_hot(X: np.ndarray, item_categories: np.ndarray) -> np.ndarray:
    """Concatenated one-hot encoding, width sum(K_j)."""
    X = np.asarray(X, dtype=int)
    offsets = np.concatenate([[0], np.cumsum(item_categories)[:-1]])
    if X.size and (np.any(X < 0) or np.any(X >= item_categories[None, :])):
        raise ValueError("response code out of range for one-hot encoding")
    out = np.zeros((X.shape[0], int(np.sum(item_categories))))
    rows = np.arange(X.shape[0])[:, None]
    out[rows, offsets[None, :] + X] = 1.0
    return out


@dataclass
class ForwardCache:
    """Saved intermediates from a forward pass, consumed by backprop."""

    inputs: np.ndarray
    pre: list      # pre-activation values per hidden layer
    post: list     # post-activation values per hidden layer


class InferenceNet:
    """Feed-forward map from response patterns to posterior parameters.

    Weights live in a flat dict ("w0", "b0", "w1", ...) so an external
    optimizer can update them in place.  The output layer is split into
    mu (first P entries) and log sigma (last P entries).
    """

    def __init__(self, item_categories, n_factors, hidden=None, rng=None):
        self.item_categories = np.asarray(item_categories, dtype=int)
        self.n_factors = int(n_factors)
        if hidden is None:
            hidden = (2 * self.item_categories.size,)
        self.hidden = tuple(int(h) for h in hidden)
        self.input_dim = int(np.sum(self.item_categories))
        dims = [self.input_dim, *self.hidden, 2 * self.n_factors]
        self.dims = dims
        rng = np.random.default_rng(rng)
        self.params: dict[str, np.ndarray] = {}
        for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"w{layer}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.params[f"b{layer}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # ----- forward ------------------------------------------------------------

    def forward(self, X: np.ndarray):
        """Encode an (N, J) response matrix.

        Returns:
            mu: (N, P), log_sigma: (N, P), cache for backprop.
        """
        a = one_hot(X, self.item_categories)
        cache = ForwardCache(inputs=a, pre=[], post=[])
        for layer in range(self.n_layers - 1):
            z = a @ self.params[f"w{layer}"].T + self.params[f"b{layer}"]
            cache.pre.append(z)
            a = elu(z)
            cache.post.append(a)
        last = self.n_layers - 1
        out = a @ self.params[f"w{last}"].T + self.params[f"b{last}"]
        P = self.n_factors
        return out[:, :P], out[:, P:], cache

    def encode(self, X: np.ndarray):
        """(mu, log_sigma) for an (N, J) response matrix."""
        mu, log_sigma, _ = self.forward(X)
        return mu, log_sigma

    # ----- backward -----------------------------------------------------------

    def backprop(self, cache: ForwardCache, d_mu: np.ndarray, d_log_sigma: np.ndarray):
        """Reverse-mode gradients of sum(d_mu * mu + d_log_sigma * log_sigma).

        Args:
            cache: the forward cache for the same batch.
            d_mu, d_log_sigma: (N, P) upstream sensitivities.

        Returns:
            dict of gradients with the same keys/shapes as ``params``.
        """
        d_out = np.concatenate([d_mu, d_log_sigma], axis=1)
        grads: dict[str, np.ndarray] = {}
        last = self.n_layers - 1
        a_prev = cache.post[-1] if cache.post else cache.inputs
        grads[f"w{last}"] = d_out.T @ a_prev
        grads[f"b{last}"] = d_out.sum(axis=0)
        d_a = d_out @ self.params[f"w{last}"]
        for layer in range(last - 1, -1, -1):
            d_z = d_a * elu_deriv(cache.pre[layer])
            a_prev = cache.post[layer - 1] if layer > 0 else cache.inputs
            grads[f"w{layer}"] = d_z.T @ a_prev
            grads[f"b{layer}"] = d_z.sum(axis=0)
            d_a = d_z @ self.params[f"w{layer}"]
        return grads

    # ----- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "item_categories": self.item_categories.tolist(),
            "n_factors": self.n_factors,
            "hidden": list(self.hidden),
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InferenceNet":
        net = cls(doc["item_categories"], doc["n_factors"], hidden=doc["hidden"], rng=0)
        for k, v in doc["params"].items():
            net.params[k] = np.asarray(v, dtype=float)
        return net

    def save(self, path: str) -> None:
        """Write a JSON checkpoint; floats round-trip bit-exactly via repr."""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "InferenceNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----- reparameterization and the variational density -------------------------


def reparameterize(mu: np.ndarray, log_sigma: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps with externally supplied standard-normal eps.

    Broadcasts over leading sample axes of eps, e.g. mu (N, P) with
    eps (N, R, P) gives z (N, R, P).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.exp(np.asarray(log_sigma, dtype=float))
    if eps.ndim == mu.ndim:
        return mu + sigma * eps
    return mu[..., None, :] + sigma[..., None, :] * eps


def log_q(z: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """Isotropic normal log density, summed over the last axis."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    if z.ndim > mu.ndim:
        mu = mu[..., None, :]
        log_sigma = log_sigma[..., None, :]
    resid = (z - mu) / np.exp(log_sigma)
    return -0.5 * np.sum(resid**2 + 2.0 * log_sigma + np.log(2.0 * np.pi), axis=-1)
