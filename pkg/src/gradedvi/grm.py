"""Graded response model: probabilities, likelihoods, constraints, sampling.

Sign convention (important): the boundary response probability is

    Pr(x_j >= k | z) = 1 / (1 + exp(alpha[j, k] + beta_j @ z)),   k = 1..K_j-1

with Pr(x_j >= 0) = 1 and Pr(x_j >= K_j) = 0.  The probability DECREASES
in the boundary logit alpha[j, k] + beta_j @ z.  Some of the IFA
literature flips this sign; data simulated here is only comparable to
other software after accounting for the convention.

Category intercepts are kept strictly increasing through an unconstrained
reparameterization: the first intercept is free and each later one adds a
softplus of a raw increment parameter,

    alpha[j, 1] = raw[j, 0],   alpha[j, k] = alpha[j, k-1] + softplus(raw[j, k-1]).

Loadings obey the linear constraints beta_j = b_j + A_j @ beta_free_j
(see modelspec).  All math is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modelspec import ModelSpec


# ----- scalar helpers --------------------------------------------------------


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    """Inverse of softplus; y must be positive."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


# ----- parameters ------------------------------------------------------------


@dataclass
class ItemParams:
    """Free parameters of the measurement part of the model.

    Attributes:
        intercept_raw: (J, Kmax-1) array; column 0 is the first intercept,
            later columns are raw increments (softplus-transformed).
            Positions beyond K_j - 1 for an item are inert padding.
        loadings_free: (n_free_loadings,) global free-loading vector.
    """

    intercept_raw: np.ndarray
    loadings_free: np.ndarray

    def copy(self) -> "ItemParams":
        return ItemParams(self.intercept_raw.copy(), self.loadings_free.copy())


def materialize_intercepts(spec: ModelSpec, intercept_raw: np.ndarray) -> np.ndarray:
    """(J, Kmax-1) strictly increasing intercepts; padding positions are junk."""
    raw = np.asarray(intercept_raw, dtype=float)
    alpha = np.empty_like(raw)
    if raw.shape[1] == 0:
        return alpha
    alpha[:, 0] = raw[:, 0]
    if raw.shape[1] > 1:
        alpha[:, 1:] = raw[:, [0]] + np.cumsum(softplus(raw[:, 1:]), axis=1)
    return alpha


def intercept_raw_from_materialized(spec: ModelSpec, alpha: np.ndarray) -> np.ndarray:
    """Invert materialize_intercepts for valid (strictly increasing) intercepts."""
    alpha = np.asarray(alpha, dtype=float)
    raw = np.zeros((spec.n_items, spec.max_categories - 1))
    mask = spec.intercept_mask
    for j in range(spec.n_items):
        k = spec.item_categories[j] - 1
        raw[j, 0] = alpha[j, 0]
        if k > 1:
            diffs = np.diff(alpha[j, :k])
            if np.any(diffs <= 0):
                raise ValueError(f"item {j}: intercepts are not strictly increasing")
            raw[j, 1:k] = inv_softplus(diffs)
    raw[~mask] = 0.0
    return raw


def apply_constraints(offsets: np.ndarray, cmap: np.ndarray, beta_free: np.ndarray) -> np.ndarray:
    """beta_j = b_j + A_j @ beta_free_j for one item."""
    offsets = np.asarray(offsets, dtype=float)
    cmap = np.asarray(cmap, dtype=float)
    beta_free = np.asarray(beta_free, dtype=float)
    if cmap.shape != (offsets.size, beta_free.size):
        raise ValueError(
            f"constraint matrix shape {cmap.shape} does not conform to "
            f"b ({offsets.size}) and free vector ({beta_free.size})"
        )
    return offsets + cmap @ beta_free


def gather_item_free(spec: ModelSpec, loadings_free: np.ndarray) -> np.ndarray:
    """(J, P) per-item free vectors beta_free_j gathered from the global pool."""
    J, P = spec.n_items, spec.n_factors
    out = np.zeros((J, P))
    valid = spec.loading_slots >= 0
    out[valid] = np.asarray(loadings_free)[spec.loading_slots[valid]]
    return out


def materialize_loadings(spec: ModelSpec, loadings_free: np.ndarray) -> np.ndarray:
    """(J, P) constrained loadings beta_j = b_j + A_j beta_free_j."""
    per_item = gather_item_free(spec, loadings_free)
    return spec.loading_offsets + np.einsum("jpq,jq->jp", spec.loading_maps, per_item)


def scatter_loading_grad(spec: ModelSpec, grad_beta: np.ndarray) -> np.ndarray:
    """Chain a (J, P) gradient w.r.t. beta to the global free-loading vector.

    Implements the transposed-constraint-matrix chain rule
    grad_free_j = A_j.T @ grad_beta_j, accumulated over shared slots.
    """
    per_slot = np.einsum("jpq,jp->jq", spec.loading_maps, grad_beta)
    grad = np.zeros(spec.n_free_loadings)
    valid = spec.loading_slots >= 0
    np.add.at(grad, spec.loading_slots[valid], per_slot[valid])
    return grad


# ----- probabilities ---------------------------------------------------------


def boundary_probs(alpha_j: np.ndarray, beta_j: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(K+1,) boundary probabilities Pr(x >= k) for one item at one z.

    Entry 0 is 1, entry K is 0, and interior entries are the logistic
    boundary probabilities, which are nonincreasing in k because the
    intercepts are ordered.
    """
    alpha_j = np.asarray(alpha_j, dtype=float)
    beta_j = np.asarray(beta_j, dtype=float)
    z = np.asarray(z, dtype=float)
    if beta_j.shape != z.shape:
        raise ValueError(f"latent vector shape {z.shape} does not match loadings {beta_j.shape}")
    logits = alpha_j + beta_j @ z
    out = np.empty(alpha_j.size + 2)
    out[0] = 1.0
    out[1:-1] = sigmoid(-logits)
    out[-1] = 0.0
    return out


def category_probs(alpha_j: np.ndarray, beta_j: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(K,) category probabilities; adjacent differences of boundary_probs."""
    bounds = boundary_probs(alpha_j, beta_j, z)
    return bounds[:-1] - bounds[1:]


def log_cond_likelihood(
    x: np.ndarray, alpha: np.ndarray, beta: np.ndarray, z: np.ndarray,
    item_categories: np.ndarray | None = None,
) -> float:
    """Log conditional likelihood of one response pattern given z.

    Sums log category probabilities over items (local independence).
    """
    x = np.asarray(x, dtype=int)
    total = 0.0
    for j in range(x.size):
        K = alpha.shape[1] + 1 if item_categories is None else int(item_categories[j])
        if not 0 <= x[j] < K:
            raise ValueError(f"response code {x[j]} out of range for item {j} (K={K})")
        probs = category_probs(alpha[j, : K - 1], beta[j], z)
        total += np.log(probs[x[j]])
    return float(total)


# ----- vectorized likelihood with gradient cache ------------------------------


@dataclass
class LikelihoodCache:
    """Intermediates from a vectorized likelihood evaluation.

    Shapes use S = number of (observation, sample) pairs after flattening.
    """

    x: np.ndarray            # (S, J) response codes
    blo: np.ndarray          # (S, J) boundary prob at the observed code
    bhi: np.ndarray          # (S, J) boundary prob at the code above
    lo_interior: np.ndarray  # (S, J) bool: lower boundary is a free logit
    hi_interior: np.ndarray  # (S, J) bool: upper boundary is a free logit
    pi: np.ndarray           # (S, J) observed-category probabilities
    logp: np.ndarray         # (S,) per-row log conditional likelihood


def log_likelihood_batch(
    X: np.ndarray, alpha: np.ndarray, beta: np.ndarray, Z: np.ndarray,
    item_categories: np.ndarray,
) -> LikelihoodCache:
    """Evaluate log p(x | z) for S rows at once.

    Args:
        X: (S, J) response codes.
        alpha: (J, Kmax-1) materialized intercepts (padding ignored).
        beta: (J, P) materialized loadings.
        Z: (S, P) latent vectors.
    """
    X = np.asarray(X, dtype=int)
    S, J = X.shape
    U = Z @ beta.T if beta.shape[1] > 0 else np.zeros((S, J))

    cols = np.arange(J)[None, :]
    k_lo = X - 1                       # boundary index of Pr(x >= code)
    lo_interior = X >= 1
    hi_interior = X <= (item_categories[None, :] - 2)

    logit_lo = alpha[cols, np.where(lo_interior, k_lo, 0)] + U
    logit_hi = alpha[cols, np.where(hi_interior, X, 0)] + U
    blo = np.where(lo_interior, sigmoid(-logit_lo), 1.0)
    bhi = np.where(hi_interior, sigmoid(-logit_hi), 0.0)
    pi = blo - bhi
    logp = np.sum(np.log(pi), axis=1)
    return LikelihoodCache(X, blo, bhi, lo_interior, hi_interior, pi, logp)


def likelihood_grads(
    cache: LikelihoodCache,
    beta: np.ndarray,
    Z: np.ndarray,
    coeff: np.ndarray,
    item_categories: np.ndarray,
    max_categories: int,
):
    """Coefficient-weighted gradients of the summed log-likelihood.

    Computes d/d(params) of sum_s coeff[s] * logp[s].

    Returns:
        grad_alpha: (J, Kmax-1) gradient w.r.t. materialized intercepts.
        grad_beta: (J, P) gradient w.r.t. materialized loadings.
        grad_z: (S, P) gradient w.r.t. the latent vectors.
    """
    S, J = cache.x.shape
    # d log pi / d logit at the lower and upper boundary
    dlo = np.where(cache.lo_interior, -cache.blo * (1.0 - cache.blo) / cache.pi, 0.0)
    dhi = np.where(cache.hi_interior, cache.bhi * (1.0 - cache.bhi) / cache.pi, 0.0)
    c = coeff[:, None]
    wlo = c * dlo
    whi = c * dhi

    grad_alpha = np.zeros((J, max_categories - 1))
    cols = np.broadcast_to(np.arange(J)[None, :], (S, J))
    lo = cache.lo_interior
    np.add.at(grad_alpha, (cols[lo], cache.x[lo] - 1), wlo[lo])
    hi = cache.hi_interior
    np.add.at(grad_alpha, (cols[hi], cache.x[hi]), whi[hi])

    g_u = wlo + whi                     # (S, J) gradient w.r.t. beta_j @ z
    grad_beta = g_u.T @ Z               # (J, P)
    grad_z = g_u @ beta                 # (S, P)
    return grad_alpha, grad_beta, grad_z


def intercept_raw_grad(
    intercept_raw: np.ndarray, grad_alpha: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Chain a gradient w.r.t. materialized intercepts to the raw parameters.

    alpha_k depends on raw_0 with slope 1 and on raw increment m <= k with
    slope sigmoid(raw_m), so raw gradients are reversed cumulative sums.
    """
    g = np.where(mask, grad_alpha, 0.0)
    rev_cum = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
    grad_raw = np.empty_like(g)
    grad_raw[:, 0] = rev_cum[:, 0]
    if g.shape[1] > 1:
        grad_raw[:, 1:] = sigmoid(intercept_raw[:, 1:]) * rev_cum[:, 1:]
    grad_raw[~mask] = 0.0
    return grad_raw


# ----- sampling and the baseline ---------------------------------------------


def sample_responses(
    spec: ModelSpec,
    alpha: np.ndarray,
    beta: np.ndarray,
    sigma: np.ndarray,
    n: int,
    rng: np.random.Generator | int,
) -> np.ndarray:
    """Draw an (n, J) response matrix: z ~ N(0, Sigma), then x | z.

    Deterministic for a given seed / generator state.
    """
    rng = np.random.default_rng(rng)
    J, P = spec.n_items, spec.n_factors
    if n == 0:
        return np.zeros((0, J), dtype=int)
    if P > 0:
        sigma = np.asarray(sigma, dtype=float)
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix is not positive definite") from exc
        Z = rng.standard_normal((n, P)) @ L.T
    else:
        Z = np.zeros((n, 0))
    U = Z @ beta.T if P > 0 else np.zeros((n, J))
    out = np.zeros((n, J), dtype=int)
    # x >= k iff uniform < Pr(x >= k); summing indicator over k gives the code
    u = rng.random((n, J))
    for k in range(1, spec.max_categories):
        has_k = spec.item_categories >= k + 1
        logits = alpha[:, k - 1][None, :] + U
        p_ge_k = sigmoid(-logits)
        out += ((u < p_ge_k) & has_k[None, :]).astype(int)
    return out


@dataclass
class GRMSampler:
    """A graded response model with known (materialized) parameters.

    Used as a data generator: the simulation harness draws from it and
    the two-sample tests accept it anywhere a fitted model is expected.
    """

    spec: ModelSpec
    intercepts: np.ndarray   # (J, Kmax-1) materialized, strictly increasing
    loadings: np.ndarray     # (J, P) materialized
    sigma: np.ndarray        # (P, P) correlation matrix

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_responses(
            self.spec, self.intercepts, self.loadings, self.sigma, n, rng
        )


@dataclass
class BaselineModel:
    """Zero-factor baseline: independent multinomial columns."""

    proportions: np.ndarray   # (J, Kmax) per-item category proportions
    item_categories: np.ndarray

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_baseline(self.proportions, n, rng, self.item_categories)


def zero_factor_mle(responses: np.ndarray, item_categories: np.ndarray) -> np.ndarray:
    """(J, Kmax) observed per-item category proportions; rows sum to 1."""
    X = np.asarray(responses, dtype=int)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty response matrix")
    J = X.shape[1]
    Kmax = int(np.max(item_categories))
    props = np.zeros((J, Kmax))
    for j in range(J):
        counts = np.bincount(X[:, j], minlength=item_categories[j])
        if counts.size > item_categories[j]:
            raise ValueError(f"item {j}: codes exceed K_j - 1")
        props[j, : item_categories[j]] = counts[: item_categories[j]] / X.shape[0]
    return props


def sample_baseline(
    proportions: np.ndarray,
    n: int,
    rng: np.random.Generator | int,
    item_categories: np.ndarray | None = None,
) -> np.ndarray:
    """Draw (n, J) responses with independent columns from given proportions."""
    rng = np.random.default_rng(rng)
    props = np.asarray(proportions, dtype=float)
    J = props.shape[0]
    if n == 0:
        return np.zeros((0, J), dtype=int)
    cum = np.cumsum(props, axis=1)
    # pin the top of each item's valid range to 1 so roundoff in the
    # cumulative sum can never produce an out-of-range code
    if item_categories is None:
        cum[:, -1] = 1.0
    else:
        for j in range(J):
            cum[j, item_categories[j] - 1 :] = 1.0
    u = rng.random((n, J))
    out = np.zeros((n, J), dtype=int)
    for j in range(J):
        out[:, j] = np.searchsorted(cum[j], u[:, j], side="right")
    return out
