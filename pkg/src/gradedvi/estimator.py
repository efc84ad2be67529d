"""Importance-weighted amortized variational estimation of the GRM.

The fitting objective is the importance-weighted evidence lower bound

    IW-ELBO(x) = E_{eps_{1:R}} [ log (1/R) sum_r w_r ],
    w_r = p(x, z_r) / q(z_r | x),  z_r = mu + sigma * eps_r,

which reduces to the standard ELBO at R = 1 and tightens toward the
marginal log-likelihood as R grows.  All weight arithmetic happens in log
space through log-sum-exp.

Two gradient estimators drive the optimization:

* model parameters (intercepts, free loadings, correlation angles): the
  importance-weighted estimator sum_r wtilde_r * d log w_r, with
  wtilde_r = softmax_r(log w_r).  Loading gradients pass through the
  transposed constraint matrices; angle gradients chain through the
  hyperspherical Cholesky map.
* inference-network weights: the doubly reparameterized estimator
  sum_r wtilde_r**2 * (d log w_r / d z_r) (d z_r / d psi), which keeps
  only the sample-path sensitivity and uses squared normalized weights.

``grad_psi_pathwise`` additionally exposes the plain total pathwise
psi-gradient of the fixed-noise IW-ELBO (sample path plus score terms);
it is the quantity that matches finite differences under common random
numbers and exists for verification.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import grm
from .correlation import (
    build_correlation,
    cholesky_angle_grad,
    identity_angles,
    lower_cholesky,
)
from .encoder import InferenceNet, log_q, reparameterize
from .grm import ItemParams
from .modelspec import ModelSpec
from .optim import AMSGrad

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NumericalDivergenceError(RuntimeError):
    """The optimization objective became non-finite."""


@dataclass
class FitConfig:
    """Hyperparameters of the fitting loop.

    The learning rate default of 0.005 follows the package default; 0.0025
    is recommended for P >= 10 factor models.  Convergence is declared
    when the 100-step moving average of the batch IW-ELBO fails to improve
    by more than ``window_tol`` over ``patience`` consecutive windows.
    """

    iw_samples: int = 5
    mc_samples: int = 1
    learning_rate: float = 0.005
    batch_size: int = 128
    max_steps: int = 10000
    seed: int = 0
    hidden: tuple | None = None
    window: int = 100
    window_tol: float = 1e-3
    patience: int = 5

    def __post_init__(self):
        if self.iw_samples < 1:
            raise ValueError("iw_samples (R) must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples (S) must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class FitResult:
    """Estimates and diagnostics from one fitting run."""

    spec: ModelSpec
    items: ItemParams
    theta: np.ndarray
    net: InferenceNet
    elbo_trace: np.ndarray
    steps: int
    converged: bool
    seconds: float
    n_model_parameters: int
    n_total_parameters: int
    skipped_steps: int = 0

    def intercepts(self) -> np.ndarray:
        return grm.materialize_intercepts(self.spec, self.items.intercept_raw)

    def loadings(self) -> np.ndarray:
        return grm.materialize_loadings(self.spec, self.items.loadings_free)

    def correlation(self) -> np.ndarray:
        _, sigma = build_correlation(self.theta)
        return sigma

    def sample(self, n: int, rng) -> np.ndarray:
        """Draw synthetic responses from the fitted model."""
        return grm.sample_responses(
            self.spec, self.intercepts(), self.loadings(), self.correlation(), n, rng
        )


# ----- assembling free parameter vectors --------------------------------------


def assemble_theta(spec: ModelSpec, angles_free: np.ndarray) -> np.ndarray:
    """Full (P, P) angle matrix from the free-angle vector plus fixed values."""
    theta = np.where(spec.angle_fixed, spec.angle_fixed_values, 0.0)
    for idx, (p, q) in enumerate(spec.free_angle_pairs()):
        theta[p, q] = angles_free[idx]
    return theta


def extract_free_angles(spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    pairs = spec.free_angle_pairs()
    return np.array([theta[p, q] for p, q in pairs])


def init_params(spec: ModelSpec, rng) -> tuple[ItemParams, np.ndarray]:
    """Starting values for the model parameters.

    Free loadings are Uniform(+-sqrt(6 / (M_p + P))) where M_p counts the
    nonzero-pattern loadings on factor p, honoring zero constraints.  All
    free correlation angles start at pi/2 so the correlation matrix is
    exactly the identity.  First intercepts start in (-1.5, -0.5) and raw
    increments at softplus^-1(1) so materialized intercepts are ordered
    with unit spacing.
    """
    rng = np.random.default_rng(rng)
    J, P, Km = spec.n_items, spec.n_factors, spec.max_categories
    raw = np.zeros((J, max(Km - 1, 0)))
    if Km >= 2:
        raw[:, 0] = rng.uniform(-1.5, -0.5, size=J)
        if Km > 2:
            raw[:, 1:] = grm.inv_softplus(1.0)
    if spec.n_free_loadings > 0:
        counts = spec.nonzero_loadings_per_factor()
        fac = spec.slot_factor()
        bounds = np.sqrt(6.0 / (counts[fac] + P))
        free = rng.uniform(-bounds, bounds)
    else:
        free = np.zeros(0)
    theta = identity_angles(P)
    theta[spec.angle_fixed] = spec.angle_fixed_values[spec.angle_fixed]
    return ItemParams(raw, free), theta


# ----- forward pass -----------------------------------------------------------


@dataclass
class Forward:
    """Everything computed on one batch for one set of noise draws."""

    X: np.ndarray            # (B, J)
    eps: np.ndarray          # (B, S, R, P)
    mu: np.ndarray           # (B, P)
    log_sigma: np.ndarray    # (B, P)
    sigma: np.ndarray        # (B, P)
    z: np.ndarray            # (B, S, R, P)
    net_cache: object
    lik: grm.LikelihoodCache  # flattened over (B*S*R)
    log_w: np.ndarray        # (B, S, R)
    wtilde: np.ndarray       # (B, S, R); zero where log_w = -inf
    per_obs: np.ndarray      # (B,) IW-ELBO estimates (mean over S)
    L: np.ndarray            # (P, P)
    y: np.ndarray            # (B*S*R, P) = L^-1 z
    sig_inv_z: np.ndarray    # (B*S*R, P) = Sigma^-1 z
    degenerate: np.ndarray   # (B, S) bool: all R weights underflowed

    @property
    def objective(self) -> float:
        """Batch-summed IW-ELBO estimate."""
        return float(np.sum(self.per_obs))


def forward(
    spec: ModelSpec,
    items: ItemParams,
    theta: np.ndarray,
    net: InferenceNet,
    X: np.ndarray,
    eps: np.ndarray,
) -> Forward:
    """Evaluate log-weights and the IW-ELBO for a batch under given noise.

    Args:
        eps: (B, S, R, P) standard normal draws; S indexes independent
            Monte Carlo replicates and R importance samples.
    """
    B, S, R, P = eps.shape
    alpha = grm.materialize_intercepts(spec, items.intercept_raw)
    beta = grm.materialize_loadings(spec, items.loadings_free)
    L = lower_cholesky(theta)

    mu, log_sigma, net_cache = net.forward(X)
    sigma = np.exp(log_sigma)
    z = mu[:, None, None, :] + sigma[:, None, None, :] * eps

    z_flat = z.reshape(B * S * R, P)
    x_flat = np.repeat(X, S * R, axis=0)
    lik = grm.log_likelihood_batch(x_flat, alpha, beta, z_flat, spec.item_categories)
    log_lik = lik.logp.reshape(B, S, R)

    if P > 0:
        y = solve_triangular(L, z_flat.T, lower=True).T
        sig_inv_z = solve_triangular(L.T, y.T, lower=False).T
        log_det = 2.0 * np.sum(np.log(np.diag(L)))
        log_prior = -0.5 * (P * LOG_2PI + log_det + np.sum(y * y, axis=1))
        log_prior = log_prior.reshape(B, S, R)
    else:
        y = np.zeros((B * S * R, 0))
        sig_inv_z = y
        log_prior = np.zeros((B, S, R))

    log_q_val = -0.5 * np.sum(
        eps**2 + 2.0 * log_sigma[:, None, None, :] + LOG_2PI, axis=-1
    )

    log_w = log_lik + log_prior - log_q_val

    # log-sum-exp over the R axis, tolerating -inf underflow
    m = np.max(log_w, axis=2, keepdims=True)
    finite = np.isfinite(m)
    safe_m = np.where(finite, m, 0.0)
    expw = np.exp(log_w - safe_m)
    sumw = np.sum(expw, axis=2, keepdims=True)
    lse = np.where(finite, safe_m + np.log(sumw), -np.inf)
    wtilde = np.where(finite, expw / sumw, 0.0)
    per_s = lse[:, :, 0] - math.log(R)
    per_obs = per_s.mean(axis=1)
    degenerate = ~finite[:, :, 0]

    return Forward(
        X=X, eps=eps, mu=mu, log_sigma=log_sigma, sigma=sigma, z=z,
        net_cache=net_cache, lik=lik, log_w=log_w, wtilde=wtilde,
        per_obs=per_obs, L=L, y=y, sig_inv_z=sig_inv_z, degenerate=degenerate,
    )


def _sample_eps(rng, B: int, S: int, R: int, P: int) -> np.ndarray:
    return rng.standard_normal((B, S, R, P))


# ----- spec-level operations ---------------------------------------------------


def log_weight(
    x_row: np.ndarray,
    z: np.ndarray,
    alpha: np.ndarray,
    beta: np.ndarray,
    sigma_mat: np.ndarray,
    mu: np.ndarray,
    log_sigma: np.ndarray,
    item_categories: np.ndarray,
) -> float:
    """log w = log p(x | z) + log N(z | 0, Sigma) - log q(z | mu, sigma)."""
    loglik = grm.log_cond_likelihood(x_row, alpha, beta, z, item_categories)
    P = z.size
    if P > 0:
        L = np.linalg.cholesky(np.asarray(sigma_mat, dtype=float))
        y = solve_triangular(L, z, lower=True)
        log_prior = -0.5 * (P * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + y @ y)
    else:
        log_prior = 0.0
    return float(loglik + log_prior - log_q(z, mu, log_sigma))


def iw_elbo_estimate(
    X: np.ndarray,
    spec: ModelSpec,
    items: ItemParams,
    theta: np.ndarray,
    net: InferenceNet,
    iw_samples: int,
    mc_samples: int = 1,
    rng=None,
    eps: np.ndarray | None = None,
) -> float:
    """Monte Carlo IW-ELBO estimate summed over the rows of X."""
    X = np.asarray(X, dtype=int)
    if eps is None:
        rng = np.random.default_rng(rng)
        eps = _sample_eps(rng, X.shape[0], mc_samples, iw_samples, spec.n_factors)
    return forward(spec, items, theta, net, X, eps).objective


# ----- gradients ---------------------------------------------------------------


def _loglik_grad_z_rows(lik: grm.LikelihoodCache, beta: np.ndarray) -> np.ndarray:
    """Unweighted per-row gradient of log p(x | z) w.r.t. z, (S, P)."""
    ok = lik.pi > 0.0
    dlo = np.where(lik.lo_interior & ok, -lik.blo * (1.0 - lik.blo) / np.where(ok, lik.pi, 1.0), 0.0)
    dhi = np.where(lik.hi_interior & ok, lik.bhi * (1.0 - lik.bhi) / np.where(ok, lik.pi, 1.0), 0.0)
    return (dlo + dhi) @ beta


def grad_omega(
    fw: Forward, spec: ModelSpec, items: ItemParams, theta: np.ndarray
) -> dict[str, np.ndarray]:
    """Importance-weighted gradient of the batch IW-ELBO w.r.t. model params.

    Returns a dict with keys "intercept_raw", "loadings_free", and
    "angles_free".  Degenerate (all-underflow) observations contribute
    zero.
    """
    B, S, R, P = fw.eps.shape
    beta = grm.materialize_loadings(spec, items.loadings_free)
    coeff = (fw.wtilde / S).reshape(B * S * R)

    grad_alpha, grad_beta, _ = grm.likelihood_grads(
        fw.lik, beta, fw.z.reshape(B * S * R, P), coeff,
        spec.item_categories, spec.max_categories,
    )
    grad_raw = grm.intercept_raw_grad(items.intercept_raw, grad_alpha, spec.intercept_mask)
    grad_free = grm.scatter_loading_grad(spec, grad_beta)

    n_angles = spec.n_free_angles
    if n_angles > 0:
        total_c = float(np.sum(coeff))
        G_L = np.einsum("s,sp,sq->pq", coeff, fw.sig_inv_z, fw.y)
        diag = np.arange(P)
        G_L[diag, diag] -= total_c / np.diag(fw.L)
        G_L = np.tril(G_L)
        grad_theta = cholesky_angle_grad(theta, G_L)
        pairs = spec.free_angle_pairs()
        grad_angles = np.array([grad_theta[p, q] for p, q in pairs])
    else:
        grad_angles = np.zeros(0)

    return {
        "intercept_raw": grad_raw,
        "loadings_free": grad_free,
        "angles_free": grad_angles,
    }


def _grad_z_full(fw: Forward, spec: ModelSpec, items: ItemParams) -> np.ndarray:
    """(B, S, R, P) total gradient of log w_r w.r.t. z_r."""
    B, S, R, P = fw.eps.shape
    beta = grm.materialize_loadings(spec, items.loadings_free)
    g_lik = _loglik_grad_z_rows(fw.lik, beta).reshape(B, S, R, P)
    g_prior = -fw.sig_inv_z.reshape(B, S, R, P)
    g_q = -fw.eps / fw.sigma[:, None, None, :]
    return g_lik + g_prior - g_q


def grad_psi_dreg(
    fw: Forward, spec: ModelSpec, items: ItemParams, net: InferenceNet
) -> dict[str, np.ndarray]:
    """Doubly reparameterized gradient of the batch IW-ELBO w.r.t. psi.

    Uses squared normalized weights and only the z-path sensitivity.
    """
    B, S, R, P = fw.eps.shape
    g_z = _grad_z_full(fw, spec, items)
    c2 = (fw.wtilde**2)[..., None] / S
    d_mu = np.sum(c2 * g_z, axis=(1, 2))
    d_log_sigma = np.sum(c2 * g_z * fw.sigma[:, None, None, :] * fw.eps, axis=(1, 2))
    return net.backprop(fw.net_cache, d_mu, d_log_sigma)


def grad_psi_pathwise(
    fw: Forward, spec: ModelSpec, items: ItemParams, net: InferenceNet
) -> dict[str, np.ndarray]:
    """Total pathwise psi-gradient of the fixed-noise IW-ELBO.

    Includes the score terms that the doubly reparameterized estimator
    drops, so it equals the finite-difference gradient of
    ``iw_elbo_estimate`` under common random numbers.
    """
    B, S, R, P = fw.eps.shape
    g_z = _grad_z_full(fw, spec, items)
    c = fw.wtilde[..., None] / S
    sig = fw.sigma[:, None, None, :]
    d_mu = np.sum(c * (g_z - fw.eps / sig), axis=(1, 2))
    d_log_sigma = np.sum(c * (g_z * sig * fw.eps + 1.0 - fw.eps**2), axis=(1, 2))
    return net.backprop(fw.net_cache, d_mu, d_log_sigma)


def score_term_psi(fw: Forward, net: InferenceNet) -> dict[str, np.ndarray]:
    """Backpropagated d log q(z_r | x) / d psi at fixed z, weighted by wtilde.

    Helper for verifying the doubly reparameterized estimator: at R = 1,
    dreg = pathwise + score_term_psi.
    """
    B, S, R, P = fw.eps.shape
    c = fw.wtilde[..., None] / S
    d_mu = np.sum(c * fw.eps / fw.sigma[:, None, None, :], axis=(1, 2))
    d_log_sigma = np.sum(c * (fw.eps**2 - 1.0), axis=(1, 2))
    return net.backprop(fw.net_cache, d_mu, d_log_sigma)


# ----- the fitting loop ---------------------------------------------------------


def fit(X: np.ndarray, spec: ModelSpec, config: FitConfig) -> FitResult:
    """Estimate model and inference-network parameters from response data.

    Deterministic for a given config seed.  Raises
    NumericalDivergenceError if the objective becomes NaN; returns a
    partial result flagged ``converged=False`` when ``max_steps`` is
    reached first.
    """
    X = np.asarray(X, dtype=int)
    spec.validate_responses(X)
    if X.shape[0] == 0:
        raise ValueError("cannot fit an empty response matrix")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_init = np.random.default_rng(seeds[0])
    rng_net = np.random.default_rng(seeds[1])
    rng_batch = np.random.default_rng(seeds[2])
    rng_eps = np.random.default_rng(seeds[3])

    items, theta0 = init_params(spec, rng_init)
    angles_free = extract_free_angles(spec, theta0)
    net = InferenceNet(spec.item_categories, spec.n_factors, hidden=config.hidden, rng=rng_net)

    params: dict[str, np.ndarray] = {
        "intercept_raw": items.intercept_raw,
        "loadings_free": items.loadings_free,
        "angles_free": angles_free,
        **net.params,
    }
    opt = AMSGrad(learning_rate=config.learning_rate, maximize=True)

    n = X.shape[0]
    S, R, P = config.mc_samples, config.iw_samples, spec.n_factors
    batch_size = min(config.batch_size, n)

    trace = np.empty(config.max_steps)
    skipped = 0
    best_window = -np.inf
    stall = 0
    converged = False
    order = rng_batch.permutation(n)
    cursor = 0
    started = time.perf_counter()

    step = 0
    for step in range(config.max_steps):
        if cursor + batch_size > n:
            order = rng_batch.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size

        theta = assemble_theta(spec, params["angles_free"])
        eps = _sample_eps(rng_eps, idx.size, S, R, P)
        fw = forward(spec, items, theta, net, X[idx], eps)

        obj = fw.objective / idx.size
        if np.isnan(obj) or np.any(np.isnan(fw.log_w)):
            raise NumericalDivergenceError(
                f"objective became NaN at step {step}; try a smaller learning "
                f"rate or a different seed"
            )
        trace[step] = obj
        if np.any(fw.degenerate):
            skipped += 1
            logger.warning(
                "step %d: %d observation(s) with fully underflowed importance "
                "weights; skipping update", step, int(np.sum(fw.degenerate)),
            )
            continue

        grads = grad_omega(fw, spec, items, theta)
        grads.update(grad_psi_dreg(fw, spec, items, net))
        opt.step(params, grads)
        # keep angles inside (0, pi]
        np.clip(params["angles_free"], 1e-6, math.pi, out=params["angles_free"])

        if (step + 1) % config.window == 0:
            window_mean = float(np.mean(trace[step + 1 - config.window : step + 1]))
            if window_mean > best_window + config.window_tol:
                stall = 0
            else:
                stall += 1
            best_window = max(best_window, window_mean)
            if stall >= config.patience:
                converged = True
                step += 1
                break
    else:
        step = config.max_steps

    seconds = time.perf_counter() - started
    theta = assemble_theta(spec, params["angles_free"])
    return FitResult(
        spec=spec,
        items=items,
        theta=theta,
        net=net,
        elbo_trace=trace[:step].copy(),
        steps=step,
        converged=converged,
        seconds=seconds,
        n_model_parameters=spec.n_free_parameters,
        n_total_parameters=spec.n_free_parameters + net.n_parameters(),
        skipped_steps=skipped,
    )


def iw_elbo_dataset(
    result_or_parts,
    X: np.ndarray,
    iw_samples: int = 5,
    rng=None,
    chunk: int = 2048,
) -> tuple[float, np.ndarray]:
    """Full-data IW-ELBO: (mean per observation, per-observation values)."""
    if isinstance(result_or_parts, FitResult):
        spec = result_or_parts.spec
        items = result_or_parts.items
        theta = result_or_parts.theta
        net = result_or_parts.net
    else:
        spec, items, theta, net = result_or_parts
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=int)
    vals = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        rows = X[start : start + chunk]
        eps = _sample_eps(rng, rows.shape[0], 1, iw_samples, spec.n_factors)
        fw = forward(spec, items, theta, net, rows, eps)
        vals[start : start + rows.shape[0]] = fw.per_obs
    return float(np.mean(vals)), vals
