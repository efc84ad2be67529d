"""Hyperspherical parameterization of a correlation matrix.

The Cholesky factor L of a P x P correlation matrix is written in terms of
angles theta[p, q] in (0, pi] sitting in the strict lower triangle of a
P x P matrix:

    L[p, 0] = cos(theta[p, 0])
    L[p, q] = cos(theta[p, q]) * prod_{q' < q} sin(theta[p, q'])   (0 < q < p)
    L[p, p] = prod_{q' < p} sin(theta[p, q'])

Row p uses the p angles theta[p, 0..p-1]; row 0 is (1, 0, ..., 0).  Rows
have unit Euclidean norm by the telescoping identity, so Sigma = L @ L.T
is a correlation matrix (unit diagonal, positive semi-definite) for any
valid angles.  Setting every angle to pi/2 yields L = Sigma = I, which is
the estimation starting point.
"""

from __future__ import annotations

import math

import numpy as np

HALF_PI = math.pi / 2.0


def _cos_sin(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # evaluated as sin/cos of (pi/2 - theta) so that theta == pi/2 gives
    # exactly cos 0.0 / sin 1.0, keeping the identity start Sigma == I exact
    shifted = HALF_PI - theta
    return np.sin(shifted), np.cos(shifted)


def validate_angles(theta: np.ndarray) -> None:
    """Check that all strict-lower-triangle angles are in (0, pi]."""
    theta = np.asarray(theta, dtype=float)
    P = theta.shape[0]
    rows, cols = np.tril_indices(P, k=-1)
    vals = theta[rows, cols]
    bad = (vals <= 0.0) | (vals > math.pi)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(
            f"angle theta[{rows[i]}, {cols[i]}] = {vals[i]} outside (0, pi]"
        )


def lower_cholesky(theta: np.ndarray) -> np.ndarray:
    """Map a (P, P) strict-lower-triangle angle matrix to the Cholesky factor L."""
    theta = np.asarray(theta, dtype=float)
    P = theta.shape[0]
    validate_angles(theta)
    cos_t, sin_t = _cos_sin(theta)
    L = np.zeros((P, P))
    for p in range(P):
        running = 1.0
        for q in range(p):
            L[p, q] = cos_t[p, q] * running
            running *= sin_t[p, q]
        L[p, p] = running
    return L


def build_correlation(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (L, Sigma) for the given angles, with Sigma = L @ L.T."""
    L = lower_cholesky(theta)
    return L, L @ L.T


def identity_angles(P: int) -> np.ndarray:
    """Angle matrix whose correlation matrix is exactly the identity."""
    theta = np.zeros((P, P))
    rows, cols = np.tril_indices(P, k=-1)
    theta[rows, cols] = HALF_PI
    return theta


def cholesky_angle_grad(theta: np.ndarray, grad_L: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. L back to the angles.

    Args:
        theta: (P, P) angle matrix.
        grad_L: (P, P) gradient of a scalar w.r.t. the entries of L (only
            the lower triangle is read).

    Returns:
        (P, P) gradient w.r.t. theta (strict lower triangle; other entries 0).
    """
    theta = np.asarray(theta, dtype=float)
    P = theta.shape[0]
    cos_t, sin_t = _cos_sin(theta)
    grad = np.zeros((P, P))
    for p in range(1, P):
        # dL[p, q'] / dtheta[p, q]: differentiate the product form directly
        for q in range(p):
            total = 0.0
            for qp in range(q, p + 1):
                # L[p, qp] depends on theta[p, q] only when q <= qp
                prod = 1.0
                for q2 in range(min(qp, p)):
                    if q2 == q:
                        continue
                    prod *= sin_t[p, q2]
                if qp < p:
                    if q < qp:
                        deriv = cos_t[p, qp] * prod * cos_t[p, q]
                    else:  # q == qp: derivative of the cosine factor
                        deriv = -sin_t[p, q] * prod
                else:  # diagonal entry, pure sine product
                    deriv = prod * cos_t[p, q]
                total += grad_L[p, qp] * deriv
            grad[p, q] = total
    return grad
