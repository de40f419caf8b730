"""Multinomial logit choice model.

Parameters are flat numpy arrays of length ``K * d`` holding the option
blocks ``theta[i*d:(i+1)*d]`` back to back. Outcome ``0`` is the outside
option with logit fixed at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOGIT_CLAMP = 700.0


class DomainError(ValueError):
    """Raised when an input violates a model precondition."""


@dataclass(frozen=True)
class ChoiceDistribution:
    outside_prob: float
    option_probs: np.ndarray

    @property
    def K(self) -> int:
        return len(self.option_probs)

    def full(self) -> np.ndarray:
        """Probabilities ordered as outcomes ``0, 1, ..., K``."""
        return np.concatenate(([self.outside_prob], self.option_probs))


@dataclass(frozen=True)
class ProblemConstants:
    S: float
    R: float
    X: float
    kappa_lower: float
    kappa_upper: float
    L_upper: float


def as_blocks(theta, d: int) -> np.ndarray:
    """View a stacked parameter vector as a ``(K, d)`` array of option blocks."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or d < 1 or theta.size == 0 or theta.size % d:
        raise DomainError(f"parameter of length {theta.size} is not a multiple of d={d}")
    return theta.reshape(-1, d)


def logits(x, theta) -> np.ndarray:
    """Per-option logits ``theta_i^T x``; ``x`` may be a single action or a stack."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return x @ as_blocks(theta, d).T


def lse(s) -> float:
    """``log(1 + sum(exp(s)))`` with the exponentials shifted to avoid overflow."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise DomainError("lse needs a nonempty 1-d logit vector")
    if not np.all(np.isfinite(s)):
        raise DomainError("lse received non-finite logits")
    m = max(0.0, float(s.max()))
    return m + float(np.log(np.exp(-m) + np.exp(s - m).sum()))


def probs_from_logits(s):
    """Vectorised MNL probabilities.

    ``s`` has shape ``(..., K)``. Returns ``(z0, z)`` with shapes ``(...)`` and
    ``(..., K)``.
    """
    s = np.minimum(np.maximum(np.asarray(s, dtype=float), -LOGIT_CLAMP), LOGIT_CLAMP)
    m = np.maximum(s.max(axis=-1), 0.0)
    e0 = np.exp(-m)
    e = np.exp(s - m[..., None])
    denom = e0 + e.sum(axis=-1)
    return e0 / denom, e / denom[..., None]


def jacobian_from_logits(s) -> np.ndarray:
    """``diag(z) - z z^T`` evaluated at logits of shape ``(..., K)``."""
    z0, z = probs_from_logits(s)
    A = -z[..., :, None] * z[..., None, :]
    idx = np.arange(z.shape[-1])
    # 1 - z_i as a sum of positive terms, so the diagonal keeps full relative precision
    before = np.zeros_like(z)
    after = np.zeros_like(z)
    before[..., 1:] = np.cumsum(z[..., :-1], axis=-1)
    after[..., :-1] = np.flip(np.cumsum(np.flip(z[..., 1:], axis=-1), axis=-1), axis=-1)
    A[..., idx, idx] = z * (z0[..., None] + before + after)
    return A


def _check_dims(x, theta):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("action must be a 1-d vector")
    as_blocks(theta, x.size)
    return x


def choice_probabilities(x, theta) -> ChoiceDistribution:
    x = _check_dims(x, theta)
    z0, z = probs_from_logits(logits(x, theta))
    return ChoiceDistribution(float(z0), z)


def jacobian_A(x, theta) -> np.ndarray:
    x = _check_dims(x, theta)
    return jacobian_from_logits(logits(x, theta))


def gauss_legendre_01(nodes: int):
    """Gauss-Legendre nodes and weights mapped onto ``[0, 1]``."""
    if nodes < 2:
        raise DomainError("quadrature needs at least 2 nodes")
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (t + 1.0), 0.5 * w


def mean_value_matrix_B(x, theta1, theta2, nodes: int = 32) -> np.ndarray:
    """Path average of ``A`` along the segment from ``theta2`` to ``theta1``.

    Satisfies ``z(x, theta1) - z(x, theta2) = [B kron x^T] (theta1 - theta2)``.
    """
    x = _check_dims(x, theta1)
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    if theta1.shape != theta2.shape:
        raise DomainError("theta1 and theta2 differ in shape")
    v, w = gauss_legendre_01(nodes)
    s1, s2 = logits(x, theta1), logits(x, theta2)
    path = v[:, None] * s1 + (1.0 - v[:, None]) * s2
    return np.einsum("n,nij->ij", w, jacobian_from_logits(path))


def expected_reward(x, theta, rho) -> float:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError("revenues must be nonnegative")
    z = choice_probabilities(x, theta).option_probs
    if rho.shape != z.shape:
        raise DomainError(f"rho has length {rho.size}, expected K={z.size}")
    return float(rho @ z)


def expected_rewards(arms, theta, rho) -> np.ndarray:
    """``rho^T z(x, theta)`` for every row of ``arms``."""
    _, z = probs_from_logits(logits(np.atleast_2d(arms), theta))
    return z @ np.asarray(rho, dtype=float)


def sample_outcome(x, theta_star, rng: np.random.Generator) -> int:
    """Draw an outcome in ``{0, ..., K}`` by inverting the CDF on one uniform."""
    p = choice_probabilities(x, theta_star).full()
    cdf = np.cumsum(p)
    u = rng.random()
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


def kappa_bounds(S: float, X: float, K: int) -> tuple[float, float]:
    """Closed-form lower/upper bounds on kappa over the ball of radius S*X in logit space."""
    if K < 1:
        raise DomainError("K must be at least 1")
    if S < 0 or X < 0:
        raise DomainError("S and X must be nonnegative")
    sx = S * X
    r = sx / np.sqrt(K)
    lower = np.exp(r) * (1.0 + K * np.exp(-r)) ** 2
    upper = np.exp(sx) * (1.0 + K * np.exp(sx)) ** 2
    return float(lower), float(upper)


def L_upper_bound(S: float, X: float, K: int) -> float:
    # evaluated at the boundary ||x|| = X, where the expression is largest
    if K < 1:
        raise DomainError("K must be at least 1")
    sx = S * X
    return float(1.0 / (1.0 + np.exp(-sx) + (K - 1) * np.exp(-2.0 * sx)))


def problem_constants(S: float, R: float, X: float, K: int) -> ProblemConstants:
    lo, up = kappa_bounds(S, X, K)
    return ProblemConstants(float(S), float(R), float(X), lo, up, L_upper_bound(S, X, K))


def check_jacobian(A, atol: float = 0.0) -> None:
    """Raise DomainError unless ``A`` is a symmetric, strictly diagonally dominant M-matrix."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("A must be square")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-14):
        raise DomainError("A is not symmetric")
    diag = np.diag(A)
    off = A - np.diag(diag)
    if np.any(diag <= 0):
        raise DomainError("A has a nonpositive diagonal entry")
    if np.any(off > atol):
        raise DomainError("A has a positive off-diagonal entry")
    if np.any(diag <= np.abs(off).sum(axis=1)):
        raise DomainError("A is not strictly diagonally dominant")


def jacobian_eigen_sandwich(A) -> tuple[float, float, float]:
    """Row-sum bracket ``(min_row_sum, lambda_min, max_row_sum)`` of a Jacobian."""
    check_jacobian(A)
    A = np.asarray(A, dtype=float)
    rows = A.sum(axis=1)
    lam_min = float(np.linalg.eigvalsh(A)[0])
    return float(rows.min()), lam_min, float(rows.max())


def sample_feasible_logits(S: float, X: float, K: int, n: int, rng, boundary_frac: float = 0.5):
    """Logit vectors ``theta_i^T x`` reachable with ``||x|| <= X`` and ``||theta|| <= S``.

    The reachable set is exactly the ball of radius ``S*X`` in ``R^K`` (take
    ``d = 1``). A fraction of the draws is placed on the boundary sphere, where
    the extreme eigenvalues sit.
    """
    u = rng.standard_normal((n, K))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    radius = np.full(n, float(S * X))
    n_in = n - int(round(boundary_frac * n))
    radius[:n_in] *= rng.random(n_in) ** (1.0 / K)
    return u * radius[:, None]


def empirical_constants(S: float, X: float, K: int, n: int, rng) -> tuple[float, float]:
    """Monte-Carlo estimates of ``(min lambda_min(A), max lambda_max(A))`` over the feasible set."""
    eig = np.linalg.eigvalsh(jacobian_from_logits(sample_feasible_logits(S, X, K, n, rng)))
    return float(eig[:, 0].min()), float(eig[:, -1].max())
