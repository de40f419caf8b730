"""Regularised maximum-likelihood estimation for the MNL model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mnl_model import (
    LOGIT_CLAMP,
    DomainError,
    gauss_legendre_01,
    jacobian_from_logits,
    probs_from_logits,
)

log = logging.getLogger(__name__)


class InteractionHistory:
    """Ordered (action, outcome) records.

    Records are also pooled by distinct action (count of plays and of each
    outcome, plus the cached outer product ``x x^T``), so likelihood terms cost
    O(number of distinct arms) rather than O(t).
    """

    def __init__(self, K: int, d: int):
        if K < 1 or d < 1:
            raise DomainError("K and d must be positive")
        self.K, self.d = K, d
        self._records: list[tuple[int, int]] = []
        self._index: dict[bytes, int] = {}
        self._u = np.zeros((0, d))
        self._uu = np.zeros((0, d, d))
        self._counts = np.zeros((0, K + 1))

    @classmethod
    def from_records(cls, K, d, actions, outcomes):
        h = cls(K, d)
        for x, y in zip(actions, outcomes):
            h.append(x, y)
        return h

    def __len__(self):
        return len(self._records)

    def append(self, x, y: int) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise DomainError(f"action has shape {x.shape}, expected ({self.d},)")
        if not 0 <= int(y) <= self.K:
            raise DomainError(f"outcome {y} outside 0..{self.K}")
        key = x.tobytes()
        j = self._index.get(key)
        if j is None:
            j = self._index[key] = len(self._u)
            self._u = np.vstack([self._u, x[None, :]])
            self._uu = np.concatenate([self._uu, np.outer(x, x)[None]])
            self._counts = np.vstack([self._counts, np.zeros(self.K + 1)])
        self._counts[j, int(y)] += 1
        self._records.append((j, int(y)))

    def copy(self) -> InteractionHistory:
        h = InteractionHistory(self.K, self.d)
        h._records = list(self._records)
        h._index = dict(self._index)
        h._u, h._uu, h._counts = self._u.copy(), self._uu.copy(), self._counts.copy()
        return h

    @property
    def actions(self) -> np.ndarray:
        return self._u[[j for j, _ in self._records]].reshape(-1, self.d)

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([y for _, y in self._records], dtype=np.int64)

    def one_hot(self) -> np.ndarray:
        """``m_s`` rows; outcome 0 maps to the zero vector."""
        m = np.zeros((len(self), self.K))
        y = self.outcomes
        sel = y > 0
        m[np.flatnonzero(sel), y[sel] - 1] = 1.0
        return m

    @property
    def distinct_actions(self) -> np.ndarray:
        return self._u

    @property
    def distinct_outer(self) -> np.ndarray:
        return self._uu

    @property
    def plays(self) -> np.ndarray:
        """Number of times each distinct action was played."""
        return self._counts.sum(axis=1)

    @property
    def outcome_counts(self) -> np.ndarray:
        """``(n_distinct, K+1)`` outcome tallies per distinct action."""
        return self._counts

    def logits(self, theta) -> np.ndarray:
        """Logits of each distinct action."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.K * self.d,):
            raise DomainError(f"theta has shape {theta.shape}, expected ({self.K * self.d},)")
        return self._u @ theta.reshape(self.K, self.d).T


@dataclass
class FitReport:
    estimate: np.ndarray
    gradient_norm: float
    iterations: int
    converged: bool
    projected: np.ndarray
    projection_active: bool = False
    projection_objective: float = 0.0


def _kron_sum(W, outer, lam, K, d):
    """``lam*I + sum_s W_s kron x_s x_s^T`` from per-record K x K weights."""
    n = W.shape[0]
    M = (W.reshape(n, K * K).T @ outer.reshape(n, d * d)).reshape(K, K, d, d)
    M = M.transpose(0, 2, 1, 3).reshape(K * d, K * d)
    M[np.diag_indices_from(M)] += lam
    return M


def log_likelihood(history: InteractionHistory, theta, lam: float) -> float:
    if lam <= 0:
        raise DomainError("lambda must be positive")
    theta = np.asarray(theta, dtype=float)
    reg = 0.5 * lam * float(theta @ theta)
    if len(history) == 0:
        return -reg
    s = np.clip(history.logits(theta), -LOGIT_CLAMP, LOGIT_CLAMP)
    m = np.maximum(s.max(axis=1), 0.0)
    lse = m + np.log(np.exp(-m) + np.exp(s - m[:, None]).sum(axis=1))
    C = history.outcome_counts
    return float((C[:, 1:] * s).sum() - (history.plays * lse).sum()) - reg


def g_map(history: InteractionHistory, theta, lam: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if len(history) == 0:
        return lam * theta
    _, z = probs_from_logits(history.logits(theta))
    return lam * theta + ((history.plays[:, None] * z).T @ history.distinct_actions).ravel()


def log_likelihood_gradient(history: InteractionHistory, theta, lam: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if len(history) == 0:
        return -lam * theta
    _, z = probs_from_logits(history.logits(theta))
    resid = history.outcome_counts[:, 1:] - history.plays[:, None] * z
    return (resid.T @ history.distinct_actions).ravel() - lam * theta


def hessian_H(history: InteractionHistory, theta, lam: float) -> np.ndarray:
    """Hessian of the negative regularised log-likelihood."""
    K, d = history.K, history.d
    if len(history) == 0:
        return lam * np.eye(K * d)
    A = jacobian_from_logits(history.logits(theta))
    return _kron_sum(history.plays[:, None, None] * A, history.distinct_outer, lam, K, d)


def gram_G(history: InteractionHistory, theta1, theta2, lam: float, nodes: int = 32) -> np.ndarray:
    """``lam*I + sum_s B(x_s, theta1, theta2) kron x_s x_s^T``; used by the property checks only."""
    K, d = history.K, history.d
    if len(history) == 0:
        return lam * np.eye(K * d)
    v, w = gauss_legendre_01(nodes)
    s1, s2 = history.logits(theta1), history.logits(theta2)
    path = v[:, None, None] * s1 + (1.0 - v[:, None, None]) * s2
    B = np.einsum("n,nsij->sij", w, jacobian_from_logits(path))
    return _kron_sum(history.plays[:, None, None] * B, history.distinct_outer, lam, K, d)


def fit_mle(
    history: InteractionHistory,
    lam: float,
    warm_start=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> FitReport:
    """Damped Newton ascent on the regularised log-likelihood.

    The objective is strictly concave, so the maximiser is unique; the line
    search halves the step until the Armijo condition holds (at most 30 times).
    """
    if lam <= 0:
        raise DomainError("lambda must be positive")
    K, d = history.K, history.d
    theta = np.zeros(K * d) if warm_start is None else np.array(warm_start, dtype=float)
    if theta.shape != (K * d,):
        raise DomainError(f"warm start has shape {theta.shape}, expected ({K * d},)")

    obj = log_likelihood(history, theta, lam)
    grad = log_likelihood_gradient(history, theta, lam)
    gnorm = float(np.linalg.norm(grad))
    it = 0
    while gnorm > tol and it < max_iter:
        H = hessian_H(history, theta, lam)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("Newton system is singular") from exc
        slope = float(grad @ step)
        # objective differences below this are roundoff
        slack = 1e-13 * max(1.0, abs(obj))
        t = 1.0
        for _ in range(30):
            cand = theta + t * step
            cand_obj = log_likelihood(history, cand, lam)
            if cand_obj >= obj + 1e-4 * t * slope - slack:
                break
            t *= 0.5
        theta, obj = cand, cand_obj
        grad = log_likelihood_gradient(history, theta, lam)
        gnorm = float(np.linalg.norm(grad))
        it += 1

    converged = gnorm <= tol
    if not converged:
        log.debug("fit_mle stopped after %d iterations with |grad|=%.3g", it, gnorm)
    return FitReport(theta, gnorm, it, converged, theta.copy())


def projection_objective(history: InteractionHistory, theta, g_target, lam: float) -> float:
    """``||g(theta) - g_target||^2`` in the ``H(theta)^{-1}`` norm."""
    r = g_map(history, theta, lam) - g_target
    return float(r @ np.linalg.solve(hessian_H(history, theta, lam), r))


def _projection_objective_batch(history: InteractionHistory, thetas, g_target, lam: float) -> np.ndarray:
    """``projection_objective`` for each row of ``thetas`` in one vectorised pass."""
    K, d = history.K, history.d
    P = len(thetas)
    if len(history) == 0:
        r = lam * thetas - g_target
        return (r * r).sum(axis=1) / lam
    U, n = history.distinct_actions, history.plays
    m = len(U)
    s = U @ thetas.reshape(P, K, d).transpose(0, 2, 1)
    _, z = probs_from_logits(s)
    nz = z * n[:, None]
    g = lam * thetas + (nz.transpose(0, 2, 1) @ U).reshape(P, K * d)
    W = -nz[..., :, None] * z[..., None, :]
    W.reshape(P, m, K * K)[..., :: K + 1] += nz
    H = W.reshape(P, m, K * K).transpose(0, 2, 1) @ history.distinct_outer.reshape(m, d * d)
    H = H.reshape(P, K, K, d, d).transpose(0, 1, 3, 2, 4).reshape(P, K * d, K * d)
    H += lam * np.eye(K * d)
    r = g - g_target
    return (r * np.linalg.solve(H, r[..., None])[..., 0]).sum(axis=1)


def _ball(theta, S):
    n = np.linalg.norm(theta)
    return theta if n <= S else theta * (S / n)


def project_feasible(
    estimate,
    history: InteractionHistory,
    lam: float,
    S: float,
    max_steps: int = 200,
    fd_step: float = 1e-5,
    move_tol: float = 1e-7,
) -> tuple[np.ndarray, bool, float]:
    """Feasible estimator: minimise the g-map distance to the MLE over ``||theta|| <= S``.

    Returns ``(theta, projection_active, objective)``. The problem is
    non-convex; this runs projected gradient descent (finite-difference
    gradient, backtracking step) from the radial rescaling of ``estimate``
    and returns the best iterate seen.
    """
    estimate = np.asarray(estimate, dtype=float)
    norm = float(np.linalg.norm(estimate))
    if norm <= S:
        return estimate.copy(), False, 0.0

    g_hat = g_map(history, estimate, lam)

    def f(th):
        return float(_projection_objective_batch(history, th[None, :], g_hat, lam)[0])

    theta = estimate * (S / norm)
    val = f(theta)
    best, best_val = theta, val
    step = 1.0
    eye = np.eye(theta.size) * fd_step
    for _ in range(max_steps):
        fd = _projection_objective_batch(history, np.vstack([theta + eye, theta - eye]), g_hat, lam)
        grad = (fd[: theta.size] - fd[theta.size :]) / (2 * fd_step)
        if not np.all(np.isfinite(grad)) or not grad.any():
            break
        step *= 2.0
        # backtracking ladder step, step/2, step/4, ... evaluated in blocks
        moved = False
        for block in range(0, 40, 10):
            steps = step * 0.5 ** np.arange(block, block + 10)
            cands = theta - steps[:, None] * grad
            norms = np.linalg.norm(cands, axis=1)
            cands *= np.minimum(1.0, S / norms)[:, None]
            vals = _projection_objective_batch(history, cands, g_hat, lam)
            ok = np.flatnonzero(vals < val)
            if ok.size:
                j = ok[0]
                cand, cand_val, step = cands[j], float(vals[j]), float(steps[j])
                moved = True
                break
        if not moved:
            break
        delta = float(np.linalg.norm(cand - theta))
        theta, val = cand, cand_val
        if val < best_val:
            best, best_val = theta, val
        if delta < move_tol:
            break
    return best, True, best_val
