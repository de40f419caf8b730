"""Numerical property suite for the model, estimator and bound helpers.

Each check draws its own random instances from a fixed seed and returns a
``CheckResult`` holding the worst observed error next to its tolerance.
Model functions are looked up through their modules at call time, so a
patched implementation is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import estimation, mnl_model


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} worst={self.worst:.3g} tol={self.tolerance:.3g} {self.detail}".rstrip()


def _instance(rng, K, d, S=2.0, X=1.0):
    x = rng.standard_normal(d)
    x *= X * rng.uniform() ** (1.0 / d) / np.linalg.norm(x)
    theta = rng.standard_normal(K * d)
    theta *= S * rng.uniform() ** (1.0 / (K * d)) / np.linalg.norm(theta)
    return x, theta


def _history(rng, K, d, t, S=1.0, X=1.0):
    _, theta = _instance(rng, K, d, S, X)
    h = estimation.InteractionHistory(K, d)
    for _ in range(t):
        x, _ = _instance(rng, K, d, S, X)
        h.append(x, mnl_model.sample_outcome(x, theta, rng))
    return h


def _shape(rng, max_K=4, max_d=3):
    return int(rng.integers(1, max_K + 1)), int(rng.integers(1, max_d + 1))


def check_gradient(n=50, seed=0) -> CheckResult:
    """Likelihood gradient and ``grad lse = z`` against central differences."""
    rng = np.random.default_rng(seed)
    worst, h = 0.0, 1e-6
    for _ in range(n):
        K, d = _shape(rng)
        hist = _history(rng, K, d, int(rng.integers(1, 51)))
        theta = rng.standard_normal(K * d)
        grad = estimation.log_likelihood_gradient(hist, theta, 1.0)
        E = np.eye(K * d) * h
        fd = np.array([estimation.log_likelihood(hist, theta + e, 1.0) - estimation.log_likelihood(hist, theta - e, 1.0) for e in E]) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), 1e-12))
        x, th = _instance(rng, K, d)
        s = mnl_model.logits(x, th)
        z = mnl_model.choice_probabilities(x, th).option_probs
        fd = np.array([mnl_model.lse(s + e) - mnl_model.lse(s - e) for e in np.eye(K) * h]) / (2 * h)
        worst = max(worst, np.linalg.norm(z - fd) / np.linalg.norm(z))
    return CheckResult("gradient_fd", worst < 1e-5, worst, 1e-5)


def check_hessian(n=30, seed=1) -> CheckResult:
    """``H`` against differences of the gradient, and ``A`` against differences of ``z``."""
    rng = np.random.default_rng(seed)
    worst, h = 0.0, 1e-6
    for _ in range(n):
        K, d = _shape(rng)
        hist = _history(rng, K, d, int(rng.integers(1, 51)))
        theta = rng.standard_normal(K * d)
        H = estimation.hessian_H(hist, theta, 1.0)
        E = np.eye(K * d) * h
        fd = -np.array(
            [estimation.log_likelihood_gradient(hist, theta + e, 1.0) - estimation.log_likelihood_gradient(hist, theta - e, 1.0) for e in E]
        ).T / (2 * h)
        worst = max(worst, np.linalg.norm(H - fd) / np.linalg.norm(H))
        x, th = _instance(rng, K, d)
        s = mnl_model.logits(x, th)
        A = mnl_model.jacobian_from_logits(s)
        fd = np.array([mnl_model.probs_from_logits(s + e)[1] - mnl_model.probs_from_logits(s - e)[1] for e in np.eye(K) * h]).T / (2 * h)
        worst = max(worst, np.linalg.norm(A - fd) / np.linalg.norm(A))
    return CheckResult("hessian_fd", worst < 1e-4, worst, 1e-4)


def check_mean_value(n=100, seed=2) -> CheckResult:
    """``z(x,t1) - z(x,t2) = [B kron x^T](t1 - t2)`` with 64 nodes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K, d = _shape(rng)
        x, t1 = _instance(rng, K, d)
        _, t2 = _instance(rng, K, d)
        B = mnl_model.mean_value_matrix_B(x, t1, t2, 64)
        lhs = mnl_model.choice_probabilities(x, t1).option_probs - mnl_model.choice_probabilities(x, t2).option_probs
        worst = max(worst, np.abs(lhs - np.kron(B, x[None, :]) @ (t1 - t2)).max())
    return CheckResult("mean_value_identity", worst < 1e-8, worst, 1e-8)


def check_g_identity(n=30, seed=3) -> CheckResult:
    """``g(t1) - g(t2) = G(t1, t2)(t1 - t2)`` with 64 nodes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K, d = _shape(rng)
        hist = _history(rng, K, d, int(rng.integers(1, 51)))
        _, t1 = _instance(rng, K, d)
        _, t2 = _instance(rng, K, d)
        G = estimation.gram_G(hist, t1, t2, 1.0, nodes=64)
        lhs = estimation.g_map(hist, t1, 1.0) - estimation.g_map(hist, t2, 1.0)
        worst = max(worst, np.abs(lhs - G @ (t1 - t2)).max())
    return CheckResult("g_map_identity", worst < 1e-8, worst, 1e-8)


def check_m_matrix(n=1000, seed=4) -> CheckResult:
    """Sign pattern, strict dominance and the row-sum eigenvalue bracket of ``A``."""
    rng = np.random.default_rng(seed)
    bad, first = 0, ""
    for _ in range(n):
        K, d = _shape(rng)
        A = mnl_model.jacobian_A(*_instance(rng, K, d, S=4.0))
        try:
            lo, lam, hi = mnl_model.jacobian_eigen_sandwich(A)
            if not (lo <= lam * (1 + 1e-12) + 1e-15 and lam <= hi * (1 + 1e-12) + 1e-15 and lam > 0):
                raise mnl_model.DomainError("eigenvalue outside the row-sum bracket")
        except mnl_model.DomainError as exc:
            bad += 1
            first = first or str(exc)
    return CheckResult("m_matrix_sandwich", bad == 0, float(bad), 0.0, first)


def check_loewner(n=30, seed=5) -> CheckResult:
    """``G >= (I kron V)/kappa`` and ``G >= H(t_i)/(1+2S)`` on the feasible set."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        K, d = _shape(rng, 3, 3)
        S, X, lam = rng.uniform(0.2, 1.5), 1.0, rng.uniform(0.5, 3.0)
        hist = _history(rng, K, d, int(rng.integers(1, 21)), S, X)
        kappa = mnl_model.kappa_bounds(S, X, K)[1]
        _, t1 = _instance(rng, K, d, S, X)
        _, t2 = _instance(rng, K, d, S, X)
        G = estimation.gram_G(hist, t1, t2, lam, nodes=64)
        V = kappa * lam * np.eye(d) + sum(np.outer(x, x) for x in hist.distinct_actions * np.sqrt(hist.plays)[:, None])
        worst = min(worst, np.linalg.eigvalsh(G - np.kron(np.eye(K), V) / kappa)[0])
        for th in (t1, t2):
            worst = min(worst, np.linalg.eigvalsh(G - estimation.hessian_H(hist, th, lam) / (1 + 2 * S))[0])
    return CheckResult("loewner_orders", worst >= -1e-8, float(worst), -1e-8)


def check_logistic(n=500, seed=6) -> CheckResult:
    """K = 1: probability is the sigmoid and ``A`` its derivative, to machine precision."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        x, th = rng.uniform(-10, 10), rng.uniform(-3, 3)
        u = x * th
        sig = 1.0 / (1.0 + np.exp(-u))
        deriv = 1.0 / (np.exp(u / 2) + np.exp(-u / 2)) ** 2
        z = mnl_model.choice_probabilities([x], [th]).option_probs[0]
        a = mnl_model.jacobian_A([x], [th])[0, 0]
        worst = max(worst, abs(z - sig) / sig, abs(a - deriv) / deriv)
    return CheckResult("logistic_reduction", worst < 1e-13, worst, 1e-13)


KAPPA_CASES = ((1.0, 1.0, 1), (1.0, 1.0, 2), (2.0, 1.0, 3))


def kappa_sandwich(S, X, K, n=100_000, seed=7):
    """Monte-Carlo minimum of ``lambda_min(A)`` and the closed-form bracket ``[1/upper, 1/lower]``."""
    lam_min, _ = mnl_model.empirical_constants(S, X, K, n, np.random.default_rng(seed))
    lo, up = mnl_model.kappa_bounds(S, X, K)
    return lam_min, 1.0 / up, 1.0 / lo


def check_kappa(n=100_000, seed=7) -> CheckResult:
    worst, parts = np.inf, []
    ok = True
    for S, X, K in KAPPA_CASES:
        m, a, b = kappa_sandwich(S, X, K, n, seed)
        # the lower bound is attained for K = 1, so allow roundoff at the top
        inside = a <= m <= b * (1 + 1e-12)
        ok &= inside
        worst = min(worst, m - a, b * (1 + 1e-12) - m)
        parts.append(f"K={K}:{m:.4g}in[{a:.4g},{b:.4g}]")
    return CheckResult("kappa_sandwich", bool(ok), float(worst), 0.0, " ".join(parts))


SUITE = (
    check_gradient,
    check_hessian,
    check_mean_value,
    check_g_identity,
    check_m_matrix,
    check_loewner,
    check_logistic,
    check_kappa,
)


def run_suite(checks=SUITE) -> tuple[list[CheckResult], float]:
    """Run every check; a check that raises is reported as failed."""
    t0 = time.perf_counter()
    out = []
    for fn in checks:
        try:
            out.append(fn())
        except Exception as exc:  # a crash is a failure of that property
            name = fn.__name__.removeprefix("check_")
            out.append(CheckResult(name, False, float("nan"), float("nan"), f"raised {type(exc).__name__}: {exc}"))
    return out, time.perf_counter() - t0
