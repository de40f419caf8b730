"""Synthetic problem generation, episode execution and regret bookkeeping."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .confidence import BonusParams, beta, bonus_tight, membership_C
from .mnl_model import (
    DomainError,
    ProblemConstants,
    expected_rewards,
    problem_constants,
    sample_outcome,
)
from .policy import AgentConfig, MNLUCBAgent, Variant, default_lambda

log = logging.getLogger(__name__)

TRACE_FIELDS = ("variant", "sweep_key", "seed", "t", "chosen_index", "r_t", "R_t", "bonus", "covered", "grad_norm")


@dataclass
class ProblemInstance:
    arms: np.ndarray
    theta_star: np.ndarray
    rho: np.ndarray
    constants: ProblemConstants
    best_arm_index: int
    best_value: float

    @property
    def K(self) -> int:
        return len(self.rho)

    @property
    def d(self) -> int:
        return self.arms.shape[1]

    def rewards(self) -> np.ndarray:
        return expected_rewards(self.arms, self.theta_star, self.rho)


def solve_sx_for_kappa(kappa_target: float, K: int, tol: float = 1e-10) -> float:
    """Invert the kappa upper bound ``e^u (1 + K e^u)^2`` for ``u = S*X`` by bisection on [0, 20]."""
    floor = (1.0 + K) ** 2
    if kappa_target < floor:
        raise DomainError(f"kappa_target={kappa_target} is below the S*X=0 value {floor}")

    def f(u):
        return np.exp(u) * (1.0 + K * np.exp(u)) ** 2 - kappa_target

    lo, hi = 0.0, 20.0
    if f(hi) < 0:
        raise DomainError(f"kappa_target={kappa_target} needs S*X beyond 20")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_instance(arms, theta_star, rho, S: float | None = None) -> ProblemInstance:
    arms = np.asarray(arms, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    rho = np.asarray(rho, dtype=float)
    S = float(np.linalg.norm(theta_star)) if S is None else float(S)
    X = float(np.linalg.norm(arms, axis=1).max())
    const = problem_constants(S, float(np.linalg.norm(rho)), X, len(rho))
    values = expected_rewards(arms, theta_star, rho)
    best = int(np.argmax(values))
    return ProblemInstance(arms, theta_star, rho, const, best, float(values[best]))


def generate_problem(
    d: int,
    K: int,
    n_arms: int,
    seed: int,
    S_target: float | None = None,
    kappa_target: float | None = None,
) -> ProblemInstance:
    """Gaussian arms, ``theta_i ~ N(0, I/K)``, revenues ``1..K``.

    ``kappa_target`` rescales ``theta*`` so that the kappa upper bound of the
    instance equals the target; it overrides ``S_target``.
    """
    if n_arms < 1:
        raise DomainError("n_arms must be >= 1")
    rng = np.random.default_rng(seed)
    arms = rng.standard_normal((n_arms, d))
    theta = rng.standard_normal(K * d) / np.sqrt(K)
    rho = np.arange(1, K + 1, dtype=float)
    if kappa_target is not None:
        X = float(np.linalg.norm(arms, axis=1).max())
        S_target = solve_sx_for_kappa(kappa_target, K) / X
    if S_target is not None:
        theta *= S_target / np.linalg.norm(theta)
    return make_instance(arms, theta, rho)


@dataclass
class RunSettings:
    """Agent-side settings shared by every episode of a run."""

    variant: Variant = Variant.TIGHT
    T: int = 1000
    delta: float = 0.01
    lam: float | None = None
    tol: float = 1e-8
    max_iter: int = 100
    refit_period: int = 1
    oracle: bool = False

    def agent_config(self, inst: ProblemInstance) -> AgentConfig:
        c = inst.constants
        lam = default_lambda(inst.K, inst.d, self.T) if self.lam is None else self.lam
        params = BonusParams(
            R=c.R, L=c.L_upper, kappa=c.kappa_upper, S=c.S, delta=self.delta, lam=lam, d=inst.d, K=inst.K
        )
        return AgentConfig(
            variant=self.variant,
            rho=inst.rho,
            bonus=params,
            tol=self.tol,
            max_iter=self.max_iter,
            refit_period=self.refit_period,
            oracle_theta=inst.theta_star if self.oracle else None,
        )


@dataclass
class RegretTrace:
    variant: str
    sweep_key: str
    seed: int
    chosen: np.ndarray
    regret: np.ndarray
    cumulative: np.ndarray
    bonus: np.ndarray
    covered: np.ndarray
    grad_norm: np.ndarray
    tight_bonus: np.ndarray
    width_sq: np.ndarray
    log_det_ratio: float
    ucb_violations: int
    fit_failures: int
    projections: int
    config: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.regret)

    def rows(self):
        for i in range(self.T):
            yield (
                self.variant,
                self.sweep_key,
                self.seed,
                i + 1,
                int(self.chosen[i]),
                f"{self.regret[i]:.12g}",
                f"{self.cumulative[i]:.12g}",
                f"{self.bonus[i]:.12g}",
                int(self.covered[i]),
                f"{self.grad_norm[i]:.6g}",
            )

    def potential_check(self) -> tuple[float, float, bool]:
        """Elliptical potential: ``sum min(||x_t||^2_{V_t^-1}, 1) <= 2 log(det V_{T+1} / det V_1)``."""
        lhs = float(np.minimum(self.width_sq, 1.0).sum())
        rhs = 2.0 * self.log_det_ratio
        return lhs, rhs, lhs <= rhs + 1e-9

    def bound_violations(self) -> int:
        """Covered rounds where the regret exceeds twice the tight bonus of the played arm."""
        bad = self.covered & (self.regret > 2.0 * self.tight_bonus + 1e-12)
        return int(bad.sum())

    def summary(self) -> dict:
        lhs, rhs, ok = self.potential_check()
        return {
            "variant": self.variant,
            "sweep_key": self.sweep_key,
            "seed": self.seed,
            "R_T": float(self.cumulative[-1]) if self.T else 0.0,
            "all_covered": bool(self.covered.all()),
            "potential_sum": lhs,
            "potential_bound": rhs,
            "potential_ok": ok,
            "ucb_violations": self.ucb_violations,
            "bound_violations": self.bound_violations(),
            "fit_failures": self.fit_failures,
            "projections": self.projections,
        }


def episode_streams(seed: int):
    """Independent generators for outcomes and agent randomness."""
    outcome_ss, agent_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(outcome_ss), np.random.default_rng(agent_ss)


def run_episode(
    instance: ProblemInstance,
    settings: RunSettings,
    seed: int,
    sweep_key: str = "",
    track_coverage: bool = True,
) -> RegretTrace:
    if settings.T < 1:
        raise DomainError("horizon must be >= 1")
    T = settings.T
    cfg = settings.agent_config(instance)
    out_rng, agent_rng = episode_streams(seed)
    agent = MNLUCBAgent(cfg, agent_rng)
    p = cfg.bonus
    arms, theta_star = instance.arms, instance.theta_star
    true_values = instance.rewards()
    x_star = arms[instance.best_arm_index]
    log_det_1 = agent.gram.log_det()

    chosen = np.zeros(T, dtype=np.int64)
    regret = np.zeros(T)
    bonus = np.zeros(T)
    covered = np.zeros(T, dtype=bool)
    grad_norm = np.zeros(T)
    tight = np.zeros(T)
    width_sq = np.zeros(T)
    ucb_violations = 0
    projections = 0

    for i in range(T):
        t = agent.gram.t
        idx, _ = agent.select_action(arms)
        x = arms[idx]
        b_t = beta(t, p)
        chosen[i] = idx
        regret[i] = max(instance.best_value - true_values[idx], 0.0)
        bonus[i] = float(agent.bonuses(x)[0])
        tight[i] = float(bonus_tight(x, b_t, p, agent.gram))
        width_sq[i] = agent.gram.inv_norm(x) ** 2
        grad_norm[i] = agent.fit.gradient_norm
        projections += int(agent.fit.projection_active)
        if track_coverage:
            covered[i] = membership_C(theta_star, agent.fit.estimate, agent.history, p.lam, p.S, b_t)
            if covered[i]:
                est = expected_rewards(x_star[None, :], agent.theta, cfg.rho)[0]
                if instance.best_value > est + float(bonus_tight(x_star, b_t, p, agent.gram)) + 1e-12:
                    ucb_violations += 1
        y = sample_outcome(x, theta_star, out_rng)
        agent.observe(x, y)

    return RegretTrace(
        variant=cfg.variant.value,
        sweep_key=sweep_key,
        seed=seed,
        chosen=chosen,
        regret=regret,
        cumulative=np.cumsum(regret),
        bonus=bonus,
        covered=covered,
        grad_norm=grad_norm,
        tight_bonus=tight,
        width_sq=width_sq,
        log_det_ratio=agent.gram.log_det() - log_det_1,
        ucb_violations=ucb_violations,
        fit_failures=agent.fit_failures,
        projections=projections,
    )


@dataclass(frozen=True)
class SweepPoint:
    """One column of an experiment: problem shape plus agent settings."""

    key: str
    d: int
    K: int
    n_arms: int
    settings: RunSettings
    S_target: float | None = None
    kappa_target: float | None = None


def _run_job(job):
    point, seed, track = job
    inst = generate_problem(point.d, point.K, point.n_arms, seed, point.S_target, point.kappa_target)
    return run_episode(inst, point.settings, seed, point.key, track_coverage=track)


def run_batch(points, n_realizations: int, base_seed: int = 0, jobs: int = 1, track_coverage: bool = True):
    """Run every sweep point on ``n_realizations`` fresh instances (seeds ``base_seed + i``).

    Seeds are shared across sweep points so comparisons are paired. Returns
    the traces ordered by (point, seed) and the aggregate table.
    """
    if n_realizations < 1:
        raise DomainError("n_realizations must be >= 1")
    work = [(pt, base_seed + i, track_coverage) for pt in points for i in range(n_realizations)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            traces = list(ex.map(_run_job, work))
    else:
        traces = [_run_job(w) for w in work]
    return traces, aggregate(traces)


def aggregate(traces) -> list[dict]:
    """Per-round mean and standard deviation of cumulative regret per (variant, sweep_key)."""
    groups: dict[tuple[str, str], list[np.ndarray]] = {}
    for tr in traces:
        groups.setdefault((tr.variant, tr.sweep_key), []).append(tr.cumulative)
    rows = []
    for (variant, key), curves in groups.items():
        C = np.vstack(curves)
        mean, std = C.mean(axis=0), C.std(axis=0)
        for t in range(C.shape[1]):
            rows.append(
                {"variant": variant, "sweep_key": key, "t": t + 1, "mean_R": mean[t], "std_R": std[t], "n": len(curves)}
            )
    return rows


def coverage_audit(traces) -> tuple[float, np.ndarray]:
    """Fraction of episodes covered at every round, and the per-round marginal rates."""
    flags = np.vstack([np.asarray(tr.covered, dtype=bool) for tr in traces])
    return float(flags.all(axis=1).mean()), flags.mean(axis=0)


def with_variant(settings: RunSettings, variant) -> RunSettings:
    return replace(settings, variant=Variant(variant))
