"""Per-round MNL-UCB agent and its control variants."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .confidence import BonusParams, GramState, beta, bonus_loose, bonus_tight, gamma
from .estimation import FitReport, InteractionHistory, fit_mle, project_feasible
from .mnl_model import DomainError, expected_rewards


class Variant(str, enum.Enum):
    TIGHT = "tight"
    LOOSE = "loose"
    GREEDY = "greedy"
    UNIFORM = "uniform"


def default_lambda(K: int, d: int, T: int) -> float:
    """Regulariser ``K*d*log(T)``, floored at 1 so tiny horizons stay well posed."""
    return max(K * d * np.log(T), 1.0)


@dataclass
class AgentConfig:
    variant: Variant
    rho: np.ndarray
    bonus: BonusParams
    tol: float = 1e-8
    max_iter: int = 100
    refit_period: int = 1
    oracle_theta: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.refit_period < 1:
            raise DomainError("refit_period must be >= 1")
        if self.rho.shape != (self.bonus.K,):
            raise DomainError("rho must have one entry per option")

    @property
    def lam(self) -> float:
        return self.bonus.lam


class MNLUCBAgent:
    """Holds the history, the current fit and the Gram state for one episode."""

    def __init__(self, config: AgentConfig, rng: np.random.Generator | None = None):
        p = config.bonus
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.history = InteractionHistory(p.K, p.d)
        self.gram = GramState(p.d, p.kappa, p.lam)
        zero = np.zeros(p.K * p.d)
        self.fit = FitReport(zero, 0.0, 0, True, zero.copy())
        self.round = 0
        self.fit_round = 0
        self.fit_failures = 0

    @property
    def theta(self) -> np.ndarray:
        """Parameter used in the UCB index (the feasible estimator)."""
        if self.config.oracle_theta is not None:
            return self.config.oracle_theta
        return self.fit.projected

    def radius(self) -> float:
        """Current confidence radius for the active variant (0 for controls)."""
        t = self.gram.t
        v = self.config.variant
        if v is Variant.TIGHT:
            return beta(t, self.config.bonus)
        if v is Variant.LOOSE:
            return gamma(t, self.config.bonus)
        return 0.0

    def bonuses(self, arms) -> np.ndarray:
        arms = np.atleast_2d(arms)
        v, p = self.config.variant, self.config.bonus
        if v is Variant.TIGHT:
            return np.asarray(bonus_tight(arms, beta(self.gram.t, p), p, self.gram))
        if v is Variant.LOOSE:
            return np.asarray(bonus_loose(arms, gamma(self.gram.t, p), p, self.gram))
        return np.zeros(len(arms))

    def ucb_values(self, arms) -> np.ndarray:
        arms = np.atleast_2d(arms)
        return expected_rewards(arms, self.theta, self.config.rho) + self.bonuses(arms)

    def select_action(self, arms) -> tuple[int, np.ndarray]:
        """Return the argmax index (lowest index on ties) and the UCB values."""
        arms = np.atleast_2d(np.asarray(arms, dtype=float))
        if arms.shape[0] == 0 or arms.size == 0:
            raise DomainError("empty arm set")
        if self.config.variant is Variant.UNIFORM:
            return int(self.rng.integers(len(arms))), np.zeros(len(arms))
        values = self.ucb_values(arms)
        return int(np.argmax(values)), values

    def observe(self, arm, outcome: int) -> MNLUCBAgent:
        self.history.append(arm, outcome)
        self.gram.update(arm)
        self.round += 1
        cfg = self.config
        if self.round % cfg.refit_period == 0:
            fit = fit_mle(self.history, cfg.lam, self.fit.estimate, cfg.tol, cfg.max_iter)
            if not fit.converged:
                self.fit_failures += 1
            proj, active, obj = project_feasible(fit.estimate, self.history, cfg.lam, cfg.bonus.S)
            fit.projected, fit.projection_active, fit.projection_objective = proj, active, obj
            self.fit = fit
            self.fit_round = self.round
        return self

