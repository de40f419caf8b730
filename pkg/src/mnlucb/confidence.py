"""Confidence radii, action Gram matrix and exploration bonuses."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .estimation import InteractionHistory, g_map, hessian_H
from .mnl_model import DomainError

log = logging.getLogger(__name__)

REFRESH_EVERY = 100


@dataclass(frozen=True)
class BonusParams:
    R: float
    L: float
    kappa: float
    S: float
    delta: float
    lam: float
    d: int
    K: int

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta={self.delta} must lie in (0, 1)")
        if self.lam <= 0 or self.L <= 0 or self.S <= 0 or self.R < 0:
            raise DomainError("R must be nonnegative and L, S, lambda positive")
        if self.kappa < 1:
            raise DomainError("kappa must be at least 1")
        if self.d < 1 or self.K < 1:
            raise DomainError("d and K must be positive")


def beta(t: float, p) -> float:
    """Radius of the g-map confidence set after ``t`` rounds."""
    K, d, lam = p.K, p.d, p.lam
    c = K**1.5 * d / np.sqrt(lam)
    return float(
        c * np.log1p(t / (d * lam))
        + np.sqrt(lam / K) / 2.0
        + 2.0 * c * np.log(2.0 / p.delta)
        + np.sqrt(lam) * p.S
    )


def gamma(t: float, p) -> float:
    """Radius (before the kappa factor) of the Gram-matrix ellipsoid."""
    inner = np.log(1.0 / p.delta) + p.K * p.d * np.log1p(t / (p.kappa * p.lam * p.d))
    return float(2.0 * (np.sqrt(p.lam) * p.S + 2.0 * np.sqrt(inner)))


class GramState:
    """``V = kappa*lam*I + sum x x^T`` with a Sherman-Morrison maintained inverse."""

    def __init__(self, d: int, kappa: float, lam: float):
        self.kappa, self.lam = float(kappa), float(lam)
        self.V = kappa * lam * np.eye(d)
        self.V_inv = np.eye(d) / (kappa * lam)
        self.t = 1
        self._since_refresh = 0
        self.clamped = 0

    def copy(self) -> GramState:
        g = GramState.__new__(GramState)
        g.__dict__.update(self.__dict__)
        g.V, g.V_inv = self.V.copy(), self.V_inv.copy()
        return g

    def update(self, x) -> GramState:
        x = np.asarray(x, dtype=float)
        self.V += np.outer(x, x)
        u = self.V_inv @ x
        self.V_inv -= np.outer(u, u) / (1.0 + x @ u)
        self.t += 1
        self._since_refresh += 1
        if self._since_refresh >= REFRESH_EVERY:
            self.V_inv = np.linalg.inv(self.V)
            self.V_inv = 0.5 * (self.V_inv + self.V_inv.T)
            self._since_refresh = 0
        return self

    def log_det(self) -> float:
        return float(np.linalg.slogdet(self.V)[1])

    def inv_norm(self, x) -> np.ndarray | float:
        """``||x||_{V^{-1}}`` for one action or each row of a stack."""
        x = np.asarray(x, dtype=float)
        q = np.einsum("...i,ij,...j->...", x, self.V_inv, x)
        if np.any(q < 0):
            self.clamped += int(np.sum(q < 0))
            log.warning("negative quadratic form %.3g clamped to zero", float(np.min(q)))
            q = np.maximum(q, 0.0)
        return np.sqrt(q) if q.ndim else float(np.sqrt(q))


def bonus_tight(x, beta_t: float, params: BonusParams, state: GramState):
    c = 2.0 * params.R * params.L * beta_t * np.sqrt(params.kappa * (1.0 + 2.0 * params.S))
    return c * state.inv_norm(x)


def bonus_loose(x, gamma_t: float, params: BonusParams, state: GramState):
    c = 2.0 * params.R * params.L * params.kappa * gamma_t
    return c * state.inv_norm(x)


def _weighted_sq(H, r) -> float:
    return float(r @ np.linalg.solve(H, r))


def g_distance(theta, estimate, history: InteractionHistory, lam: float) -> float:
    """``||g(theta) - g(estimate)||`` in the ``H(theta)^{-1}`` norm."""
    r = g_map(history, theta, lam) - g_map(history, estimate, lam)
    return float(np.sqrt(max(_weighted_sq(hessian_H(history, theta, lam), r), 0.0)))


def membership_C(theta, estimate, history, lam, S, beta_t) -> bool:
    theta = np.asarray(theta, dtype=float)
    if np.linalg.norm(theta) > S:
        return False
    return g_distance(theta, estimate, history, lam) <= beta_t


def membership_C_tilde(theta, estimate, history, lam, S, beta_t) -> bool:
    theta = np.asarray(theta, dtype=float)
    if np.linalg.norm(theta) > S:
        return False
    r = theta - np.asarray(estimate, dtype=float)
    dist = np.sqrt(max(_weighted_sq(hessian_H(history, theta, lam), r), 0.0))
    return bool(dist <= (2.0 + 4.0 * S) * beta_t)


def _block_norm_sq(diff, M, d):
    D = np.asarray(diff, dtype=float).reshape(-1, d)
    return float(np.einsum("ia,ab,ib->", D, M, D))


def membership_E(theta, tilde_estimate, state: GramState, S, kappa, gamma_t) -> bool:
    """Ellipsoid test weighted by ``I_K kron V^{-1}``."""
    theta = np.asarray(theta, dtype=float)
    if np.linalg.norm(theta) > S:
        return False
    d = state.V.shape[0]
    q = _block_norm_sq(theta - np.asarray(tilde_estimate, dtype=float), state.V_inv, d)
    return q <= (kappa * gamma_t) ** 2


def e_norm_V(theta, tilde_estimate, state: GramState) -> float:
    """The same difference measured in ``I_K kron V`` (the appendix-side weighting)."""
    d = state.V.shape[0]
    return float(np.sqrt(_block_norm_sq(np.asarray(theta) - np.asarray(tilde_estimate), state.V, d)))


def membership_grid(center, directions, extent, n, estimate, tilde_estimate, history, state, params, t):
    """Evaluate set membership on a 1-d or 2-d grid of parameters through ``center``.

    Yields dicts with the grid coordinates, the parameter, and the three
    membership flags.
    """
    center = np.asarray(center, dtype=float)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    ticks = np.linspace(-extent, extent, n)
    mesh = np.meshgrid(*([ticks] * len(directions)), indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    b, gm = beta(t, params), gamma(t, params)
    for c in coords:
        theta = center + c @ directions
        yield {
            "coords": c,
            "theta": theta,
            "in_C": membership_C(theta, estimate, history, params.lam, params.S, b),
            "in_C_tilde": membership_C_tilde(theta, estimate, history, params.lam, params.S, b),
            "in_E": membership_E(theta, tilde_estimate, state, params.S, params.kappa, gm),
            "e_norm_V": e_norm_V(theta, tilde_estimate, state),
        }


def write_membership_csv(path, rows) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not rows:
            return
        nc, nt = len(rows[0]["coords"]), len(rows[0]["theta"])
        w.writerow(
            [f"u{i}" for i in range(nc)]
            + [f"theta{i}" for i in range(nt)]
            + ["in_C", "in_C_tilde", "in_E", "e_norm_V"]
        )
        for r in rows:
            w.writerow(
                [f"{v:.10g}" for v in r["coords"]]
                + [f"{v:.10g}" for v in r["theta"]]
                + [int(r["in_C"]), int(r["in_C_tilde"]), int(r["in_E"]), f"{r['e_norm_V']:.10g}"]
            )
