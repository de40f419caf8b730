import math
from types import SimpleNamespace

import numpy as np
import pytest

from mnlucb.confidence import (
    BonusParams,
    GramState,
    beta,
    bonus_loose,
    bonus_tight,
    e_norm_V,
    gamma,
    membership_C,
    membership_C_tilde,
    membership_E,
    membership_grid,
    write_membership_csv,
)
from mnlucb.estimation import InteractionHistory, fit_mle
from mnlucb.mnl_model import DomainError, kappa_bounds, sample_outcome

# (t, K, d, lam, S, delta, kappa, beta, gamma); references from 30-digit mpmath evaluation
REFERENCE = [
    (500, 2, 4, 26.072, 0.264, 0.01, 183.48, "30.525420706905633", "11.470086845097236"),
    (0, 2, 1, 3.529, 1.284, 0.05, 46.27, "14.184445955854425", "11.747424035524006"),
    (1000, 1, 5, 5.04, 0.709, 0.01, 288.97, "34.568249950616394", "12.34729753402357"),
    (1000, 1, 2, 1.959, 2.582, 0.1, 210.15, "20.800118045533502", "15.119685778438328"),
    (1, 3, 5, 32.663, 0.583, 0.05, 186.83, "38.548370343476113", "13.587712630816152"),
    (1, 1, 5, 8.318, 2.057, 0.5, 388.84, "12.222508853650371", "15.196125061998716"),
    (5000, 4, 3, 12.061, 2.393, 0.05, 41.85, "94.273790762592102", "34.734052212404204"),
    (100, 4, 3, 29.205, 0.899, 0.01, 59.91, "56.650810950917057", "18.509080128570785"),
    (1000, 2, 3, 6.164, 1.492, 0.01, 481.05, "54.498934163174293", "16.568735344072557"),
    (1, 3, 3, 27.842, 1.803, 0.5, 35.31, "19.263019372613828", "22.364785936036257"),
    (1, 3, 4, 27.912, 0.242, 0.1, 323.92, "26.409807526598773", "8.6272053674582496"),
    (5000, 3, 4, 35.493, 1.074, 0.5, 178.38, "30.314261485458437", "19.555995841972106"),
    (1, 4, 1, 8.806, 0.898, 0.05, 199.55, "23.586207883993979", "12.255515578047426"),
    (5000, 1, 2, 18.023, 1.671, 0.05, 409.82, "15.019399130693019", "21.755033006063721"),
    (100, 4, 3, 27.341, 1.172, 0.05, 76.31, "44.957450965793482", "19.396128579712499"),
    (5, 2, 2, 26.375, 0.086, 0.05, 132.11, "10.483640573486644", "7.8099212805707444"),
    (0, 2, 4, 21.43, 1.849, 0.1, 476.6, "24.839073998975058", "23.188692766613309"),
    (0, 4, 5, 15.756, 1.227, 0.01, 241.28, "112.64647961630483", "18.324729554181927"),
    (1000, 1, 2, 2.787, 0.666, 0.05, 55.85, "17.009125185621597", "11.916341632419032"),
    (0, 1, 1, 22.715, 1.633, 0.1, 307.25, "11.423052274604298", "21.635548120337474"),
]


def params(**kw):
    base = dict(R=1.0, L=0.5, kappa=4.0, S=1.0, delta=0.1, lam=1.0, d=2, K=2)
    base.update(kw)
    return BonusParams(**base)


def ns(**kw):
    base = dict(K=1, d=1, lam=1.0, S=1.0, delta=0.5, kappa=1.0)
    base.update(kw)
    return SimpleNamespace(**base)


class TestRadii:
    def test_beta_vanishing_logs(self):
        assert beta(0, ns(delta=2.0)) == pytest.approx(1.5, abs=1e-15)

    def test_beta_closed_form(self):
        ref = math.log(2) + 0.5 + 2 * math.log(4) + 1
        assert beta(1, ns()) == pytest.approx(ref, abs=1e-14)
        assert beta(1, ns()) == pytest.approx(4.965735903, abs=1e-9)

    def test_gamma_vanishing_logs(self):
        assert gamma(0, ns(delta=1.0, lam=4.0, S=0.7)) == pytest.approx(2 * 2.0 * 0.7, abs=1e-15)

    def test_gamma_closed_form(self):
        assert gamma(1, ns()) == pytest.approx(2 * (1 + 2 * math.sqrt(2 * math.log(2))), abs=1e-14)
        assert gamma(1, ns()) == pytest.approx(6.70964009, abs=1e-8)

    @pytest.mark.parametrize("row", REFERENCE)
    def test_reference_points(self, row):
        t, K, d, lam, S, delta, kappa, b, g = row
        p = ns(K=K, d=d, lam=lam, S=S, delta=delta, kappa=kappa)
        assert beta(t, p) == pytest.approx(float(b), rel=1e-12)
        assert gamma(t, p) == pytest.approx(float(g), rel=1e-12)

    def test_monotone_in_t(self):
        rng = np.random.default_rng(0)
        ts = np.arange(0, 2000, 7)
        for _ in range(100):
            p = ns(
                K=int(rng.integers(1, 5)),
                d=int(rng.integers(1, 6)),
                lam=rng.uniform(0.1, 30),
                S=rng.uniform(0.1, 3),
                delta=rng.uniform(0.01, 0.9),
                kappa=rng.uniform(1, 500),
            )
            assert np.all(np.diff([beta(t, p) for t in ts]) >= 0)
            assert np.all(np.diff([gamma(t, p) for t in ts]) >= 0)

    def test_beta_nonincreasing_in_delta(self):
        for t in (0, 10, 1000):
            vals = [beta(t, ns(delta=dl)) for dl in (0.01, 0.05, 0.1, 0.5)]
            assert np.all(np.diff(vals) <= 0)


class TestBonusParams:
    @pytest.mark.parametrize(
        "kw", [{"delta": 1.5}, {"delta": 0.0}, {"lam": 0.0}, {"L": 0.0}, {"S": -1.0}, {"R": -0.1}, {"kappa": 0.5}, {"K": 0}]
    )
    def test_rejects(self, kw):
        with pytest.raises(DomainError):
            params(**kw)


class TestGramState:
    def test_fresh(self):
        g = GramState(3, 4.0, 0.5)
        np.testing.assert_array_equal(g.V, 2.0 * np.eye(3))
        np.testing.assert_allclose(g.V_inv, 0.5 * np.eye(3))
        assert g.t == 1

    def test_single_update_exact(self):
        g = GramState(2, 2.0, 1.0).update([0.3, -0.8])
        np.testing.assert_allclose(g.V_inv @ g.V, np.eye(2), atol=1e-10)
        assert g.t == 2

    def test_long_run_drift(self):
        rng = np.random.default_rng(1)
        g = GramState(4, 10.0, 1.0)
        for _ in range(500):
            g.update(rng.standard_normal(4))
            assert np.abs(g.V @ g.V_inv - np.eye(4)).max() <= 1e-8
        np.testing.assert_allclose(g.V_inv, np.linalg.inv(g.V), atol=1e-8, rtol=0)

    def test_loewner_monotone(self):
        rng = np.random.default_rng(2)
        g = GramState(3, 5.0, 1.0)
        probe = rng.standard_normal((20, 3))
        prev = g.inv_norm(probe)
        for _ in range(50):
            g.update(rng.standard_normal(3))
            cur = g.inv_norm(probe)
            assert np.all(cur <= prev + 1e-15)
            prev = cur

    def test_negative_form_clamped(self):
        g = GramState(2, 1.0, 1.0)
        g.V_inv = np.array([[-1.0, 0.0], [0.0, 1.0]])
        assert g.inv_norm([1.0, 0.0]) == 0.0
        assert g.clamped == 1

    def test_copy_independent(self):
        g = GramState(2, 1.0, 1.0)
        c = g.copy().update([1.0, 0.0])
        assert g.t == 1 and c.t == 2
        np.testing.assert_array_equal(g.V, np.eye(2))


class TestBonuses:
    def test_zero_action(self):
        p, g = params(), GramState(2, 4.0, 1.0)
        assert bonus_tight(np.zeros(2), 3.0, p, g) == 0.0
        assert bonus_loose(np.zeros(2), 3.0, p, g) == 0.0

    def test_fresh_state_isotropic(self):
        p = params(R=2.0, L=0.4, kappa=9.0, S=0.5, lam=2.0)
        g = GramState(2, p.kappa, p.lam)
        x = np.array([0.6, 0.8])
        ref = 2 * 2.0 * 0.4 * 3.0 * math.sqrt(9.0 * 2.0) * 1.0 / math.sqrt(18.0)
        assert bonus_tight(x, 3.0, p, g) == pytest.approx(ref, rel=1e-14)

    def test_shrinks_on_repeated_play(self):
        p = params()
        g = GramState(2, p.kappa, p.lam)
        x = np.array([0.5, -0.2])
        vals = []
        for _ in range(30):
            vals.append(bonus_tight(x, 2.0, p, g))
            g.update(x)
        assert np.all(np.diff(vals) <= 0)

    def test_ratio_independent_of_x(self):
        p = params()
        g = GramState(2, p.kappa, p.lam)
        rng = np.random.default_rng(3)
        for _ in range(10):
            g.update(rng.standard_normal(2))
        b, gm = beta(g.t, p), gamma(g.t, p)
        ref = p.kappa * gm / (b * math.sqrt(p.kappa * (1 + 2 * p.S)))
        for x in rng.standard_normal((10, 2)):
            assert bonus_loose(x, gm, p, g) / bonus_tight(x, b, p, g) == pytest.approx(ref, rel=1e-12)

    def test_loose_exceeds_tight_default(self):
        K, d, T, S = 1, 2, 1000, 1.0
        lam = K * d * math.log(T)
        kappa = kappa_bounds(1.0, 1.0, 1)[1]
        assert kappa == pytest.approx(37.58193095, abs=1e-7)
        p = params(kappa=kappa, S=S, lam=lam, d=d, K=K, delta=0.01)
        for t in range(1, T + 1):
            assert kappa * gamma(t, p) > beta(t, p) * math.sqrt(kappa * (1 + 2 * S))

    def test_vectorised(self):
        p, g = params(), GramState(2, 4.0, 1.0)
        X = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(bonus_tight(X, 1.0, p, g), [bonus_tight(x, 1.0, p, g) for x in X])


@pytest.fixture(scope="module")
def small_fit():
    rng = np.random.default_rng(4)
    K, d, S, lam = 2, 2, 1.0, 1.0
    theta = rng.standard_normal(K * d)
    theta *= 0.8 * S / np.linalg.norm(theta)
    h = InteractionHistory(K, d)
    for _ in range(40):
        x = rng.standard_normal(d)
        x /= max(1.0, np.linalg.norm(x))
        h.append(x, sample_outcome(x, theta, rng))
    est = fit_mle(h, lam).estimate
    return h, est, theta, S, lam


class TestMembership:
    def test_center_is_member(self, small_fit):
        h, est, _, S, lam = small_fit
        if np.linalg.norm(est) <= S:
            assert membership_C(est, est, h, lam, S, 1e-12)
            assert membership_C_tilde(est, est, h, lam, S, 1e-12)
        g = GramState(2, 5.0, lam)
        assert membership_E(np.zeros(4), np.zeros(4), g, S, 5.0, 1e-12)

    def test_outside_ball(self, small_fit):
        h, est, _, S, lam = small_fit
        far = np.full(4, 2.0)
        assert not membership_C(far, far, h, lam, S, 1e9)
        assert not membership_C_tilde(far, far, h, lam, S, 1e9)
        assert not membership_E(far, far, GramState(2, 1.0, 1.0), S, 1.0, 1e9)

    def test_containment(self, small_fit):
        h, est, _, S, lam = small_fit
        rng = np.random.default_rng(5)
        n_C = 0
        for beta_t in (0.5, 2.0, 5.0):
            for _ in range(300):
                th = rng.standard_normal(4)
                th *= S * rng.uniform() ** 0.25 / np.linalg.norm(th)
                if membership_C(th, est, h, lam, S, beta_t):
                    n_C += 1
                    assert membership_C_tilde(th, est, h, lam, S, beta_t)
        assert n_C > 0

    def test_E_fresh_state_isotropic(self):
        kappa, lam, gm = 4.0, 0.25, 0.3
        g = GramState(2, kappa, lam)
        radius = kappa * gm * math.sqrt(kappa * lam)
        center = np.zeros(4)
        u = np.array([1.0, 0.0, 0.0, 0.0])
        assert membership_E(center + 0.999 * radius * u, center, g, 10.0, kappa, gm)
        assert not membership_E(center + 1.001 * radius * u, center, g, 10.0, kappa, gm)

    def test_e_norm_V_isotropic(self):
        g = GramState(2, 4.0, 1.0)
        assert e_norm_V([3.0, 4.0], [0.0, 0.0], g) == pytest.approx(10.0)


class TestGrid:
    def test_grid_fractions_and_csv(self, small_fit, tmp_path):
        h, est, _, S, lam = small_fit
        p = params(S=S, lam=lam, kappa=kappa_bounds(S, 1.0, 2)[1], delta=0.1)
        g = GramState(2, p.kappa, lam)
        for x in h.actions:
            g.update(x)
        center = est * min(1.0, 0.5 * S / np.linalg.norm(est))
        dirs = np.eye(4)[:2]
        rows = list(membership_grid(center, dirs, 1.0, 15, est, center, h, g, p, g.t))
        assert len(rows) == 225
        frac_C = np.mean([r["in_C"] for r in rows])
        frac_Ct = np.mean([r["in_C_tilde"] for r in rows])
        assert frac_Ct >= frac_C
        path = tmp_path / "grid.csv"
        write_membership_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[:2] == ["u0", "u1"]
        assert lines[0].endswith("in_C,in_C_tilde,in_E,e_norm_V")
        assert len(lines) == 226
