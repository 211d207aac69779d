import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vharcov.diagnostics import (GPH, LOCAL_WHITTLE, WHITTLE_BOUNDS, arfima_weights, default_bandwidth,
                                 estimate_many, gph_estimate, local_whittle_estimate, omitted_factor_scan,
                                 periodogram, save_d_estimates, save_xi, simulate_arfima, whittle_objective)
from vharcov.errors import ValidationError

T_LONG = 2048


@pytest.fixture(scope="module")
def mc_estimates():
    """Mean GPH and local Whittle estimates over 200 ARFIMA seeds per d."""
    rng = np.random.default_rng(2718)
    out = {}
    for d in (0.0, 0.2, 0.4):
        sims = simulate_arfima(T_LONG, d, rng, size=200)
        out[d] = (np.mean([gph_estimate(x).d_hat for x in sims]),
                  np.mean([local_whittle_estimate(x).d_hat for x in sims]))
    return out


def test_white_noise_near_zero(mc_estimates):
    g, w = mc_estimates[0.0]
    assert -0.1 < g < 0.1 and -0.1 < w < 0.1


def test_arfima_04_recovered(mc_estimates):
    g, w = mc_estimates[0.4]
    assert 0.3 < g < 0.5 and 0.3 < w < 0.5


def test_estimators_agree(mc_estimates):
    for d, (g, w) in mc_estimates.items():
        assert abs(g - w) < 0.15, d


def test_constant_and_short_series_rejected():
    with pytest.raises(ValidationError):
        gph_estimate(np.full(100, 3.0))
    with pytest.raises(ValidationError):
        local_whittle_estimate(np.full(100, 3.0))
    with pytest.raises(ValidationError):
        gph_estimate(np.arange(31.0))


def test_bandwidth_default(rng):
    x = rng.standard_normal(1000)
    assert gph_estimate(x).bandwidth == default_bandwidth(1000) == 31
    assert local_whittle_estimate(x, bandwidth=50).bandwidth == 50
    assert gph_estimate(x).method == GPH and local_whittle_estimate(x).method == LOCAL_WHITTLE


def test_whittle_beats_grid(rng):
    for _ in range(20):
        x = simulate_arfima(512, rng.uniform(-0.3, 0.8), rng)
        est = local_whittle_estimate(x)
        lam, I = periodogram(x)
        lam, I = lam[:est.bandwidth], I[:est.bandwidth]
        grid = np.linspace(*WHITTLE_BOUNDS, 21)
        best = min(whittle_objective(d, lam, I) for d in grid)
        assert whittle_objective(est.d_hat, lam, I) <= best + 1e-12
        assert WHITTLE_BOUNDS[0] <= est.d_hat <= WHITTLE_BOUNDS[1]


def test_gph_matches_direct_regression(rng):
    x = rng.standard_normal(400)
    m = 20
    t = np.arange(400)
    j = np.arange(1, m + 1)
    lam = 2 * np.pi * j / 400
    dft = np.array([np.sum((x - x.mean()) * np.exp(-1j * lj * t)) for lj in lam])
    logI = np.log(np.abs(dft) ** 2 / (2 * np.pi * 400))
    xr = -2 * np.log(2 * np.sin(lam / 2))
    slope = np.polyfit(xr, logI, 1)[0]
    assert gph_estimate(x, m).d_hat == pytest.approx(slope, abs=1e-10)


@settings(max_examples=30)
@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.floats(-1e3, 1e3), st.integers(0, 2 ** 32 - 1))
def test_affine_invariance(a, b, seed):
    x = simulate_arfima(256, 0.3, np.random.default_rng(seed), n_terms=500)
    for fn in (gph_estimate, local_whittle_estimate):
        assert fn(a * x + b).d_hat == pytest.approx(fn(x).d_hat, abs=1e-8)


def test_arfima_weights():
    psi = arfima_weights(0.4, 5)
    np.testing.assert_allclose(psi, [1, 0.4, 0.4 * 1.4 / 2, 0.4 * 1.4 * 2.4 / 6, 0.4 * 1.4 * 2.4 * 3.4 / 24])
    np.testing.assert_array_equal(arfima_weights(0.0, 4), [1, 0, 0, 0])


def test_estimate_many_marks_degenerate(rng):
    x = np.column_stack([rng.standard_normal(200), np.ones(200)])
    out = estimate_many(x, LOCAL_WHITTLE)
    assert np.isfinite(out[0]) and np.isnan(out[1])


# -- omitted factors --------------------------------------------------------

def test_scan_noise_detects_zero():
    hits = 0
    for seed in range(100):
        e = np.random.default_rng(seed).standard_normal((100, 100))
        scan = omitted_factor_scan(e, 5)
        hits += scan.detected_k == 0
        assert scan.xi.size == 6
    assert hits >= 95


def test_scan_noise_penalty_arithmetic():
    e = np.random.default_rng(1).standard_normal((100, 100))
    scan = omitted_factor_scan(e, 3)
    g = 200 / 10_000 * math.log(10_000 / 200) * scan.sigma2
    assert scan.penalty == pytest.approx(g, rel=1e-14)
    assert scan.penalty / scan.sigma2 == pytest.approx(0.0782, abs=1e-4)
    # top noise eigenvalue sits near (1 + sqrt(T/N))^2 sigma2 / max(N, T) = 0.04 sigma2
    assert 0.03 < scan.eigenvalues[0] / scan.sigma2 < 0.05


def test_scan_planted_factors():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T, N = 200, 100
        f = rng.standard_normal((T, 2))
        lam = rng.standard_normal((2, N)) * math.sqrt(5)
        e = f @ lam + rng.standard_normal((T, N))
        hits += omitted_factor_scan(e, 6).detected_k >= 2
    assert hits >= 95


def test_scan_dual_matches_primal(rng):
    e = rng.standard_normal((50, 20))
    a = omitted_factor_scan(e, 4)
    mu = np.sort(np.linalg.eigvalsh(e @ e.T / (20 * 50)))[::-1]
    np.testing.assert_allclose(a.eigenvalues, mu[:5], rtol=1e-10)


@given(st.integers(3, 40), st.integers(3, 40), st.integers(0, 2 ** 32 - 1))
def test_xi_non_increasing(t, n, seed):
    e = np.random.default_rng(seed).standard_normal((t, n))
    scan = omitted_factor_scan(e, min(t, n) - 1)
    assert np.all(np.diff(scan.xi) <= 0)


def test_scan_bounds(rng):
    with pytest.raises(ValidationError):
        omitted_factor_scan(rng.standard_normal((10, 5)), 5)
    with pytest.raises(ValidationError):
        omitted_factor_scan(rng.standard_normal((1, 5)), 0)


def test_outputs(tmp_path, rng):
    save_d_estimates(tmp_path / "d.csv", ["b1", "b2"], {"GPH": np.array([0.1, 0.2]), "LW": np.array([0.3, 0.4])})
    assert (tmp_path / "d.csv").read_text().splitlines()[0].startswith("series")
    save_xi(tmp_path / "xi.csv", {"3F": omitted_factor_scan(rng.standard_normal((30, 10)), 3)})
    assert len((tmp_path / "xi.csv").read_text().splitlines()) >= 5
