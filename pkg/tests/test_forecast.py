from datetime import date, timedelta

import numpy as np
import pytest

from epicast.forecast import ForecastTable, forecast_panel
from epicast.ingest import CasePanel
from epicast.polybasis import build_orthogonal_basis
from epicast.sampler import McmcConfig, PosteriorDraws


def make_panel(n, t):
    dates = tuple(date(2020, 3, 1) + timedelta(days=k) for k in range(t))
    counts = np.full((n, t), 5, dtype=np.int64)
    return CasePanel(tuple(f"C{i}" for i in range(n)), dates, counts)


def make_draws(panel, n_draws, *, gamma_last, beta0=1.0, sigma_eta=1e-9,
               pi=0.0, sigma_omega=1.0, psi=1e-8):
    """All-identical degree-0 draws, giving a closed-form predictive law."""
    n, t = panel.n_countries, panel.t_count
    c, d = 2, n_draws // 2
    config = McmcConfig(n_chains=c, n_adapt=1, n_burnin=1, n_iter=d, thin=1, degree=0)
    gamma = np.zeros((c, d, n, t))
    gamma[:, :, :, -1] = gamma_last
    return PosteriorDraws(
        config=config,
        countries=panel.countries,
        dates=panel.dates,
        beta=np.full((c, d, 1), beta0),
        sigma_eta=np.full((c, d), sigma_eta),
        sigma_b=np.full((c, d, 1), 1e-9),
        pi_outlier=np.full((c, d), pi),
        sigma_omega=np.full((c, d), sigma_omega),
        psi=np.full((c, d), psi),
        gamma=gamma,
        b=np.zeros((c, d, n, 1)),
        lam=np.zeros((c, d, n, t), dtype=np.uint8),
        omega=np.zeros((c, d, n, t)),
    )


class TestForecastPanel:
    def test_degenerate_poisson_median(self):
        # phi = 1, no noise: every draw simulates Poisson(10) at each horizon
        panel = make_panel(3, 10)
        draws = make_draws(panel, 4000, gamma_last=np.log(10.0))
        basis = build_orthogonal_basis(panel.t_count, 0)
        table = forecast_panel(draws, panel, basis, horizon=7, seed=5)
        assert np.all(table.median == 10)
        assert np.all(table.lower < 10)
        assert np.all(table.upper > 10)

    def test_band_widens_with_horizon(self):
        panel = make_panel(4, 10)
        draws = make_draws(panel, 2000, gamma_last=np.log(20.0), sigma_eta=0.4)
        basis = build_orthogonal_basis(panel.t_count, 0)
        table = forecast_panel(draws, panel, basis, horizon=7, seed=1)
        width = (table.upper - table.lower).mean(axis=0)
        assert width[6] > width[0]

    def test_deterministic_given_seed(self):
        panel = make_panel(2, 8)
        draws = make_draws(panel, 200, gamma_last=1.0, sigma_eta=0.3, psi=0.5)
        basis = build_orthogonal_basis(panel.t_count, 0)
        a = forecast_panel(draws, panel, basis, seed=9)
        b = forecast_panel(draws, panel, basis, seed=9)
        c = forecast_panel(draws, panel, basis, seed=10)
        assert np.array_equal(a.median, b.median)
        assert np.array_equal(a.lower, b.lower)
        assert np.array_equal(a.upper, b.upper)
        stacked = lambda t: np.stack([t.median, t.lower, t.upper])
        assert not np.array_equal(stacked(a), stacked(c))

    def test_outliers_fatten_upper_tail(self):
        panel = make_panel(3, 10)
        kw = dict(gamma_last=np.log(50.0), pi=0.3, sigma_omega=3.0)
        draws = make_draws(panel, 2000, **kw)
        basis = build_orthogonal_basis(panel.t_count, 0)
        with_out = forecast_panel(draws, panel, basis, seed=2)
        without = forecast_panel(draws, panel, basis, seed=2, include_outliers=False)
        assert with_out.upper.mean() > without.upper.mean()

    def test_dates_follow_panel_end(self):
        panel = make_panel(1, 5)
        draws = make_draws(panel, 100, gamma_last=0.0)
        basis = build_orthogonal_basis(panel.t_count, 0)
        table = forecast_panel(draws, panel, basis, horizon=3)
        assert table.forecast_dates == tuple(
            panel.dates[-1] + timedelta(days=h) for h in (1, 2, 3)
        )
        assert table.horizons == (1, 2, 3)

    def test_horizon_must_be_positive(self):
        panel = make_panel(1, 5)
        draws = make_draws(panel, 100, gamma_last=0.0)
        basis = build_orthogonal_basis(panel.t_count, 0)
        with pytest.raises(ValueError):
            forecast_panel(draws, panel, basis, horizon=0)


class TestForecastTable:
    def _table(self):
        return ForecastTable(
            ("A", "B"), (1, 2),
            (date(2020, 5, 1), date(2020, 5, 2)),
            np.array([[5, 6], [7, 8]]),
            np.array([[1, 2], [3, 4]]),
            np.array([[9, 10], [11, 12]]),
        )

    def test_csv_layout(self):
        lines = self._table().to_csv().splitlines()
        assert lines[0] == "country_id,date,horizon,median,lo95,hi95"
        assert lines[1] == "A,2020-05-01,1,5,1,9"
        assert len(lines) == 5

    def test_json_obj(self):
        obj = self._table().to_json_obj()
        assert obj["countries"] == ["A", "B"]
        assert obj["median"] == [[5, 6], [7, 8]]

    def test_rejects_quantile_disorder(self):
        with pytest.raises(ValueError):
            ForecastTable(
                ("A",), (1,), (date(2020, 5, 1),),
                np.array([[5]]), np.array([[6]]), np.array([[9]]),
            )

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ForecastTable(
                ("A",), (1,), (date(2020, 5, 1),),
                np.array([[5]]), np.array([[-1]]), np.array([[9]]),
            )
