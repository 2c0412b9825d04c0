"""Posterior-predictive forecasting: medians and 95% bands per country/horizon."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .ingest import CasePanel
from .model import sample_nb
from .polybasis import OrthoBasis, evaluate_grid
from .sampler import PosteriorDraws


@dataclass(frozen=True)
class ForecastTable:
    """Median forecast and 2.5%/97.5% predictive quantiles per (country, horizon)."""

    countries: tuple[str, ...]
    horizons: tuple[int, ...]
    forecast_dates: tuple[date, ...]
    median: np.ndarray  # N x H, int64
    lower: np.ndarray  # N x H, int64
    upper: np.ndarray  # N x H, int64

    def __post_init__(self):
        for name in ("median", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if np.any(self.lower > self.median) or np.any(self.median > self.upper):
            raise ValueError("quantile ordering violated")
        if np.any(self.lower < 0):
            raise ValueError("forecasts must be non-negative")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["country_id", "date", "horizon", "median", "lo95", "hi95"])
        for i, cid in enumerate(self.countries):
            for j, h in enumerate(self.horizons):
                writer.writerow(
                    [
                        cid,
                        self.forecast_dates[j].isoformat(),
                        h,
                        int(self.median[i, j]),
                        int(self.lower[i, j]),
                        int(self.upper[i, j]),
                    ]
                )
        return buf.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "countries": list(self.countries),
            "horizons": list(self.horizons),
            "dates": [d.isoformat() for d in self.forecast_dates],
            "median": self.median.tolist(),
            "lo95": self.lower.tolist(),
            "hi95": self.upper.tolist(),
        }


def forecast_panel(
    draws: PosteriorDraws,
    panel: CasePanel,
    basis: OrthoBasis,
    horizon: int = 7,
    seed: int = 0,
    include_outliers: bool = True,
) -> ForecastTable:
    """Simulate h = 1..horizon days ahead for every retained draw.

    Each draw's final latent value is propagated with fresh innovations; the
    autoregressive coefficient at T+h comes from exact polynomial
    continuation of the basis. The outlier mixture is included by default
    (``include_outliers=False`` gives trend-only forecasts). Medians and
    bands are taken across draws per (country, horizon).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if draws.n_draws == 0:
        raise RuntimeError("no retained draws to forecast from")
    t = panel.t_count
    n = panel.n_countries

    beta = draws.beta.reshape(-1, draws.beta.shape[-1])  # (C*D, Q+1)
    b = draws.b.reshape(-1, n, draws.b.shape[-1])
    gamma_t = draws.gamma[:, :, :, -1].reshape(-1, n)
    sigma_eta = draws.sigma_eta.reshape(-1)
    pi = draws.pi_outlier.reshape(-1)
    sigma_omega = draws.sigma_omega.reshape(-1)
    psi = draws.psi.reshape(-1)
    m = beta.shape[0]

    future = evaluate_grid(basis, np.arange(t + 1, t + horizon + 1))  # H x (Q+1)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    sims = np.zeros((m, n, horizon), dtype=np.int64)
    gamma_cur = gamma_t.copy()
    for j in range(horizon):
        # phi at T+1+j per draw and country
        phi = np.einsum("mnq,q->mn", beta[:, None, :] + b, future[j])
        eta = rng.standard_normal((m, n)) * sigma_eta[:, None]
        gamma_cur = phi * gamma_cur + eta
        log_mu = gamma_cur
        if include_outliers:
            lam = rng.random((m, n)) < pi[:, None]
            omg = rng.standard_normal((m, n)) * sigma_omega[:, None]
            log_mu = gamma_cur + lam * omg
        # guard against runaway trajectories: cap mu so NB sampling stays valid
        mu = np.exp(np.clip(log_mu, -700.0, np.log(1e12)))
        mu = np.maximum(mu, 1e-300)
        for k in range(m):  # per-draw psi; vectorized over countries
            sims[k, :, j] = sample_nb(rng, mu[k], float(psi[k]))

    med = np.rint(np.median(sims, axis=0)).astype(np.int64)
    lo = np.rint(np.quantile(sims, 0.025, axis=0)).astype(np.int64)
    hi = np.rint(np.quantile(sims, 0.975, axis=0)).astype(np.int64)
    dates = tuple(panel.dates[-1] + timedelta(days=h) for h in range(1, horizon + 1))
    return ForecastTable(panel.countries, tuple(range(1, horizon + 1)), dates, med, lo, hi)
