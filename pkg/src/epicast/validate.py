"""Holdout validation: refit without the last days, forecast, and score each
horizon with Pearson correlation, the bias corrector, and the concordance
correlation coefficient (CCC)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .ingest import CasePanel
from .forecast import forecast_panel
from .polybasis import build_orthogonal_basis
from .sampler import InsufficientDataError, McmcConfig, fit_mcmc


class DegenerateVarianceError(ValueError):
    """A constant input vector makes the correlation metrics undefined."""


@dataclass(frozen=True)
class HorizonMetrics:
    horizon: int
    pearson: float
    accuracy: float  # bias corrector C_b in (0, 1]
    ccc: float

    def __post_init__(self):
        if abs(self.ccc - self.pearson * self.accuracy) > 1e-9:
            raise ValueError("ccc must factor as pearson * accuracy")


def ccc_components(x, y) -> HorizonMetrics:
    """Agreement metrics between forecasts x and observations y.

    Moments use 1/n normalization (Lin's population-form estimator):
    rho = s12/(s1*s2), v = s1/s2, u = (m1-m2)/sqrt(s1*s2),
    C_b = 2/(v + 1/v + u^2), CCC = 2*s12/(s1^2 + s2^2 + (m1-m2)^2),
    so that CCC = rho * C_b holds exactly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("x and y must be equal-length vectors with n >= 2")
    m1, m2 = x.mean(), y.mean()
    s1sq = float(np.mean((x - m1) ** 2))
    s2sq = float(np.mean((y - m2) ** 2))
    if s1sq == 0.0 or s2sq == 0.0:
        raise DegenerateVarianceError("constant vector: correlation undefined")
    s12 = float(np.mean((x - m1) * (y - m2)))
    s1, s2 = np.sqrt(s1sq), np.sqrt(s2sq)
    pearson = s12 / (s1 * s2)
    v = s1 / s2  # SD ratio: the variance-ratio reading breaks CCC = rho * C_b
    u = (m1 - m2) / np.sqrt(s1 * s2)
    accuracy = 2.0 / (v + 1.0 / v + u * u)
    ccc = 2.0 * s12 / (s1sq + s2sq + (m1 - m2) ** 2)
    return HorizonMetrics(horizon=0, pearson=pearson, accuracy=accuracy, ccc=ccc)


@dataclass(frozen=True)
class HoldoutResult:
    metrics: list[HorizonMetrics]
    # parallel per-horizon country/forecast/observation triples
    countries: tuple[str, ...]
    forecasts: np.ndarray  # N x H
    observations: np.ndarray  # N x H

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon", "r", "accuracy", "ccc"])
        for m in self.metrics:
            w.writerow([m.horizon, f"{m.pearson:.6f}", f"{m.accuracy:.6f}", f"{m.ccc:.6f}"])
        return buf.getvalue()

    def pairs_csv(self) -> str:
        """log1p-transformed pairs, one row per (country, horizon), for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["country_id", "horizon", "log1p_observed", "log1p_forecast"])
        for i, cid in enumerate(self.countries):
            for j in range(self.forecasts.shape[1]):
                w.writerow(
                    [
                        cid,
                        j + 1,
                        f"{np.log1p(self.observations[i, j]):.6f}",
                        f"{np.log1p(self.forecasts[i, j]):.6f}",
                    ]
                )
        return buf.getvalue()


def holdout_evaluate(
    panel: CasePanel,
    config: McmcConfig,
    horizon: int = 7,
    forecast_seed: int = 0,
) -> HoldoutResult:
    """Drop the last ``horizon`` days, refit, forecast, and score per horizon.

    Scoring pools all countries at each horizon; raw counts enter the metrics
    while log1p pairs are emitted separately for plotting.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if panel.t_count <= horizon + 2:
        raise InsufficientDataError("panel too short for this holdout horizon")

    t_fit = panel.t_count - horizon
    truncated = CasePanel(panel.countries, panel.dates[:t_fit], panel.counts[:, :t_fit])
    draws = fit_mcmc(truncated, config)
    basis = build_orthogonal_basis(t_fit, config.degree)
    table = forecast_panel(draws, truncated, basis, horizon=horizon, seed=forecast_seed)

    observed = panel.counts[:, t_fit:].astype(float)
    forecasts = table.median.astype(float)
    metrics = []
    for h in range(horizon):
        m = ccc_components(forecasts[:, h], observed[:, h])
        metrics.append(
            HorizonMetrics(horizon=h + 1, pearson=m.pearson, accuracy=m.accuracy, ccc=m.ccc)
        )
    return HoldoutResult(metrics, panel.countries, forecasts, observed)
