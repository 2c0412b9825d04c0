"""Generative model: negative-binomial Markov observation law, latent
autoregressive log-intensity with a polynomial-in-time coefficient, the
outlier mixture, the full-panel log-likelihood, and a forward simulator.

The negative binomial is parameterized by (mu, psi) with size r = 1/psi and
success probability r/(r+mu), so that E[Y] = mu and Var[Y] = mu + psi*mu^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
from scipy.special import gammaln

from .ingest import CasePanel
from .polybasis import build_orthogonal_basis

SIM_EPOCH = date(2020, 1, 1)  # synthetic panels get a date axis from here


class DimensionError(ValueError):
    """Array shapes do not agree."""


@dataclass(frozen=True)
class ModelParams:
    """Global model parameters."""

    beta: np.ndarray  # Q+1 fixed polynomial coefficients
    sigma_eta: float  # innovation SD of the latent process
    sigma_b: np.ndarray  # Q+1 random-effect SDs (diagonal covariance)
    pi_outlier: float  # probability a cell is an outlier
    sigma_omega: float  # SD of the outlier effect
    psi: float  # NB dispersion

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "sigma_b", np.asarray(self.sigma_b, dtype=float))
        if self.beta.shape != self.sigma_b.shape:
            raise DimensionError("beta and sigma_b must have the same length")
        if self.sigma_eta <= 0 or self.sigma_omega <= 0 or np.any(self.sigma_b <= 0):
            raise ValueError("all scale parameters must be positive")
        if not 0.0 <= self.pi_outlier <= 1.0:
            raise ValueError("pi_outlier must lie in [0, 1]")
        if self.psi <= 0:
            raise ValueError("psi must be positive")

    @property
    def degree(self) -> int:
        return len(self.beta) - 1


@dataclass(frozen=True)
class LatentState:
    """Per-country, per-day latent quantities."""

    gamma: np.ndarray  # N x T latent log-intensity
    b: np.ndarray  # N x (Q+1) random effects
    lam: np.ndarray  # N x T outlier indicators in {0, 1}
    omega: np.ndarray  # N x T outlier magnitudes

    def __post_init__(self):
        for name in ("gamma", "b", "lam", "omega"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n, t = self.gamma.shape
        if self.lam.shape != (n, t) or self.omega.shape != (n, t):
            raise DimensionError("gamma, lam, omega must share the N x T shape")
        if self.b.shape[0] != n:
            raise DimensionError("b must have one row per country")
        if not np.isin(self.lam, (0.0, 1.0)).all():
            raise ValueError("lam entries must be exactly 0 or 1")


def nb_log_pmf(y, mu, psi):
    """Log-pmf of NB(mu, psi) at integer y >= 0; vectorized in all arguments.

    Computed via log-gamma terms. For very large size r = 1/psi the
    log-gamma difference loses precision, so small integer y fall back to an
    exact sum of logs (keeps the Poisson limit psi -> 0 accurate).
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(mu <= 0) or np.any(psi <= 0):
        raise ValueError("mu and psi must be positive")
    r = 1.0 / psi
    # log Gamma(y+r) - log Gamma(r), accurately for huge r
    if y.ndim == 0 and r.ndim == 0 and r > 1e6 and y <= 100_000:
        rising = float(np.sum(np.log(r + np.arange(int(y)))))
    else:
        rising = gammaln(y + r) - gammaln(r)
    return rising - gammaln(y + 1.0) - r * np.log1p(mu / r) + y * (np.log(mu) - np.log(r + mu))


def phi_value(beta, b_i, basis_row) -> float:
    """Time-varying autoregressive coefficient: sum_q (beta_q + b_iq) * P_q(t)."""
    beta = np.asarray(beta, dtype=float)
    b_i = np.asarray(b_i, dtype=float)
    basis_row = np.asarray(basis_row, dtype=float)
    if not beta.shape == b_i.shape == basis_row.shape:
        raise DimensionError("beta, b_i, basis_row must have equal length")
    return float((beta + b_i) @ basis_row)


def propagate_gamma(gamma_prev: float, phi: float, eta: float) -> float:
    """One step of the latent process: phi * gamma_prev + eta."""
    return phi * gamma_prev + eta


def log_mean(gamma: float, lam, omega: float) -> float:
    """log mu = gamma + lam * omega (outlier term only when lam = 1)."""
    if lam not in (0, 1):
        raise ValueError("lam must be 0 or 1")
    return gamma + lam * omega


def phi_matrix(params: ModelParams, b: np.ndarray, basis_columns: np.ndarray) -> np.ndarray:
    """N x T matrix of phi_it over the fitted grid."""
    return (params.beta[None, :] + b) @ basis_columns.T


def panel_log_likelihood(panel: CasePanel, params: ModelParams, state: LatentState) -> float:
    """Sum of NB log-pmf terms over all countries and t = 2..T.

    The first day carries no observation term: the Markov chain conditions
    on it.
    """
    n, t = panel.counts.shape
    if state.gamma.shape != (n, t):
        raise DimensionError("latent state does not match the panel")
    log_mu = state.gamma[:, 1:] + state.lam[:, 1:] * state.omega[:, 1:]
    return float(np.sum(nb_log_pmf(panel.counts[:, 1:], np.exp(log_mu), params.psi)))


def sample_nb(rng: np.random.Generator, mu: np.ndarray, psi: float) -> np.ndarray:
    """Draw NB(mu, psi) counts via the gamma-Poisson mixture (stable for tiny psi)."""
    mu = np.asarray(mu, dtype=float)
    r = 1.0 / psi
    rate = rng.gamma(shape=r, scale=mu / r)
    # keep the Poisson rate inside numpy's supported range
    return rng.poisson(np.minimum(rate, 1e15))


def simulate_panel(
    params: ModelParams,
    n_countries: int,
    t_count: int,
    gamma_init,
    seed: int,
) -> tuple[CasePanel, LatentState]:
    """Simulate a panel from the exact generative process.

    One child RNG stream per country (split from the seed) so results are
    reproducible even if the per-country fill is parallelized. Day one emits
    a zero count, matching the zero-backfill cleaning convention.
    """
    if n_countries < 1 or t_count < 2:
        raise ValueError("need n_countries >= 1 and t_count >= 2")
    gamma_init = np.asarray(gamma_init, dtype=float)
    if gamma_init.shape != (n_countries,):
        raise DimensionError("gamma_init must have one entry per country")

    basis = build_orthogonal_basis(t_count, params.degree)
    streams = [
        np.random.Generator(np.random.Philox(s))
        for s in np.random.SeedSequence(seed).spawn(n_countries)
    ]

    q1 = params.degree + 1
    gamma = np.zeros((n_countries, t_count))
    b = np.zeros((n_countries, q1))
    lam = np.zeros((n_countries, t_count))
    omega = np.zeros((n_countries, t_count))
    counts = np.zeros((n_countries, t_count), dtype=np.int64)

    for i in range(n_countries):
        rng = streams[i]
        b[i] = rng.normal(0.0, params.sigma_b)
        eta = rng.normal(0.0, params.sigma_eta, size=t_count)
        lam[i] = (rng.random(t_count) < params.pi_outlier).astype(float)
        omega[i] = rng.normal(0.0, params.sigma_omega, size=t_count)
        phi = basis.columns @ (params.beta + b[i])
        gamma[i, 0] = gamma_init[i]
        for t in range(1, t_count):
            gamma[i, t] = propagate_gamma(gamma[i, t - 1], phi[t], eta[t])
        mu = np.exp(gamma[i, 1:] + lam[i, 1:] * omega[i, 1:])
        counts[i, 1:] = sample_nb(rng, mu, params.psi)

    dates = tuple(SIM_EPOCH + timedelta(days=k) for k in range(t_count))
    labels = tuple(f"C{i:03d}" for i in range(n_countries))
    panel = CasePanel(labels, dates, counts)
    return panel, LatentState(gamma, b, lam, omega)
