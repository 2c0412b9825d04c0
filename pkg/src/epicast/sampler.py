"""Metropolis-within-Gibbs fitting of the state-space NB model.

Block scheme per iteration:

1. gamma_it single-site adaptive random-walk MH, vectorized over countries
   and over each time parity class (even and odd sites are conditionally
   independent given the other class);
2. sigma_bq log-scale MH with the whole coefficient vector (beta, all b_i)
   integrated out analytically, so the move crosses the funnel between the
   random effects and their scale;
3. beta exact Gibbs with b marginalized, then b exact Gibbs, then a joint
   rescale of each (b column, its scale) pair in non-centered form;
4. lam_it exact Gibbs from its two-point conditional, cycled with omega_it
   (fresh prior draw where lam = 0, random-walk MH where lam = 1) and with
   a flag-swap involution that exchanges a flagged offset for an unflagged
   path excursion at fixed log mu;
5. conjugate Gamma Gibbs for the eta and omega precisions, pi exact Beta
   Gibbs, psi log-scale random-walk MH;
6. a whole-path independence MH per country from the Gaussian at the
   conditional mode (Newton on one stacked banded system), immediately
   followed by a joint MH move on (psi, all paths) that rides the ridge
   between the dispersion and the paths' roughness.

Proposal scales adapt (Robbins-Monro) during the adaptation phase only and
are frozen afterwards, preserving detailed balance for every retained draw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky_banded, solve_banded, solveh_banded
from scipy.special import gammaln

from .ingest import CasePanel
from .model import DimensionError, LatentState, ModelParams
from .polybasis import build_orthogonal_basis

PRIOR_SHAPE = 0.001  # Gamma hyperparameters shared by every precision prior
PRIOR_RATE = 0.001
BETA_PRIOR_VAR = 1000.0
GAMMA1_PRIOR_SD = 10.0  # diffuse prior for the first latent value

TARGET_SINGLE = 0.44  # single-site RW target acceptance
TARGET_VECTOR = 0.35  # vector-proposal RW target acceptance


class InsufficientDataError(ValueError):
    """Panel too short to fit."""


class InitializationError(RuntimeError):
    """Non-finite log-posterior at the starting state; names the block."""


@dataclass(frozen=True)
class McmcConfig:
    """Chain layout. Defaults mirror the production run; shrink for tests."""

    n_chains: int = 3
    n_adapt: int = 2000
    n_burnin: int = 50_000
    n_iter: int = 50_000
    thin: int = 25
    seed: int = 0
    degree: int = 2

    def __post_init__(self):
        for name in ("n_chains", "n_adapt", "n_burnin", "n_iter", "thin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_iter // self.thin < 2:
            raise ValueError("need at least 2 retained draws: increase n_iter or lower thin")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    @property
    def n_retained(self) -> int:
        return self.n_iter // self.thin


@dataclass
class PosteriorDraws:
    """Thinned multi-chain draws, stored densely (desk-scale panels only).

    Global parameter arrays have shape (chains, draws, ...); latent arrays
    add the panel's (N, T) axes.
    """

    config: McmcConfig
    countries: tuple[str, ...]
    dates: tuple
    beta: np.ndarray  # (C, D, Q+1)
    sigma_eta: np.ndarray  # (C, D)
    sigma_b: np.ndarray  # (C, D, Q+1)
    pi_outlier: np.ndarray  # (C, D)
    sigma_omega: np.ndarray  # (C, D)
    psi: np.ndarray  # (C, D)
    gamma: np.ndarray  # (C, D, N, T)
    b: np.ndarray  # (C, D, N, Q+1)
    lam: np.ndarray  # (C, D, N, T) uint8
    omega: np.ndarray  # (C, D, N, T)
    acceptance: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_draws(self) -> int:
        return self.beta.shape[1]

    def get_draw(self, chain: int, index: int) -> tuple[ModelParams, LatentState]:
        params = ModelParams(
            beta=self.beta[chain, index],
            sigma_eta=float(self.sigma_eta[chain, index]),
            sigma_b=self.sigma_b[chain, index],
            pi_outlier=float(self.pi_outlier[chain, index]),
            sigma_omega=float(self.sigma_omega[chain, index]),
            psi=float(self.psi[chain, index]),
        )
        state = LatentState(
            gamma=self.gamma[chain, index],
            b=self.b[chain, index],
            lam=self.lam[chain, index].astype(float),
            omega=self.omega[chain, index],
        )
        return params, state

    # --- scalar parameter access -------------------------------------------------

    def scalar_names(self) -> list[str]:
        q1 = self.beta.shape[2]
        names = [f"beta{q}" for q in range(q1)]
        names += ["sigma_eta"]
        names += [f"sigma_b{q}" for q in range(q1)]
        names += ["pi", "sigma_omega", "psi"]
        return names

    def scalar_chains(self, name: str) -> np.ndarray:
        """Per-chain draws of one scalar parameter, shape (chains, draws)."""
        if name.startswith("beta") and name[4:].isdigit():
            return self.beta[:, :, int(name[4:])]
        if name.startswith("sigma_b") and name[7:].isdigit():
            return self.sigma_b[:, :, int(name[7:])]
        flat = {
            "sigma_eta": self.sigma_eta,
            "pi": self.pi_outlier,
            "sigma_omega": self.sigma_omega,
            "psi": self.psi,
        }
        if name not in flat:
            raise KeyError(f"unknown parameter selector {name!r}")
        return flat[name]

    def pooled(self, name: str) -> np.ndarray:
        return self.scalar_chains(name).reshape(-1)

    def gamma_posterior_mean(self) -> np.ndarray:
        """Posterior mean of the latent log-intensity, pooled over chains."""
        return self.gamma.mean(axis=(0, 1))

    # --- serialization -----------------------------------------------------------

    def save(self, directory: str | Path, manifest_extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            directory / "draws.npz",
            beta=self.beta,
            sigma_eta=self.sigma_eta,
            sigma_b=self.sigma_b,
            pi_outlier=self.pi_outlier,
            sigma_omega=self.sigma_omega,
            psi=self.psi,
            gamma=self.gamma,
            b=self.b,
            lam=self.lam,
            omega=self.omega,
        )
        # Columnar copy of the global scalars, one column per parameter.
        names = self.scalar_names()
        cols = [self.pooled(n) for n in names]
        chain_col = np.repeat(np.arange(self.n_chains), self.n_draws)
        draw_col = np.tile(np.arange(self.n_draws), self.n_chains)
        with open(directory / "params.csv", "w") as fh:
            fh.write("chain,draw," + ",".join(names) + "\n")
            for k in range(len(chain_col)):
                row = ",".join(f"{c[k]:.17g}" for c in cols)
                fh.write(f"{chain_col[k]},{draw_col[k]},{row}\n")
        manifest = {
            "config": {
                "n_chains": self.config.n_chains,
                "n_adapt": self.config.n_adapt,
                "n_burnin": self.config.n_burnin,
                "n_iter": self.config.n_iter,
                "thin": self.config.thin,
                "seed": self.config.seed,
                "degree": self.config.degree,
            },
            "countries": list(self.countries),
            "dates": [d.isoformat() for d in self.dates],
            "acceptance": self.acceptance,
        }
        if manifest_extra:
            manifest.update(manifest_extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "PosteriorDraws":
        from datetime import date

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = np.load(directory / "draws.npz")
        return cls(
            config=McmcConfig(**manifest["config"]),
            countries=tuple(manifest["countries"]),
            dates=tuple(date.fromisoformat(d) for d in manifest["dates"]),
            beta=arrays["beta"],
            sigma_eta=arrays["sigma_eta"],
            sigma_b=arrays["sigma_b"],
            pi_outlier=arrays["pi_outlier"],
            sigma_omega=arrays["sigma_omega"],
            psi=arrays["psi"],
            gamma=arrays["gamma"],
            b=arrays["b"],
            lam=arrays["lam"],
            omega=arrays["omega"],
            acceptance=manifest.get("acceptance", {}),
        )


# --- conditional building blocks (exposed for unit testing) ----------------------


def nb_loglik_terms(y: np.ndarray, log_mu: np.ndarray, psi: float) -> np.ndarray:
    """Per-cell NB log-pmf up to terms constant in log_mu (used in MH ratios)."""
    r = 1.0 / psi
    mu = np.exp(log_mu)
    return y * log_mu - (r + y) * np.log(r + mu)


def nb_loglik_full(y: np.ndarray, log_mu: np.ndarray, psi: float) -> float:
    """Full NB log-likelihood over an array of cells (needed when psi moves)."""
    r = 1.0 / psi
    mu = np.exp(log_mu)
    terms = (
        gammaln(y + r)
        - gammaln(r)
        - r * np.log1p(mu / r)
        + y * (log_mu - np.log(r + mu))
    )
    return float(np.sum(terms))

def sigma_eta_precision_posterior(
    gamma: np.ndarray, phi: np.ndarray, gamma_prev: np.ndarray
) -> tuple[float, float]:
    """Gamma posterior (shape, rate) of the eta precision given the latent path."""
    resid = gamma - phi * gamma_prev
    n = resid.size
    return PRIOR_SHAPE + 0.5 * n, PRIOR_RATE + 0.5 * float(np.sum(resid**2))


def outlier_inclusion_prob(
    y: np.ndarray, gamma: np.ndarray, omega: np.ndarray, psi: float, pi: float
) -> np.ndarray:
    """Exact conditional P(lam = 1 | everything else) per cell."""
    with np.errstate(divide="ignore"):
        log_p1 = np.log(pi) + nb_loglik_terms(y, gamma + omega, psi)
        log_p0 = np.log1p(-pi) + nb_loglik_terms(y, gamma, psi)
    # stable two-point normalization
    m = np.maximum(log_p1, log_p0)
    p1 = np.exp(log_p1 - m)
    p0 = np.exp(log_p0 - m)
    return p1 / (p1 + p0)


class _ChainState:
    """Mutable state of one chain plus its adaptive proposal scales."""

    def __init__(self, panel: CasePanel, config: McmcConfig, rng: np.random.Generator):
        self.rng = rng
        self.y = panel.counts.astype(float)
        self.n, self.t = self.y.shape
        self.q1 = config.degree + 1
        basis = build_orthogonal_basis(self.t, config.degree)
        self.P = basis.columns  # T x Q1

        # initialization: latent log-intensity starts at the data
        self.gamma = np.log(self.y + 1.0)
        self.beta = np.zeros(self.q1)
        self.beta[0] = 1.0
        self.b = np.zeros((self.n, self.q1))
        self.lam = np.zeros((self.n, self.t))
        self.omega = np.zeros((self.n, self.t))
        self.sigma_eta = 0.5
        self.sigma_b = np.full(self.q1, 0.5)
        self.sigma_omega = 0.5
        self.pi = 0.1
        self.psi = 0.01

        # adaptive log proposal scales
        self.ls_gamma = np.full((self.n, self.t), np.log(0.5))
        self.ls_sb = np.full(self.q1, np.log(0.5))
        self.ls_omega = np.log(1.0)
        self.ls_psi = np.log(0.5)

        # acceptance bookkeeping (post-adaptation)
        self.acc = {k: [0, 0] for k in ("gamma", "omega", "psi")}

    # -- derived quantities ------------------------------------------------------

    def phi(self) -> np.ndarray:
        return (self.beta[None, :] + self.b) @ self.P.T

    def log_posterior(self) -> dict[str, float]:
        """Blockwise log-posterior contributions (for initialization checks)."""
        phi = self.phi()
        log_mu = self.gamma[:, 1:] + self.lam[:, 1:] * self.omega[:, 1:]
        obs = nb_loglik_full(self.y[:, 1:], log_mu, self.psi)
        resid = self.gamma[:, 1:] - phi[:, 1:] * self.gamma[:, :-1]
        trans = float(
            -0.5 * np.sum(resid**2) / self.sigma_eta**2
            - resid.size * np.log(self.sigma_eta)
        )
        prior = float(
            -0.5 * np.sum(self.gamma[:, 0] ** 2) / GAMMA1_PRIOR_SD**2
            - 0.5 * np.sum(self.beta**2) / BETA_PRIOR_VAR
            - 0.5 * np.sum((self.b / self.sigma_b[None, :]) ** 2)
        )
        return {"observation": obs, "transition": trans, "prior": prior}

    # -- update blocks -----------------------------------------------------------

    def update_gamma(self, adapting: bool, step: float) -> None:
        """Single-site MH over the latent path, even columns then odd columns.

        Given one parity fixed, sites of the other parity are conditionally
        independent (each site only touches its two time neighbors), so a
        whole parity class updates in one vectorized step.
        """
        rng = self.rng
        phi = self.phi()
        inv2se = 0.5 / self.sigma_eta**2
        r = 1.0 / self.psi
        omg = self.lam * self.omega
        acc_sum, acc_cells = 0.0, 0

        for p in (0, 1):
            tp = np.arange(p, self.t, 2)
            cur = self.gamma[:, tp]
            prop = cur + np.exp(self.ls_gamma[:, tp]) * rng.standard_normal(cur.shape)
            delta = np.zeros_like(cur)

            j0 = 1 if p == 0 else 0  # first column of parity 0 is t = 0
            if j0:
                delta[:, 0] -= (prop[:, 0] ** 2 - cur[:, 0] ** 2) / (2 * GAMMA1_PRIOR_SD**2)

            tb = tp[j0:]  # sites with a backward transition and an observation
            left = self.gamma[:, tb - 1]
            mean_b = phi[:, tb] * left
            delta[:, j0:] -= inv2se * ((prop[:, j0:] - mean_b) ** 2 - (cur[:, j0:] - mean_b) ** 2)
            yb = self.y[:, tb]
            ob = omg[:, tb]
            with np.errstate(over="ignore"):
                delta[:, j0:] += yb * (prop[:, j0:] - cur[:, j0:]) - (r + yb) * (
                    np.log(r + np.exp(prop[:, j0:] + ob)) - np.log(r + np.exp(cur[:, j0:] + ob))
                )

            jend = len(tp) - (1 if tp[-1] == self.t - 1 else 0)
            tf = tp[:jend]  # sites with a forward transition
            right = self.gamma[:, tf + 1]
            phif = phi[:, tf + 1]
            delta[:, :jend] -= inv2se * (
                (right - phif * prop[:, :jend]) ** 2 - (right - phif * cur[:, :jend]) ** 2
            )

            accept = np.log(rng.random(cur.shape)) < delta
            self.gamma[:, tp] = np.where(accept, prop, cur)
            acc_probs = np.exp(np.minimum(delta, 0.0))
            if adapting:
                self.ls_gamma[:, tp] += step * (acc_probs - TARGET_SINGLE)
            else:
                acc_sum += float(acc_probs.sum())
                acc_cells += acc_probs.size

        if not adapting:
            self.acc["gamma"][0] += acc_sum / acc_cells
            self.acc["gamma"][1] += 1

    def _paths_proposal(self, phi: np.ndarray, g0: np.ndarray, psi=None):
        """Gaussian whole-path approximations around g0, all countries at once.

        The AR transitions are exactly Gaussian (tridiagonal precision); the
        NB observation terms are replaced by their second-order expansion at
        g0 (shape N x T). All countries are stacked into one block-diagonal
        banded system (zero coupling at the block boundaries), so a single
        banded cholesky and solve covers the panel. Returns (mean, d, lo,
        logdet): d and lo are the diagonal and subdiagonal of each lower-
        bidiagonal cholesky factor, logdet has one entry per country.
        """
        t = self.t
        inv_s2 = 1.0 / self.sigma_eta**2
        # clamp the size parameter: this only shapes the proposal (the
        # accept step uses the exact target), and beyond ~1e12 the NB terms
        # are numerically Poisson anyway
        r = min(1.0 / (self.psi if psi is None else psi), 1e12)
        o = (self.lam * self.omega)[:, 1:]
        y = self.y[:, 1:]
        mu = np.exp(np.clip(g0[:, 1:] + o, -700.0, 700.0))
        # factored to stay finite when r = 1/psi is astronomically large
        frac_mu = mu / (r + mu)
        frac_r = r / (r + mu)
        grad = y - (r + y) * frac_mu
        curv = (r + y) * frac_mu * frac_r

        diag = np.empty((self.n, t))
        diag[:, 0] = 1.0 / GAMMA1_PRIOR_SD**2 + inv_s2 * phi[:, 1] ** 2
        diag[:, 1:] = inv_s2 + curv
        diag[:, 1 : t - 1] += inv_s2 * phi[:, 2:] ** 2
        sub = np.zeros((self.n, t))  # sub[:, t-1] stays 0: block boundary
        sub[:, : t - 1] = -inv_s2 * phi[:, 1:]
        h = np.zeros((self.n, t))
        h[:, 1:] = curv * g0[:, 1:] + grad

        ab = np.empty((2, self.n * t))
        ab[0] = diag.ravel()
        ab[1] = sub.ravel()
        chol = cholesky_banded(ab, lower=True, check_finite=False)
        d = chol[0].reshape(self.n, t)
        lo = chol[1].reshape(self.n, t)[:, : t - 1]
        logdet = 2.0 * np.sum(np.log(d), axis=1)
        mean = solveh_banded(ab, h.ravel(), lower=True, check_finite=False)
        return mean.reshape(self.n, t), d, lo, logdet

    @staticmethod
    def _paths_draw(rng, mean, d, lo):
        """Sample all paths from N(mean, Q^-1) given the bidiagonal factors."""
        n, t = mean.shape
        upper = np.zeros((2, n * t))
        upper[1] = d.ravel()
        sub = np.zeros((n, t))
        sub[:, : t - 1] = lo
        upper[0, 1:] = sub.ravel()[:-1]  # L transpose as an upper banded system
        z = rng.standard_normal(n * t)
        x = solve_banded((0, 1), upper, z, check_finite=False)
        return mean + x.reshape(n, t)

    @staticmethod
    def _paths_logq(x, mean, d, lo, logdet):
        """Per-country proposal log-density (constants dropped), shape (N,)."""
        diff = x - mean
        v = d * diff
        v[:, :-1] += lo * diff[:, 1:]
        return 0.5 * logdet - 0.5 * np.sum(v * v, axis=1)

    def _paths_logpost(self, phi: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Per-country conditional path log-target, shape (N,)."""
        inv_s2 = 1.0 / self.sigma_eta**2
        r = 1.0 / self.psi
        o = (self.lam * self.omega)[:, 1:]
        y = self.y[:, 1:]
        with np.errstate(over="ignore"):
            obs = np.sum(y * g[:, 1:] - (r + y) * np.log(r + np.exp(g[:, 1:] + o)), axis=1)
        resid = g[:, 1:] - phi[:, 1:] * g[:, :-1]
        return (
            obs
            - 0.5 * inv_s2 * np.sum(resid**2, axis=1)
            - 0.5 * g[:, 0] ** 2 / GAMMA1_PRIOR_SD**2
        )

    def _paths_mode(self, phi: np.ndarray, psi=None):
        """Newton iteration to every country's unique conditional path mode.

        The conditional target for one path is strictly log-concave (the AR
        terms are Gaussian and the NB terms are concave in gamma), so damped
        Newton converges to its unique mode; the returned proposal is the
        Gaussian with that mode and the curvature there. Warm starts from
        the last converged modes; the fixed point is unique, so the start
        only affects the iteration count.
        """
        if not hasattr(self, "_mode_cache"):
            self._mode_cache = self.gamma.copy()
        mode = self._mode_cache
        mean, d, lo, logdet = self._paths_proposal(phi, mode, psi)
        prev = np.inf
        for _ in range(100):
            step_mat = np.clip(mean - mode, -4.0, 4.0)
            delta = float(np.max(np.abs(step_mat)))
            # the second clause detects the rounding floor: with huge counts
            # the curvature is so large that the solve jitters at an absolute
            # level above any fixed tolerance, but contraction has stopped
            if delta < 1e-9 or (delta < 1e-3 and delta >= 0.5 * prev):
                break
            prev = delta
            mode = mode + step_mat
            mean, d, lo, logdet = self._paths_proposal(phi, mode, psi)
        self._mode_cache = mode
        return mean, d, lo, logdet

    def update_gamma_block(self):
        """Independence MH on each country's whole latent path.

        The proposal is the Gaussian at the conditional mode, which does not
        depend on the current path, making this a valid independence kernel;
        it decorrelates the smooth path components that site updates only
        diffuse across in O(T^2) sweeps. Countries accept independently.
        Returns the proposal so the joint dispersion move can reuse it.
        """
        rng = self.rng
        phi = self.phi()
        mean, d, lo, logdet = self._paths_mode(phi)
        prop = self._paths_draw(rng, mean, d, lo)
        ratio = (
            self._paths_logpost(phi, prop)
            - self._paths_logpost(phi, self.gamma)
            + self._paths_logq(self.gamma, mean, d, lo, logdet)
            - self._paths_logq(prop, mean, d, lo, logdet)
        )
        accept = np.log(rng.random(self.n)) < ratio
        self.gamma[accept] = prop[accept]
        return mean, d, lo, logdet

    def update_psi_path_joint(self, proposal=None, scale: float = 1.0) -> None:
        """Joint MH on log psi and every latent path.

        The dispersion and the paths' roughness trade off along a ridge:
        given the paths psi is pinned tightly, and given psi the accepted
        paths match its roughness, so alternating updates crawl along the
        ridge. This move proposes psi and refreshes all paths from their
        mode proposals computed under the proposed value. Both path
        proposals are independence kernels given the other blocks, so the
        joint Hastings ratio is exact.
        """
        rng = self.rng
        phi = self.phi()
        inv2se = 0.5 / self.sigma_eta**2
        z_cur = float(np.log(self.psi))
        z_prop = z_cur + scale * rng.standard_normal()
        psi_prop = float(np.exp(z_prop))
        ratio = (-PRIOR_SHAPE * z_prop - PRIOR_RATE * np.exp(-z_prop)) - (
            -PRIOR_SHAPE * z_cur - PRIOR_RATE * np.exp(-z_cur)
        )
        if proposal is None:
            proposal = self._paths_mode(phi)
        mean_c, d_c, lo_c, logdet_c = proposal
        mean_p, d_p, lo_p, logdet_p = self._paths_mode(phi, psi_prop)
        prop = self._paths_draw(rng, mean_p, d_p, lo_p)
        ratio += float(np.sum(self._paths_logq(self.gamma, mean_c, d_c, lo_c, logdet_c)))
        ratio -= float(np.sum(self._paths_logq(prop, mean_p, d_p, lo_p, logdet_p)))
        for g, s in ((prop, 1.0), (self.gamma, -1.0)):
            resid = g[:, 1:] - phi[:, 1:] * g[:, :-1]
            ratio += s * (
                -inv2se * float(np.sum(resid**2))
                - 0.5 * float(np.sum(g[:, 0] ** 2)) / GAMMA1_PRIOR_SD**2
            )
        o = (self.lam * self.omega)[:, 1:]
        ratio += nb_loglik_full(self.y[:, 1:], prop[:, 1:] + o, psi_prop)
        ratio -= nb_loglik_full(self.y[:, 1:], self.gamma[:, 1:] + o, self.psi)
        if np.log(rng.random()) < ratio:
            self.psi = psi_prop
            self.gamma = prop

    def _trans_loglik_by_country(self, phi: np.ndarray) -> np.ndarray:
        resid = self.gamma[:, 1:] - phi[:, 1:] * self.gamma[:, :-1]
        return -0.5 * np.sum(resid**2, axis=1) / self.sigma_eta**2

    def rescale_b_column(self) -> None:
        """Joint rescale of one random-effect column and its scale.

        Writing b_iq = sigma_bq * btilde_iq and stepping log sigma_bq with
        btilde held fixed moves along the funnel axis that the scale update
        conditioned on b cannot cross; the N(0, 1) density of btilde cancels
        from the ratio, leaving the transition terms and the scale prior.
        """
        rng = self.rng
        lp_cur = float(self._trans_loglik_by_country(self.phi()).sum())
        for q in range(self.q1):
            eps = 0.5 * rng.standard_normal()
            u_cur = np.log(self.sigma_b[q])
            u_prop = u_cur + eps
            b_prop = self.b.copy()
            b_prop[:, q] *= np.exp(eps)
            phi_prop = (self.beta[None, :] + b_prop) @ self.P.T
            lp_prop = float(self._trans_loglik_by_country(phi_prop).sum())
            d_prior = -2.0 * PRIOR_SHAPE * (u_prop - u_cur) - PRIOR_RATE * (
                np.exp(-2.0 * u_prop) - np.exp(-2.0 * u_cur)
            )
            if np.log(rng.random()) < lp_prop - lp_cur + d_prior:
                self.sigma_b[q] = np.exp(u_prop)
                self.b = b_prop
                lp_cur = lp_prop

    def _design(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-country design X_i (rows P(t) * gamma_{t-1}) and Gram blocks."""
        x = self.P[None, 1:, :] * self.gamma[:, :-1, None]  # N x (T-1) x Q1
        m = np.einsum("ntq,ntr->nqr", x, x)
        return x, m

    def update_b(self) -> None:
        """Exact Gibbs draw of each country's random-effect vector.

        The transition density is linear in b_i given the latent path, so
        b_i | gamma, beta, scales is Gaussian: design row at time t is
        P(t) * gamma_{t-1}, response gamma_t minus the beta contribution.
        """
        rng = self.rng
        inv_se2 = 1.0 / self.sigma_eta**2
        x, m = self._design()
        z = self.gamma[:, 1:] - x @ self.beta
        w = np.einsum("ntq,nt->nq", x, z)
        prec = inv_se2 * m + np.diag(1.0 / self.sigma_b**2)[None]
        chol = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, inv_se2 * w[..., None])[..., 0]
        noise = np.linalg.solve(
            np.transpose(chol, (0, 2, 1)), rng.standard_normal((self.n, self.q1, 1))
        )[..., 0]
        self.b = mean + noise

    def update_sigma_b_collapsed(self, adapting: bool, step: float) -> None:
        """MH on log sigma_bq with beta and b both integrated out.

        Alternating exact draws of the coefficients and their scales cannot
        cross the funnel, and conditioning on beta keeps chains pinned to
        one split between shared and country-specific structure. The whole
        coefficient vector (beta, b_1..b_N) is jointly Gaussian given the
        path, so it integrates out in closed form: the collapsed target for
        the scales needs one (N+1)Q x (N+1)Q normal-equation solve per
        evaluation. beta and b are redrawn exactly right afterwards.
        """
        rng = self.rng
        inv_se2 = 1.0 / self.sigma_eta**2
        x, m = self._design()
        w = np.einsum("ntq,nt->nq", x, self.gamma[:, 1:])
        q1 = self.q1
        dim = (self.n + 1) * q1
        # design normal equations for theta = (beta, b_1, .., b_N): the beta
        # block sees every country, b_i only its own
        base = np.zeros((dim, dim))
        base[:q1, :q1] = m.sum(axis=0)
        for i in range(self.n):
            s = (i + 1) * q1
            base[s : s + q1, s : s + q1] = m[i]
            base[:q1, s : s + q1] = m[i]
            base[s : s + q1, :q1] = m[i]
        c = np.concatenate([w.sum(axis=0), w.reshape(-1)]) * inv_se2

        def collapsed(sigma_b):
            prior = np.concatenate(
                [np.full(q1, 1.0 / BETA_PRIOR_VAR)]
                + [1.0 / sigma_b**2] * self.n
            )
            a = inv_se2 * base + np.diag(prior)
            chol = np.linalg.cholesky(a)
            half = np.linalg.solve(chol, c)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            # Gaussian integral over theta plus the prior normalizers of b
            return float(
                0.5 * (half @ half) - 0.5 * logdet
                - self.n * float(np.sum(np.log(sigma_b)))
            )

        lp_cur = collapsed(self.sigma_b)
        for _ in range(2):
            for q in range(self.q1):
                u_cur = np.log(self.sigma_b[q])
                # occasional wide jumps let chains cross between the shared
                # and country-specific attributions of the same curvature
                wide = rng.random() < 0.25
                scale = np.exp(self.ls_sb[q]) * (4.0 if wide else 1.0)
                u_prop = u_cur + scale * rng.standard_normal()
                prop = self.sigma_b.copy()
                prop[q] = np.exp(u_prop)
                # Gamma(shape, rate) prior on the precision, mapped to log sigma
                d_prior = -2.0 * PRIOR_SHAPE * (u_prop - u_cur) - PRIOR_RATE * (
                    np.exp(-2.0 * u_prop) - np.exp(-2.0 * u_cur)
                )
                lp_prop = collapsed(prop)
                ratio = lp_prop - lp_cur + d_prior
                if np.log(rng.random()) < ratio:
                    self.sigma_b = prop
                    lp_cur = lp_prop
                if adapting and not wide:
                    self.ls_sb[q] += step * (np.exp(min(ratio, 0.0)) - TARGET_SINGLE)


    def update_beta(self) -> None:
        """Gibbs draw of the shared coefficients with b integrated out.

        Marginally over the random effects, gamma_i[1:] ~ N(X_i beta,
        X_i Sigma_b X_i' + sigma_eta^2 I), still Gaussian in beta. Sampling
        from this collapsed conditional (and redrawing b exactly afterwards)
        avoids the slow ridge between beta and the b configuration.
        """
        rng = self.rng
        inv_se2 = 1.0 / self.sigma_eta**2
        x, m = self._design()
        w = np.einsum("ntq,nt->nq", x, self.gamma[:, 1:])
        # Woodbury: X'V^-1 X = M/s2 - M B^-1 M / s4 with B = Sigma_b^-1 + M/s2
        bmat = np.diag(1.0 / self.sigma_b**2)[None] + inv_se2 * m
        sol_m = np.linalg.solve(bmat, m)
        sol_w = np.linalg.solve(bmat, w[..., None])[..., 0]
        prec = np.eye(self.q1) / BETA_PRIOR_VAR + inv_se2 * m.sum(axis=0)
        prec -= inv_se2**2 * np.einsum("nqr,nrs->qs", m, sol_m)
        rhs = inv_se2 * w.sum(axis=0) - inv_se2**2 * np.einsum("nqr,nr->q", m, sol_w)
        chol = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, rhs)
        noise = np.linalg.solve(chol.T, rng.standard_normal(self.q1))
        self.beta = mean + noise

    def update_lam(self) -> None:
        p1 = outlier_inclusion_prob(
            self.y[:, 1:], self.gamma[:, 1:], self.omega[:, 1:], self.psi, self.pi
        )
        self.lam[:, 1:] = (self.rng.random((self.n, self.t - 1)) < p1).astype(float)

    def update_flag_swap(self) -> None:
        """Toggle outlier flags while absorbing the offset into the path.

        A spike can be explained two ways: a flagged offset on a smooth path
        or an unflagged excursion of the path itself, and flag draws alone
        cannot exchange them because the path pins the flag. The involution
        (gamma_t, lam = 1) <-> (gamma_t + omega_t, lam = 0) keeps log mu
        fixed, so the observation term cancels and the unit-Jacobian move is
        decided by the AR transition terms and the flag prior odds alone.
        Sites two steps apart share no transition term, so each parity class
        updates in one vectorized step.
        """
        rng = self.rng
        phi = self.phi()
        inv2se = 0.5 / self.sigma_eta**2
        logit_pi = float(np.log(self.pi) - np.log1p(-self.pi))

        for start in (1, 2):
            tp = np.arange(start, self.t, 2)
            if tp.size == 0:
                continue
            cur = self.gamma[:, tp]
            lam = self.lam[:, tp]
            sign = np.where(lam == 1.0, 1.0, -1.0)
            prop = cur + sign * self.omega[:, tp]

            left = self.gamma[:, tp - 1]
            mean_b = phi[:, tp] * left
            delta = -inv2se * ((prop - mean_b) ** 2 - (cur - mean_b) ** 2)

            jend = len(tp) - (1 if tp[-1] == self.t - 1 else 0)
            tf = tp[:jend]
            right = self.gamma[:, tf + 1]
            phif = phi[:, tf + 1]
            delta[:, :jend] -= inv2se * (
                (right - phif * prop[:, :jend]) ** 2
                - (right - phif * cur[:, :jend]) ** 2
            )
            delta -= sign * logit_pi

            accept = np.log(rng.random(cur.shape)) < delta
            self.gamma[:, tp] = np.where(accept, prop, cur)
            self.lam[:, tp] = np.where(accept, 1.0 - lam, lam)

    def update_omega(self, adapting: bool, step: float) -> None:
        rng = self.rng
        # prior refresh wherever the cell is not flagged
        fresh = rng.normal(0.0, self.sigma_omega, size=(self.n, self.t - 1))
        flagged = self.lam[:, 1:] == 1.0
        cur = self.omega[:, 1:]
        new = np.where(flagged, cur, fresh)

        # MH on flagged cells: prior x NB term
        scale = np.exp(self.ls_omega)
        prop = cur + scale * rng.standard_normal((self.n, self.t - 1))
        y = self.y[:, 1:]
        g = self.gamma[:, 1:]
        lp_cur = -0.5 * cur**2 / self.sigma_omega**2 + nb_loglik_terms(y, g + cur, self.psi)
        lp_prop = -0.5 * prop**2 / self.sigma_omega**2 + nb_loglik_terms(y, g + prop, self.psi)
        ratio = lp_prop - lp_cur
        accept = np.log(rng.random((self.n, self.t - 1))) < ratio
        new = np.where(flagged & accept, prop, new)
        self.omega[:, 1:] = new

        if flagged.any():
            acc_prob = float(np.exp(np.minimum(ratio[flagged], 0.0)).mean())
            if adapting:
                self.ls_omega += step * (acc_prob - TARGET_SINGLE)
            else:
                self.acc["omega"][0] += acc_prob
                self.acc["omega"][1] += 1

    def update_scales(self) -> None:
        rng = self.rng
        shape, rate = sigma_eta_precision_posterior(
            self.gamma[:, 1:], self.phi()[:, 1:], self.gamma[:, :-1]
        )
        self.sigma_eta = 1.0 / np.sqrt(rng.gamma(shape, 1.0 / rate))
        # sigma_b is updated by its collapsed MH block, not conditionally on
        # b: a conjugate draw here would re-enter the funnel every iteration
        m = self.n * (self.t - 1)
        shape = PRIOR_SHAPE + 0.5 * m
        rate = PRIOR_RATE + 0.5 * float(np.sum(self.omega[:, 1:] ** 2))
        self.sigma_omega = 1.0 / np.sqrt(rng.gamma(shape, 1.0 / rate))

    def update_pi(self) -> None:
        m = self.n * (self.t - 1)
        k = float(np.sum(self.lam[:, 1:]))
        self.pi = float(self.rng.beta(1.0 + k, 1.0 + m - k))

    def update_psi(self, adapting: bool, step: float, n_steps: int = 3) -> None:
        """A few MH steps on log(psi); the dispersion mixes slowly otherwise."""
        rng = self.rng
        log_mu = self.gamma[:, 1:] + self.lam[:, 1:] * self.omega[:, 1:]
        y = self.y[:, 1:]

        def logp(z):
            psi = np.exp(z)
            return nb_loglik_full(y, log_mu, psi) - PRIOR_SHAPE * z - PRIOR_RATE * np.exp(-z)

        z_cur = np.log(self.psi)
        lp_cur = logp(z_cur)
        for _ in range(n_steps):
            z_prop = z_cur + np.exp(self.ls_psi) * rng.standard_normal()
            lp_prop = logp(z_prop)
            ratio = lp_prop - lp_cur
            if np.log(rng.random()) < ratio:
                z_cur, lp_cur = z_prop, lp_prop
            acc_prob = float(np.exp(min(ratio, 0.0)))
            if adapting:
                self.ls_psi += step * (acc_prob - TARGET_SINGLE)
            else:
                self.acc["psi"][0] += acc_prob
                self.acc["psi"][1] += 1
        self.psi = float(np.exp(z_cur))

    def iterate(self, adapting: bool, step: float, gamma_sweeps: int = 4) -> None:
        for _ in range(gamma_sweeps):
            self.update_gamma(adapting, step)
        self.update_sigma_b_collapsed(adapting, step)
        self.update_beta()
        self.update_b()
        self.rescale_b_column()
        # alternating the flag and offset blocks a few times lets ambiguous
        # cells flip: an unflagged cell sees a fresh prior offset before the
        # next flag draw, so the pair does not lock into one configuration
        for _ in range(3):
            self.update_lam()
            self.update_omega(adapting, step)
            self.update_flag_swap()
        self.update_scales()
        self.update_pi()
        self.update_psi(adapting, step)
        # the whole-path refresh runs right before the joint dispersion move
        # so the joint move can reuse its proposals as the reverse kernel
        # (nothing between them changes the conditioning blocks)
        proposal = self.update_gamma_block()
        self.update_psi_path_joint(proposal)


def fit_mcmc(panel: CasePanel, config: McmcConfig) -> PosteriorDraws:
    """Run independent chains and collect thinned post-burn-in draws.

    Identical (panel, config) inputs reproduce identical draws: each chain
    owns an RNG stream spawned deterministically from the config seed.
    """
    if panel.t_count < 3:
        raise InsufficientDataError("need at least 3 days of data")

    n, t, q1 = panel.n_countries, panel.t_count, config.degree + 1
    d = config.n_retained
    c = config.n_chains
    out = PosteriorDraws(
        config=config,
        countries=panel.countries,
        dates=panel.dates,
        beta=np.empty((c, d, q1)),
        sigma_eta=np.empty((c, d)),
        sigma_b=np.empty((c, d, q1)),
        pi_outlier=np.empty((c, d)),
        sigma_omega=np.empty((c, d)),
        psi=np.empty((c, d)),
        gamma=np.empty((c, d, n, t)),
        b=np.empty((c, d, n, q1)),
        lam=np.empty((c, d, n, t), dtype=np.uint8),
        omega=np.empty((c, d, n, t)),
    )

    seeds = np.random.SeedSequence(config.seed).spawn(c)
    for chain in range(c):
        rng = np.random.Generator(np.random.PCG64(seeds[chain]))
        state = _ChainState(panel, config, rng)
        for name, value in state.log_posterior().items():
            if not np.isfinite(value):
                raise InitializationError(f"non-finite log-posterior in block {name!r}")

        for k in range(config.n_adapt):
            state.iterate(adapting=True, step=2.0 / (20.0 + k) ** 0.6)
        for _ in range(config.n_burnin):
            state.iterate(adapting=False, step=0.0)
        kept = 0
        for k in range(config.n_iter):
            state.iterate(adapting=False, step=0.0)
            if (k + 1) % config.thin == 0 and kept < d:
                out.beta[chain, kept] = state.beta
                out.sigma_eta[chain, kept] = state.sigma_eta
                out.sigma_b[chain, kept] = state.sigma_b
                out.pi_outlier[chain, kept] = state.pi
                out.sigma_omega[chain, kept] = state.sigma_omega
                out.psi[chain, kept] = state.psi
                out.gamma[chain, kept] = state.gamma
                out.b[chain, kept] = state.b
                out.lam[chain, kept] = state.lam.astype(np.uint8)
                out.omega[chain, kept] = state.omega
                kept += 1

        out.acceptance[f"chain{chain}"] = {
            name: (s / max(c_, 1)) for name, (s, c_) in state.acc.items()
        }
    return out


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for one scalar parameter.

    ``chains`` is a (num_chains, n) array-like of equal-length draws. Returns
    sqrt(((n-1)/n * W + B/n) / W) with W the mean within-chain variance and
    B = n * variance of the chain means; 1 by convention when W = B = 0.
    """
    arr = [np.asarray(c, dtype=float) for c in chains]
    if len(arr) < 2:
        raise DimensionError("need at least 2 chains")
    n = len(arr[0])
    if n < 2 or any(len(c) != n for c in arr):
        raise DimensionError("chains must have equal length n >= 2")
    arr = np.asarray(arr)
    w = float(np.mean(np.var(arr, axis=1, ddof=1)))
    b = n * float(np.var(np.mean(arr, axis=1), ddof=1))
    if w == 0.0 and b == 0.0:
        return 1.0
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def summarize_posterior(draws: PosteriorDraws, selector: str) -> tuple[float, float, float]:
    """Mean and equal-tailed 95% interval over pooled draws (type-7 quantiles)."""
    pooled = draws.pooled(selector)
    if pooled.size < 2:
        raise ValueError("need at least 2 retained draws")
    lo, hi = np.quantile(pooled, [0.025, 0.975])
    return float(pooled.mean()), float(lo), float(hi)
