"""Acceptance suite: ten numbered criteria covering the statistical core.

Each test prints one pass/fail line (bypassing capture) so a full run leaves
a visible scoreboard. Heavy criteria (3 and 6) run scaled-down but real MCMC
recovery and holdout studies; expect several minutes for the whole module.
"""

import itertools

import numpy as np
from scipy.stats import gamma as gamma_dist
from scipy.stats import kstest

from epicast.cli import dispatch
from epicast.cluster import DistanceMatrix, dtw_distance, ward_cluster
from epicast.ingest import clean_series
from epicast.model import ModelParams, sample_nb, simulate_panel
from epicast.polybasis import build_orthogonal_basis, evaluate_grid
from epicast.sampler import (
    McmcConfig,
    fit_mcmc,
    gelman_rubin,
    outlier_inclusion_prob,
    sigma_eta_precision_posterior,
    summarize_posterior,
)
from epicast.sampler import _ChainState
from epicast.validate import ccc_components, holdout_evaluate

from test_cluster import dtw_oracle


def _report(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_01_nb_parameterization(capsys):
    """Sample moments at (mu=10, psi=0.3) match mean 10 and variance 40."""
    rng = np.random.Generator(np.random.PCG64(1))
    mu, psi, n = 10.0, 0.3, 1_000_000
    draws = sample_nb(rng, np.full(n, mu), psi)
    var = mu + psi * mu * mu  # 40
    se_mean = np.sqrt(var / n)
    m4 = np.mean((draws - draws.mean()) ** 4)
    se_var = np.sqrt((m4 - var**2) / n)
    d_mean = abs(draws.mean() - mu)
    d_var = abs(draws.var() - var)
    ok = d_mean < 3 * se_mean and d_var < 3 * se_var
    _report(
        capsys, 1, ok,
        f"|mean-10|={d_mean:.4f} (3SE={3*se_mean:.4f}), "
        f"|var-40|={d_var:.3f} (3SE={3*se_var:.3f})",
    )


def test_criterion_02_basis_invariants(capsys):
    """Orthogonality/unit norms to 1e-10 and grid reconstruction to 1e-8
    for every T in 10..500 and Q in 0..3."""
    worst_orth, worst_rec = 0.0, 0.0
    for t_count in range(10, 501):
        for degree in range(4):
            basis = build_orthogonal_basis(t_count, degree)
            c = basis.columns
            gram = c.T @ c
            target = np.diag([float(t_count)] + [1.0] * degree)
            worst_orth = max(worst_orth, float(np.abs(gram - target).max()))
            rec = evaluate_grid(basis, np.arange(1, t_count + 1))
            worst_rec = max(worst_rec, float(np.abs(rec - c).max()))
    ok = worst_orth < 1e-10 and worst_rec < 1e-8
    _report(capsys, 2, ok, f"max gram error {worst_orth:.2e}, max reconstruction {worst_rec:.2e}")


RECOVERY_TRUTH = ModelParams(
    beta=np.array([1.0, -0.17, 0.41]),
    sigma_eta=0.5,
    sigma_b=np.array([0.0072, 0.0325, 0.2392]),
    pi_outlier=0.1,
    sigma_omega=3.4,
    psi=0.001,
)


def test_criterion_03_sampler_recovery(capsys):
    """N=12, T=80 recovery: CI coverage of {beta0, sigma_eta, pi, sigma_omega}
    in >= 8/10 replicates and R-hat < 1.1 for every global parameter."""
    targets = {"beta0": 1.0, "sigma_eta": 0.5, "pi": 0.1, "sigma_omega": 3.4}
    covered = {k: 0 for k in targets}
    worst_rhat = 0.0
    for rep in range(10):
        seed = 100 + rep
        panel, _ = simulate_panel(RECOVERY_TRUTH, 12, 80, np.full(12, np.log(5.0)), seed=seed)
        cfg = McmcConfig(
            n_chains=3, n_adapt=2000, n_burnin=2500, n_iter=2500, thin=5,
            seed=seed * 10, degree=2,
        )
        draws = fit_mcmc(panel, cfg)
        for name in draws.scalar_names():
            worst_rhat = max(worst_rhat, gelman_rubin(draws.scalar_chains(name)))
        for name, truth in targets.items():
            _, lo, hi = summarize_posterior(draws, name)
            covered[name] += lo <= truth <= hi
    ok = all(c >= 8 for c in covered.values()) and worst_rhat < 1.1
    _report(capsys, 3, ok, f"coverage/10 {covered}, worst R-hat {worst_rhat:.3f}")


def test_criterion_04_conjugate_blocks(capsys):
    """The eta-precision Gibbs block matches its analytic Gamma posterior
    (KS < 0.02); the lambda block matches its two-point conditional."""
    from datetime import date, timedelta
    from epicast.ingest import CasePanel

    rng = np.random.default_rng(12)
    dates = tuple(date(2020, 3, 1) + timedelta(days=k) for k in range(20))
    counts = rng.poisson(30.0, size=(3, 20)).astype(np.int64)
    panel = CasePanel(("a", "b", "c"), dates, counts)
    cfg = McmcConfig(n_chains=2, n_adapt=1, n_burnin=1, n_iter=10, thin=1, degree=1)
    state = _ChainState(panel, cfg, np.random.Generator(np.random.PCG64(5)))

    # hold the latent path fixed: repeated scale updates are iid posterior draws
    shape, rate = sigma_eta_precision_posterior(
        state.gamma[:, 1:], state.phi()[:, 1:], state.gamma[:, :-1]
    )
    prec = np.empty(10_000)
    for k in range(prec.size):
        state.update_scales()
        prec[k] = 1.0 / state.sigma_eta**2
    ks = kstest(prec, gamma_dist(a=shape, scale=1.0 / rate).cdf).statistic

    # one-cell problem: empirical update_lam frequency vs the analytic
    # two-point probability
    y, g, w, psi, pi = 9.0, 1.0, 1.8, 0.2, 0.25
    cell = CasePanel(("a",), dates[:3], np.array([[0, int(y), int(y)]]))
    one = _ChainState(cell, McmcConfig(n_chains=2, n_adapt=1, n_burnin=1,
                                       n_iter=10, thin=1, degree=0),
                      np.random.Generator(np.random.PCG64(3)))
    one.gamma[:] = g
    one.omega[:] = w
    one.psi, one.pi = psi, pi
    p_true = float(
        outlier_inclusion_prob(np.array([y]), np.array([g]), np.array([w]), psi, pi)[0]
    )
    n = 10_000
    hits = 0
    for _ in range(n):
        one.update_lam()
        hits += one.lam[0, 1] == 1.0
    freq = hits / n
    se = np.sqrt(p_true * (1 - p_true) / n)
    ok = ks < 0.02 and abs(freq - p_true) < 3 * se
    _report(capsys, 4, ok, f"KS={ks:.4f}, |freq-p|={abs(freq-p_true):.4f} (3SE={3*se:.4f})")


def test_criterion_05_ccc_identity_and_examples(capsys):
    """CCC = r * C_b to 1e-12 on 1000 random pairs; hand values 1, 4/7, -1."""
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        x = rng.normal(rng.uniform(-10, 10), rng.uniform(0.1, 10), n)
        y = rng.uniform(-2, 2) * x + rng.normal(0, rng.uniform(0.1, 5), n)
        m = ccc_components(x, y)
        worst = max(worst, abs(m.ccc - m.pearson * m.accuracy))
    x = np.array([1.0, 2.0, 3.0])
    hand = (
        abs(ccc_components(x, x.copy()).ccc - 1.0),
        abs(ccc_components(x, x + 1.0).ccc - 4.0 / 7.0),
        abs(ccc_components(x, -x + 4.0).ccc + 1.0),
    )
    ok = worst < 1e-12 and max(hand) < 1e-12
    _report(capsys, 5, ok, f"identity gap {worst:.2e}, hand-example gap {max(hand):.2e}")


def test_criterion_06_horizon_degradation(capsys):
    """Pooled CCC at h=1 beats h=7 in >= 8 of 10 synthetic holdout panels."""
    truth = ModelParams(
        beta=np.array([0.998, -0.03, 0.05]),
        sigma_eta=0.25,
        sigma_b=np.array([0.003, 0.01, 0.02]),
        pi_outlier=0.05,
        sigma_omega=1.5,
        psi=0.05,
    )
    wins = 0
    for rep in range(10):
        seed = 300 + rep
        init = np.random.default_rng(seed).normal(np.log(100.0), 1.2, 12)
        panel, _ = simulate_panel(truth, 12, 60, init, seed=seed)
        cfg = McmcConfig(
            n_chains=2, n_adapt=300, n_burnin=300, n_iter=500, thin=5, seed=seed, degree=2
        )
        result = holdout_evaluate(panel, cfg, horizon=7, forecast_seed=seed)
        wins += result.metrics[0].ccc >= result.metrics[6].ccc
    ok = wins >= 8
    _report(capsys, 6, ok, f"h=1 >= h=7 in {wins}/10 replicates")


def test_criterion_07_dtw_oracle_grid(capsys):
    """DTW equals the exhaustive path-enumeration oracle on the full grid of
    sequences of length <= 5 over {0,1,2}; listed examples hold exactly."""
    seqs = [
        list(s)
        for n in range(1, 6)
        for s in itertools.product((0.0, 1.0, 2.0), repeat=n)
    ]
    mismatches = 0
    for i in range(len(seqs)):
        for j in range(i, len(seqs)):
            if dtw_distance(seqs[i], seqs[j]) != dtw_oracle(seqs[i], seqs[j]):
                mismatches += 1
    examples = (
        dtw_distance([1, 2, 3], [1, 2, 3]) == 0.0,
        dtw_distance([0, 1, 2, 2], [0, 0, 1, 2]) == 0.0,
        dtw_distance([0, 0], [1, 1]) == 2.0,
    )
    ok = mismatches == 0 and all(examples)
    _report(capsys, 7, ok, f"{len(seqs)} sequences, {mismatches} oracle mismatches")


def test_criterion_08_ward_heights(capsys):
    """Non-decreasing merge heights on 100 random matrices; the 3-point line
    example merges (0, 1) first."""
    rng = np.random.default_rng(21)
    violations = 0
    for _ in range(100):
        n = int(rng.integers(3, 31))
        pts = rng.normal(size=(n, 3))
        d = np.sqrt(((pts[:, None] - pts[None, :]) ** 2).sum(-1))
        np.fill_diagonal(d, 0.0)
        tree = ward_cluster(DistanceMatrix(tuple(map(str, range(n))), d))
        heights = [m[2] for m in tree.merges]
        violations += any(b < a - 1e-9 for a, b in zip(heights, heights[1:]))
    line = DistanceMatrix(
        ("p0", "p1", "p5"),
        np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 4.0], [5.0, 4.0, 0.0]]),
    )
    first = ward_cluster(line).merges[0][:2]
    ok = violations == 0 and set(first) == {0, 1}
    _report(capsys, 8, ok, f"{violations} ordering violations, line merges {first} first")


def test_criterion_09_cleaning_rules(capsys):
    """Negative counts clamp to zero, gaps backfill with zeros, and the
    current day is dropped."""
    from datetime import date
    from epicast.ingest import RawCaseRecord

    today = date(2020, 5, 20)
    records = [
        RawCaseRecord(date(2020, 5, 14), -7, "Ireland", "IE"),
        RawCaseRecord(date(2020, 5, 17), 4, "Ireland", "IE"),
        RawCaseRecord(today, 99, "Ireland", "IE"),
    ]
    panel = clean_series(records, today=today)
    checks = (
        panel.counts[0, 0] == 0 and panel.n_clamped == 1,
        list(panel.counts[0]) == [0, 0, 0, 4],
        panel.dates[-1] == date(2020, 5, 17),
    )
    ok = all(checks)
    _report(capsys, 9, ok, f"clamp/backfill/current-day checks {checks}")


def test_criterion_10_end_to_end_determinism(capsys, tmp_path):
    """Two full pipeline runs on the bundled 10-country fixture are
    byte-identical."""
    from pathlib import Path

    fixture = str(Path(__file__).parent / "data" / "fixture_panel.csv")
    flags = ["--chains", "2", "--adapt", "100", "--burnin", "100",
             "--iters", "200", "--thin", "5", "--seed", "77"]
    outputs = []
    for run in ("one", "two"):
        out = tmp_path / run
        assert dispatch(["fit", "--input", fixture, "--today", "2020-05-19",
                         "--output-dir", str(out)] + flags) == 0
        assert dispatch(["forecast", "--draws", str(out / "draws"),
                         "--panel", str(out / "panel.csv"),
                         "--output-dir", str(out), "--seed", "7"]) == 0
        assert dispatch(["validate", "--input", fixture, "--today", "2020-05-19",
                         "--output-dir", str(out), "--horizon", "3"] + flags) == 0
        assert dispatch(["cluster", "--draws", str(out / "draws"),
                         "--output-dir", str(out), "--k", "4"]) == 0
        assert dispatch(["report", "--output-dir", str(out)]) == 0
        outputs.append({
            name: (out / name).read_bytes()
            for name in ("draws/params.csv", "forecast.csv", "metrics.csv",
                         "clusters.csv", "dendrogram.nwk", "report.html")
        })
    diffs = [n for n in outputs[0] if outputs[0][n] != outputs[1][n]]
    ok = not diffs
    _report(capsys, 10, ok, "byte-identical" if ok else f"differs: {diffs}")
