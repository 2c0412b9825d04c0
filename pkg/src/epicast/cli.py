"""Command-line entry point: fetch, fit, forecast, validate, cluster, report.

Configuration comes from an optional TOML file overridden by flags; every run
writes a manifest (config snapshot, seed, input hash, tool version) so results
can be traced back to their inputs. Exit codes: 0 success, 1 domain or data
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict
from datetime import date
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .cluster import cluster_labels_csv, cluster_latent_trajectories
from .forecast import forecast_panel
from .ingest import CasePanel, IngestError, clean_series, fetch_feed, parse_case_table
from .polybasis import build_orthogonal_basis
from .report import emit_report
from .sampler import InsufficientDataError, McmcConfig, PosteriorDraws, fit_mcmc
from .validate import holdout_evaluate

logger = logging.getLogger(__name__)

DEFAULT_FEED_URL = (
    "https://opendata.ecdc.europa.eu/covid19/casedistribution/csv"
)


@dataclass
class RunConfig:
    feed_url: str = DEFAULT_FEED_URL
    cache_dir: str = "cache"
    output_dir: str = "out"
    horizon: int = 7
    cluster_window: int = 60
    cluster_k: int = 10
    mcmc: McmcConfig = field(default_factory=McmcConfig)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.cluster_window < 2:
            raise ValueError("cluster_window must be >= 2")
        if self.cluster_k < 1:
            raise ValueError("cluster_k must be >= 1")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        mcmc = McmcConfig(**data.pop("mcmc", {}))
        cfg = RunConfig(mcmc=mcmc, **data)
    env_cache = os.environ.get("EPICAST_CACHE")
    if env_cache:
        cfg.cache_dir = env_cache
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(output_dir: Path, command: str, cfg: RunConfig, input_hash: str | None):
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": {**asdict(cfg), "mcmc": asdict(cfg.mcmc)},
        "seed": cfg.mcmc.seed,
        "input_sha256": input_hash,
        "version": __version__,
    }
    (output_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _load_panel(path: Path, today: date, panel_start: date | None = None) -> CasePanel:
    """Read either the cleaned-panel CSV or a raw feed CSV (sniffed by header)."""
    raw = path.read_bytes()
    header = raw.decode("utf-8-sig").splitlines()[0] if raw else ""
    names = {h.strip() for h in header.split(",")}
    if {"country_id", "date", "cases"} <= names:
        return CasePanel.from_csv(raw.decode("utf-8-sig"))
    records = parse_case_table(raw)
    return clean_series(records, today=today, panel_start=panel_start)


def _apply_mcmc_flags(cfg: RunConfig, args: argparse.Namespace) -> None:
    overrides = {}
    for flag, name in (
        ("chains", "n_chains"),
        ("adapt", "n_adapt"),
        ("burnin", "n_burnin"),
        ("iters", "n_iter"),
        ("thin", "thin"),
        ("seed", "seed"),
        ("degree", "degree"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg.mcmc = McmcConfig(**{**asdict(cfg.mcmc), **overrides})


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--output-dir", help="directory for outputs")


def _add_mcmc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int)
    p.add_argument("--adapt", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--degree", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epicast", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download the case feed into the cache")
    _add_common(p)
    p.add_argument("--url")
    p.add_argument("--cache-dir")
    p.add_argument("--offline", action="store_true")

    p = sub.add_parser("fit", help="fit the model by MCMC")
    _add_common(p)
    _add_mcmc_flags(p)
    p.add_argument("--input", required=True, help="raw feed CSV or cleaned panel CSV")
    p.add_argument("--today", type=date.fromisoformat, default=None,
                   help="current date for cleaning (default: system date)")

    p = sub.add_parser("forecast", help="posterior-predictive forecasts from saved draws")
    _add_common(p)
    p.add_argument("--draws", required=True, help="directory written by fit")
    p.add_argument("--panel", required=True, help="cleaned panel CSV the draws were fitted on")
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("validate", help="holdout validation per horizon")
    _add_common(p)
    _add_mcmc_flags(p)
    p.add_argument("--input", required=True, help="raw feed CSV or cleaned panel CSV")
    p.add_argument("--today", type=date.fromisoformat, default=None)
    p.add_argument("--horizon", type=int)
    p.add_argument("--reuse-draws", help="draws directory fitted on the truncated panel")

    p = sub.add_parser("cluster", help="DTW/Ward clustering of latent trajectories")
    _add_common(p)
    p.add_argument("--draws", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--k", type=int)

    p = sub.add_parser("report", help="emit the static HTML report")
    _add_common(p)

    return parser


# --- subcommand bodies -----------------------------------------------------------


def _cmd_fetch(args, cfg: RunConfig) -> int:
    url = args.url or cfg.feed_url
    cache = args.cache_dir or cfg.cache_dir
    payload = fetch_feed(url, cache, offline=args.offline)
    print(f"fetched {len(payload)} bytes into {cache}")
    return 0


def _cmd_fit(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir or cfg.output_dir)
    input_path = Path(args.input)
    today = args.today if args.today is not None else date.today()
    panel = _load_panel(input_path, today)
    draws = fit_mcmc(panel, cfg.mcmc)
    draws.save(out / "draws", manifest_extra={"panel_sha256": _sha256(input_path)})
    (out / "panel.csv").write_text(panel.to_csv())
    _write_manifest(out, "fit", cfg, _sha256(input_path))
    print(f"fit complete: {draws.n_chains} chains x {draws.n_draws} retained draws -> {out}")
    return 0


def _cmd_forecast(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir or cfg.output_dir)
    horizon = args.horizon or cfg.horizon
    panel = CasePanel.from_csv(Path(args.panel).read_text())
    draws = PosteriorDraws.load(args.draws)
    basis = build_orthogonal_basis(panel.t_count, draws.config.degree)
    table = forecast_panel(
        draws, panel, basis, horizon=horizon, seed=args.seed if args.seed is not None else 0
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "forecast.csv").write_text(table.to_csv())
    (out / "forecast.json").write_text(json.dumps(table.to_json_obj(), indent=2) + "\n")
    _write_manifest(out, "forecast", cfg, _sha256(Path(args.panel)))
    print(f"forecasts for {panel.n_countries} countries, horizon {horizon} -> {out}")
    return 0


def _cmd_validate(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir or cfg.output_dir)
    horizon = args.horizon or cfg.horizon
    input_path = Path(args.input)
    today = args.today if args.today is not None else date.today()
    panel = _load_panel(input_path, today)

    if args.reuse_draws:
        from .validate import HoldoutResult, HorizonMetrics, ccc_components

        draws = PosteriorDraws.load(args.reuse_draws)
        t_fit = panel.t_count - horizon
        if len(draws.dates) != t_fit:
            raise InsufficientDataError(
                f"draws were fitted on {len(draws.dates)} days; expected {t_fit}"
            )
        truncated = CasePanel(panel.countries, panel.dates[:t_fit], panel.counts[:, :t_fit])
        basis = build_orthogonal_basis(t_fit, draws.config.degree)
        table = forecast_panel(draws, truncated, basis, horizon=horizon)
        observed = panel.counts[:, t_fit:].astype(float)
        forecasts = table.median.astype(float)
        metrics = []
        for h in range(horizon):
            m = ccc_components(forecasts[:, h], observed[:, h])
            metrics.append(HorizonMetrics(h + 1, m.pearson, m.accuracy, m.ccc))
        result = HoldoutResult(metrics, panel.countries, forecasts, observed)
    else:
        result = holdout_evaluate(panel, cfg.mcmc, horizon=horizon)

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics_csv())
    (out / "pairs.csv").write_text(result.pairs_csv())
    _write_manifest(out, "validate", cfg, _sha256(input_path))
    print(f"validation metrics for horizons 1..{horizon} -> {out}")
    return 0


def _cmd_cluster(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir or cfg.output_dir)
    window = args.window or cfg.cluster_window
    k = args.k or cfg.cluster_k
    draws = PosteriorDraws.load(args.draws)
    gamma_mean = draws.gamma_posterior_mean()
    _, tree, assignments = cluster_latent_trajectories(
        gamma_mean, draws.countries, window=window, k=k
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "clusters.csv").write_text(cluster_labels_csv(draws.countries, assignments))
    (out / "dendrogram.json").write_text(json.dumps(tree.to_json_obj(), indent=2) + "\n")
    (out / "dendrogram.nwk").write_text(tree.to_newick() + "\n")
    _write_manifest(out, "cluster", cfg, None)
    print(f"{len(set(assignments))} clusters over {len(draws.countries)} countries -> {out}")
    return 0


def _cmd_report(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir or cfg.output_dir)
    forecast = None
    metrics_rows = None
    dendrogram = None
    assignments = None
    if (out / "forecast.json").exists():
        forecast = json.loads((out / "forecast.json").read_text())
    if (out / "metrics.csv").exists():
        metrics_rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    if (out / "dendrogram.json").exists():
        dendrogram = json.loads((out / "dendrogram.json").read_text())
    if (out / "clusters.csv").exists():
        rows = csv.DictReader(io.StringIO((out / "clusters.csv").read_text()))
        assignments = [(r["country_id"], int(r["cluster"])) for r in rows]
    path = emit_report(
        out,
        forecast=forecast,
        metrics_rows=metrics_rows,
        dendrogram=dendrogram,
        cluster_assignments=assignments,
    )
    print(f"report written to {path}")
    return 0


_COMMANDS = {
    "fetch": _cmd_fetch,
    "fit": _cmd_fit,
    "forecast": _cmd_forecast,
    "validate": _cmd_validate,
    "cluster": _cmd_cluster,
    "report": _cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        _apply_mcmc_flags(cfg, args)
        return _COMMANDS[args.command](args, cfg)
    except (IngestError, InsufficientDataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
