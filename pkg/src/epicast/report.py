"""Static HTML report: forecast tables, holdout metrics, dendrogram.

The report is a single self-contained page built from previously emitted
artifacts. Rendering is deterministic: identical inputs give byte-identical
output (no timestamps anywhere in the body).
"""

from __future__ import annotations

import html
from pathlib import Path

_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>Case forecast report</title>
<style>
body {{ font-family: sans-serif; margin: 2em; }}
table {{ border-collapse: collapse; margin: 1em 0; }}
th, td {{ border: 1px solid #999; padding: 0.3em 0.7em; text-align: right; }}
th {{ background: #eee; }}
td:first-child, th:first-child {{ text-align: left; }}
.absent {{ color: #888; font-style: italic; }}
ul.tree {{ list-style: none; }}
ul.tree li {{ border-left: 1px solid #999; padding-left: 0.8em; }}
</style>
</head>
<body>
<h1>Case forecast report</h1>
{forecast}
{metrics}
{cluster}
</body>
</html>
"""


def _forecast_section(forecast: dict | None) -> str:
    if forecast is None:
        return '<h2>Forecasts</h2>\n<p class="absent">No forecast artifact.</p>'
    rows = []
    for i, cid in enumerate(forecast["countries"]):
        for j, h in enumerate(forecast["horizons"]):
            rows.append(
                f"<tr><td>{html.escape(cid)}</td><td>{forecast['dates'][j]}</td>"
                f"<td>{h}</td><td>{forecast['median'][i][j]}</td>"
                f"<td>{forecast['lo95'][i][j]}</td><td>{forecast['hi95'][i][j]}</td></tr>"
            )
    return (
        "<h2>Forecasts</h2>\n<table>\n"
        "<tr><th>country</th><th>date</th><th>h</th>"
        "<th>median</th><th>lo95</th><th>hi95</th></tr>\n" + "\n".join(rows) + "\n</table>"
    )


def _metrics_section(metrics_rows: list[dict] | None) -> str:
    if metrics_rows is None:
        return '<h2>Holdout validation</h2>\n<p class="absent">No validation artifact.</p>'
    rows = [
        f"<tr><td>{r['horizon']}</td><td>{r['r']}</td>"
        f"<td>{r['accuracy']}</td><td>{r['ccc']}</td></tr>"
        for r in metrics_rows
    ]
    return (
        "<h2>Holdout validation</h2>\n<table>\n"
        "<tr><th>h</th><th>Pearson r</th><th>accuracy C_b</th><th>CCC</th></tr>\n"
        + "\n".join(rows)
        + "\n</table>"
    )


def _tree_html(node: dict) -> str:
    if "children" not in node:
        return f"<li>{html.escape(node['label'])}</li>"
    inner = "".join(_tree_html(c) for c in node["children"])
    return f'<li>height {node["height"]:.4g}<ul class="tree">{inner}</ul></li>'


def _cluster_section(tree: dict | None, assignments: list[tuple[str, int]] | None) -> str:
    if tree is None:
        return '<h2>Country clustering</h2>\n<p class="absent">No clustering artifact.</p>'
    parts = ["<h2>Country clustering</h2>"]
    if assignments:
        rows = [
            f"<tr><td>{html.escape(cid)}</td><td>{label}</td></tr>" for cid, label in assignments
        ]
        parts.append(
            "<table>\n<tr><th>country</th><th>cluster</th></tr>\n" + "\n".join(rows) + "\n</table>"
        )
    parts.append('<ul class="tree">' + _tree_html(tree) + "</ul>")
    return "\n".join(parts)


def emit_report(
    output_dir: str | Path,
    forecast: dict | None = None,
    metrics_rows: list[dict] | None = None,
    dendrogram: dict | None = None,
    cluster_assignments: list[tuple[str, int]] | None = None,
) -> Path:
    """Write report.html; at least one artifact must be present."""
    if forecast is None and metrics_rows is None and dendrogram is None:
        raise ValueError("no artifacts to report")
    page = _PAGE.format(
        forecast=_forecast_section(forecast),
        metrics=_metrics_section(metrics_rows),
        cluster=_cluster_section(dendrogram, cluster_assignments),
    )
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "report.html"
    path.write_text(page)
    return path
