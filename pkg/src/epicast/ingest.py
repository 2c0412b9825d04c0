"""Acquisition, parsing, and cleaning of daily case tables into rectangular panels."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import requests

logger = logging.getLogger(__name__)

DEFAULT_COLUMN_MAP = {
    "date": "dateRep",
    "cases": "cases",
    "country": "countriesAndTerritories",
    "geo_id": "geoId",
}
DEFAULT_DATE_FORMAT = "%d/%m/%Y"


class IngestError(Exception):
    """Base class for ingestion failures."""


class SchemaError(IngestError):
    """A mapped column is missing from the CSV header."""


class RowError(IngestError):
    """A data row could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyPanelError(IngestError):
    """Cleaning removed every record."""


class FetchError(IngestError):
    """The feed could not be retrieved and no usable cache exists."""


@dataclass(frozen=True)
class RawCaseRecord:
    """One row of the raw feed, before any cleaning."""

    report_date: date
    cases: int  # may be negative in the raw feed
    country_name: str
    country_id: str

    def __post_init__(self):
        if not self.country_name:
            raise ValueError("country_name must be non-empty")


@dataclass(frozen=True)
class CasePanel:
    """Rectangular N-country x T-day table of non-negative daily counts.

    The date axis is contiguous (consecutive calendar days, no gaps) and
    ``counts[i, t]`` is the count for ``countries[i]`` on ``dates[t]``.
    """

    countries: tuple[str, ...]
    dates: tuple[date, ...]
    counts: np.ndarray  # N x T, int64
    n_clamped: int = 0  # negative raw cells replaced by zero

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        n, t = counts.shape
        if n != len(self.countries) or t != len(self.dates):
            raise ValueError("counts shape does not match axes")
        if n < 1 or t < 2:
            raise ValueError("panel needs N >= 1 countries and T >= 2 days")
        if counts.min() < 0:
            raise ValueError("panel counts must be non-negative")
        expected = [self.dates[0] + timedelta(days=k) for k in range(t)]
        if list(self.dates) != expected:
            raise ValueError("panel dates must be consecutive calendar days")
        counts.setflags(write=False)

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    @property
    def t_count(self) -> int:
        return len(self.dates)

    def to_csv(self) -> str:
        """Serialize as ``country_id,date,cases`` rows, dates ISO-8601."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["country_id", "date", "cases"])
        for i, cid in enumerate(self.countries):
            for t, d in enumerate(self.dates):
                writer.writerow([cid, d.isoformat(), int(self.counts[i, t])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CasePanel":
        """Parse the ``country_id,date,cases`` serialization back into a panel."""
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or set(reader.fieldnames) < {"country_id", "date", "cases"}:
            raise SchemaError("panel CSV needs columns country_id,date,cases")
        cells: dict[tuple[str, date], int] = {}
        countries: list[str] = []
        for row in reader:
            cid = row["country_id"]
            if cid not in countries:
                countries.append(cid)
            cells[(cid, date.fromisoformat(row["date"]))] = int(row["cases"])
        if not cells:
            raise EmptyPanelError("panel CSV has no data rows")
        all_dates = sorted({d for _, d in cells})
        start, end = all_dates[0], all_dates[-1]
        t_count = (end - start).days + 1
        dates = tuple(start + timedelta(days=k) for k in range(t_count))
        counts = np.zeros((len(countries), t_count), dtype=np.int64)
        for (cid, d), v in cells.items():
            counts[countries.index(cid), (d - start).days] = v
        return cls(tuple(countries), dates, counts)


def parse_case_table(
    raw: bytes,
    column_map: dict[str, str] | None = None,
    date_format: str = DEFAULT_DATE_FORMAT,
) -> list[RawCaseRecord]:
    """Parse raw CSV bytes into records, one per data row in file order.

    ``column_map`` names the date, cases, and country columns; defaults follow
    the ECDC download. Raises :class:`SchemaError` for a missing mapped column
    and :class:`RowError` (with the 1-based file line) for a bad date or a
    non-integer case count.
    """
    cmap = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        cmap.update(column_map)
    text = raw.decode("utf-8-sig")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for key in ("date", "cases", "country"):
        if cmap[key] not in header:
            raise SchemaError(cmap[key])
    has_geo = cmap["geo_id"] in header

    records = []
    for lineno, row in enumerate(reader, start=2):
        raw_date = (row[cmap["date"]] or "").strip()
        try:
            parsed = datetime.strptime(raw_date, date_format).date()
        except ValueError:
            raise RowError(f"unparseable date {raw_date!r}", lineno) from None
        raw_cases = (row[cmap["cases"]] or "").strip()
        try:
            cases = int(raw_cases)
        except ValueError:
            raise RowError(f"non-integer cases {raw_cases!r}", lineno) from None
        name = (row[cmap["country"]] or "").strip()
        if not name:
            raise RowError("empty country name", lineno)
        # Key on geo code when present; renamed territories then collapse safely.
        geo = (row[cmap["geo_id"]] or "").strip() if has_geo else ""
        records.append(RawCaseRecord(parsed, cases, name, geo or name))
    return records


def clean_series(
    records: list[RawCaseRecord],
    today: date,
    panel_start: date | None = None,
) -> CasePanel:
    """Apply the cleaning rules and assemble a rectangular panel.

    Rules: records dated ``today`` are dropped (the feed may still revise
    them); negative counts are clamped to zero; each country's series is
    zero-filled back to the panel start and across interior gaps. ``today``
    must be passed in by the caller, never read from a clock here.
    """
    if not records:
        raise EmptyPanelError("no records supplied")
    kept = [r for r in records if r.report_date != today]
    if not kept:
        raise EmptyPanelError("all records are dated today")

    # Last occurrence wins for duplicate (country, date) rows.
    cells: dict[tuple[str, date], int] = {}
    countries: list[str] = []
    n_clamped = 0
    for r in kept:
        key = (r.country_id, r.report_date)
        if key in cells:
            logger.warning("duplicate row for %s on %s; keeping the last", *key)
        elif r.country_id not in countries:
            countries.append(r.country_id)
        value = r.cases
        if value < 0:
            value = 0
            n_clamped += 1
        cells[key] = value

    start = panel_start if panel_start is not None else min(d for _, d in cells)
    end = max(d for _, d in cells)
    t_count = (end - start).days + 1
    if t_count < 2:
        raise EmptyPanelError("cleaned records span fewer than two days")
    dates = tuple(start + timedelta(days=k) for k in range(t_count))
    counts = np.zeros((len(countries), t_count), dtype=np.int64)
    for (cid, d), v in cells.items():
        offset = (d - start).days
        if offset < 0:
            continue  # records before a configured panel start are ignored
        counts[countries.index(cid), offset] = v
    return CasePanel(tuple(countries), dates, counts, n_clamped=n_clamped)


def fetch_feed(
    url: str,
    cache_dir: str | Path,
    offline: bool = False,
    timeout: float = 60.0,
) -> bytes:
    """Fetch the feed, caching the raw payload next to a retrieval timestamp.

    In offline mode (or on network failure) a warm cache is served with a
    staleness warning; with no cache the failure surfaces as
    :class:`FetchError`.
    """
    cache_dir = Path(cache_dir)
    cache_file = cache_dir / "feed.csv"
    meta_file = cache_dir / "feed.meta"

    def read_cache(reason: str) -> bytes:
        if not cache_file.exists():
            raise FetchError(f"{reason} and no cached feed at {cache_file}")
        meta = {}
        if meta_file.exists():
            meta = json.loads(meta_file.read_text())
        logger.warning(
            "serving cached feed (%s); retrieved %s", reason, meta.get("retrieved", "unknown")
        )
        return cache_file.read_bytes()

    if offline:
        return read_cache("offline mode")
    try:
        resp = requests.get(url, timeout=timeout)
    except requests.RequestException as exc:
        return read_cache(f"network failure: {exc}")
    if resp.status_code >= 400:
        raise FetchError(f"HTTP {resp.status_code} from {url}")
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_file.write_bytes(resp.content)
    meta_file.write_text(
        json.dumps({"url": url, "retrieved": datetime.now(timezone.utc).isoformat()}) + "\n"
    )
    return resp.content
