"""Genre tagging against an HTTP track-metadata search service.

The endpoint is configured by a base URL, a query template and a dotted path
into the JSON response, e.g. ``results.0.primaryGenreName`` for an
iTunes-style search API.
"""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .corpus import RawRecord

logger = logging.getLogger(__name__)


@dataclass
class EndpointConfig:
    base_url: str
    query_template: str = "term={artist}+{title}&entity=song&limit=1"
    genre_field: str = "results.0.primaryGenreName"
    rate_limit: float = 10.0  # requests per second
    attempts: int = 3
    backoff: float = 0.5  # seconds, doubled after each failed attempt
    timeout: float = 10.0


@dataclass
class FetchSummary:
    tagged: int = 0
    no_match: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)


def extract_field(obj, path: str):
    """Follow a dotted path of keys / list indices; None when absent."""
    for part in path.split("."):
        if isinstance(obj, list):
            try:
                obj = obj[int(part)]
            except (ValueError, IndexError):
                return None
        elif isinstance(obj, dict):
            if part not in obj:
                return None
            obj = obj[part]
        else:
            return None
    return obj


def build_url(cfg: EndpointConfig, record: RawRecord) -> str:
    query = cfg.query_template.format(artist=urllib.parse.quote_plus(record.artist),
                                      title=urllib.parse.quote_plus(record.title))
    sep = "&" if "?" in cfg.base_url else "?"
    return f"{cfg.base_url}{sep}{query}"


class _NoMatch(Exception):
    pass


def _get_json(url: str, timeout: float):
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise _NoMatch() from None
        raise


def fetch_genre_tags(records: Sequence[RawRecord], cfg: EndpointConfig,
                     sleep: Callable[[float], None] = time.sleep
                     ) -> tuple[list[RawRecord], FetchSummary]:
    """Fill ``genre`` for each record by querying the endpoint.

    Each request occupies a slot of ``1 / rate_limit`` seconds. Records with
    no match (404 or missing field) are dropped; transient failures are
    retried with exponential backoff and skipped after ``attempts`` tries.
    """
    interval = 1.0 / cfg.rate_limit
    summary = FetchSummary()
    out: list[RawRecord] = []
    for rec in records:
        url = build_url(cfg, rec)
        genre = None
        delay = cfg.backoff
        for attempt in range(1, cfg.attempts + 1):
            started = time.monotonic()
            try:
                genre = extract_field(_get_json(url, cfg.timeout), cfg.genre_field)
                error = None
            except _NoMatch:
                error = None
            except (urllib.error.URLError, OSError, ValueError) as exc:
                error = exc
            remaining = interval - (time.monotonic() - started)
            if remaining > 0:
                sleep(remaining)
            if error is None:
                break
            logger.debug("attempt %d for %s failed: %s", attempt, rec.id, error)
            if attempt < cfg.attempts:
                sleep(delay)
                delay *= 2
        else:
            summary.failed += 1
            summary.failures.append(rec.id)
            continue
        if genre is None or not str(genre).strip():
            summary.no_match += 1
            continue
        summary.tagged += 1
        out.append(replace(rec, genre=str(genre)))
    logger.info("genre fetch: %d tagged, %d without match, %d failed",
                summary.tagged, summary.no_match, summary.failed)
    return out, summary
