"""Date parsing and normalization shared across the engine.

Slash dates follow the US month-first convention used by the source
corpora; partial inputs (year only, month + year) normalize to an explicit
partial form (``2019-??-??`` / ``2019-02-??``) instead of inventing a day.
"""

from __future__ import annotations

import re
from datetime import date

_MONTHS = {
    "january": 1, "february": 2, "march": 3, "april": 4, "may": 5,
    "june": 6, "july": 7, "august": 8, "september": 9, "october": 10,
    "november": 11, "december": 12,
}
_MONTH_ABBREV = {name[:3]: num for name, num in _MONTHS.items()}
_MONTH_ABBREV["sept"] = 9

_ISO_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
_SLASH_RE = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$")
_MONTH_DAY_YEAR_RE = re.compile(r"^([A-Za-z]+)\.?\s+(\d{1,2}),?\s+(\d{4})$")
_DAY_MONTH_YEAR_RE = re.compile(r"^(\d{1,2})\s+([A-Za-z]+)\.?\s+(\d{4})$")
_YEAR_RE = re.compile(r"^(\d{4})$")
_MONTH_YEAR_RE = re.compile(r"^([A-Za-z]+)\.?\s+(\d{4})$")


class DateParseError(ValueError):
    """Raised for strings that match no recognized date format."""


def _month_number(token: str) -> int | None:
    low = token.lower()
    if low in _MONTHS:
        return _MONTHS[low]
    return _MONTH_ABBREV.get(low)


def _checked(year: int, month: int, day: int, raw: str) -> str:
    try:
        return date(year, month, day).isoformat()
    except ValueError as exc:
        raise DateParseError(f"invalid calendar date: {raw!r}") from exc


def normalize_date(raw: str) -> str:
    """Normalize a date string to ISO-8601 ``YYYY-MM-DD``.

    Accepts ISO dates, US slash dates (``MM/DD/YYYY``), and spelled-out
    month forms. Partial inputs return ``YYYY-??-??`` or ``YYYY-MM-??``.
    Raises :class:`DateParseError` for anything else.
    """
    text = raw.strip()
    if not text:
        raise DateParseError("empty date string")

    m = _ISO_RE.match(text)
    if m:
        return _checked(int(m.group(1)), int(m.group(2)), int(m.group(3)), raw)

    m = _SLASH_RE.match(text)
    if m:
        return _checked(int(m.group(3)), int(m.group(1)), int(m.group(2)), raw)

    m = _MONTH_DAY_YEAR_RE.match(text)
    if m:
        month = _month_number(m.group(1))
        if month is not None:
            return _checked(int(m.group(3)), month, int(m.group(2)), raw)

    m = _DAY_MONTH_YEAR_RE.match(text)
    if m:
        month = _month_number(m.group(2))
        if month is not None:
            return _checked(int(m.group(3)), month, int(m.group(1)), raw)

    m = _YEAR_RE.match(text)
    if m:
        return f"{int(m.group(1)):04d}-??-??"

    m = _MONTH_YEAR_RE.match(text)
    if m:
        month = _month_number(m.group(1))
        if month is not None:
            return f"{int(m.group(2)):04d}-{month:02d}-??"

    raise DateParseError(f"unrecognized date format: {raw!r}")


def parse_full_date(raw: str) -> date:
    """Parse *raw* into a calendar date; partial dates are rejected."""
    normalized = normalize_date(raw)
    if "?" in normalized:
        raise DateParseError(f"partial date not allowed here: {raw!r}")
    return date.fromisoformat(normalized)
