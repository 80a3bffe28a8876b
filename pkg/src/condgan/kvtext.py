"""Canonical key=value text blocks.

One ``key=value`` pair per line, keys sorted lexicographically on emission so
that equal dictionaries always serialize to identical bytes. Values are
scalars (int, float, bool, str) or flat lists of scalars joined by commas.
Floats are written with ``repr`` so they round-trip exactly; bools are
``true``/``false``. Blank lines and lines starting with ``#`` are ignored on
parsing. Newlines inside values are rejected.

This format backs run configuration files, checkpoint headers, likelihood
reports, and dataset metadata. Metrics streams reuse the pair syntax with
space-separated pairs on a single line per record.
"""

from __future__ import annotations

from .errors import DataFormatError


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        if "\n" in value:
            raise DataFormatError("kvtext values must not contain newlines")
        return value
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    raise DataFormatError(f"unsupported kvtext value type: {type(value).__name__}")


def dump(entries: dict) -> str:
    """Serialize a flat dict to canonical sorted key=value lines."""
    lines = []
    for key in sorted(entries):
        if "=" in key or "\n" in key:
            raise DataFormatError(f"invalid kvtext key: {key!r}")
        lines.append(f"{key}={format_value(entries[key])}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse(text: str) -> dict[str, str]:
    """Parse key=value lines into a dict of raw strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"kvtext line {lineno} has no '=': {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value
    return out


def format_record(entries: dict) -> str:
    """One-line record of space-separated pairs, insertion order kept."""
    return " ".join(f"{k}={format_value(v)}" for k, v in entries.items())


def parse_record(line: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for token in line.split():
        if "=" not in token:
            raise DataFormatError(f"bad record token: {token!r}")
        key, _, value = token.partition("=")
        out[key] = value
    return out


def get_int(kv: dict[str, str], key: str) -> int:
    try:
        return int(kv[key])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"missing or invalid int for {key!r}") from exc


def get_float(kv: dict[str, str], key: str) -> float:
    try:
        return float(kv[key])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"missing or invalid float for {key!r}") from exc


def get_str(kv: dict[str, str], key: str) -> str:
    try:
        return kv[key]
    except KeyError as exc:
        raise DataFormatError(f"missing key {key!r}") from exc


def get_bool(kv: dict[str, str], key: str) -> bool:
    value = get_str(kv, key)
    if value == "true":
        return True
    if value == "false":
        return False
    raise DataFormatError(f"invalid bool for {key!r}: {value!r}")


def get_ints(kv: dict[str, str], key: str) -> tuple[int, ...]:
    value = get_str(kv, key)
    if value == "":
        return ()
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise DataFormatError(f"invalid int list for {key!r}: {value!r}") from exc
