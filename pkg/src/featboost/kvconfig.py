"""Tiny key=value config file reader used by scene and training configs."""

from __future__ import annotations

from .errors import ConfigError


def parse_kv_text(text):
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def take(fields, key, convert, default=None, required=False):
    """Pop `key` from a parsed dict, converting it; errors carry the key name."""
    if key not in fields:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default
    raw = fields.pop(key)
    try:
        return convert(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def reject_unknown(fields, context):
    if fields:
        names = ", ".join(sorted(fields))
        raise ConfigError(f"unknown {context} keys: {names}")
