"""Plain key=value config files and flag/file/default precedence."""

from __future__ import annotations

from .errors import ConfigError


def parse_config_file(path: str) -> dict[str, str]:
    """UTF-8 key=value lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(value: str, kind, key: str):
    if kind is bool:
        if value.lower() not in _BOOL_WORDS:
            raise ConfigError(f"config key {key!r}: expected boolean, got {value!r}")
        return _BOOL_WORDS[value.lower()]
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from exc


def resolve(flag_value, config: dict[str, str], key: str, default, kind=str):
    """Command-line flag > config-file value > built-in default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return _convert(config[key], kind, key)
    return default
