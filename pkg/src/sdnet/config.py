"""Plain-text key=value experiment configuration.

Keys use dotted section prefixes (``train.lr=0.001``); ``#`` starts a
comment.  Values stay strings until a typed getter pulls them out.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigurationError


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def _missing(key: str):
    raise ConfigurationError(f"missing required config key {key!r}")


class Config:
    """Typed access over a flat key=value mapping with optional overrides."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(values or {})

    def update(self, overrides: dict[str, str]) -> "Config":
        self.values.update({k: str(v) for k, v in overrides.items() if v is not None})
        return self

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        if key in self.values:
            return self.values[key]
        if default is None:
            _missing(key)
        return default

    def get_int(self, key: str, default: int | None = None) -> int:
        if key not in self.values:
            if default is None:
                _missing(key)
            return default
        try:
            return int(self.values[key])
        except ValueError as e:
            raise ConfigurationError(f"config key {key}={self.values[key]!r} is not an integer") from e

    def get_float(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                _missing(key)
            return default
        try:
            return float(self.values[key])
        except ValueError as e:
            raise ConfigurationError(f"config key {key}={self.values[key]!r} is not a number") from e

    def get_bool(self, key: str, default: bool | None = None) -> bool:
        if key not in self.values:
            if default is None:
                _missing(key)
            return default
        v = self.values[key].lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"config key {key}={self.values[key]!r} is not a boolean")

    def get_floats(self, key: str, default: tuple[float, ...] | None = None) -> tuple[float, ...]:
        if key not in self.values:
            if default is None:
                _missing(key)
            return default
        raw = self.values[key]
        try:
            return tuple(float(p) for p in raw.split(",") if p.strip())
        except ValueError as e:
            raise ConfigurationError(f"config key {key}={raw!r} is not a comma list of numbers") from e

    def get_ints(self, key: str, default: tuple[int, ...] | None = None) -> tuple[int, ...]:
        if key not in self.values:
            if default is None:
                _missing(key)
            return default
        raw = self.values[key]
        try:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        except ValueError as e:
            raise ConfigurationError(f"config key {key}={raw!r} is not a comma list of integers") from e
