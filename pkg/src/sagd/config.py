"""Flat ``key=value`` run configuration with typed defaults.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Values are converted to the type of the key's default. Tuples are
comma separated. Unknown keys are rejected.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text, 0)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


class RunConfig:
    """Resolved configuration for one subcommand."""

    def __init__(self, defaults: dict):
        self._defaults = dict(defaults)
        self._values = dict(defaults)

    def set(self, key, text):
        if key not in self._defaults:
            known = ", ".join(sorted(self._defaults))
            raise ConfigError(f"unknown config key {key!r} (known: {known})")
        self._values[key] = _convert(key, text, self._defaults[key])

    def update_from_text(self, text, source="<config>"):
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            self.set(key.strip(), value)

    def update_from_file(self, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        self.update_from_text(text, str(path))

    def apply_overrides(self, pairs):
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value)

    def __getitem__(self, key):
        return self._values[key]

    def as_dict(self):
        return dict(self._values)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self._values.items()))
