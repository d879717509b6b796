"""Resolve run settings for the btc-chord commands.

Precedence, lowest first: built-in defaults, a ``--config`` file of
``key=value`` lines, explicit command-line flags. The seed comes from
``--seed``, then the ``BTC_SEED`` environment variable, then 0.
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, TextIO, Union

from .errors import ConfigurationError

SEED_ENV = "BTC_SEED"


def normalize_key(key: str) -> str:
    """Flag spelling and attribute spelling name the same setting."""
    return key.strip().lstrip("-").replace("-", "_")


def _coerce(key: str, raw: str, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{where}: '{key}' must be true or false, got '{raw}'")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: '{key}' must be an integer, got '{raw}'") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{where}: '{key}' must be a number, got '{raw}'") from None
    return raw


def parse_config_text(text: str, defaults: Mapping[str, Any], source: str = "<config>") -> Dict[str, Any]:
    """Parse ``key=value`` lines against the known settings in ``defaults``.

    Blank lines and ``#`` comments are ignored. Values take the type of the
    matching default; settings whose default is None stay strings.
    """
    values: Dict[str, Any] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{line_number}: expected key=value, got '{stripped}'")
        key = normalize_key(key)
        if key not in defaults:
            raise ConfigurationError(f"{source}:{line_number}: unknown setting '{key}'")
        values[key] = _coerce(key, raw.strip(), defaults[key], f"{source}:{line_number}")
    return values


def load_config_file(path: Union[str, Path], defaults: Mapping[str, Any]) -> Dict[str, Any]:
    """Read and type-check a ``key=value`` config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e.strerror}") from None
    return parse_config_text(text, defaults, str(path))


def resolve_settings(
    defaults: Mapping[str, Any],
    file_values: Optional[Mapping[str, Any]] = None,
    flag_values: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Layer file values over defaults and explicit flags over both.

    Flags left at None count as not given.
    """
    settings = dict(defaults)
    settings.update(file_values or {})
    for key, value in (flag_values or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def resolve_seed(flag_seed: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> int:
    """Seed from the flag, then ``BTC_SEED``, then 0."""
    environ = os.environ if environ is None else environ
    if flag_seed is not None:
        raw, where = str(flag_seed), "--seed"
    elif environ.get(SEED_ENV, "").strip():
        raw, where = environ[SEED_ENV].strip(), SEED_ENV
    else:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{where} must be an integer, got '{raw}'") from None


def format_settings(settings: Mapping[str, Any]) -> List[str]:
    return [f"{key}={settings[key]}" for key in sorted(settings)]


def print_settings(command: str, settings: Mapping[str, Any], seed: int, stream: Optional[TextIO] = None) -> None:
    """Print the resolved settings and seed to stderr."""
    stream = stream or sys.stderr
    print(f"🎼 {command}: resolved settings", file=stream)
    for line in format_settings(settings):
        print(f"  {line}", file=stream)
    print(f"  seed={seed}", file=stream)
