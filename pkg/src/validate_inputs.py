"""Validate resolved command settings before any work starts."""

from typing import List, Optional

from .chords import VOCAB_KINDS
from .errors import ConfigurationError


def validate_vocab(kind: str) -> None:
    """Check the vocabulary name."""
    if kind not in VOCAB_KINDS:
        raise ConfigurationError(f"Invalid vocabulary '{kind}'. Must be one of: {', '.join(VOCAB_KINDS)}")


def validate_split(fraction: float) -> None:
    """Check the validation fraction."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"val-split must be strictly between 0 and 1, got {fraction}")


def validate_required(settings: dict, keys: List[str]) -> None:
    """Path settings have no default; they must come from a flag or the config file."""
    missing = [key for key in keys if not settings.get(key)]
    if missing:
        flags = ", ".join("--" + key.replace("_", "-") for key in missing)
        raise ConfigurationError(f"missing required setting(s): {flags}")


def validate_model_flags(layers: int, heads: int, dim: int, kernel: int, dropout: float, conv_repeats: int) -> None:
    """Check model hyper-flags."""
    if layers < 1:
        raise ConfigurationError(f"--layers must be at least 1, got {layers}")
    if heads < 1:
        raise ConfigurationError(f"--heads must be at least 1, got {heads}")
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"--dim must be a positive even number, got {dim}")
    if dim % heads:
        raise ConfigurationError(f"--dim {dim} is not divisible by --heads {heads}")
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError(f"--kernel must be a positive odd number, got {kernel}")
    if not 0.0 <= dropout < 1.0:
        raise ConfigurationError(f"--dropout must be in [0, 1), got {dropout}")
    if conv_repeats < 0:
        raise ConfigurationError(f"--conv-repeats must be non-negative, got {conv_repeats}")


def parse_layer_selection(text: Optional[str], n_layers: int) -> Optional[List[int]]:
    """Parse ``--layers 1,3,5,8`` (1-based); empty means every layer."""
    if text is None or not str(text).strip():
        return None
    selected = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            layer = int(part)
        except ValueError:
            raise ConfigurationError(f"--layers entries must be integers, got '{part}'") from None
        if not 1 <= layer <= n_layers:
            raise ConfigurationError(f"--layers entry {layer} outside 1..{n_layers}")
        if layer not in selected:
            selected.append(layer)
    return selected or None


def validate_segment_index(index: int, n_segments: int) -> None:
    """Check that ``--segment`` names an existing window."""
    if not 0 <= index < n_segments:
        raise ConfigurationError(f"--segment {index} outside 0..{n_segments - 1}")
