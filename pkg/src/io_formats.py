"""Persistent formats: .lab annotations, BTCF features, normalisation stats,
BTCW checkpoints, attention dumps with graymap renderings, and dataset
manifests.

Binary formats are little-endian with a version field. Every writer goes
through a temp file in the target directory followed by an atomic rename,
and every reader parses into locals and raises a typed error on bad input.
"""

import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .btc_net import DIRECTION_CODES, DIRECTIONS, AttentionMapSet, BtcConfig, BtcModel, init_params
from .chords import VOCAB_KINDS, AnnotationTrack, ChordInterval, format_chord, make_vocabulary, parse_chord
from .errors import (
    BadMagicError,
    BtcError,
    ConfigMismatchError,
    DataError,
    DuplicateTensorError,
    FormatError,
    LabFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .features import FeatureMatrix, NormStats

PathLike = Union[str, Path]

BTCF_MAGIC = b"BTCF"
BTCF_VERSION = 1
_BTCF_HEADER = struct.Struct("<4sIIIdI")

BTCW_MAGIC = b"BTCW"
BTCW_VERSION = 1

LAB_DECIMALS = 6
COMBINED_CODE = "fb"


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a sibling temp file and os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _read_text(path: PathLike) -> str:
    try:
        return _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not valid UTF-8 ({e})") from None


class _Cursor:
    """Sequential little-endian reader that raises on truncation."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedFileError(
                f"{self.source}: truncated at byte {self.offset}, needed {n} more of {len(self.data)}"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def remaining(self) -> int:
        return len(self.data) - self.offset


def _check_magic(data: bytes, magic: bytes, source: str) -> None:
    if data[:len(magic)] != magic:
        raise BadMagicError(f"{source}: bad magic {data[:len(magic)]!r}, expected {magic!r}")


# ---------------------------------------------------------------- .lab files


def parse_lab_text(text: str, source: str = "<lab>") -> AnnotationTrack:
    """Parse ``start end chord`` lines; blank lines and ``#`` comments are skipped."""
    intervals: List[ChordInterval] = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 3:
            raise LabFormatError(f"{source}:{line_number}: expected 'start end chord', got '{stripped}'")
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError:
            raise LabFormatError(f"{source}:{line_number}: times must be numbers, got '{stripped}'") from None
        if not start < end:
            raise LabFormatError(f"{source}:{line_number}: start {start} is not before end {end}")
        try:
            label = parse_chord(parts[2])
        except BtcError as e:
            raise LabFormatError(f"{source}:{line_number}: {e}") from None
        if intervals and start < intervals[-1].end:
            raise LabFormatError(f"{source}:{line_number}: interval overlaps the previous line")
        intervals.append(ChordInterval(start, end, label))
    return AnnotationTrack(intervals)


def parse_lab(path: PathLike) -> AnnotationTrack:
    """Read a ``.lab`` file into a validated track."""
    return parse_lab_text(_read_text(path), str(path))


def format_lab(track: AnnotationTrack) -> str:
    """One ``start end chord`` line per interval."""
    track.validate()
    return "".join(
        f"{i.start:.{LAB_DECIMALS}f} {i.end:.{LAB_DECIMALS}f} {format_chord(i.label)}\n" for i in track.intervals
    )


def write_lab(track: AnnotationTrack, path: PathLike) -> None:
    """Write a track as a ``.lab`` file."""
    atomic_write(path, format_lab(track).encode("utf-8"))


# ---------------------------------------------------------------- BTCF features


def encode_btcf(S: FeatureMatrix) -> bytes:
    """Header followed by little-endian float32 frames."""
    n_frames, n_bins = S.frames.shape
    header = _BTCF_HEADER.pack(BTCF_MAGIC, BTCF_VERSION, n_frames, n_bins, float(S.sample_rate), int(S.hop))
    return header + S.frames.astype("<f4").tobytes()


def write_btcf(S: FeatureMatrix, path: PathLike) -> None:
    """Write features atomically."""
    atomic_write(path, encode_btcf(S))


def decode_btcf(data: bytes, source: str = "<btcf>", expected_bins: Optional[int] = None) -> FeatureMatrix:
    """Parse BTCF bytes, rejecting bad headers, short payloads and trailing data."""
    _check_magic(data, BTCF_MAGIC, source)
    cursor = _Cursor(data, source)
    _, version, n_frames, n_bins, sample_rate, hop = cursor.unpack(_BTCF_HEADER.format[1:])
    if version != BTCF_VERSION:
        raise UnsupportedVersionError(f"{source}: BTCF version {version} is not supported")
    if expected_bins is not None and n_bins != expected_bins:
        raise ConfigMismatchError(f"{source}: features have {n_bins} bins, model expects {expected_bins}")
    payload = cursor.take(n_frames * n_bins * 4)
    if cursor.remaining():
        raise FormatError(f"{source}: {cursor.remaining()} trailing bytes after the BTCF payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_bins).astype(np.float32)
    try:
        return FeatureMatrix(frames, sample_rate, hop)
    except DataError as e:
        raise FormatError(f"{source}: {e}") from None


def read_btcf(path: PathLike, expected_bins: Optional[int] = None) -> FeatureMatrix:
    """Read a ``.btcf`` file."""
    return decode_btcf(_read_bytes(path), str(path), expected_bins)


# ---------------------------------------------------------------- norm stats


def write_stats(stats: NormStats, path: PathLike) -> None:
    """Write normalisation statistics as ``key=value`` lines."""
    atomic_write(path, f"mean={stats.mean!r}\nvariance={stats.variance!r}\n".encode("utf-8"))


def _parse_stats(values: Dict[str, str], source: str) -> NormStats:
    try:
        return NormStats(mean=float(values["mean"]), variance=float(values["variance"]))
    except KeyError as e:
        raise FormatError(f"{source}: missing normalisation entry {e}") from None
    except (ValueError, DataError) as e:
        raise FormatError(f"{source}: bad normalisation statistics ({e})") from None


def _key_values(text: str, source: str) -> List[Tuple[str, str]]:
    pairs = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}:{line_number}: expected key=value, got '{line}'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_stats(path: PathLike) -> NormStats:
    """Read statistics written by ``write_stats``."""
    return _parse_stats(dict(_key_values(_read_text(path), str(path))), str(path))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Everything inference needs: model config, vocabulary, stats and weights."""

    config: BtcConfig
    vocab: str
    stats: NormStats
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> BtcModel:
        return BtcModel(self.config, self.params)


def _checkpoint_config_text(config: BtcConfig, vocab: str, stats: NormStats) -> str:
    values = config.to_dict()
    values["vocab"] = vocab
    values["norm_mean"] = repr(stats.mean)
    values["norm_variance"] = repr(stats.variance)
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))


def encode_checkpoint(model: BtcModel, vocab: str, stats: NormStats) -> bytes:
    """Config text followed by named float32 tensors in sorted order."""
    config_bytes = _checkpoint_config_text(model.config, vocab, stats).encode("utf-8")
    chunks = [BTCW_MAGIC, struct.pack("<II", BTCW_VERSION, len(config_bytes)), config_bytes]
    names = sorted(model.params)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        data = model.params[name].data
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f4").tobytes())
    return b"".join(chunks)


def write_checkpoint(model: BtcModel, vocab: str, stats: NormStats, path: PathLike) -> None:
    """Write a checkpoint atomically."""
    atomic_write(path, encode_checkpoint(model, vocab, stats))


def decode_checkpoint(data: bytes, source: str = "<checkpoint>") -> Checkpoint:
    """Parse BTCW bytes and check every tensor against the config."""
    _check_magic(data, BTCW_MAGIC, source)
    cursor = _Cursor(data, source)
    cursor.take(len(BTCW_MAGIC))
    (version,) = cursor.unpack("I")
    if version != BTCW_VERSION:
        raise UnsupportedVersionError(f"{source}: BTCW version {version} is not supported")
    (config_len,) = cursor.unpack("I")
    try:
        config_text = cursor.take(config_len).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{source}: checkpoint config is not valid UTF-8") from None
    values = dict(_key_values(config_text, source))

    vocab = values.pop("vocab", None)
    if vocab not in VOCAB_KINDS:
        raise FormatError(f"{source}: checkpoint vocabulary '{vocab}' is not one of {', '.join(VOCAB_KINDS)}")
    stats = _parse_stats(
        {"mean": values.pop("norm_mean", ""), "variance": values.pop("norm_variance", "")}, source
    )
    try:
        config = BtcConfig.from_dict(values)
    except (ValueError, TypeError) as e:
        raise FormatError(f"{source}: bad model config ({e})") from None
    if config.vocab_size != len(make_vocabulary(vocab)):
        raise ConfigMismatchError(
            f"{source}: model has {config.vocab_size} outputs but the {vocab} vocabulary has "
            f"{len(make_vocabulary(vocab))} labels"
        )

    (n_tensors,) = cursor.unpack("I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = cursor.unpack("H")
        try:
            name = cursor.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor name is not valid UTF-8") from None
        if name in params:
            raise DuplicateTensorError(f"{source}: duplicate tensor '{name}'")
        (ndim,) = cursor.unpack("B")
        shape = cursor.unpack(f"{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(cursor.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if cursor.remaining():
        raise FormatError(f"{source}: {cursor.remaining()} trailing bytes after the last tensor")

    expected = {name: value.shape for name, value in init_params(config, np.random.default_rng(0)).items()}
    actual = {name: value.shape for name, value in params.items()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        wrong = sorted(n for n in set(expected) & set(actual) if expected[n] != actual[n])
        raise FormatError(
            f"{source}: tensors do not match the config (missing {missing[:3]}, unexpected {extra[:3]}, "
            f"wrong shape {wrong[:3]})"
        )
    return Checkpoint(config, vocab, stats, params)


def read_checkpoint(path: PathLike) -> Checkpoint:
    """Read a ``.btcw`` checkpoint."""
    return decode_checkpoint(_read_bytes(path), str(path))


# ---------------------------------------------------------------- attention dumps

_DUMP_HEADER = re.compile(r"^# layer=(\d+) dir=(f|b|fb) head=(\d+) T=(\d+)$")


def attention_dump_name(layer: int, code: str, head: int) -> str:
    """File stem for one layer, direction and head."""
    return f"layer{layer:02d}_{code}_head{head}"


def format_attention(matrix: np.ndarray, layer: int, code: str, head: int) -> str:
    """Header line plus T rows of T floats; layer and head are 1-based."""
    T = matrix.shape[0]
    rows = [" ".join(f"{x:.9g}" for x in row) for row in np.asarray(matrix, dtype=np.float64)]
    return f"# layer={layer} dir={code} head={head} T={T}\n" + "\n".join(rows) + "\n"


def parse_attention(text: str, source: str = "<attention>") -> Tuple[Dict[str, object], np.ndarray]:
    """Header fields and the T x T matrix of one dump."""
    lines = text.splitlines()
    match = _DUMP_HEADER.match(lines[0].strip()) if lines else None
    if not match:
        raise FormatError(f"{source}: missing attention dump header")
    layer, code, head, T = int(match.group(1)), match.group(2), int(match.group(3)), int(match.group(4))
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != T:
        raise FormatError(f"{source}: expected {T} rows, found {len(body)}")
    try:
        matrix = np.array([[float(x) for x in line.split()] for line in body], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{source}: bad attention value ({e})") from None
    if matrix.shape != (T, T):
        raise FormatError(f"{source}: expected a {T}x{T} matrix, got rows of uneven length")
    return {"layer": layer, "dir": code, "head": head, "T": T}, matrix


def read_attention(path: PathLike) -> Tuple[Dict[str, object], np.ndarray]:
    """Read one attention dump written by ``write_attention``."""
    return parse_attention(_read_text(path), str(path))


def encode_pgm(matrix: np.ndarray) -> bytes:
    """8-bit binary graymap with pixel = round(255 * p)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    height, width = matrix.shape
    pixels = np.clip(np.rint(255.0 * matrix), 0, 255).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(matrix: np.ndarray, path: PathLike) -> None:
    atomic_write(path, encode_pgm(matrix))


def write_attention(
    maps: AttentionMapSet,
    out_dir: PathLike,
    layers: Optional[Sequence[int]] = None,
    pgm: bool = False,
    combined: bool = False,
) -> List[Path]:
    """Write one dump per selected layer (1-based), direction and head.

    ``combined`` adds the forward/backward composite per layer and head;
    ``pgm`` renders each dump as a graymap next to it.
    """
    out_dir = Path(out_dir)
    selected = list(range(1, maps.n_layers + 1)) if layers is None else list(layers)
    for layer in selected:
        if not 1 <= layer <= maps.n_layers:
            raise DataError(f"layer {layer} outside 1..{maps.n_layers}")

    written: List[Path] = []

    def emit(matrix: np.ndarray, layer: int, code: str, head: int) -> None:
        text = format_attention(matrix, layer, code, head)
        stem = out_dir / attention_dump_name(layer, code, head)
        atomic_write(stem.with_suffix(".txt"), text.encode("ascii"))
        written.append(stem.with_suffix(".txt"))
        if pgm:
            _, parsed = parse_attention(text, str(stem))
            write_pgm(parsed, stem.with_suffix(".pgm"))
            written.append(stem.with_suffix(".pgm"))

    for layer in selected:
        for direction in DIRECTIONS:
            for head in range(maps.n_heads):
                emit(maps.get(layer - 1, direction, head), layer, DIRECTION_CODES[direction], head + 1)
        if combined:
            for head in range(maps.n_heads):
                emit(maps.combined(layer - 1, head), layer, COMBINED_CODE, head + 1)
    return written


# ---------------------------------------------------------------- dataset manifests


@dataclass
class Manifest:
    """Synthetic dataset description: generator settings plus song ids."""

    seed: int
    vocab: str
    noise: float
    frames: int
    songs: List[str] = field(default_factory=list)


def format_manifest(manifest: Manifest) -> str:
    """Dataset settings then one ``song=`` line per song."""
    lines = [
        f"seed={manifest.seed}",
        f"vocab={manifest.vocab}",
        f"noise={manifest.noise!r}",
        f"frames={manifest.frames}",
        f"songs={len(manifest.songs)}",
    ]
    lines.extend(f"song={song_id}" for song_id in manifest.songs)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path: PathLike) -> None:
    atomic_write(path, format_manifest(manifest).encode("utf-8"))


def read_manifest(path: PathLike) -> Manifest:
    """Read a manifest and check its song count."""
    source = str(path)
    pairs = _key_values(_read_text(path), source)
    values = {key: value for key, value in pairs if key != "song"}
    songs = [value for key, value in pairs if key == "song"]
    try:
        manifest = Manifest(
            seed=int(values["seed"]),
            vocab=values["vocab"],
            noise=float(values["noise"]),
            frames=int(values["frames"]),
            songs=songs,
        )
        declared = int(values["songs"])
    except KeyError as e:
        raise FormatError(f"{source}: missing manifest entry {e}") from None
    except ValueError as e:
        raise FormatError(f"{source}: bad manifest value ({e})") from None
    if declared != len(songs):
        raise FormatError(f"{source}: manifest declares {declared} songs but lists {len(songs)}")
    return manifest
