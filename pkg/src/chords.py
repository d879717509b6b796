"""Chord symbol algebra: parsing, vocabularies, pitch-class sets, transposition.

Chords are written in Harte-style text (``ROOT[:QUALITY][/BASS]``). Roots are
collapsed to pitch-class integers (C=0) as soon as they are parsed, so
enharmonic spellings compare equal.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, List, Optional, Tuple

from .errors import ChordParseError, DataError, VocabularyError

PITCHED = "pitched"
NO_CHORD = "no_chord"
UNKNOWN = "unknown"

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
_NATURALS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}

# Order matters: it fixes the large-vocabulary index layout.
QUALITY_INTERVALS: Dict[str, FrozenSet[int]] = {
    "maj": frozenset({0, 4, 7}),
    "min": frozenset({0, 3, 7}),
    "dim": frozenset({0, 3, 6}),
    "aug": frozenset({0, 4, 8}),
    "min6": frozenset({0, 3, 7, 9}),
    "maj6": frozenset({0, 4, 7, 9}),
    "min7": frozenset({0, 3, 7, 10}),
    "minmaj7": frozenset({0, 3, 7, 11}),
    "maj7": frozenset({0, 4, 7, 11}),
    "7": frozenset({0, 4, 7, 10}),
    "dim7": frozenset({0, 3, 6, 9}),
    "hdim7": frozenset({0, 3, 6, 10}),
    "sus2": frozenset({0, 2, 7}),
    "sus4": frozenset({0, 5, 7}),
}
QUALITIES = tuple(QUALITY_INTERVALS)

TRIAD_OF = {
    "maj": "maj", "maj6": "maj", "7": "maj", "maj7": "maj",
    "min": "min", "min6": "min", "min7": "min", "minmaj7": "min",
    "dim": "dim", "dim7": "dim", "hdim7": "dim",
    "aug": "aug",
    "sus2": "sus2",
    "sus4": "sus4",
}

MAJMIN = "majmin"
LARGE = "large"
VOCAB_KINDS = (MAJMIN, LARGE)


@dataclass(frozen=True)
class ChordLabel:
    """Root pitch class plus quality, or one of the two root-less kinds."""

    kind: str
    root: Optional[int] = None
    quality: Optional[str] = None

    def __post_init__(self):
        if self.kind == PITCHED:
            if self.root is None or self.quality is None:
                raise DataError("pitched chord needs both root and quality")
            if not 0 <= self.root < 12:
                raise DataError(f"root pitch class out of range: {self.root}")
            if self.quality not in QUALITY_INTERVALS:
                raise DataError(f"unknown chord quality '{self.quality}'")
        elif self.kind in (NO_CHORD, UNKNOWN):
            if self.root is not None or self.quality is not None:
                raise DataError(f"{self.kind} label cannot carry root or quality")
        else:
            raise DataError(f"unknown chord kind '{self.kind}'")

    @property
    def is_pitched(self) -> bool:
        return self.kind == PITCHED

    def __str__(self) -> str:
        return format_chord(self)


NO_CHORD_LABEL = ChordLabel(NO_CHORD)
UNKNOWN_LABEL = ChordLabel(UNKNOWN)


def chord(root: int, quality: str) -> ChordLabel:
    """Pitched label from a root pitch class and a quality name."""
    return ChordLabel(PITCHED, root % 12, quality)


def _parse_root(root_text: str, text: str) -> int:
    if not root_text or root_text[0] not in _NATURALS:
        raise ChordParseError(f"unparseable chord root in '{text}'")
    pitch = _NATURALS[root_text[0]]
    for modifier in root_text[1:]:
        if modifier == "#":
            pitch += 1
        elif modifier == "b":
            pitch -= 1
        else:
            raise ChordParseError(f"unparseable chord root in '{text}'")
    return pitch % 12


def parse_chord(text: str) -> ChordLabel:
    """Parse ``ROOT[:QUALITY][/BASS]``, ``N`` or ``X``.

    A missing quality means ``maj``. The bass part is dropped, and so are
    parenthesised degree lists. Qualities outside the large vocabulary parse
    to the unknown chord.
    """
    text = text.strip()
    if not text:
        raise ChordParseError("empty chord label")
    if text == "N":
        return NO_CHORD_LABEL
    if text == "X":
        return UNKNOWN_LABEL

    main = text.split("/", 1)[0].split("(", 1)[0]
    root_text, sep, quality_text = main.partition(":")
    root = _parse_root(root_text, text)
    if not sep:
        return chord(root, "maj")
    if quality_text in QUALITY_INTERVALS:
        return chord(root, quality_text)
    return UNKNOWN_LABEL


def format_chord(c: ChordLabel) -> str:
    """Harte spelling: ``N``, ``X`` or ``Root:quality`` with sharps."""
    if c.kind == NO_CHORD:
        return "N"
    if c.kind == UNKNOWN:
        return "X"
    return f"{PITCH_CLASS_NAMES[c.root]}:{c.quality}"


def pitch_class_set(c: ChordLabel) -> FrozenSet[int]:
    """Absolute pitch classes sounded by a pitched chord."""
    if not c.is_pitched:
        raise DataError(f"{c.kind} has no pitch-class set")
    return frozenset((c.root + interval) % 12 for interval in QUALITY_INTERVALS[c.quality])


def transpose(c: ChordLabel, k: int) -> ChordLabel:
    """Move the root by ``k`` semitones; N and X are unchanged."""
    if not c.is_pitched:
        return c
    return ChordLabel(PITCHED, (c.root + k) % 12, c.quality)


def third_interval(quality: str) -> Optional[int]:
    """Semitone size of the chord's third (3 or 4), None for sus chords."""
    intervals = QUALITY_INTERVALS[quality]
    if 4 in intervals:
        return 4
    if 3 in intervals:
        return 3
    return None


def majmin_reduction(quality: str) -> Optional[str]:
    """Reduce a quality via its third and fifth; None when there is no such triad."""
    intervals = QUALITY_INTERVALS[quality]
    if 7 in intervals and 4 in intervals:
        return "maj"
    if 7 in intervals and 3 in intervals:
        return "min"
    return None


class Vocabulary:
    """Ordered chord label set with a label <-> index bijection."""

    def __init__(self, kind: str, labels: List[ChordLabel]):
        self.kind = kind
        self.labels: Tuple[ChordLabel, ...] = tuple(labels)
        self._index = {label: i for i, label in enumerate(self.labels)}
        if len(self._index) != len(self.labels):
            raise VocabularyError(f"duplicate labels in {kind} vocabulary")

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: ChordLabel) -> bool:
        return label in self._index

    def __repr__(self) -> str:
        return f"Vocabulary({self.kind}, size={len(self)})"

    @property
    def no_chord_index(self) -> int:
        return self._index[NO_CHORD_LABEL]

    def pitched_labels(self) -> List[ChordLabel]:
        return [label for label in self.labels if label.is_pitched]


@lru_cache(maxsize=None)
def make_vocabulary(kind: str) -> Vocabulary:
    """Build the 25-label maj-min or 170-label large vocabulary."""
    if kind == MAJMIN:
        labels = [chord(root, q) for root in range(12) for q in ("maj", "min")]
        labels.append(NO_CHORD_LABEL)
    elif kind == LARGE:
        labels = [chord(root, q) for root in range(12) for q in QUALITIES]
        labels.extend([UNKNOWN_LABEL, NO_CHORD_LABEL])
    else:
        raise VocabularyError(f"unknown vocabulary '{kind}'. Must be one of: {', '.join(VOCAB_KINDS)}")
    return Vocabulary(kind, labels)


def canonical(c: ChordLabel, v: Vocabulary) -> ChordLabel:
    """Map a label to its vocabulary form (unknown when it has none)."""
    if not c.is_pitched or v.kind == LARGE:
        return c
    reduced = majmin_reduction(c.quality)
    return chord(c.root, reduced) if reduced else UNKNOWN_LABEL


def to_index(c: ChordLabel, v: Vocabulary) -> int:
    """Vocabulary index of ``c`` after reduction to the vocabulary's qualities."""
    target = canonical(c, v)
    if target not in v:
        raise VocabularyError(f"'{format_chord(c)}' has no index in the {v.kind} vocabulary")
    return v._index[target]


def from_index(i: int, v: Vocabulary) -> ChordLabel:
    """Label stored at index ``i``."""
    if not 0 <= i < len(v):
        raise VocabularyError(f"index {i} out of range for the {v.kind} vocabulary (size {len(v)})")
    return v.labels[i]


@dataclass(frozen=True)
class ChordInterval:
    start: float
    end: float
    label: ChordLabel


@dataclass
class AnnotationTrack:
    """Time-ordered, non-overlapping chord intervals for one song."""

    intervals: List[ChordInterval] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def validate(self) -> None:
        previous = None
        for interval in self.intervals:
            if not interval.start < interval.end:
                raise DataError(f"interval start {interval.start} is not before end {interval.end}")
            if previous is not None and interval.start < previous.end:
                raise DataError(
                    f"overlapping intervals: [{previous.start}, {previous.end}) {format_chord(previous.label)} "
                    f"and [{interval.start}, {interval.end}) {format_chord(interval.label)}"
                )
            previous = interval

    def span(self) -> Tuple[float, float]:
        if not self.intervals:
            return (0.0, 0.0)
        return (self.intervals[0].start, self.intervals[-1].end)

    def transposed(self, k: int) -> "AnnotationTrack":
        return AnnotationTrack([ChordInterval(i.start, i.end, transpose(i.label, k)) for i in self.intervals])
