"""Weighted chord symbol recall (WCSR) over interval annotations.

Scores are pooled over songs: 100 * (duration judged correct) / (duration
the comparator considers comparable). Whether a segment is comparable is
decided by the reference label alone. Gaps in either track count as
"No chord".
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .chords import (
    LARGE,
    MAJMIN,
    NO_CHORD,
    NO_CHORD_LABEL,
    TRIAD_OF,
    UNKNOWN,
    AnnotationTrack,
    ChordLabel,
    pitch_class_set,
    third_interval,
)
from .errors import ConfigurationError, UndefinedScoreError

CORRECT = "correct"
INCORRECT = "incorrect"
EXCLUDED = "excluded"

ROOT = "root"
THIRDS = "thirds"
TRIADS = "triads"
SEVENTHS = "sevenths"
TETRADS = "tetrads"
MAJMIN_METRIC = "majmin"
MIREX = "mirex"

DISPLAY_NAMES = {
    ROOT: "Root",
    THIRDS: "Thirds",
    TRIADS: "Triads",
    SEVENTHS: "Sevenths",
    TETRADS: "Tetrads",
    MAJMIN_METRIC: "Maj-min",
    MIREX: "MIREX",
}

REPORT_METRICS = {
    MAJMIN: (ROOT, MAJMIN_METRIC),
    LARGE: (ROOT, THIRDS, TRIADS, SEVENTHS, TETRADS, MAJMIN_METRIC, MIREX),
}

SEVENTHS_QUALITIES = frozenset({"maj", "min", "7", "maj7", "min7"})
MIREX_MIN_SHARED = 3


def _root(ref: ChordLabel, est: ChordLabel) -> bool:
    return ref.root == est.root


def _thirds(ref: ChordLabel, est: ChordLabel) -> bool:
    return ref.root == est.root and third_interval(ref.quality) == third_interval(est.quality)


def _triads(ref: ChordLabel, est: ChordLabel) -> bool:
    return ref.root == est.root and TRIAD_OF[ref.quality] == TRIAD_OF[est.quality]


def _exact(ref: ChordLabel, est: ChordLabel) -> bool:
    return ref.root == est.root and ref.quality == est.quality


def _mirex(ref: ChordLabel, est: ChordLabel) -> bool:
    return len(pitch_class_set(ref) & pitch_class_set(est)) >= MIREX_MIN_SHARED


def _always(ref: ChordLabel) -> bool:
    return True


def _is_seventh_family(ref: ChordLabel) -> bool:
    return ref.quality in SEVENTHS_QUALITIES


def _is_majmin_family(ref: ChordLabel) -> bool:
    return TRIAD_OF[ref.quality] in ("maj", "min")


@dataclass(frozen=True)
class Comparator:
    """Rule pair for one metric.

    ``comparable`` and ``correct`` only ever see pitched labels; the
    no-chord and unknown cases are shared by every comparator.
    """

    name: str
    comparable: Callable[[ChordLabel], bool]
    correct: Callable[[ChordLabel, ChordLabel], bool]


COMPARATORS: Dict[str, Comparator] = {
    ROOT: Comparator(ROOT, _always, _root),
    THIRDS: Comparator(THIRDS, _always, _thirds),
    TRIADS: Comparator(TRIADS, _always, _triads),
    SEVENTHS: Comparator(SEVENTHS, _is_seventh_family, _exact),
    TETRADS: Comparator(TETRADS, _always, _exact),
    MAJMIN_METRIC: Comparator(MAJMIN_METRIC, _is_majmin_family, _triads),
    MIREX: Comparator(MIREX, _always, _mirex),
}


def get_comparator(name: str) -> Comparator:
    """Look up a comparator by metric name."""
    try:
        return COMPARATORS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown comparator '{name}'. Must be one of: {', '.join(COMPARATORS)}"
        ) from None


def compare(name: str, ref: ChordLabel, est: ChordLabel) -> str:
    """Judge one (reference, estimate) pair: correct, incorrect or excluded."""
    comparator = get_comparator(name)
    if ref.kind == UNKNOWN:
        return EXCLUDED
    if ref.kind == NO_CHORD:
        return CORRECT if est.kind == NO_CHORD else INCORRECT
    if not comparator.comparable(ref):
        return EXCLUDED
    if not est.is_pitched:
        return INCORRECT
    return CORRECT if comparator.correct(ref, est) else INCORRECT


@dataclass
class ScoredPair:
    """Reference and estimate annotations of one song."""

    reference: AnnotationTrack
    estimate: AnnotationTrack
    song_id: str = ""

    @property
    def duration(self) -> float:
        start, end = self.reference.span()
        return end - start


def _label_lookup(track: AnnotationTrack):
    starts = np.array([i.start for i in track.intervals])
    ends = np.array([i.end for i in track.intervals])
    labels = [i.label for i in track.intervals]

    def label_at(t: float) -> ChordLabel:
        pos = int(np.searchsorted(starts, t, side="right")) - 1
        if pos >= 0 and t < ends[pos]:
            return labels[pos]
        return NO_CHORD_LABEL

    return label_at


def intersect_intervals(ref: AnnotationTrack, est: AnnotationTrack) -> List[Tuple[float, ChordLabel, ChordLabel]]:
    """Split the reference span at every boundary of either track.

    Returns ``(duration, ref_label, est_label)`` pieces whose durations sum
    to the reference span. Gaps in either track read as "No chord".
    """
    ref.validate()
    est.validate()
    if not ref.intervals:
        return []
    span_start, span_end = ref.span()
    boundaries = {span_start, span_end}
    for track in (ref, est):
        for interval in track.intervals:
            for t in (interval.start, interval.end):
                if span_start < t < span_end:
                    boundaries.add(t)
    cuts = sorted(boundaries)

    ref_at = _label_lookup(ref)
    est_at = _label_lookup(est)
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        pieces.append((b - a, ref_at(a), est_at(a)))
    return pieces


def tally(pairs: Sequence[ScoredPair], name: str) -> Tuple[float, float]:
    """Pooled (t_c, t_a): correct and comparable durations in seconds."""
    get_comparator(name)
    t_c = 0.0
    t_a = 0.0
    for pair in pairs:
        for duration, ref, est in intersect_intervals(pair.reference, pair.estimate):
            outcome = compare(name, ref, est)
            if outcome == EXCLUDED:
                continue
            t_a += duration
            if outcome == CORRECT:
                t_c += duration
    return t_c, t_a


def wcsr(pairs: Sequence[ScoredPair], name: str) -> float:
    """Weighted chord symbol recall in percent, pooled over all pairs."""
    t_c, t_a = tally(pairs, name)
    if t_a <= 0:
        raise UndefinedScoreError(f"{name} score is undefined: no comparable duration")
    return 100.0 * t_c / t_a


@dataclass
class WcsrScore:
    metric: str
    score: Optional[float]
    t_c: float
    t_a: float

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.metric]

    def formatted_score(self) -> str:
        return "n/a" if self.score is None else f"{self.score:.2f}"


def report(pairs: Sequence[ScoredPair], vocab_kind: str) -> List[WcsrScore]:
    """All metrics for ``vocab_kind`` in table-column order.

    A metric with nothing comparable is reported with ``score=None``.
    """
    if vocab_kind not in REPORT_METRICS:
        raise ConfigurationError(f"unknown vocabulary '{vocab_kind}'")
    scores = []
    for name in REPORT_METRICS[vocab_kind]:
        t_c, t_a = tally(pairs, name)
        scores.append(WcsrScore(name, 100.0 * t_c / t_a if t_a > 0 else None, t_c, t_a))
    return scores


def format_table(scores: Sequence[WcsrScore]) -> str:
    """Aligned text table of the scores."""
    header = ("metric", "score", "t_c", "t_a")
    rows = [(s.display_name, s.formatted_score(), f"{s.t_c:.3f}", f"{s.t_a:.3f}") for s in scores]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate([header] + rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if n == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines)


def format_csv(scores: Sequence[WcsrScore]) -> str:
    """CSV report with columns metric, score, t_c and t_a."""
    lines = ["metric,score,t_c,t_a"]
    for s in scores:
        score = "n/a" if s.score is None else f"{s.score:.6f}"
        lines.append(f"{s.metric},{score},{s.t_c:.6f},{s.t_a:.6f}")
    return "\n".join(lines) + "\n"
