"""CQT feature pipeline: log compression, normalisation, label alignment,
segmentation, pitch augmentation and synthetic chord data.

Features are 144-bin CQT frames (6 octaves x 24 bins from C1) at 22050 Hz
with a hop of 2048 samples. Two bins make one semitone, so pitch shifts are
exact bin translations.
"""

import math
import sys
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .chords import (
    NO_CHORD_LABEL,
    AnnotationTrack,
    ChordInterval,
    ChordLabel,
    Vocabulary,
    from_index,
    pitch_class_set,
    to_index,
)
from .errors import ConfigurationError, DataError, VocabularyError

N_BINS = 144
BINS_PER_OCTAVE = 24
BINS_PER_SEMITONE = BINS_PER_OCTAVE // 12
SAMPLE_RATE = 22050.0
HOP = 2048
SEGMENT_FRAMES = 108  # floor(10 s * 22050 / 2048) + 1
TRAIN_STRIDE = SEGMENT_FRAMES // 2
LOG_EPS = 1e-6
MIN_SHIFT = -5
MAX_SHIFT = 6
DEFAULT_SONG_FRAMES = 216
SYNTH_OCTAVES = (2, 3, 4, 5)
NO_CHORD_PROBABILITY = 0.05
# Template peaks are 1.0; noise alone stays far below half of that.
SILENCE_PEAK = 0.5


@dataclass
class FeatureMatrix:
    """T x 144 CQT frames plus the timing they were computed with."""

    frames: np.ndarray
    sample_rate: float = SAMPLE_RATE
    hop: int = HOP

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_BINS:
            raise DataError(f"feature matrix must be T x {N_BINS}, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DataError("feature matrix contains non-finite values")
        if not math.isfinite(self.sample_rate) or self.sample_rate <= 0:
            raise DataError(f"sample rate must be a positive number, got {self.sample_rate}")
        if self.hop < 1:
            raise DataError(f"hop must be at least 1 sample, got {self.hop}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_duration(self) -> float:
        return self.hop / self.sample_rate


@dataclass
class FeatureSegment:
    """Fixed-length normalised window with per-frame labels.

    ``valid`` marks real frames; padded frames are excluded from the loss
    and from accuracy.
    """

    features: np.ndarray
    labels: np.ndarray
    song_id: str
    start_frame: int
    valid: np.ndarray


@dataclass(frozen=True)
class NormStats:
    """Global mean and variance of the training set's log-CQT values."""

    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise DataError(f"normalisation variance must be positive, got {self.variance}")


def log_compress(S: FeatureMatrix, eps: float = LOG_EPS) -> FeatureMatrix:
    """Element-wise ``ln(S + eps)`` on non-negative magnitudes."""
    if eps <= 0:
        raise ConfigurationError(f"log compression eps must be positive, got {eps}")
    if (S.frames < 0).any():
        raise DataError("CQT magnitudes must be non-negative before log compression")
    logged = np.log(S.frames.astype(np.float64) + eps)
    return FeatureMatrix(logged, S.sample_rate, S.hop)


def fit_norm_stats(training: Sequence[FeatureMatrix]) -> NormStats:
    """Global mean and variance over every training frame and bin."""
    if not training:
        raise DataError("cannot fit normalisation statistics on an empty training set")
    values = np.concatenate([m.frames.reshape(-1) for m in training]).astype(np.float64)
    if values.size == 0 or values.max() == values.min():
        raise DataError("training features have zero variance")
    return NormStats(mean=float(values.mean()), variance=float(values.var()))


def apply_norm(S: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    """Standardise with fixed training statistics."""
    normalized = (S.frames.astype(np.float64) - stats.mean) / np.sqrt(stats.variance)
    return FeatureMatrix(normalized, S.sample_rate, S.hop)


def align_labels(
    track: AnnotationTrack,
    n_frames: int,
    v: Vocabulary,
    sample_rate: float = SAMPLE_RATE,
    hop: int = HOP,
) -> np.ndarray:
    """Label each frame by the half-open interval containing its centre.

    Frames outside every interval get "No chord". Chords the vocabulary
    cannot express are remapped to "No chord" with a warning count.
    """
    track.validate()
    labels = np.full(n_frames, v.no_chord_index, dtype=np.int64)
    if not track.intervals or n_frames == 0:
        return labels

    starts = np.array([i.start for i in track.intervals])
    ends = np.array([i.end for i in track.intervals])
    interval_index = np.empty(len(track.intervals), dtype=np.int64)
    remapped = np.zeros(len(track.intervals), dtype=bool)
    for n, interval in enumerate(track.intervals):
        try:
            interval_index[n] = to_index(interval.label, v)
        except VocabularyError:
            interval_index[n] = v.no_chord_index
            remapped[n] = True

    centers = (np.arange(n_frames) + 0.5) * hop / sample_rate
    pos = np.searchsorted(starts, centers, side="right") - 1
    inside = pos >= 0
    inside[inside] = centers[inside] < ends[pos[inside]]
    labels[inside] = interval_index[pos[inside]]

    n_remapped = int(remapped[pos[inside]].sum())
    if n_remapped:
        print(
            f"⚠️  Warning: {n_remapped} frames carry chords outside the {v.kind} vocabulary; remapped to N",
            file=sys.stderr,
        )
    return labels


def segment(
    S: FeatureMatrix,
    labels: np.ndarray,
    song_id: str = "",
    mode: str = "train",
    length: int = SEGMENT_FRAMES,
    stride: int = TRAIN_STRIDE,
) -> List[FeatureSegment]:
    """Cut a song into fixed-length windows.

    Training windows overlap by ``length - stride`` frames and the last one is
    anchored at ``T - length`` so every frame is covered. Inference windows
    are back to back with a zero-padded tail.
    """
    T = S.n_frames
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (T,):
        raise DataError(f"label count {labels.shape} does not match {T} frames")
    if mode == "train":
        if T >= length:
            starts = list(range(0, T - length + 1, stride))
            if starts[-1] + length < T:
                starts.append(T - length)
        else:
            starts = [0]
    elif mode == "infer":
        starts = list(range(0, T, length))
    else:
        raise ConfigurationError(f"unknown segmentation mode '{mode}'")

    segments = []
    for start in starts:
        n_real = min(length, T - start)
        features = np.zeros((length, S.frames.shape[1]), dtype=np.float32)
        features[:n_real] = S.frames[start:start + n_real]
        window_labels = np.zeros(length, dtype=np.int64)
        window_labels[:n_real] = labels[start:start + n_real]
        valid = np.zeros(length, dtype=bool)
        valid[:n_real] = True
        segments.append(FeatureSegment(features, window_labels, song_id, start, valid))
    return segments


def pitch_shift(S: FeatureMatrix, track: AnnotationTrack, k: int) -> Tuple[FeatureMatrix, AnnotationTrack]:
    """Shift features by 2k bins and transpose the labels by k semitones.

    Vacated bins are filled with the matrix minimum (the silence floor).
    """
    if not -MAX_SHIFT <= k <= MAX_SHIFT:
        raise ConfigurationError(f"pitch shift must be within -{MAX_SHIFT}..+{MAX_SHIFT} semitones, got {k}")
    frames = S.frames
    shift = k * BINS_PER_SEMITONE
    if shift == 0 or frames.size == 0:
        shifted = frames.copy()
    else:
        shifted = np.full_like(frames, frames.min())
        if shift > 0:
            shifted[:, shift:] = frames[:, :-shift]
        else:
            shifted[:, :shift] = frames[:, -shift:]
    return FeatureMatrix(shifted, S.sample_rate, S.hop), track.transposed(k)


def augment_shifts(
    S: FeatureMatrix, track: AnnotationTrack, shifts: Iterable[int] = range(MIN_SHIFT, MAX_SHIFT + 1)
) -> List[Tuple[int, FeatureMatrix, AnnotationTrack]]:
    """One ``(k, features, track)`` variant per semitone shift."""
    return [(k,) + pitch_shift(S, track, k) for k in shifts]


def chord_template(label: ChordLabel) -> np.ndarray:
    """Synthetic CQT frame of a chord: octaves 2..5, halving energy per octave."""
    frame = np.zeros(N_BINS, dtype=np.float64)
    if not label.is_pitched:
        return frame
    for pc in pitch_class_set(label):
        for octave in SYNTH_OCTAVES:
            frame[(octave - 1) * BINS_PER_OCTAVE + BINS_PER_SEMITONE * pc] += 0.5 ** (octave - 2)
    return frame


def frames_to_track(
    indices: Sequence[int], v: Vocabulary, sample_rate: float = SAMPLE_RATE, hop: int = HOP
) -> AnnotationTrack:
    """Merge runs of equal frame labels into intervals on frame boundaries."""
    intervals = []
    run_start = 0
    for t in range(1, len(indices) + 1):
        if t == len(indices) or indices[t] != indices[run_start]:
            intervals.append(
                ChordInterval(run_start * hop / sample_rate, t * hop / sample_rate, from_index(int(indices[run_start]), v))
            )
            run_start = t
    return AnnotationTrack(intervals)


def synth_song(
    v: Vocabulary,
    noise_sigma: float,
    rng: np.random.Generator,
    n_frames: int = DEFAULT_SONG_FRAMES,
) -> Tuple[FeatureMatrix, AnnotationTrack]:
    """One random progression of 5..20-frame chords with optional noise."""
    pitched = v.pitched_labels()
    frames = np.zeros((n_frames, N_BINS), dtype=np.float64)
    intervals: List[ChordInterval] = []
    frame = 0
    while frame < n_frames:
        end = min(n_frames, frame + int(rng.integers(5, 21)))
        if rng.random() < NO_CHORD_PROBABILITY:
            label = NO_CHORD_LABEL
        else:
            label = pitched[int(rng.integers(len(pitched)))]
        frames[frame:end] += chord_template(label)
        start_s, end_s = frame * HOP / SAMPLE_RATE, end * HOP / SAMPLE_RATE
        if intervals and intervals[-1].label == label:
            intervals[-1] = ChordInterval(intervals[-1].start, end_s, label)
        else:
            intervals.append(ChordInterval(start_s, end_s, label))
        frame = end
    if noise_sigma > 0:
        frames += rng.normal(0.0, noise_sigma, size=frames.shape)
    # magnitudes cannot be negative
    np.clip(frames, 0.0, None, out=frames)
    return FeatureMatrix(frames), AnnotationTrack(intervals)


def synth_dataset(
    n_songs: int,
    v: Vocabulary,
    noise_sigma: float,
    seed: int,
    n_frames: int = DEFAULT_SONG_FRAMES,
) -> List[Tuple[FeatureMatrix, AnnotationTrack]]:
    """Random chord progressions rendered as CQT-like frames.

    Song ``i`` draws from its own stream seeded by ``(seed, i)``, so songs can
    be generated independently and in any order.
    """
    if noise_sigma < 0:
        raise ConfigurationError(f"noise sigma must be non-negative, got {noise_sigma}")
    if n_frames < 1:
        raise ConfigurationError(f"songs need at least one frame, got {n_frames}")
    return [synth_song(v, noise_sigma, np.random.default_rng([seed, i]), n_frames) for i in range(n_songs)]


def template_classify(frames: np.ndarray, v: Vocabulary, silence_peak: float = SILENCE_PEAK) -> np.ndarray:
    """Nearest chord template by cosine similarity on raw synthetic magnitudes.

    Frames whose strongest bin is below ``silence_peak`` are "No chord".
    Chords with identical pitch-class sets (e.g. C:maj6 and A:min7) are
    indistinguishable here; the lower index wins.
    """
    frames = np.asarray(frames, dtype=np.float64)
    candidates = v.pitched_labels()
    templates = np.stack([chord_template(c) for c in candidates])
    templates /= np.linalg.norm(templates, axis=1, keepdims=True)
    norms = np.linalg.norm(frames, axis=1)
    scores = frames @ templates.T / np.maximum(norms, 1e-12)[:, None]
    best = np.argmax(scores, axis=1)
    indices = np.array([to_index(candidates[b], v) for b in best], dtype=np.int64)
    indices[frames.max(axis=1, initial=0.0) < silence_peak] = v.no_chord_index
    return indices
