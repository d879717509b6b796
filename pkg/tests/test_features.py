"""Tests for features.py"""

import numpy as np
import pytest
from src.chords import LARGE, MAJMIN, NO_CHORD_LABEL, AnnotationTrack, ChordInterval, chord, make_vocabulary, to_index
from src.errors import ConfigurationError, DataError
from src.features import (
    HOP,
    MAX_SHIFT,
    MIN_SHIFT,
    N_BINS,
    SAMPLE_RATE,
    FeatureMatrix,
    NormStats,
    align_labels,
    apply_norm,
    augment_shifts,
    chord_template,
    fit_norm_stats,
    frames_to_track,
    log_compress,
    pitch_shift,
    segment,
    synth_dataset,
    template_classify,
)

FRAME = HOP / SAMPLE_RATE


def _random_matrix(T, seed=0):
    return FeatureMatrix(np.abs(np.random.default_rng(seed).standard_normal((T, N_BINS))))


class TestFeatureMatrix:
    """Test feature matrix validation."""

    def test_wrong_bins(self):
        """Test that only 144-bin frames are accepted."""
        with pytest.raises(DataError):
            FeatureMatrix(np.zeros((4, 100)))

    def test_non_finite(self):
        """Test that NaN values are rejected."""
        frames = np.zeros((2, N_BINS))
        frames[0, 0] = np.nan
        with pytest.raises(DataError):
            FeatureMatrix(frames)

    def test_frame_duration(self):
        """Test hop / sample rate."""
        assert _random_matrix(1).frame_duration == pytest.approx(0.0928798, abs=1e-6)


class TestNormalisation:
    """Test log compression and global normalisation."""

    def test_log_compress(self):
        """Test log(S + eps) with the default eps."""
        S = FeatureMatrix(np.ones((2, N_BINS)))
        np.testing.assert_allclose(log_compress(S).frames, np.log(1 + 1e-6), rtol=1e-6)

    def test_negative_magnitudes_rejected(self):
        """Test that log compression needs non-negative input."""
        frames = np.ones((2, N_BINS))
        frames[1, 3] = -0.5
        with pytest.raises(DataError):
            log_compress(FeatureMatrix(frames))

    def test_normalised_training_set_is_standard(self):
        """Test zero mean and unit variance after applying fitted stats."""
        songs = [_random_matrix(30, seed) for seed in range(3)]
        stats = fit_norm_stats(songs)
        values = np.concatenate([apply_norm(S, stats).frames.reshape(-1) for S in songs])
        assert abs(values.mean()) < 1e-4
        assert abs(values.var() - 1.0) < 1e-3

    def test_empty_training_set(self):
        """Test that stats need data."""
        with pytest.raises(DataError):
            fit_norm_stats([])

    def test_constant_training_set(self):
        """Test that zero variance is an error."""
        with pytest.raises(DataError):
            fit_norm_stats([FeatureMatrix(np.ones((3, N_BINS)))])

    def test_stats_need_positive_variance(self):
        """Test NormStats validation."""
        with pytest.raises(DataError):
            NormStats(mean=0.0, variance=0.0)


class TestAlignLabels:
    """Test frame labelling by interval centre."""

    def test_frame_centres(self):
        """Test that frames whose centre lies in [0, 1) s get the chord."""
        v = make_vocabulary(MAJMIN)
        track = AnnotationTrack([ChordInterval(0.0, 1.0, chord(0, "maj"))])
        labels = align_labels(track, 14, v)
        # frame 10 is centred at 0.975 s, frame 11 at 1.068 s
        assert list(labels[:11]) == [0] * 11
        assert list(labels[11:]) == [24] * 3

    def test_gaps_are_no_chord(self):
        """Test that frames outside every interval are N."""
        v = make_vocabulary(LARGE)
        track = AnnotationTrack([ChordInterval(0.5, 0.7, chord(2, "min7"))])
        labels = align_labels(track, 10, v)
        assert labels[0] == v.no_chord_index
        assert labels[6] == to_index(chord(2, "min7"), v)
        assert labels[9] == v.no_chord_index

    def test_unreducible_chords_remapped_with_warning(self, capsys):
        """Test that majmin alignment maps dim chords to N and warns."""
        v = make_vocabulary(MAJMIN)
        track = AnnotationTrack([ChordInterval(0.0, 10 * FRAME, chord(0, "dim"))])
        labels = align_labels(track, 10, v)
        assert (labels == 24).all()
        captured = capsys.readouterr()
        assert "10 frames" in captured.err
        assert "Warning" in captured.err

    def test_overlapping_track_rejected(self):
        """Test that alignment validates the track first."""
        track = AnnotationTrack([
            ChordInterval(0.0, 2.0, chord(0, "maj")),
            ChordInterval(1.0, 3.0, chord(0, "min")),
        ])
        with pytest.raises(DataError):
            align_labels(track, 5, make_vocabulary(MAJMIN))

    def test_agrees_with_millisecond_majority_vote(self):
        """Test frame-centre labels against a 1 ms per-frame majority vote on random tracks."""
        v = make_vocabulary(MAJMIN)
        rng = np.random.default_rng(7)
        n_frames = 500
        agree = 0
        total = 0
        for _ in range(40):
            intervals = []
            t = 0.0
            while t < n_frames * FRAME:
                if rng.random() < 0.2:
                    t += rng.uniform(0.2, 1.0)
                end = t + rng.uniform(1.0, 4.0)
                quality = "maj" if rng.random() < 0.5 else "min"
                intervals.append(ChordInterval(t, end, chord(int(rng.integers(12)), quality)))
                t = end
            track = AnnotationTrack(intervals)
            starts = np.array([i.start for i in intervals])
            ends = np.array([i.end for i in intervals])
            indices = np.array([to_index(i.label, v) for i in intervals])

            # 93 samples 1 ms apart, centred on each frame
            offsets = FRAME / 2 + (np.arange(93) - 46) * 0.001
            times = (np.arange(n_frames) * FRAME)[:, None] + offsets
            pos = np.searchsorted(starts, times, side="right") - 1
            covered = (pos >= 0) & (times < ends[np.maximum(pos, 0)])
            samples = np.where(covered, indices[np.maximum(pos, 0)], v.no_chord_index)
            oracle = np.array([np.bincount(row, minlength=len(v)).argmax() for row in samples])

            agree += int((align_labels(track, n_frames, v) == oracle).sum())
            total += n_frames
        assert agree / total >= 0.999


class TestSegment:
    """Test fixed-length windowing."""

    def test_training_windows_overlap(self):
        """Test 108-frame windows every 54 frames."""
        S = _random_matrix(216)
        segments = segment(S, np.zeros(216), "s", mode="train")
        assert [s.start_frame for s in segments] == [0, 54, 108]
        assert all(s.valid.all() for s in segments)

    def test_last_training_window_anchored(self):
        """Test that the tail is covered by a window ending at T."""
        S = _random_matrix(250)
        starts = [s.start_frame for s in segment(S, np.zeros(250), mode="train")]
        assert starts == [0, 54, 108, 142]

    def test_training_windows_cover_every_frame(self):
        """Test that random song lengths are fully covered by in-bounds windows."""
        rng = np.random.default_rng(11)
        for T in rng.integers(1, 700, size=30):
            T = int(T)
            segments = segment(_random_matrix(T), np.zeros(T), mode="train")
            covered = np.zeros(T, dtype=bool)
            for s in segments:
                n_real = int(s.valid.sum())
                assert s.features.shape == (108, N_BINS)
                assert 0 <= s.start_frame and s.start_frame + n_real <= T
                covered[s.start_frame:s.start_frame + n_real] = True
            assert covered.all()

    def test_short_song_padded(self):
        """Test that a song shorter than a window gives one padded window."""
        S = _random_matrix(50)
        labels = np.arange(50) % 25
        (only,) = segment(S, labels, mode="train")
        assert only.features.shape == (108, N_BINS)
        assert only.valid.sum() == 50
        assert (only.labels[50:] == 0).all()
        assert (only.features[50:] == 0).all()
        np.testing.assert_array_equal(only.labels[:50], labels)

    def test_inference_windows_back_to_back(self):
        """Test non-overlapping windows with a padded tail."""
        S = _random_matrix(250)
        segments = segment(S, np.zeros(250), mode="infer")
        assert [s.start_frame for s in segments] == [0, 108, 216]
        assert segments[-1].valid.sum() == 34
        assert sum(int(s.valid.sum()) for s in segments) == 250

    def test_label_count_checked(self):
        """Test that labels must match the frame count."""
        with pytest.raises(DataError):
            segment(_random_matrix(10), np.zeros(9))

    def test_unknown_mode(self):
        """Test that only train and infer exist."""
        with pytest.raises(ConfigurationError):
            segment(_random_matrix(10), np.zeros(10), mode="eval")


class TestPitchShift:
    """Test pitch augmentation."""

    @pytest.mark.parametrize("k", range(MIN_SHIFT, MAX_SHIFT + 1))
    def test_shift_and_back_is_identity_on_interior(self, k):
        """Test that +k then -k restores every bin that was never vacated."""
        S = _random_matrix(5)
        track = AnnotationTrack([ChordInterval(0.0, 1.0, chord(3, "min"))])
        shifted, shifted_track = pitch_shift(S, track, k)
        back, back_track = pitch_shift(shifted, shifted_track, -k)
        lo, hi = 2 * max(0, -k), N_BINS - 2 * max(0, k)
        np.testing.assert_array_equal(back.frames[:, lo:hi], S.frames[:, lo:hi])
        assert back_track == track
        assert shifted_track.intervals[0].label == chord((3 + k) % 12, "min")

    def test_zero_shift_is_identity(self):
        """Test k = 0."""
        S = _random_matrix(4)
        track = AnnotationTrack([ChordInterval(0.0, 1.0, chord(0, "maj"))])
        shifted, shifted_track = pitch_shift(S, track, 0)
        np.testing.assert_array_equal(shifted.frames, S.frames)
        assert shifted_track == track

    def test_vacated_bins_take_the_floor(self):
        """Test that new bins get the matrix minimum."""
        S = _random_matrix(3)
        shifted, _ = pitch_shift(S, AnnotationTrack(), 2)
        assert (shifted.frames[:, :4] == S.frames.min()).all()

    @pytest.mark.parametrize("k", [7, -7, 11, -11, 12])
    def test_shift_out_of_range_rejected(self, k):
        """Test that shifts beyond six semitones either way are refused."""
        with pytest.raises(ConfigurationError):
            pitch_shift(_random_matrix(2), AnnotationTrack(), k)

    def test_inverse_of_largest_shift_allowed(self):
        """Test that -6 is accepted so +6 can be undone."""
        shifted, _ = pitch_shift(_random_matrix(2), AnnotationTrack(), -6)
        assert shifted.n_frames == 2

    def test_augment_shifts_covers_range(self):
        """Test that augmentation yields the twelve shifts -5..+6."""
        variants = augment_shifts(_random_matrix(2), AnnotationTrack())
        assert [k for k, _, _ in variants] == list(range(-5, 7))


class TestSyntheticData:
    """Test the synthetic song generator and the template oracle."""

    def test_template_energy_layout(self):
        """Test that C:maj lights bins of C, E and G in four octaves."""
        frame = chord_template(chord(0, "maj"))
        assert np.count_nonzero(frame) == 12
        assert frame[24] == 1.0  # C2
        assert frame[24 + 8] == 1.0  # E2
        assert frame[48 + 14] == 0.5  # G3
        assert not chord_template(NO_CHORD_LABEL).any()

    def test_same_seed_same_songs(self):
        """Test determinism of the generator."""
        v = make_vocabulary(MAJMIN)
        a = synth_dataset(3, v, 0.1, seed=7)
        b = synth_dataset(3, v, 0.1, seed=7)
        for (Sa, ta), (Sb, tb) in zip(a, b):
            np.testing.assert_array_equal(Sa.frames, Sb.frames)
            assert ta == tb

    def test_songs_are_independent_of_count(self):
        """Test that song i does not depend on how many songs are drawn."""
        v = make_vocabulary(MAJMIN)
        first_of_two = synth_dataset(2, v, 0.1, seed=3)[0]
        first_of_five = synth_dataset(5, v, 0.1, seed=3)[0]
        np.testing.assert_array_equal(first_of_two[0].frames, first_of_five[0].frames)

    def test_tracks_tile_the_song(self):
        """Test that intervals are contiguous, merged and cover the song."""
        v = make_vocabulary(LARGE)
        for S, track in synth_dataset(4, v, 0.0, seed=1, n_frames=100):
            track.validate()
            assert track.span() == pytest.approx((0.0, 100 * FRAME))
            for previous, current in zip(track.intervals, track.intervals[1:]):
                assert previous.end == current.start
                assert previous.label != current.label

    def test_negative_noise_rejected(self):
        """Test that sigma must be non-negative."""
        with pytest.raises(ConfigurationError):
            synth_dataset(1, make_vocabulary(MAJMIN), -0.1, seed=0)

    def test_template_oracle_is_exact_without_noise(self):
        """Test that cosine matching recovers every frame of noiseless majmin songs."""
        v = make_vocabulary(MAJMIN)
        for S, track in synth_dataset(5, v, 0.0, seed=2):
            expected = align_labels(track, S.n_frames, v)
            np.testing.assert_array_equal(template_classify(S.frames, v), expected)

    def test_template_oracle_with_noise(self):
        """Test that the oracle stays above 0.95 frame accuracy at sigma 0.1."""
        v = make_vocabulary(MAJMIN)
        correct = total = 0
        for S, track in synth_dataset(20, v, 0.1, seed=4):
            expected = align_labels(track, S.n_frames, v)
            correct += int((template_classify(S.frames, v) == expected).sum())
            total += S.n_frames
        assert correct / total >= 0.95


class TestFramesToTrack:
    """Test merging frame labels into intervals."""

    def test_merges_runs_on_frame_boundaries(self):
        """Test that equal neighbours merge and times sit on frame edges."""
        v = make_vocabulary(MAJMIN)
        track = frames_to_track([0, 0, 1, 1, 1, 24], v)
        assert len(track) == 3
        assert track.intervals[0].label == chord(0, "maj")
        assert track.intervals[1].start == pytest.approx(2 * FRAME)
        assert track.intervals[2].label == NO_CHORD_LABEL
        assert track.span() == pytest.approx((0.0, 6 * FRAME))

    def test_empty(self):
        """Test that no frames give an empty track."""
        assert len(frames_to_track([], make_vocabulary(MAJMIN))) == 0
