"""Tests for trainer.py"""

import math

import numpy as np
import pytest
from src.btc_net import BtcConfig, BtcModel, predict
from src.chords import MAJMIN, make_vocabulary
from src.errors import ConfigurationError, DataError
from src.features import FeatureSegment, align_labels, frames_to_track, synth_dataset, template_classify
from src.grad_check import grad_check
from src.metrics import MAJMIN_METRIC, ScoredPair, wcsr
from src.tensor import Tensor, backward, make_rng, mul, sum_all
from src.trainer import (
    STOP_MAX_EPOCHS,
    STOP_PATIENCE,
    AdamState,
    TrainConfig,
    adam_step,
    build_eval_set,
    build_training_set,
    fit,
    frame_accuracy,
    nll_loss,
    split_by_song,
)

TINY = BtcConfig(n_layers=1, n_heads=2, model_dim=8, conv_repeats=1, kernel_size=3, dropout=0.0,
                 input_bins=144, vocab_size=25, seq_len=8)


def _segments(n, T=8, seed=0, vocab_size=25):
    rng = make_rng(seed)
    return [
        FeatureSegment(
            features=rng.standard_normal((T, 144)).astype(np.float32),
            labels=rng.integers(0, vocab_size, size=T),
            song_id=f"s{i}",
            start_frame=0,
            valid=np.ones(T, dtype=bool),
        )
        for i in range(n)
    ]


def _quiet(line):
    pass


class TestNllLoss:
    """Test the frame-averaged negative log-likelihood."""

    def test_confident_correct_prediction_is_zero(self):
        """Test that probability 1 on the target gives zero loss."""
        logits = np.zeros((1, 5))
        logits[0, 2] = 1000.0
        assert nll_loss(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        """Test ln 25 per frame for uniform logits."""
        loss = nll_loss(Tensor(np.zeros((4, 25))), [0, 3, 7, 24]).item()
        assert loss == pytest.approx(math.log(25), rel=1e-6)

    def test_pad_frames_excluded(self):
        """Test that padded frames do not influence the loss."""
        logits = make_rng(0).standard_normal((6, 5))
        valid = np.array([True, True, True, False, False, False])
        targets = np.array([1, 2, 3, 0, 0, 0])
        a = nll_loss(Tensor(logits), targets, valid).item()
        logits[3:] = 99.0
        b = nll_loss(Tensor(logits), targets, valid).item()
        assert a == b

    def test_batched_mean_over_frames(self):
        """Test that a batch averages over all real frames."""
        logits = np.zeros((2, 3, 4))
        loss = nll_loss(Tensor(logits), np.zeros((2, 3), dtype=int)).item()
        assert loss == pytest.approx(math.log(4))

    def test_out_of_range_target(self):
        """Test that targets must index the vocabulary."""
        with pytest.raises(DataError):
            nll_loss(Tensor(np.zeros((2, 5))), [0, 5])

    def test_all_padding(self):
        """Test that a loss over no frames is an error."""
        with pytest.raises(DataError):
            nll_loss(Tensor(np.zeros((2, 5))), [0, 1], [False, False])

    def test_gradient_matches_finite_differences(self):
        """Test the loss gradient with the checker."""
        z = Tensor(make_rng(1).standard_normal((2, 6, 7)), requires_grad=True)
        targets = make_rng(2).integers(0, 7, size=(2, 6))
        valid = np.ones((2, 6), dtype=bool)
        valid[1, 4:] = False
        report = grad_check(lambda logits: nll_loss(logits, targets, valid), [z])
        assert report.passed, report

    def test_gradient_is_softmax_minus_onehot(self):
        """Test d loss / d logits = (softmax - y) / n."""
        logits = make_rng(3).standard_normal((3, 4))
        z = Tensor(logits, requires_grad=True)
        targets = np.array([0, 2, 3])
        backward(nll_loss(z, targets))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = probs.copy()
        expected[np.arange(3), targets] -= 1.0
        np.testing.assert_allclose(z.grad, expected / 3, atol=1e-12)


class TestAdam:
    """Test the optimizer step."""

    def test_zero_gradient_leaves_parameters(self):
        """Test that a zero gradient does not move anything."""
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adam_step([w], AdamState([w]), lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        """Test the bias-corrected first step in 64-bit."""
        w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
        w.grad[:] = [3.0, -0.2, 1e-3]
        adam_step([w], AdamState([w]), lr=0.01)
        g = np.array([3.0, -0.2, 1e-3])
        expected = 0.5 - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w.data, expected, rtol=1e-12)
        assert not w.grad.any()

    def test_quadratic_bowl(self):
        """Test convergence of f(w) = w^2 from w = 1."""
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState([w])
        for _ in range(3000):
            backward(sum_all(mul(w, w)))
            adam_step([w], state, lr=1e-2)
        assert abs(w.data[0]) < 0.05

    def test_state_tracks_parameter_count(self):
        """Test that a mismatched state is refused."""
        w = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ConfigurationError):
            adam_step([w, w], AdamState([w]), lr=0.1)


class TestTrainConfig:
    """Test schedule validation."""

    @pytest.mark.parametrize("kwargs", [{"decay": 1.0}, {"decay": 0.0}, {"patience": 0}, {"batch_size": 0},
                                        {"lr": -1.0}, {"max_epochs": 0}])
    def test_invalid(self, kwargs):
        """Test that invalid schedules raise."""
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs).validate()

    def test_defaults(self):
        """Test learning rate 1e-4, decay 0.95, patience 10."""
        cfg = TrainConfig()
        assert (cfg.lr, cfg.decay, cfg.patience) == (1e-4, 0.95, 10)


class TestFrameAccuracy:
    """Test validation accuracy."""

    def _predicted(self, model, segments):
        return predict(np.stack([s.features for s in segments]), model)

    def test_perfect_and_total_mismatch(self):
        """Test 1.0 when labels equal predictions and 0.0 when all differ."""
        model = BtcModel.create(TINY, seed=0)
        segments = _segments(3)
        predicted = self._predicted(model, segments)
        for s, labels in zip(segments, predicted):
            s.labels = labels
        assert frame_accuracy(model, segments) == 1.0
        for s in segments:
            s.labels = (s.labels + 1) % 25
        assert frame_accuracy(model, segments) == 0.0

    def test_padding_ignored(self):
        """Test that pad frames count neither way."""
        model = BtcModel.create(TINY, seed=0)
        (s,) = _segments(1)
        s.labels = self._predicted(model, [s])[0]
        s.labels[4:] = (s.labels[4:] + 1) % 25
        s.valid[4:] = False
        assert frame_accuracy(model, [s]) == 1.0

    def test_equals_majmin_wcsr_on_frame_intervals(self):
        """Test agreement with interval scoring on frame-aligned tracks."""
        model = BtcModel.create(TINY, seed=0)
        v = make_vocabulary(MAJMIN)
        segments = _segments(1, T=40, seed=5)
        predicted = self._predicted(model, segments)[0]
        pair = ScoredPair(frames_to_track(segments[0].labels, v), frames_to_track(predicted, v))
        assert frame_accuracy(model, segments) == pytest.approx(wcsr([pair], MAJMIN_METRIC) / 100.0, abs=1e-9)


class TestFitSchedule:
    """Test learning-rate decay and early stopping."""

    def test_frozen_model_patience_one(self):
        """Test one baseline epoch plus one non-improving epoch."""
        model = BtcModel.create(TINY, seed=0)
        report = fit(model, _segments(4), _segments(2, seed=1), TrainConfig(lr=0.0, patience=1), log=_quiet)
        assert len(report.epochs) == 2
        assert report.stop_reason == STOP_PATIENCE
        assert report.best_epoch == 1

    def test_early_stop_after_exactly_patience(self):
        """Test that ten non-improving epochs end training."""
        model = BtcModel.create(TINY, seed=0)
        report = fit(model, _segments(2), _segments(1, seed=1), TrainConfig(lr=0.0, patience=10), log=_quiet)
        assert len(report.epochs) == 11
        assert [e.improved for e in report.epochs] == [True] + [False] * 10

    def test_lr_decays_only_after_non_improving_epochs(self):
        """Test that each epoch applies x0.95 exactly when its predecessor did not improve."""
        model = BtcModel.create(TINY, seed=0)
        cfg = TrainConfig(lr=1e-2, patience=50, max_epochs=6, batch_size=2)
        report = fit(model, _segments(6), _segments(2, seed=1), cfg, log=_quiet)
        assert report.stop_reason == STOP_MAX_EPOCHS
        for previous, current in zip(report.epochs, report.epochs[1:]):
            factor = 1.0 if previous.improved else 0.95
            assert current.lr == pytest.approx(previous.lr * factor, rel=1e-12)
            assert current.lr <= previous.lr

    def test_frozen_model_lr_sequence(self, mocker):
        """Test lr_n = lr_0 * 0.95^n when no epoch after the first improves."""
        step = mocker.patch("src.trainer.adam_step")
        model = BtcModel.create(TINY, seed=0)
        cfg = TrainConfig(lr=1e-2, patience=3, batch_size=2)
        report = fit(model, _segments(4), _segments(1, seed=1), cfg, log=_quiet)
        assert step.call_count == 4 * 2
        assert [e.improved for e in report.epochs] == [True, False, False, False]
        expected = [1e-2]
        for _ in range(3):
            expected.append(expected[-1] * 0.95)
        assert report.learning_rates == expected
        for n, lr in enumerate(report.learning_rates):
            assert lr == pytest.approx(1e-2 * 0.95 ** n, rel=1e-12)
        assert report.stop_reason == STOP_PATIENCE

    def test_same_seed_same_losses(self):
        """Test a reproducible loss trace with dropout on."""
        config = BtcConfig(n_layers=1, n_heads=2, model_dim=8, dropout=0.1, input_bins=144, vocab_size=25)
        cfg = TrainConfig(lr=1e-3, max_epochs=3, patience=10, batch_size=2, seed=4)
        traces = []
        for _ in range(2):
            model = BtcModel.create(config, seed=0)
            traces.append(fit(model, _segments(4), _segments(2, seed=1), cfg, log=_quiet).losses)
        assert traces[0] == traces[1]
        assert len(traces[0]) == 3

    def test_best_weights_restored(self):
        """Test that the returned model scores the best recorded accuracy."""
        model = BtcModel.create(TINY, seed=0)
        val = _segments(2, seed=1)
        cfg = TrainConfig(lr=5e-2, max_epochs=5, patience=50, batch_size=2)
        report = fit(model, _segments(6), val, cfg, log=_quiet)
        assert frame_accuracy(model, val) == report.best_val_acc
        assert report.best_val_acc == max(e.val_acc for e in report.epochs)

    def test_epoch_lines_logged(self):
        """Test one key=value line per epoch."""
        lines = []
        model = BtcModel.create(TINY, seed=0)
        fit(model, _segments(2), _segments(1, seed=1), TrainConfig(lr=0.0, patience=1), log=lines.append)
        assert len(lines) == 2
        assert lines[0].startswith("📈 epoch=1 loss=")
        assert "val_acc=" in lines[0] and "lr=" in lines[0]

    def test_empty_split(self):
        """Test that both sets must be non-empty."""
        with pytest.raises(DataError):
            fit(BtcModel.create(TINY, seed=0), [], _segments(1), TrainConfig(), log=_quiet)


class TestSplitBySong:
    """Test the song-level validation split."""

    def test_disjoint_and_complete(self):
        """Test that every song lands on exactly one side."""
        ids = [f"song_{i:04d}" for i in range(20)]
        train, val = split_by_song(ids, 0.2)
        assert len(val) == 4
        assert not set(train) & set(val)
        assert sorted(train + val) == ids

    def test_stable(self):
        """Test that input order does not change the split."""
        ids = [f"song_{i}" for i in range(10)]
        assert split_by_song(ids, 0.3) == split_by_song(list(reversed(ids)), 0.3)

    def test_both_sides_non_empty(self):
        """Test extreme fractions on two songs."""
        train, val = split_by_song(["a", "b"], 0.01)
        assert len(train) == 1 and len(val) == 1
        train, val = split_by_song(["a", "b"], 0.99)
        assert len(train) == 1 and len(val) == 1

    def test_too_few_songs(self):
        """Test that one song cannot be split."""
        with pytest.raises(DataError):
            split_by_song(["only"], 0.2)

    def test_fraction_range(self):
        """Test that the fraction must be in (0, 1)."""
        with pytest.raises(ConfigurationError):
            split_by_song(["a", "b"], 1.0)


class TestBuildSets:
    """Test song-to-segment pipelines."""

    def _songs(self, n=3):
        v = make_vocabulary(MAJMIN)
        return [(f"song_{i}", S, track) for i, (S, track) in enumerate(synth_dataset(n, v, 0.1, seed=0))]

    def test_training_set(self):
        """Test three overlapping windows per 216-frame song and fitted stats."""
        segments, stats = build_training_set(self._songs(), make_vocabulary(MAJMIN))
        assert len(segments) == 9
        assert stats.variance > 0
        assert segments[0].features.shape == (108, 144)

    def test_augmentation_multiplies_by_twelve(self):
        """Test that -5..+6 shifts give twelve copies of every window."""
        plain, stats = build_training_set(self._songs(1), make_vocabulary(MAJMIN))
        augmented, augmented_stats = build_training_set(self._songs(1), make_vocabulary(MAJMIN), augment=True)
        assert len(augmented) == 12 * len(plain)
        assert augmented_stats == stats
        assert {s.song_id for s in augmented} >= {"song_0", "song_0@+6", "song_0@-5"}

    def test_eval_set_uses_given_stats(self):
        """Test back-to-back windows normalised with training stats."""
        songs = self._songs()
        _, stats = build_training_set(songs[:2], make_vocabulary(MAJMIN))
        segments = build_eval_set(songs[2:], make_vocabulary(MAJMIN), stats)
        assert [s.start_frame for s in segments] == [0, 108]

    def test_no_songs(self):
        """Test that an empty training list raises."""
        with pytest.raises(DataError):
            build_training_set([], make_vocabulary(MAJMIN))


@pytest.mark.slow
class TestLearning:
    """End-to-end learning on synthetic data."""

    def _data(self, n_songs):
        v = make_vocabulary(MAJMIN)
        songs = [(f"song_{i:04d}", S, t) for i, (S, t) in enumerate(synth_dataset(n_songs, v, 0.1, seed=0))]
        train_ids, val_ids = split_by_song([s[0] for s in songs], 0.2)
        by_id = {s[0]: s for s in songs}
        train, stats = build_training_set([by_id[i] for i in train_ids], v)
        val = build_eval_set([by_id[i] for i in val_ids], v, stats)
        return songs, [by_id[i] for i in val_ids], train, val

    def test_first_epoch_loss_drops(self):
        """Test that late first-epoch batches sit at least 20% below ln 25."""
        _, _, train, val = self._data(200)
        model = BtcModel.create(BtcConfig(n_layers=2, n_heads=4, model_dim=64, vocab_size=25), seed=0)
        report = fit(model, train, val, TrainConfig(lr=1e-3, max_epochs=1, seed=0), log=_quiet)
        first = report.epochs[0].batch_losses
        assert first[0] == pytest.approx(math.log(25), rel=0.1)
        assert np.mean(first[-5:]) <= 0.8 * math.log(25)

    def test_held_out_accuracy(self):
        """Test held-out frame accuracy against the template-oracle threshold."""
        songs, val_songs, train, val = self._data(200)
        v = make_vocabulary(MAJMIN)
        correct = total = 0
        for _, S, track in val_songs:
            expected = align_labels(track, S.n_frames, v)
            correct += int((template_classify(S.frames, v) == expected).sum())
            total += S.n_frames
        threshold = min(0.90, correct / total - 0.05)

        model = BtcModel.create(BtcConfig(n_layers=2, n_heads=4, model_dim=64, vocab_size=25), seed=0)
        report = fit(model, train, val, TrainConfig(lr=1e-3, max_epochs=30, patience=10, seed=0), log=_quiet)
        assert report.best_val_acc >= threshold
