"""Training loop for the BTC network.

Negative log-likelihood over real frames, Adam updates, learning-rate decay
on epochs whose validation accuracy does not improve, and early stopping
with the best checkpoint restored at the end.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .btc_net import BtcModel, forward, predict
from .chords import AnnotationTrack, Vocabulary
from .errors import ConfigurationError, DataError
from .features import (
    FeatureMatrix,
    FeatureSegment,
    NormStats,
    align_labels,
    apply_norm,
    augment_shifts,
    fit_norm_stats,
    log_compress,
    segment,
)
from .tensor import Tensor, backward, log_softmax_rows, make_rng, mul, sum_all

STOP_PATIENCE = "patience"
STOP_MAX_EPOCHS = "max_epochs"
STOP_DIVERGED = "diverged"

Song = Tuple[str, FeatureMatrix, AnnotationTrack]


@dataclass
class TrainConfig:
    """Optimisation schedule and early-stopping settings."""

    lr: float = 1e-4
    decay: float = 0.95
    patience: int = 10
    batch_size: int = 16
    max_epochs: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError(f"learning-rate decay must be in (0, 1), got {self.decay}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be at least 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max epochs must be at least 1, got {self.max_epochs}")


class AdamState:
    """First and second moment buffers mirroring each parameter's shape."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place, then zero every gradient."""
    if len(params) != len(state.m):
        raise ConfigurationError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        p.zero_grad()


def nll_loss(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the valid frames.

    ``logits`` is (..., T, |V|); ``targets`` and ``valid`` are (..., T).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DataError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != targets.shape:
        raise DataError(f"pad mask {valid.shape} does not match targets {targets.shape}")
    if ((targets < 0) | (targets >= n_classes))[valid].any():
        raise DataError(f"target index outside [0, {n_classes})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("no valid frames to compute the loss over")

    weights = np.zeros(logits.shape, dtype=logits.data.dtype)
    rows = np.nonzero(valid)
    weights[rows + (targets[rows],)] = -1.0 / n_valid
    return sum_all(mul(log_softmax_rows(logits), weights))


def _batches(segments: Sequence[FeatureSegment], order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        chosen = [segments[i] for i in order[start:start + batch_size]]
        yield (
            np.stack([s.features for s in chosen]),
            np.stack([s.labels for s in chosen]),
            np.stack([s.valid for s in chosen]),
        )


def frame_accuracy(model: BtcModel, dataset: Sequence[FeatureSegment], batch_size: int = 16) -> float:
    """Correct predictions over real (non-pad) frames, eval mode."""
    correct = 0
    total = 0
    for features, labels, valid in _batches(dataset, np.arange(len(dataset)), batch_size):
        predicted = predict(features, model)
        correct += int(((predicted == labels) & valid).sum())
        total += int(valid.sum())
    return correct / total if total else 0.0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    lr: float
    improved: bool
    batch_losses: List[float] = field(default_factory=list)

    def log_line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} val_acc={self.val_acc:.6f} lr={self.lr:.6g}"


@dataclass
class TrainingReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("-inf")
    stop_reason: str = STOP_MAX_EPOCHS

    @property
    def losses(self) -> List[float]:
        return [e.loss for e in self.epochs]

    @property
    def learning_rates(self) -> List[float]:
        return [e.lr for e in self.epochs]


def fit(
    model: BtcModel,
    train_set: Sequence[FeatureSegment],
    val_set: Sequence[FeatureSegment],
    cfg: TrainConfig,
    log: Optional[Callable[[str], None]] = None,
) -> TrainingReport:
    """Train ``model`` in place and leave it holding the best-accuracy weights.

    Each epoch shuffles the training segments with the seeded generator,
    takes one Adam step per batch, then scores frame accuracy on
    ``val_set``. An epoch improves only if accuracy strictly exceeds the
    best so far; otherwise the learning rate is multiplied by ``cfg.decay``
    and training stops after ``cfg.patience`` such epochs in a row.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise DataError("training and validation sets must both be non-empty")
    log = log or print

    rng = make_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(params)
    model.zero_grad()

    report = TrainingReport()
    best_state = model.snapshot()
    lr = cfg.lr
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses: List[float] = []
        frames = 0
        weighted = 0.0
        diverged = False
        for features, labels, valid in _batches(train_set, order, cfg.batch_size):
            logits = forward(features, model, training=True, rng=rng)
            loss = nll_loss(logits, labels, valid)
            value = loss.item()
            if not math.isfinite(value):
                diverged = True
                break
            backward(loss)
            adam_step(params, state, lr)
            batch_losses.append(value)
            n = int(valid.sum())
            weighted += value * n
            frames += n

        if diverged:
            model.zero_grad()
            report.stop_reason = STOP_DIVERGED
            log(f"⚠️  Warning: non-finite loss in epoch {epoch}; stopping")
            break

        val_acc = frame_accuracy(model, val_set, cfg.batch_size)
        improved = val_acc > report.best_val_acc
        record = EpochRecord(epoch, weighted / frames, val_acc, lr, improved, batch_losses)
        report.epochs.append(record)
        log(f"📈 {record.log_line()}")

        if improved:
            report.best_val_acc = val_acc
            report.best_epoch = epoch
            best_state = model.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            lr *= cfg.decay
            if bad_epochs >= cfg.patience:
                report.stop_reason = STOP_PATIENCE
                break

    model.load_snapshot(best_state)
    return report


def split_by_song(song_ids: Sequence[str], val_fraction: float) -> Tuple[List[str], List[str]]:
    """Stable song-level split: songs are ranked by the SHA-256 of their id.

    Both sides always get at least one song; no song lands on both.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"validation split must be in (0, 1), got {val_fraction}")
    unique = sorted(set(song_ids))
    if len(unique) < 2:
        raise DataError(f"need at least 2 songs to split into training and validation, got {len(unique)}")
    ranked = sorted(unique, key=lambda s: hashlib.sha256(s.encode("utf-8")).hexdigest())
    n_val = min(max(1, round(val_fraction * len(ranked))), len(ranked) - 1)
    validation = sorted(ranked[:n_val])
    training = sorted(ranked[n_val:])
    return training, validation


def build_training_set(
    songs: Sequence[Song],
    v: Vocabulary,
    stats: Optional[NormStats] = None,
    augment: bool = False,
) -> Tuple[List[FeatureSegment], NormStats]:
    """log -> (pitch augmentation) -> normalise -> align -> overlapping windows.

    Normalisation statistics are fitted on the un-augmented log features
    when ``stats`` is not given.
    """
    if not songs:
        raise DataError("no training songs")
    logged = [(song_id, log_compress(S), track) for song_id, S, track in songs]
    if stats is None:
        stats = fit_norm_stats([S for _, S, _ in logged])

    segments: List[FeatureSegment] = []
    for song_id, S, track in logged:
        variants = augment_shifts(S, track) if augment else [(0, S, track)]
        for k, shifted, shifted_track in variants:
            normalized = apply_norm(shifted, stats)
            labels = align_labels(shifted_track, normalized.n_frames, v, S.sample_rate, S.hop)
            name = song_id if k == 0 else f"{song_id}@{k:+d}"
            segments.extend(segment(normalized, labels, name, mode="train"))
    return segments, stats


def build_eval_set(songs: Sequence[Song], v: Vocabulary, stats: NormStats) -> List[FeatureSegment]:
    """Back-to-back inference windows with labels, for validation accuracy."""
    segments: List[FeatureSegment] = []
    for song_id, S, track in songs:
        normalized = apply_norm(log_compress(S), stats)
        labels = align_labels(track, normalized.n_frames, v, S.sample_rate, S.hop)
        segments.extend(segment(normalized, labels, song_id, mode="infer"))
    return segments
