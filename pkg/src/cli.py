#!/usr/bin/env python3
"""Command-line entry point: synth-data, train, infer, eval, export-attention.

Run as ``python -m src.cli <command> [flags]``. Every command prints its
resolved settings and seed to stderr before doing any work; results go to
stdout. Typed failures end the run with a one-line ``Error [CODE]: ...``
on stderr and exit code 1.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .btc_net import BtcConfig, BtcModel, attention_maps, parameter_count, predict
from .chords import make_vocabulary
from .errors import BtcError, DataError, MissingCounterpartError
from .features import (
    DEFAULT_SONG_FRAMES,
    FeatureMatrix,
    FeatureSegment,
    NormStats,
    apply_norm,
    frames_to_track,
    log_compress,
    segment,
    synth_dataset,
)
from .io_formats import (
    Manifest,
    atomic_write,
    parse_lab,
    read_btcf,
    read_checkpoint,
    read_manifest,
    write_attention,
    write_btcf,
    write_checkpoint,
    write_lab,
    write_manifest,
    write_stats,
)
from .metrics import ScoredPair, format_csv, format_table, report
from .prepare_config import load_config_file, print_settings, resolve_seed, resolve_settings
from .trainer import TrainConfig, build_eval_set, build_training_set, fit, split_by_song
from .validate_inputs import (
    parse_layer_selection,
    validate_model_flags,
    validate_required,
    validate_segment_index,
    validate_split,
    validate_vocab,
)

MANIFEST_NAME = "manifest.txt"

COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "synth-data": {
        "songs": 100,
        "vocab": "majmin",
        "noise": 0.1,
        "out": None,
        "frames": DEFAULT_SONG_FRAMES,
    },
    "train": {
        "data": None,
        "val_split": 0.2,
        "vocab": "majmin",
        "out": None,
        "layers": 8,
        "heads": 4,
        "dim": 128,
        "conv_repeats": 2,
        "kernel": 3,
        "dropout": 0.2,
        "lr": 1e-4,
        "decay": 0.95,
        "patience": 10,
        "batch_size": 16,
        "max_epochs": 100,
        "augment": False,
    },
    "infer": {"model": None, "features": None, "out": None},
    "eval": {"ref": None, "est": None, "vocab": "majmin", "csv": None},
    "export-attention": {
        "model": None,
        "features": None,
        "out": None,
        "layers": "",
        "pgm": False,
        "combined": False,
        "segment": 0,
    },
}


def _status(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------- shared helpers


def song_path(directory: Path, song_id: str, suffix: str) -> Path:
    return directory / f"{song_id}{suffix}"


def list_song_ids(data_dir: Path) -> List[str]:
    """Song ids from the manifest when present, else every ``*.btcf`` stem."""
    manifest_path = data_dir / MANIFEST_NAME
    if manifest_path.exists():
        return read_manifest(manifest_path).songs
    ids = sorted(p.stem for p in data_dir.glob("*.btcf"))
    if not ids:
        raise DataError(f"no .btcf feature files in {data_dir}")
    return ids


def load_songs(data_dir: Path, song_ids: List[str]):
    """Read the features and annotation of every song id, both halves required."""
    songs = []
    for song_id in song_ids:
        features_path = song_path(data_dir, song_id, ".btcf")
        lab_path = song_path(data_dir, song_id, ".lab")
        for path in (features_path, lab_path):
            if not path.exists():
                raise MissingCounterpartError(f"song '{song_id}': missing {path.name} in {data_dir}")
        songs.append((song_id, read_btcf(features_path), parse_lab(lab_path)))
    return songs


def inference_segments(S: FeatureMatrix, stats: NormStats) -> List[FeatureSegment]:
    """Log, normalise and cut a song into back-to-back inference windows."""
    normalized = apply_norm(log_compress(S), stats)
    return segment(normalized, np.zeros(normalized.n_frames, dtype=np.int64), mode="infer")


def predict_song(model: BtcModel, S: FeatureMatrix, stats: NormStats) -> np.ndarray:
    """Per-frame vocabulary indices for a whole song."""
    segments = inference_segments(S, stats)
    if not segments:
        return np.zeros(0, dtype=np.int64)
    predicted = predict(np.stack([s.features for s in segments]), model)
    return np.concatenate([p[s.valid] for p, s in zip(predicted, segments)])


# ---------------------------------------------------------------- commands


def run_synth_data(settings: Dict[str, Any], seed: int) -> int:
    """Write synthetic songs and their manifest."""
    validate_required(settings, ["out"])
    validate_vocab(settings["vocab"])
    if settings["songs"] < 1:
        raise DataError(f"--songs must be at least 1, got {settings['songs']}")
    out = Path(settings["out"])
    v = make_vocabulary(settings["vocab"])

    _status(f"📦 Generating {settings['songs']} synthetic {v.kind} songs")
    songs = synth_dataset(settings["songs"], v, settings["noise"], seed, settings["frames"])
    song_ids = [f"song_{i:04d}" for i in range(len(songs))]
    for song_id, (S, track) in zip(song_ids, songs):
        write_btcf(S, song_path(out, song_id, ".btcf"))
        write_lab(track, song_path(out, song_id, ".lab"))
    write_manifest(
        Manifest(seed=seed, vocab=v.kind, noise=settings["noise"], frames=settings["frames"], songs=song_ids),
        out / MANIFEST_NAME,
    )
    _status(f"💾 Wrote {len(song_ids)} songs and {MANIFEST_NAME} to {out}")
    print("✅ Synthetic data ready")
    return 0


def run_train(settings: Dict[str, Any], seed: int) -> int:
    """Split songs, train, and write the checkpoint, stats and epoch log."""
    validate_required(settings, ["data", "out"])
    validate_vocab(settings["vocab"])
    validate_split(settings["val_split"])
    validate_model_flags(
        settings["layers"], settings["heads"], settings["dim"], settings["kernel"],
        settings["dropout"], settings["conv_repeats"],
    )
    train_cfg = TrainConfig(
        lr=settings["lr"],
        decay=settings["decay"],
        patience=settings["patience"],
        batch_size=settings["batch_size"],
        max_epochs=settings["max_epochs"],
        seed=seed,
    )
    train_cfg.validate()

    data_dir = Path(settings["data"])
    out = Path(settings["out"])
    v = make_vocabulary(settings["vocab"])
    song_ids = list_song_ids(data_dir)
    train_ids, val_ids = split_by_song(song_ids, settings["val_split"])
    songs = {song_id: song for song_id, *song in load_songs(data_dir, song_ids)}

    def pick(ids):
        return [(song_id,) + tuple(songs[song_id]) for song_id in ids]

    _status(f"📦 {len(train_ids)} training songs, {len(val_ids)} validation songs")
    train_segments, stats = build_training_set(pick(train_ids), v, augment=settings["augment"])
    val_segments = build_eval_set(pick(val_ids), v, stats)
    _status(f"📦 {len(train_segments)} training segments, {len(val_segments)} validation segments")

    config = BtcConfig(
        n_layers=settings["layers"],
        n_heads=settings["heads"],
        model_dim=settings["dim"],
        conv_repeats=settings["conv_repeats"],
        kernel_size=settings["kernel"],
        dropout=settings["dropout"],
        input_bins=train_segments[0].features.shape[1],
        vocab_size=len(v),
    )
    model = BtcModel.create(config, seed)
    _status(f"🎼 BTC with {parameter_count(config)} parameters")

    log_path = out.with_name(out.name + ".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log_file:

        def log(line: str) -> None:
            print(line)
            log_file.write(line + "\n")
            log_file.flush()

        for key in sorted(settings):
            log_file.write(f"{key}={settings[key]}\n")
        log_file.write(f"seed={seed}\n")
        log_file.write(f"train_songs={','.join(train_ids)}\n")
        log_file.write(f"val_songs={','.join(val_ids)}\n")
        training = fit(model, train_segments, val_segments, train_cfg, log=log)
        log(
            f"✅ best_epoch={training.best_epoch} val_acc={training.best_val_acc:.6f} "
            f"stop={training.stop_reason}"
        )

    stats_path = out.with_name(out.name + ".stats")
    write_checkpoint(model, v.kind, stats, out)
    write_stats(stats, stats_path)
    _status(f"💾 Wrote {out}, {stats_path.name} and {log_path.name}")
    return 0


def run_infer(settings: Dict[str, Any], seed: int) -> int:
    """Predict one song and write its ``.lab`` file."""
    validate_required(settings, ["model", "features", "out"])
    checkpoint = read_checkpoint(settings["model"])
    model = checkpoint.build_model()
    v = make_vocabulary(checkpoint.vocab)
    S = read_btcf(settings["features"], expected_bins=model.config.input_bins)

    indices = predict_song(model, S, checkpoint.stats)
    track = frames_to_track(indices, v, S.sample_rate, S.hop)
    write_lab(track, settings["out"])
    _status(f"💾 Wrote {len(track)} intervals to {settings['out']}")
    print("✅ Inference complete")
    return 0


def run_eval(settings: Dict[str, Any], seed: int) -> int:
    """Score every estimate against its reference and print the report."""
    validate_required(settings, ["ref", "est"])
    validate_vocab(settings["vocab"])
    ref_dir, est_dir = Path(settings["ref"]), Path(settings["est"])
    ref_paths = sorted(ref_dir.glob("*.lab"))
    if not ref_paths:
        raise DataError(f"no reference .lab files in {ref_dir}")

    pairs = []
    for ref_path in ref_paths:
        est_path = est_dir / ref_path.name
        if not est_path.exists():
            raise MissingCounterpartError(f"song '{ref_path.stem}': no estimate {est_path.name} in {est_dir}")
        pairs.append(ScoredPair(parse_lab(ref_path), parse_lab(est_path), ref_path.stem))
    _status(f"📦 Scoring {len(pairs)} songs with the {settings['vocab']} metrics")

    scores = report(pairs, settings["vocab"])
    csv_text = format_csv(scores)
    print(format_table(scores))
    print()
    print(csv_text, end="")
    if settings["csv"]:
        atomic_write(settings["csv"], csv_text.encode("utf-8"))
        _status(f"💾 Wrote {settings['csv']}")
    return 0


def run_export_attention(settings: Dict[str, Any], seed: int) -> int:
    """Dump attention maps for one inference window of a song."""
    validate_required(settings, ["model", "features", "out"])
    checkpoint = read_checkpoint(settings["model"])
    model = checkpoint.build_model()
    layers = parse_layer_selection(settings["layers"], model.config.n_layers)
    S = read_btcf(settings["features"], expected_bins=model.config.input_bins)
    segments = inference_segments(S, checkpoint.stats)
    validate_segment_index(settings["segment"], len(segments))

    maps = attention_maps(segments[settings["segment"]].features, model)
    written = write_attention(maps, settings["out"], layers, pgm=settings["pgm"], combined=settings["combined"])
    n_dumps = sum(1 for p in written if p.suffix == ".txt")
    _status(f"💾 Wrote {n_dumps} attention dumps to {settings['out']}")
    print("✅ Attention export complete")
    return 0


COMMANDS: Dict[str, Callable[[Dict[str, Any], int], int]] = {
    "synth-data": run_synth_data,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "export-attention": run_export_attention,
}


# ---------------------------------------------------------------- argument parsing


def _add_global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", default=default, help="Random seed (falls back to $BTC_SEED, then 0)")
    parser.add_argument("--config", default=default, help="File of key=value lines overriding defaults")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with global options and one subparser per command."""
    parser = argparse.ArgumentParser(prog="btc-chord", description="Bi-directional Transformer chord recognition")
    _add_global_flags(parser, None)
    # Subcommands accept the global flags too without clobbering values given before them.
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", parents=[common], help="Generate synthetic CQT songs with labels")
    p.add_argument("--songs", type=int, help="Number of songs (default 100)")
    p.add_argument("--vocab", help="majmin or large (default majmin)")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma (default 0.1)")
    p.add_argument("--frames", type=int, help=f"Frames per song (default {DEFAULT_SONG_FRAMES})")
    p.add_argument("--out", help="Output directory")

    p = sub.add_parser("train", parents=[common], help="Train a BTC model")
    p.add_argument("--data", help="Directory of .btcf/.lab pairs")
    p.add_argument("--val-split", type=float, help="Fraction of songs held out (default 0.2)")
    p.add_argument("--vocab", help="majmin or large (default majmin)")
    p.add_argument("--out", help="Checkpoint path (.btcw)")
    p.add_argument("--layers", type=int, help="Bi-directional layers N (default 8)")
    p.add_argument("--heads", type=int, help="Attention heads (default 4)")
    p.add_argument("--dim", type=int, help="Model dimension (default 128)")
    p.add_argument("--conv-repeats", type=int, help="Convolutions per block (default 2)")
    p.add_argument("--kernel", type=int, help="Convolution width (default 3)")
    p.add_argument("--dropout", type=float, help="Dropout probability (default 0.2)")
    p.add_argument("--lr", type=float, help="Initial learning rate (default 1e-4)")
    p.add_argument("--decay", type=float, help="Learning-rate decay on non-improving epochs (default 0.95)")
    p.add_argument("--patience", type=int, help="Non-improving epochs before stopping (default 10)")
    p.add_argument("--batch-size", type=int, help="Segments per batch (default 16)")
    p.add_argument("--max-epochs", type=int, help="Epoch limit (default 100)")
    p.add_argument("--augment", action="store_true", default=None, help="Pitch-shift training songs by -5..+6")

    p = sub.add_parser("infer", parents=[common], help="Write a .lab file of predicted chords")
    p.add_argument("--model", help="Checkpoint path")
    p.add_argument("--features", help="Song features (.btcf)")
    p.add_argument("--out", help="Output .lab path")

    p = sub.add_parser("eval", parents=[common], help="Score estimated .lab files against references")
    p.add_argument("--ref", help="Directory of reference .lab files")
    p.add_argument("--est", help="Directory of estimated .lab files")
    p.add_argument("--vocab", help="majmin or large (default majmin)")
    p.add_argument("--csv", help="Also write the CSV report here")

    p = sub.add_parser("export-attention", parents=[common], help="Dump self-attention maps")
    p.add_argument("--model", help="Checkpoint path")
    p.add_argument("--features", help="Song features (.btcf)")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--layers", help="Comma-separated 1-based layers (default all)")
    p.add_argument("--segment", type=int, help="Inference window to export (default 0)")
    p.add_argument("--pgm", action="store_true", default=None, help="Also render graymaps")
    p.add_argument("--combined", action="store_true", default=None, help="Also write forward/backward composites")
    return parser


def resolve_command_settings(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None):
    """Merge defaults, config file and flags, and pick the seed."""
    defaults = COMMAND_DEFAULTS[args.command]
    file_values = load_config_file(args.config, defaults) if args.config else {}
    flag_values = {key: getattr(args, key, None) for key in defaults}
    return resolve_settings(defaults, file_values, flag_values), resolve_seed(args.seed, environ)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        settings, seed = resolve_command_settings(args)
        print_settings(args.command, settings, seed)
        return COMMANDS[args.command](settings, seed)
    except BtcError as e:
        print(f"Error [{e.code}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"Error [IO]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
