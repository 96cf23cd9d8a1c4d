"""``sepforge`` command line: synth, train, eval, probe-layers, compare.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort
(non-finite loss, unreadable audio, I/O failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SPLITS, ConfigError, ExperimentConfig, load_config
from .separator import CheckpointError, Separator, load_checkpoint, save_checkpoint
from .signal import MixtureExample, SignalError, read_wav, synth_mixture, synth_sparse_mixture, write_wav
from .training import (
    CSV_HEADER,
    TrainingAborted,
    TrainState,
    epoch_rows,
    evaluate_examples,
    new_state,
    probe_layers,
    score_example,
    train,
)

logger = logging.getLogger("sepforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad arguments or a refused operation; maps to exit code 1."""


# ---------------------------------------------------------------------------
# datasets


def synth_split(cfg: ExperimentConfig, split: str) -> list[MixtureExample]:
    """Generate one split in memory; every split draws from its own seed stream."""
    synth = cfg.data.synth
    gen = synth.generator(cfg.seed)
    rng = cfg.data_rng(split)
    if split == "sparse":
        return [
            synth_sparse_mixture(gen, ratio, rng)
            for ratio in synth.sparse_ratios
            for _ in range(synth.num_sparse)
        ]
    return [synth_mixture(gen, rng) for _ in range(synth.split_size(split))]


def write_manifest(examples: Sequence[MixtureExample], root: Path, split: str) -> Path:
    """Write float32 WAVs under ``root/split`` and a JSON-lines manifest ``root/split.jsonl``."""
    (root / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for k, ex in enumerate(examples):
        mix = f"{split}/{k:05d}_mix.wav"
        write_wav(root / mix, ex.mixture)
        srcs = []
        for j, s in enumerate(ex.sources, start=1):
            srcs.append(f"{split}/{k:05d}_s{j}.wav")
            write_wav(root / srcs[-1], s)
        lines.append(json.dumps({"mixture": mix, "sources": srcs, "overlap_ratio": ex.overlap_ratio}))
    path = root / f"{split}.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_manifest(path) -> list[MixtureExample]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest {path} not found")
    examples = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            mix = read_wav(path.parent / rec["mixture"])
            sources = [read_wav(path.parent / s) for s in rec["sources"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{path}:{n}: malformed manifest record ({exc})") from None
        examples.append(MixtureExample(mix, tuple(sources), overlap_ratio=rec.get("overlap_ratio")))
    if not examples:
        raise UsageError(f"manifest {path} is empty")
    return examples


def load_split(cfg: ExperimentConfig, split: str) -> list[MixtureExample]:
    if cfg.data.dataset_dir is None:
        return synth_split(cfg, split)
    return read_manifest(Path(cfg.data.dataset_dir) / f"{split}.jsonl")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to write into it anyway")
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict[str, Path]:
    _prepare_out(out, force)
    manifests = {}
    for split in SPLITS:
        examples = synth_split(cfg, split)
        if examples:
            manifests[split] = write_manifest(examples, out, split)
            logger.info("wrote %d %s mixtures", len(examples), split)
    return manifests


# ---------------------------------------------------------------------------
# training


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in CSV_HEADER])


def _save(path: Path, model: Separator, state: TrainState, cfg: ExperimentConfig, kind: str) -> None:
    meta = {"kind": kind, "config": cfg.to_dict(), "state": state.scalars()}
    save_checkpoint(path, model, state.arrays(), meta)


def cmd_train(
    cfg: ExperimentConfig,
    out: Path,
    force: bool = False,
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainState:
    """Train, writing best.ckpt, last.ckpt, metrics.csv and resolved_config.json into ``out``."""
    if resume:
        last = out / "last.ckpt"
        if not last.is_file():
            raise UsageError(f"nothing to resume: {last} does not exist")
        model, extra, meta = load_checkpoint(last)
        if meta.get("config") != cfg.to_dict():
            raise UsageError("the config differs from the one the checkpoint was trained with")
        state = TrainState.restore(meta["state"], extra)
    else:
        _prepare_out(out, force)
        model = Separator.init(cfg.model, cfg.init_rng())
        state = new_state(cfg.train_seed(), cfg.training.lr)
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    train_set = load_split(cfg, "train")
    val_set = load_split(cfg, "val")

    def on_epoch_end(model: Separator, state: TrainState) -> None:
        losses = [r["val_loss"] for r in epoch_rows(state)]
        if losses[-1] <= min(losses):
            _save(out / "best.ckpt", model, state, cfg, "best")
        _save(out / "last.ckpt", model, state, cfg, "last")
        write_metrics(state.log, out / "metrics.csv")

    try:
        train(model, train_set, val_set, cfg.training, state=state, on_epoch_end=on_epoch_end, stop_after_epoch=stop_after)
    except TrainingAborted:
        write_metrics(state.log, out / "metrics.csv")
        raise
    write_metrics(state.log, out / "metrics.csv")
    return state


# ---------------------------------------------------------------------------
# evaluation


def _oracle_rows(examples: Sequence[MixtureExample], oracle: str) -> list[dict]:
    rows = []
    for ex in examples:
        src = ex.source_matrix()
        mix = ex.mixture.samples
        est = src if oracle == "sources" else np.stack([mix] * len(src))
        rows.append(score_example(est, src, mix))
    return rows


def cmd_eval(
    manifest: Path,
    out: Path,
    checkpoint: Path | None = None,
    oracle: str | None = None,
    early_break: int | None = None,
    group_by_overlap: bool = False,
) -> float:
    """Write eval.csv (per example plus a mean row); returns the mean SI-SDRi."""
    examples = read_manifest(manifest)
    if oracle is not None:
        rows = _oracle_rows(examples, oracle)
    else:
        model, _, _ = load_checkpoint(checkpoint)
        if model.cfg.separator.n_sources != examples[0].num_sources:
            raise UsageError(
                f"model separates {model.cfg.separator.n_sources} sources, manifest has {examples[0].num_sources}"
            )
        rows = evaluate_examples(model, examples, early_break)
    out.mkdir(parents=True, exist_ok=True)
    mean = float(np.mean([r["si_sdri"] for r in rows]))
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["example", "si_sdri", "loss", "permutation", "overlap_ratio"])
        for k, (r, ex) in enumerate(zip(rows, examples)):
            perm = " ".join(str(j) for j in r["permutation"])
            writer.writerow([k, _fmt(r["si_sdri"]), _fmt(r["loss"]), perm, _fmt(ex.overlap_ratio)])
        writer.writerow(["mean", _fmt(mean), _fmt(float(np.mean([r["loss"] for r in rows]))), "", ""])
    if group_by_overlap:
        groups: dict[float, list[float]] = {}
        for r, ex in zip(rows, examples):
            if ex.overlap_ratio is None:
                raise UsageError("--group-by-overlap needs manifest records with an overlap_ratio")
            groups.setdefault(ex.overlap_ratio, []).append(r["si_sdri"])
        with open(out / "eval_by_overlap.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["overlap_ratio", "count", "si_sdri"])
            for ratio in sorted(groups):
                writer.writerow([_fmt(ratio), len(groups[ratio]), _fmt(float(np.mean(groups[ratio])))])
    return mean


def cmd_probe_layers(checkpoint: Path, manifest: Path, out: Path) -> list[tuple[int, float]]:
    model, _, _ = load_checkpoint(checkpoint)
    rows = probe_layers(model, read_manifest(manifest))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "layers.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer_index", "si_sdri"])
        for i, v in rows:
            writer.writerow([i, _fmt(v)])
    return rows


def epochs_to_threshold(state: TrainState, threshold: float) -> int | None:
    for r in epoch_rows(state):
        if r["val_sisdri"] > threshold:
            return r["epoch"]
    return None


def cmd_compare(configs: Sequence[ExperimentConfig], out: Path, force: bool = False, threshold: float = 5.0) -> dict:
    """Train two configs on the same data and seed; write compare.csv and summary.csv."""
    a, b = configs
    if a.to_dict()["data"] != b.to_dict()["data"] or a.seed != b.seed:
        raise UsageError("compare needs both configs to share the data section and the seed")
    _prepare_out(out, force)
    states = {}
    for name, cfg in (("a", a), ("b", b)):
        states[name] = cmd_train(cfg, out / name, force=force)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "epoch", "step", "val_loss", "val_sisdri", "lr"])
        for name, state in states.items():
            for r in epoch_rows(state):
                writer.writerow([name, r["epoch"], r["step"], _fmt(r["val_loss"]), _fmt(r["val_sisdri"]), _fmt(r["lr"])])
    summary = {}
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "hct", "head", "final_val_sisdri", "best_val_loss", "epochs_to_threshold"])
        for (name, state), cfg in zip(states.items(), (a, b)):
            rows = epoch_rows(state)
            reach = epochs_to_threshold(state, threshold)
            summary[name] = {"final_val_sisdri": rows[-1]["val_sisdri"], "epochs_to_threshold": reach}
            writer.writerow([
                name,
                "on" if cfg.training.hct.enabled else "off",
                cfg.model.separator.head,
                _fmt(rows[-1]["val_sisdri"]),
                _fmt(min(r["val_loss"] for r in rows)),
                "" if reach is None else reach,
            ])
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepforge", description="Desk-scale time-domain speech separation.")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("synth", help="write a toy dataset of WAV files and manifests")
    common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--out", type=Path, help="run directory (default: the config's output_dir)")
    p.add_argument("--hct", type=_on_off, help="hierarchical constraint training on|off")
    p.add_argument("--head", choices=("masking", "mapping"))
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop once this many epochs are done")

    p = sub.add_parser("eval", help="per-example and mean SI-SDRi on a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", choices=("sources", "mixture"), help="score reference estimates instead of a model")
    p.add_argument("--early-break", type=int, help="stop the separator after this many blocks")
    p.add_argument("--group-by-overlap", action="store_true", help="also write eval_by_overlap.csv")

    p = sub.add_parser("probe-layers", help="SI-SDRi after each separator block")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("compare", help="train two configs on shared data and seed and summarize")
    p.add_argument("--config", type=Path, action="append", required=True, help="give exactly twice")
    p.add_argument("--seed", type=int, help="override both configs' root seed")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threshold", type=float, default=5.0, help="SI-SDRi (dB) for the epochs-to-threshold column")
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "synth":
        cfg = load_config(args.config, check_paths=False).with_overrides(seed=args.seed)
        cmd_synth(cfg, args.out, args.force)
    elif args.command == "train":
        cfg = load_config(args.config).with_overrides(seed=args.seed, hct=args.hct, head=args.head)
        out = args.out or (Path(cfg.output_dir) if cfg.output_dir else None)
        if out is None:
            raise UsageError("no output directory: pass --out or set output_dir in the config")
        if args.stop_after is not None and args.stop_after < 1:
            raise UsageError("--stop-after must be positive")
        state = cmd_train(cfg, out, force=args.force, resume=args.resume, stop_after=args.stop_after)
        rows = epoch_rows(state)
        if rows:
            print(f"epoch {rows[-1]['epoch']} val_loss {rows[-1]['val_loss']:.4f} val_sisdri {rows[-1]['val_sisdri']:.3f}")
    elif args.command == "eval":
        if args.oracle is not None and args.early_break is not None:
            raise UsageError("--early-break applies to a checkpoint, not an oracle")
        mean = cmd_eval(args.manifest, args.out, args.checkpoint, args.oracle, args.early_break, args.group_by_overlap)
        print(f"mean si_sdri {mean:.4f}")
    elif args.command == "probe-layers":
        for i, v in cmd_probe_layers(args.checkpoint, args.manifest, args.out):
            print(f"layer {i} si_sdri {v:.4f}")
    elif args.command == "compare":
        if len(args.config) != 2:
            raise UsageError("compare takes exactly two --config files")
        configs = [load_config(p).with_overrides(seed=args.seed) for p in args.config]
        for name, s in cmd_compare(configs, args.out, args.force, args.threshold).items():
            print(f"{name}: final val_sisdri {s['final_val_sisdri']:.3f}, epochs to threshold {s['epochs_to_threshold']}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"sepforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, SignalError, OSError) as exc:
        print(f"sepforge: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"sepforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
