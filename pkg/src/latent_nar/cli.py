"""Command-line pipeline.

Usage:
    python -m latent_nar prepare-data  [--config FILE] [--output-dir DIR]
    python -m latent_nar train-teacher [--seed S]
    python -m latent_nar distill       [--beam B]
    python -m latent_nar train-nar     [--no-distill]
    python -m latent_nar translate     --input FILE [--output FILE] [--steps T] [--search] [--trace FILE]
    python -m latent_nar evaluate      [--steps T] [--candidates N] [--temperature X]
    python -m latent_nar report        [--plots] [--limit K]

Every artifact lands in the configured output directory together with a
``manifest_<command>.json``. Exit code 0 on success, 2 for configuration
or missing-artifact errors and 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import time
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .checkpoint import load_nar, load_teacher, save_checkpoint
from .config import ExperimentConfig, apply_overrides, check_paths, config_hash, load_config
from .config_paths import PROJECT_ROOT, ensure_directories
from .corpus import (
    Vocab,
    build_vocab,
    generate_synthetic,
    raw_pairs,
    read_parallel_corpus,
    read_sources,
    write_parallel_corpus,
)
from .errors import ConfigError, MissingArtifactError, TrainingDivergedError
from .evaluation import evaluate, length_adaptation_report, per_step_report, tradeoff_report
from .inference import deterministic_inference, latent_search
from .teacher import distill_corpus, train_teacher
from .training import train_nar

logger = logging.getLogger("latent_nar")
console = Console()

SPLITS = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

class RunPaths:
    """File names inside the output directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.vocab = self.data / "vocab.txt"
        self.teacher = self.root / "teacher.pt"
        self.teacher_metrics = self.root / "teacher_metrics.jsonl"
        self.distilled = self.root / "distilled.tsv"
        self.eval_dir = self.root / "eval"
        self.report_dir = self.root / "report"
        self.figures = self.report_dir / "figures"

    def split(self, name: str) -> Path:
        return self.data / f"{name}.tsv"

    def nar(self, distilled: bool = True) -> Path:
        return self.root / ("nar.pt" if distilled else "nar_raw.pt")

    def nar_metrics(self, distilled: bool = True) -> Path:
        return self.root / ("nar_metrics.jsonl" if distilled else "nar_raw_metrics.jsonl")

    def manifest(self, command: str) -> Path:
        return self.root / f"manifest_{command}.json"


def git_version() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=PROJECT_ROOT, capture_output=True, text=True, timeout=5, check=True,
        )
        return result.stdout.strip() or __version__
    except (OSError, subprocess.SubprocessError):
        return __version__


def write_manifest(paths: RunPaths, command: str, config: ExperimentConfig, started: float,
                   artifacts: dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.schedule.seed,
        "inference_seed": config.inference.seed,
        "data_seed": config.data.seed,
        "version": git_version(),
        "started": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": {name: str(path) for name, path in artifacts.items()},
    }
    out = paths.manifest(command)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return out


def prepare_data(config: ExperimentConfig, paths: RunPaths) -> dict[str, Path]:
    """Write the three splits and the vocabulary into the output directory."""
    data = config.data
    if data.synthetic:
        sizes = {"train": data.train_size, "valid": data.valid_size, "test": data.test_size}
        splits = {name: generate_synthetic(data.task_spec(i), sizes[name]) for i, name in enumerate(SPLITS)}
    else:
        splits = {name: read_parallel_corpus(p) for name, p in check_paths(config).items()}

    artifacts = {}
    for name in SPLITS:
        write_parallel_corpus(splits[name], paths.split(name))
        artifacts[name] = paths.split(name)
    vocab = build_vocab(raw_pairs(splits["train"]), min_count=data.min_count)
    vocab.save(paths.vocab)
    artifacts["vocab"] = paths.vocab
    logger.info("prepared %s pairs, vocabulary of %d",
                "/".join(str(len(splits[s])) for s in SPLITS), len(vocab))
    return artifacts


def load_split(config: ExperimentConfig, paths: RunPaths, name: str):
    """Vocabulary and id-encoded pairs of one split; prepares data on first use."""
    if not paths.vocab.exists() or not paths.split(name).exists():
        logger.info("data not prepared yet; running prepare-data")
        prepare_data(config, paths)
    vocab = Vocab.load(paths.vocab)
    return vocab, vocab.encode_pairs(read_parallel_corpus(paths.split(name)))


def _require(path: Path, what: str, command: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(what, path, command)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare_data(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    return prepare_data(config, paths)


def cmd_train_teacher(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    vocab, pairs = load_split(config, paths, "train")
    model = train_teacher(pairs, len(vocab), config.teacher, seed=config.schedule.seed,
                          metrics_path=paths.teacher_metrics, show_progress=args.progress)
    save_checkpoint(model, "teacher", paths.teacher, meta={"config_hash": config_hash(config)})
    return {"checkpoint": paths.teacher, "metrics": paths.teacher_metrics}


def cmd_distill(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    teacher = load_teacher(_require(paths.teacher, "teacher checkpoint", "train-teacher"))
    vocab, pairs = load_split(config, paths, "train")
    distilled, dropped = distill_corpus(teacher, pairs, config.inference.beam_size, show_progress=args.progress)
    write_parallel_corpus(vocab.decode_pairs(distilled), paths.distilled)
    logger.info("distilled %d pairs (%d dropped) with beam %d", len(distilled), dropped, config.inference.beam_size)
    return {"distilled": paths.distilled}


def cmd_train_nar(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    distilled = not args.no_distill
    vocab, pairs = load_split(config, paths, "train")
    if distilled:
        _require(paths.distilled, "distilled corpus", "distill")
        pairs = vocab.encode_pairs(read_parallel_corpus(paths.distilled))
    _, valid = load_split(config, paths, "valid")
    model = train_nar(
        pairs, len(vocab), config.model, config.schedule,
        seed=config.schedule.seed,
        metrics_path=paths.nar_metrics(distilled),
        valid_pairs=valid,
        show_progress=args.progress,
    )
    meta = {"config_hash": config_hash(config), "distilled": distilled}
    save_checkpoint(model, "nar", paths.nar(distilled), meta=meta)
    return {"checkpoint": paths.nar(distilled), "metrics": paths.nar_metrics(distilled)}


def cmd_translate(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    if args.input is None:
        raise ConfigError("translate.input", "--input is required")
    if not args.input.is_file():
        raise ConfigError("translate.input", f"file not found: {args.input}")
    model = load_nar(_require(paths.nar(not args.no_distill), "model checkpoint", "train-nar"))
    vocab = Vocab.load(_require(paths.vocab, "vocabulary", "prepare-data"))
    teacher = load_teacher(_require(paths.teacher, "teacher checkpoint", "train-teacher")) if args.search else None
    inf = config.inference
    output = Path(args.output) if args.output else paths.root / "translations.txt"

    lines, trace_rows = [], []
    for i, tokens in enumerate(read_sources(Path(args.input))):
        x = vocab.encode(tokens)
        if teacher is not None:
            y = latent_search(model, teacher, x, inf.candidates, inf.temperature, inf.steps, inf.seed)
        else:
            samples = config.evaluation.elbo_samples if args.trace else 0
            y, trace = deterministic_inference(model, x, inf.steps, elbo_samples=samples, seed=inf.seed)
            if args.trace:
                for row in trace.to_records():
                    row["tokens"] = " ".join(vocab.decode(row["tokens"]))
                    trace_rows.append({"sentence": i, **row})
        lines.append(" ".join(vocab.decode(y)))

    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    artifacts = {"translations": output}
    if args.trace:
        trace_path = Path(args.trace)
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(trace_rows).to_json(trace_path, orient="records", lines=True)
        artifacts["trace"] = trace_path
    logger.info("translated %d sentences to %s", len(lines), output)
    return artifacts


def _limited(pairs, limit):
    return pairs if not limit else pairs[:limit]


def cmd_evaluate(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    model = load_nar(_require(paths.nar(not args.no_distill), "model checkpoint", "train-nar"))
    teacher = load_teacher(_require(paths.teacher, "teacher checkpoint", "train-teacher"))
    vocab, test = load_split(config, paths, "test")
    report = evaluate(model, teacher, _limited(test, args.limit), vocab, config.inference,
                      config.evaluation, show_progress=args.progress)
    written = report.save(paths.eval_dir)

    table = Table(title=f"Evaluation on {len(_limited(test, args.limit))} test pairs")
    for column in ("system", "BLEU", "exact match", "latency ms (std)", "speedup"):
        table.add_column(column, justify="right" if column != "system" else "left")
    for s in report.systems:
        table.add_row(s.name, f"{s.bleu:.2f}", f"{s.exact_match:.1f}%",
                      f"{s.latency_mean_ms:.2f} ({s.latency_std_ms:.2f})", f"{s.speedup:.2f}x")
    console.print(table)
    return written


def cmd_report(config: ExperimentConfig, args, paths: RunPaths) -> dict[str, Path]:
    model = load_nar(_require(paths.nar(not args.no_distill), "model checkpoint", "train-nar"))
    teacher = load_teacher(_require(paths.teacher, "teacher checkpoint", "train-teacher"))
    vocab, test = load_split(config, paths, "test")
    test = _limited(test, args.limit)
    inf, ev = config.inference, config.evaluation

    per_step = per_step_report(model, test, ev.report_steps, ev.elbo_samples, inf.seed, vocab,
                               show_progress=args.progress)
    tradeoff = tradeoff_report(model, teacher, test, ev.candidate_counts, inf.steps, inf.seed,
                               inf.temperature, inf.beam_size, vocab, ev, show_progress=args.progress)
    lengths = length_adaptation_report(model, test, max(ev.report_steps, 1), show_progress=args.progress)
    paths.report_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {"per_step": paths.report_dir / "per_step.csv", "tradeoff": paths.report_dir / "tradeoff.csv",
                 "length_adaptation": paths.report_dir / "length_adaptation.csv"}
    per_step.to_csv(artifacts["per_step"], index=False)
    tradeoff.to_csv(artifacts["tradeoff"], index=False)
    lengths.to_csv(artifacts["length_adaptation"], index=False)

    if args.plots:
        from .plots import plot_refinement_steps, plot_tradeoff, plot_training_curves

        artifacts["refinement_plot"] = plot_refinement_steps(per_step, paths.figures)
        artifacts["tradeoff_plot"] = plot_tradeoff(tradeoff, paths.figures)
        metrics_path = paths.nar_metrics(not args.no_distill)
        if metrics_path.exists():
            metrics = pd.read_json(metrics_path, lines=True)
            artifacts["training_plot"] = plot_training_curves(metrics, paths.figures)

    table = Table(title="Refinement steps")
    for column in per_step.columns:
        table.add_column(column, justify="right")
    for row in per_step.itertuples(index=False):
        table.add_row(*(f"{v:.3f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)
    return artifacts


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-nar": cmd_train_nar,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI file overriding the profile")
    common.add_argument("--profile", choices=("desk", "full"), default="desk")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--steps", type=int, default=None, help="refinement steps T")
    common.add_argument("--candidates", type=int, default=None, help="latent-search candidates N")
    common.add_argument("--temperature", type=float, default=None)
    common.add_argument("--beam", type=int, default=None, help="teacher beam size")
    common.add_argument("--no-distill", action="store_true", help="use the model trained on raw targets")
    common.add_argument("--output-dir", type=Path, default=None)
    common.add_argument("--limit", type=int, default=0, help="evaluate on the first K test pairs only")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="latent_nar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name == "translate":
            cmd.add_argument("--input", type=Path, default=None)
            cmd.add_argument("--output", type=Path, default=None)
            cmd.add_argument("--trace", type=Path, default=None, help="JSONL dump of refinement steps")
            cmd.add_argument("--search", action="store_true", help="latent search with teacher rescoring")
        if name == "report":
            cmd.add_argument("--plots", action="store_true", help="render figures")
    return parser


def setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False))
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    started = time.time()
    try:
        config = load_config(args.config, args.profile)
        config = apply_overrides(
            config,
            seed=args.seed, steps=args.steps, candidates=args.candidates,
            temperature=args.temperature, beam=args.beam, output_dir=args.output_dir,
        )
        check_paths(config)
        paths = RunPaths(config.output_path)
        ensure_directories(paths.root)
        logger.info("%s | profile %s | config %s", args.command, config.profile, config_hash(config)[:12])
        artifacts = COMMANDS[args.command](config, args, paths)
        manifest = write_manifest(paths, args.command, config, started, artifacts)
        logger.info("wrote %s", manifest)
    except (ConfigError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2
    except (TrainingDivergedError, ValueError, RuntimeError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0
