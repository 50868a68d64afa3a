"""``ddnet`` command line: synth, train, eval, gradcheck, sweep-tau.

Every command validates the merged configuration before doing any work,
creates one run directory ``<out>/<timestamp>-s<seed>/`` and echoes the
resolved configuration into it as ``config.json``.

Exit codes: 0 success, 1 validation error, 2 numerical failure or failed
gradient check, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path

from .config import ConfigError, RunConfig
from .data import DatasetManifest, FeatureFormatError, FeatureSequence, synthesize_dataset, synthesize_split
from .evaluation import EvalReport, Segment, gt_segments, write_predictions_csv
from .gradcheck import GradCheckError, format_reports
from .model import Batch, DDNet
from .plotting import plot_metrics, plot_pr_curves, plot_tau_sweep
from .tensor import NumericalError
from .training import (
    METRIC_COLUMNS,
    Checkpoint,
    TrainingError,
    evaluate_model,
    gradcheck_groups,
    model_from_checkpoint,
    train,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
PAPER_TAUS = (0.1, 0.3, 0.5, 0.7, 0.9)
SWEEP_COLUMNS = ["tau", "AP50", "AP75", "AP95", "mAP"]

log = logging.getLogger("ddnet")


class UsageError(Exception):
    pass


class DataIOError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run scaffolding ----------------------------------------------------------

def make_run_dir(out: Path, seed: int) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = out / f"{stamp}-s{seed}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


@contextmanager
def run_logging(log_file: Path | None, console: bool = True):
    """Route the ``ddnet`` logger to the console and a per-run file, replacing any previous handlers.

    Replacing (not adding) keeps sweep workers, forked or in-process, from
    writing into the parent run's log.
    """
    handlers = []
    if console:
        h = logging.StreamHandler(sys.stdout)
        h.setFormatter(logging.Formatter("%(message)s"))
        handlers.append(h)
    if log_file is not None:
        h = logging.FileHandler(log_file)
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        handlers.append(h)
    saved = log.handlers[:], log.level, log.propagate
    log.handlers = handlers
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        yield
    finally:
        for h in handlers:
            h.close()
        log.handlers, level, log.propagate = saved
        log.setLevel(level)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for text in args.override or ():
        cfg.apply_override(text)
    if args.seed is not None:
        if args.command == "synth":
            cfg.synth.seed = args.seed
        else:
            cfg.train.seed = args.seed
    if getattr(args, "videos", None) is not None:
        if args.videos < 0:
            raise ConfigError("--videos must be >= 0")
        cfg.synth.n_train = args.videos
        cfg.synth.n_val = args.videos // 4
        cfg.synth.n_test = 0
    cfg.validate()
    return cfg


def thread_cap() -> int:
    raw = os.environ.get("DDNET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DDNET_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("DDNET_THREADS must be >= 1")
    return n


# -- data -----------------------------------------------------------------------

def load_split(cfg: RunConfig, split: str) -> list[FeatureSequence]:
    """A split from ``cfg.data_dir`` if set, otherwise synthesised in memory from ``cfg.synth``."""
    if cfg.data_dir is None:
        n = {"train": cfg.synth.n_train, "val": cfg.synth.n_val, "test": cfg.synth.n_test}[split]
        return synthesize_split(cfg.synth, split, n)
    path = Path(cfg.data_dir) / f"{split}.json"
    try:
        manifest = DatasetManifest.load(path)
        seqs = manifest.load_sequences()
    except (OSError, FeatureFormatError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    m = cfg.model
    mismatch = [k for k in ("D_sem", "D_tex", "K") if getattr(manifest, k) != getattr(m, k)]
    if mismatch:
        raise ConfigError(f"dataset {path} disagrees with model config on {mismatch}")
    if manifest.T_max > m.T_max:
        raise ConfigError(f"dataset T_max={manifest.T_max} exceeds model T_max={m.T_max}")
    return seqs


def _segments(report: EvalReport) -> list[Segment]:
    return [Segment(a, b, s, vid) for vid, segs in report.segments.items() for a, b, s in segs]


def _gts(seqs) -> list[Segment]:
    return [g for s in seqs for g in gt_segments(s.frame_labels, s.video_id)]


def _write_report(run_dir: Path, report: EvalReport, seqs, thresholds) -> None:
    report.save(run_dir / "report.json")
    write_predictions_csv(report, run_dir / "predictions.csv")
    plot_pr_curves(_segments(report), _gts(seqs), thresholds, run_dir / "pr_curves.png")


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, run_dir: Path, args) -> int:
    manifests = synthesize_dataset(cfg.synth, run_dir / "data")
    total = sum(len(m.entries) for m in manifests.values())
    if total == 0:
        log.warning("warning: configuration produced 0 videos; manifests are empty")
    for split, m in manifests.items():
        n = len(m.entries)
        forged = sum(e.video_label for e in m.entries)
        domains = sorted({e.domain_id for e in m.entries})
        log.info(f"{split:<5} videos={n:<5d} forged={forged:<5d} domains={domains} (K={m.K})")
    log.info(f"dataset written to {run_dir / 'data'}")
    return EXIT_OK


def _epoch_line(total_epochs: int, steps_per_epoch: int):
    def emit(row: dict) -> None:
        ep = -(-row["step"] // steps_per_epoch)
        msg = f"epoch {ep:>3d}/{total_epochs} step {row['step']:>6d} loss {row['L_total']:.4f}"
        if row.get("val_AP50") is not None:
            msg += f"  AP50 {row['val_AP50']:.4f} AP75 {row['val_AP75']:.4f} AP95 {row['val_AP95']:.4f}"
        log.info(msg)
    return emit


def run_training(cfg: RunConfig, run_dir: Path, resume: Checkpoint | None = None) -> EvalReport:
    tr, va = load_split(cfg, "train"), load_split(cfg, "val")
    if not tr:
        raise ConfigError("training split is empty")
    metrics = run_dir / "metrics.csv"
    if resume is not None:
        # train() only writes the header for fresh runs
        with open(metrics, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)
    spe = -(-len(tr) // cfg.train.batch_size)
    t0 = time.perf_counter()
    result = train(tr, va, cfg.model, cfg.train, cfg.eval, resume=resume, metrics_path=metrics,
                   on_epoch=_epoch_line(cfg.train.epochs, spe))
    log.info(f"trained {result.step} steps in {time.perf_counter() - t0:.1f} s")
    result.checkpoint(cfg.train).save(run_dir / "checkpoint.ddck")
    if metrics.stat().st_size and len(result.history):
        plot_metrics(metrics)
    report = result.last_report if result.last_report is not None else evaluate_model(result.model, va, cfg.eval)
    _write_report(run_dir, report, va, cfg.eval.thresholds)
    return report


def _read_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_train(cfg: RunConfig, run_dir: Path, args) -> int:
    resume = None
    if args.checkpoint:
        resume = _read_checkpoint(args.checkpoint)
        if resume.config.get("model") != json.loads(json.dumps(dataclasses.asdict(cfg.model))):
            raise ConfigError("checkpoint model config differs from the requested config")
        log.info(f"resuming from step {resume.step}")
    report = run_training(cfg, run_dir, resume)
    log.info(report.table())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, run_dir: Path, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ckpt = _read_checkpoint(args.checkpoint)
    try:
        model = model_from_checkpoint(ckpt)
    except (KeyError, TypeError) as exc:
        raise DataIOError(f"checkpoint {args.checkpoint} has a malformed config: {exc}") from exc
    cfg.model = model.cfg
    seqs = load_split(cfg, args.split)
    report = evaluate_model(model, seqs, cfg.eval)
    _write_report(run_dir, report, seqs, cfg.eval.thresholds)
    log.info(report.table())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, run_dir: Path, args) -> int:
    seqs = load_split(cfg, "train")[: args.batch]
    if not seqs:
        raise ConfigError("gradcheck needs at least one training video")
    model = DDNet(cfg.model, seed=cfg.train.seed)
    t0 = time.perf_counter()
    reports = gradcheck_groups(model, Batch.from_sequences(seqs), cfg.train.weights, h=args.h, tol=args.tol,
                               sample=args.sample or None, seed=cfg.train.seed)
    table = format_reports(reports)
    elapsed = time.perf_counter() - t0
    (run_dir / "gradcheck.txt").write_text(f"{table}\n({elapsed:.1f} s)\n")
    log.info(table)
    log.info(f"({elapsed:.1f} s)")
    if not all(r.passed for r in reports):
        worst = max(reports, key=lambda r: r.max_rel_error)
        log.error(f"gradient check failed: worst tensor {worst.worst_param} rel err {worst.max_rel_error:.3e}")
        return EXIT_NUMERICAL
    return EXIT_OK


def _sweep_one(job: tuple[dict, float, str]) -> dict:
    cfg_dict, tau, sub = job
    cfg = RunConfig.from_dict(cfg_dict)
    cfg.model.tau = tau
    cfg.validate()
    sub_dir = Path(sub)
    sub_dir.mkdir(parents=True, exist_ok=True)
    (sub_dir / "config.json").write_text(cfg.echo() + "\n")
    with run_logging(sub_dir / "train.log", console=False):
        report = run_training(cfg, sub_dir)
    return {"tau": tau, "AP50": report.ap["0.5"], "AP75": report.ap["0.75"], "AP95": report.ap["0.95"],
            "mAP": report.mAP}


def parse_taus(tokens) -> list[float]:
    taus = []
    for tok in tokens:
        for part in str(tok).split(","):
            if part.strip():
                try:
                    taus.append(float(part))
                except ValueError:
                    raise ConfigError(f"bad tau value {part!r}") from None
    if not taus:
        raise ConfigError("empty tau list")
    bad = [t for t in taus if not -1 < t < 1]
    if bad:
        raise ConfigError(f"tau values must lie in (-1, 1): {bad}")
    return taus


def cmd_sweep_tau(cfg: RunConfig, run_dir: Path, args) -> int:
    taus = parse_taus(args.tau_list)
    if not {"0.5", "0.75", "0.95"} <= {f"{t:g}" for t in cfg.eval.thresholds}:
        raise ConfigError("sweep-tau reports AP at 0.5, 0.75 and 0.95; keep them in eval.thresholds")
    workers = min(thread_cap(), len(taus))
    jobs = [(cfg.to_dict(), t, str(run_dir / f"tau_{t:g}")) for t in taus]
    log.info(f"sweeping tau over {taus} with {workers} worker(s)")
    if workers == 1:
        rows = []
        for job in jobs:
            rows.append(_sweep_one(job))
            log.info(_sweep_line(rows[-1]))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
        for r in rows:
            log.info(_sweep_line(r))
    out = run_dir / "tau_sweep.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([f"{r['tau']:g}"] + [repr(float(r[k])) for k in SWEEP_COLUMNS[1:]])
    plot_tau_sweep(out)
    log.info(f"wrote {out}")
    return EXIT_OK


def _sweep_line(r: dict) -> str:
    return f"tau {r['tau']:<5g} AP50 {r['AP50']:.4f} AP75 {r['AP75']:.4f} AP95 {r['AP95']:.4f} mAP {r['mAP']:.4f}"


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "sweep-tau": cmd_sweep_tau}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="data seed for synth, training seed otherwise")
    common.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run directories")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted config key, e.g. train.epochs=5 (repeatable)")

    p = _Parser(prog="ddnet", description="Temporal forgery localisation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--videos", type=int, help="training videos (validation gets a quarter as many)")
    t = sub.add_parser("train", parents=[common], help="train and evaluate on the validation split")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the training loss")
    g.add_argument("--batch", type=int, default=2, help="videos in the checked batch")
    g.add_argument("--sample", type=int, default=8, help="elements checked per tensor, 0 for all")
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-4)
    w = sub.add_parser("sweep-tau", parents=[common], help="train one model per semantic threshold")
    w.add_argument("--tau-list", nargs="+", default=[",".join(f"{t:g}" for t in PAPER_TAUS)],
                   help="values in (-1, 1), space or comma separated")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = resolve_config(args)
        if args.command == "gradcheck" and (args.batch < 1 or args.sample < 0 or args.h <= 0):
            raise ConfigError("gradcheck needs --batch >= 1, --sample >= 0 and --h > 0")
        if args.command == "sweep-tau":
            parse_taus(args.tau_list)
            thread_cap()
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    seed = cfg.synth.seed if args.command == "synth" else cfg.train.seed
    try:
        run_dir = make_run_dir(args.out, seed)
        (run_dir / "config.json").write_text(cfg.echo() + "\n")
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    with run_logging(run_dir / f"{args.command}.log"):
        log.info(f"run directory {run_dir}")
        try:
            return COMMANDS[args.command](cfg, run_dir, args)
        except ConfigError as exc:
            log.error(f"config error: {exc}")
            return EXIT_VALIDATION
        except (TrainingError, NumericalError, GradCheckError) as exc:
            log.error(f"numerical failure: {exc}")
            return EXIT_NUMERICAL
        except (DataIOError, OSError) as exc:
            log.error(f"I/O error: {exc}")
            return EXIT_IO
        except ValueError as exc:
            log.error(f"validation error: {exc}")
            return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
