"""``gaitscore`` command-line entry point: synth, pretrain, train, eval, score."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import contrastive as C
from . import encoder as E
from . import pipeline as P
from .config import ConfigError, RunConfig, load_config, lock_text, write_lock
from .data_io import FormatError, read_ntu_dir, read_recording_dir, write_recording_jsonl
from .synth import generate, oracle_score

logger = logging.getLogger("gaitscore")

EXIT_OK, EXIT_OTHER, EXIT_IO, EXIT_INSUFFICIENT, EXIT_MISSING, EXIT_INVALID = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"usage error: {message}", EXIT_OTHER)


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("GAITSCORE_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise CliError(f"GAITSCORE_THREADS must be an integer, got {env!r}", EXIT_OTHER) from None
    else:
        value = flag if flag is not None else (os.cpu_count() or 1)
    if value < 1:
        raise CliError(f"thread count must be >= 1, got {value}", EXIT_OTHER)
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"fraction {value} is outside (0, 1)")
    return value


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_recordings(cfg: RunConfig, directory, need_labels: bool):
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"data directory {directory} does not exist", EXIT_IO)
    if cfg.data.format == "ntu":
        recs = read_ntu_dir(directory, cfg.data.joint_map(), cfg.data.ntu_fps)
    else:
        recs = read_recording_dir(directory)
    seen = set()
    for rec in recs:
        if rec.subject_id in seen:
            raise CliError(f"duplicate subject id {rec.subject_id!r} in {directory}", EXIT_INVALID)
        seen.add(rec.subject_id)
        if need_labels and rec.step_labels is None:
            raise CliError(f"recording {rec.subject_id!r} has no step labels", EXIT_INVALID)
    return recs


def _load_params(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found", EXIT_MISSING)
    return E.load_checkpoint(path)


def _save_params(params, path, cfg: RunConfig, epoch: int) -> None:
    path = Path(path)
    _out_dir(path.parent)
    E.save_checkpoint(params, path, cfg.seed, epoch, E.config_digest(lock_text(cfg)))
    write_lock(cfg, path.parent)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _contrastive_data(cfg: RunConfig, recordings):
    segments = P.prepare(recordings)
    x, _ = P.stack(segments) if segments else (np.zeros((0, E.WINDOW, 51), np.float32), None)
    groups = None
    if cfg.data.pair_by_group:
        group_of = {r.subject_id: r.group or r.subject_id for r in recordings}
        groups = [f"{group_of[s.subject_id]}:{s.step}" for s in segments]
    return x, groups


def _pretrain(cfg: RunConfig, recordings, method: str):
    x, groups = _contrastive_data(cfg, recordings)
    batch = cfg.contrastive.e2e_batch_size if method == "e2e" else cfg.contrastive.moco_batch_size
    if len(x) < batch:
        raise CliError(
            f"{method} pretraining needs at least {batch} segments ({math.ceil(batch / 8)} recordings), "
            f"found {len(x)}",
            EXIT_INSUFFICIENT,
        )
    return C.pretrain(method, x, cfg.contrastive, cfg.optim, groups=groups)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> None:
    out = _out_dir(args.out)
    rows = []
    for rec in generate(cfg.synth):
        name = f"{rec.subject_id}.jsonl"
        write_recording_jsonl(rec, out / name)
        rows.append([name, rec.subject_id, oracle_score(rec)])
    _write_csv(out / "manifest.csv", ["file", "subject_id", "oracle_score"], rows)
    write_lock(cfg, out)
    logger.info("wrote %d recordings to %s", len(rows), out)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    recs = _load_recordings(cfg, args.data, need_labels=False)
    result = _pretrain(cfg, recs, args.method)
    out = Path(args.out)
    _save_params(result.params, out, cfg, cfg.contrastive.epochs)
    C.write_loss_csv(result, out.with_suffix(".loss.csv"))


def cmd_train(cfg: RunConfig, args) -> None:
    recs = _load_recordings(cfg, args.data, need_labels=True)
    if not recs:
        raise CliError(f"no recordings in {args.data}", EXIT_INSUFFICIENT)
    init = _load_params(args.init) if args.init else None
    params, trace = P.train_supervised(P.prepare(recs), cfg.optim, cfg.seed, init, cfg.eval.freeze_encoder)
    out = Path(args.out)
    _save_params(params, out, cfg, cfg.optim.epochs)
    _write_csv(out.with_suffix(".loss.csv"), ["epoch", "mean_loss"],
               [[i, f"{v:.6g}"] for i, v in enumerate(trace, start=1)])


def cmd_eval(cfg: RunConfig, args) -> None:
    methods = args.method or cfg.eval.methods
    fractions = args.fraction or cfg.eval.fractions
    checkpoints = {"e2e": args.e2e_checkpoint, "moco": args.moco_checkpoint}
    recs = _load_recordings(cfg, args.data, need_labels=True)
    if len(recs) < 10:
        raise CliError(f"evaluation needs at least 10 recordings, found {len(recs)}", EXIT_INSUFFICIENT)
    pretrained = {}
    unlabeled = None
    for method in methods:
        if method == "supervised":
            continue
        if checkpoints[method]:
            pretrained[method] = _load_params(checkpoints[method])
        elif args.unlabeled:
            if unlabeled is None:
                unlabeled = _load_recordings(cfg, args.unlabeled, need_labels=False)
            pretrained[method] = _pretrain(cfg, unlabeled, method).params
        else:
            raise CliError(f"method {method} needs --{method}-checkpoint or --unlabeled", EXIT_MISSING)
    threads = resolve_threads(args.threads)
    out = _out_dir(args.out)
    reports = []
    for method in methods:
        for fraction in fractions:
            rep = P.evaluate(recs, method, fraction, cfg.eval.folds, cfg.seed, cfg.optim,
                             pretrained.get(method), cfg.eval.freeze_encoder, threads)
            P.write_report_csv([rep], out / f"report_{method}_{fraction:g}.csv")
            reports.append(rep)
            logger.info("%s @ %g: mean accuracy %.4f", method, fraction, rep.mean_accuracy)
    P.write_report_csv(reports, out / "report.csv")
    P.write_summary_csv(reports, out / "summary.csv")
    write_lock(cfg, out)


def cmd_score(cfg: RunConfig, args) -> None:
    params = _load_params(args.checkpoint)
    recs = _load_recordings(cfg, args.data, need_labels=False)
    if not recs:
        raise CliError(f"no recordings in {args.data}", EXIT_INSUFFICIENT)
    out = _out_dir(args.out)
    rows, scores = [], []
    for rec in recs:
        score, preds = P.score_recording(params, rec)
        oracle = "" if rec.step_labels is None else oracle_score(rec)
        rows.append([rec.subject_id, score, oracle, "".join("1" if p else "0" for p in preds)])
        scores.append(score)
    _write_csv(out / "scores.csv", ["subject_id", "score", "oracle_score", "step_predictions"], rows)
    P.emit_score_histogram(scores, out / "histogram.csv")
    write_lock(cfg, out)


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "score": cmd_score}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gaitscore", description="Tandem-gait step classification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the configuration seed")

    p = sub.add_parser("synth", help="write synthetic labelled recordings")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled recordings")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=("e2e", "moco"))
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("train", help="supervised training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="pretrained encoder checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("eval", help="label-fraction evaluation with subject-level splits")
    common(p)
    p.add_argument("--data", required=True, help="labelled recordings")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--method", action="append", choices=P.METHODS, help="repeatable; default from config")
    p.add_argument("--fraction", action="append", type=_fraction, help="repeatable; default from config")
    p.add_argument("--unlabeled", help="corpus for pretraining when no checkpoint is given")
    p.add_argument("--e2e-checkpoint")
    p.add_argument("--moco-checkpoint")
    p.add_argument("--threads", type=int, help="parallel folds (GAITSCORE_THREADS overrides)")

    p = sub.add_parser("score", help="score recordings with a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not Path(args.config).is_file():
            raise CliError(f"config file {args.config} not found", EXIT_IO)
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_OTHER, f"config: {exc}"
    except (FormatError, P.SingleClassError) as exc:
        code, msg = EXIT_INVALID, f"invalid dataset: {exc}"
    except E.CheckpointError as exc:
        code, msg = EXIT_MISSING, f"unusable checkpoint: {exc}"
    except OSError as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except Exception as exc:  # noqa: BLE001
        code, msg = EXIT_OTHER, f"error: {exc}"
    print(f"gaitscore: {msg}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
