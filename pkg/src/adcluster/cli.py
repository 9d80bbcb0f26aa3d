"""Command-line entry point.

    adcluster run --config run.cfg [--mode full] [--seed 3] [--out runs/x]
    adcluster sweep-lambda --config run.cfg --values 0.01,0.03,0.1,1
    adcluster eval --config run.cfg [--checkpoint runs/x/final.adck]
    adcluster synth --config run.cfg

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import StyleGenerator
from .checkpoint import CheckpointError, prefixed, read_checkpoint, unprefixed, write_checkpoint
from .config import ConfigError, load_config
from .evaluation import Metrics
from .nncore import Encoder
from .pipeline import RunConfig, build_domains, pretrain, run
from .trainer import HISTORY_COLUMNS, History, Mode, evaluate

logger = logging.getLogger("adcluster")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
METRIC_COLUMNS = ("stage", "mode", "mAP", "cmc1", "cmc5", "cmc10", "J", "n_queries_evaluated")
SWEEP_COLUMNS = ("lambda", "mAP", "rank1")
DEFAULT_LAMBDAS = (0.01, 0.03, 0.1, 1.0)


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip form
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_history(path: Path, history: History) -> None:
    write_csv(path, HISTORY_COLUMNS, (rec.row() for rec in history))


def _metric_row(stage: str, mode: str, m: Metrics, J: float) -> list:
    return [stage, mode, m.mAP, m.cmc[1], m.cmc[5], m.cmc[10], J, m.n_queries_evaluated]


def model_arrays(enc: Encoder, g: StyleGenerator | None = None) -> dict[str, np.ndarray]:
    arrays = prefixed("encoder", enc.params)
    if g is not None:
        arrays.update(prefixed("generator", g.params))
    return arrays


def encoder_from_arrays(arrays) -> Encoder:
    p = unprefixed("encoder", arrays)
    missing = {"w1", "b1", "w2", "b2"} - set(p)
    if missing:
        raise CheckpointError(f"checkpoint lacks encoder entries {sorted(missing)}")
    return Encoder(p["w1"], p["b1"], p["w2"], p["b2"])


def exit_code(fn):
    """Map exceptions to the stable exit codes and report them on stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs) -> int:
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as exc:  # any module failure is a runtime error
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME

    return wrapper


def _resolve(config_path, mode=None, seed=None, out=None) -> RunConfig:
    try:
        cfg = load_config(config_path)
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    if mode is not None:
        try:
            cfg = cfg.with_mode(Mode.parse(mode) if isinstance(mode, str) else mode)
        except ValueError as exc:
            raise ConfigError(str(exc), "mode") from None
    if seed is not None:
        cfg = cfg.with_seed(int(seed))
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg


@exit_code
def cmd_run(config_path, mode_override=None, seed=None, out=None) -> int:
    cfg = _resolve(config_path, mode_override, seed, out)
    out_dir = Path(cfg.output_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_iteration(record, enc, g):
        write_checkpoint(ckpt_dir / f"iter_{record.iteration:03d}.adck", model_arrays(enc, g))
        logger.info("iteration %d: clusters=%d noise=%d fscore=%.3f mAP=%.3f",
                    record.iteration, record.n_clusters, record.n_noise, record.pseudo_fscore, record.mAP)

    result = run(cfg, on_iteration=on_iteration)
    mode = cfg.adapt.mode.value
    write_history(out_dir / "history.csv", result.history)
    write_csv(out_dir / "final_metrics.csv", METRIC_COLUMNS, [
        _metric_row("direct_transfer", mode, result.direct, result.direct_J),
        _metric_row("adapted", mode, result.final, result.final_J),
    ])
    write_checkpoint(out_dir / "final.adck", model_arrays(result.encoder, result.generator))
    print(f"{mode}: direct mAP {result.direct.mAP:.4f} -> adapted mAP {result.final.mAP:.4f} "
          f"(rank-1 {result.final.rank1:.4f}); outputs in {out_dir}")
    return EXIT_OK


def sweep_lambda(cfg: RunConfig, values: Sequence[float]) -> list[tuple[float, float, float]]:
    """FULL-mode run per lambda, sharing the synthetic domains and the pretrained encoder."""
    if not values:
        raise ConfigError("no lambda values given", "lambda")
    for v in values:
        if not v > 0:
            raise ConfigError(f"sweep value {v!r} out of range, must be > 0", "lambda")
    cfg = cfg.with_mode(Mode.FULL)
    domains = build_domains(cfg)
    enc, losses = pretrain(cfg, domains)
    rows = []
    for lam in values:
        res = run(replace(cfg, gen=replace(cfg.gen, lam=float(lam))), domains, enc, losses)
        rows.append((float(lam), res.final.mAP, res.final.rank1))
        logger.info("lambda=%r mAP=%.4f rank1=%.4f", lam, res.final.mAP, res.final.rank1)
    return rows


@exit_code
def cmd_sweep_lambda(config_path, values: Sequence[float] = DEFAULT_LAMBDAS, seed=None, out=None) -> int:
    cfg = _resolve(config_path, None, seed, out)
    rows = sweep_lambda(cfg, values)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "lambda_sweep.csv", SWEEP_COLUMNS, rows)
    for lam, m, r1 in rows:
        print(f"lambda={lam!r}: mAP {m:.4f} rank-1 {r1:.4f}")
    return EXIT_OK


@exit_code
def cmd_eval(config_path, checkpoint=None, seed=None, out=None) -> int:
    cfg = _resolve(config_path, None, seed, out)
    out_dir = Path(cfg.output_dir)
    path = Path(checkpoint) if checkpoint else out_dir / "final.adck"
    enc = encoder_from_arrays(read_checkpoint(path))
    domains = build_domains(cfg)
    metrics, J = evaluate(enc, domains.target, domains.split)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "eval_metrics.csv", METRIC_COLUMNS, [_metric_row("checkpoint", "-", metrics, J)])
    print(f"{path}: mAP {metrics.mAP:.4f} rank-1 {metrics.rank1:.4f} J {J:.4f}")
    return EXIT_OK


@exit_code
def cmd_synth(config_path, seed=None, out=None) -> int:
    cfg = _resolve(config_path, None, seed, out)
    d = build_domains(cfg)
    arrays = {}
    for name, ds in (("source", d.source), ("target", d.target)):
        arrays[f"{name}.raw"] = ds.raw
        arrays[f"{name}.identities"] = ds.identities
        arrays[f"{name}.cameras"] = ds.cameras
    arrays["target.query"] = np.asarray(d.split[0])
    arrays["target.gallery"] = np.asarray(d.split[1])
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out_dir / "dataset.adck", arrays)
    print(f"wrote {len(d.source)} source and {len(d.target)} target samples to {out_dir / 'dataset.adck'}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not argparse's default exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _lambda_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid lambda list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adcluster", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override output_dir")

    sp = sub.add_parser("run", help="pretrain, adapt and evaluate")
    common(sp)
    sp.add_argument("--mode", choices=[m.value for m in Mode], help="override the adaptation mode")
    sp = sub.add_parser("sweep-lambda", help="FULL-mode runs over several lambda values")
    common(sp)
    sp.add_argument("--values", type=_lambda_list, default=list(DEFAULT_LAMBDAS),
                    help="comma-separated lambda values (default 0.01,0.03,0.1,1.0)")
    sp = sub.add_parser("eval", help="re-evaluate a saved encoder on the target split")
    common(sp)
    sp.add_argument("--checkpoint", help="ADCK file (default <output_dir>/final.adck)")
    sp = sub.add_parser("synth", help="write the synthetic domains to <output_dir>/dataset.adck")
    common(sp)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.mode, args.seed, args.out)
    if args.command == "sweep-lambda":
        return cmd_sweep_lambda(args.config, args.values, args.seed, args.out)
    if args.command == "eval":
        return cmd_eval(args.config, args.checkpoint, args.seed, args.out)
    return cmd_synth(args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
