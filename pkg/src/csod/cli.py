"""``csod`` command line: gen-data, train, eval, count-params, optbench.

Exit codes: 0 success, 2 usage/config error, 3 I/O or numeric failure.
``CSOD_THREADS`` caps BLAS worker threads (default 1, the deterministic mode).
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_FAILURE = 3


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def thread_count():
    raw = os.environ.get("CSOD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"CSOD_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE) from None
    if n < 1:
        raise CommandError(f"CSOD_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE)
    return n


@contextmanager
def thread_limit():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=thread_count()):
        yield


def _load_run_config(path):
    from .config import ConfigError, load_config

    try:
        return load_config(path)
    except FileNotFoundError:
        raise CommandError(f"config file not found: {path}", EXIT_USAGE) from None
    except ConfigError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_USAGE) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from .data import generate_dataset

    if args.size < 16:
        raise CommandError(f"--size must be >= 16, got {args.size}", EXIT_USAGE)
    if args.train < 0 or args.test < 0:
        raise CommandError("--train and --test must be non-negative", EXIT_USAGE)
    try:
        m = generate_dataset(args.seed, args.size, args.train, args.test, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write dataset: {exc.filename or args.out}: {exc.strerror}", EXIT_FAILURE) from None
    print(f"wrote {3 * m.count} images ({len(m.train_ids)} train, {len(m.test_ids)} test) "
          f"at {m.size}x{m.size} to {m.root}")
    return 0


def _load_split(root, split):
    from .data import load_manifest, load_split
    from .netpbm import NetpbmError

    try:
        manifest = load_manifest(root)
        return manifest, load_split(manifest, split)
    except (OSError, NetpbmError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot load dataset {root}: {exc}", EXIT_FAILURE) from None


def cmd_train(args):
    from .net import save_checkpoint
    from .train import NumericError, train, write_timing_log, write_train_log

    cfg = _load_run_config(args.config)
    _, samples = _load_split(cfg.dataset_root, "train")
    if not samples:
        raise CommandError(f"training split of {cfg.dataset_root} is empty", EXIT_USAGE)
    if samples[0].image.shape[-1] != cfg.net.input_size:
        raise CommandError(
            f"dataset images are {samples[0].image.shape[-1]}px but net.input_size={cfg.net.input_size}", EXIT_USAGE
        )
    out = Path(cfg.output_dir)

    def report(row):
        if not args.quiet and (row.step + 1) % max(1, len(samples) // cfg.accumulation) == 0:
            print(f"epoch {row.epoch:3d} step {row.step:5d} lr {row.lr:.2e} loss {row.train_loss:.5f}", flush=True)

    try:
        out.mkdir(parents=True, exist_ok=True)
        with thread_limit():
            net, rows = train(cfg, samples, on_row=report)
        write_train_log(out / "train_log.csv", rows)
        write_timing_log(out / "train_timing.csv", rows)
        save_checkpoint(net, out / "model.ckpt")
        (out / "config.txt").write_text(cfg.to_text())
    except NumericError as exc:
        raise CommandError(str(exc), EXIT_FAILURE) from None
    except OSError as exc:
        raise CommandError(f"cannot write run output: {exc.filename or out}: {exc.strerror}", EXIT_FAILURE) from None
    print(f"trained {len(rows)} steps in {rows[-1].wall_seconds:.1f}s; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    from .metrics import write_metrics_csv, write_pr_csv
    from .net import CheckpointError, load_checkpoint
    from .netpbm import write_image
    from .train import evaluate_network

    cfg = _load_run_config(args.config) if args.config else None
    ckpt = args.checkpoint or (Path(cfg.output_dir) / "model.ckpt" if cfg else None)
    data = args.data or (cfg.dataset_root if cfg else None)
    if ckpt is None or data is None:
        raise CommandError("eval needs --config or both --checkpoint and --data", EXIT_USAGE)
    out = Path(args.out) if args.out else (Path(cfg.output_dir) if cfg else Path(ckpt).parent) / f"eval_{args.split}"

    try:
        net = load_checkpoint(ckpt)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot load checkpoint {ckpt}: {exc}", EXIT_FAILURE) from None
    manifest, samples = _load_split(data, args.split)
    if not samples:
        raise CommandError(f"split {args.split!r} of {data} is empty", EXIT_USAGE)
    if samples[0].image.shape[-1] != net.cfg.input_size:
        raise CommandError(
            f"dataset resolution {samples[0].image.shape[-1]} does not match the checkpoint's "
            f"input size {net.cfg.input_size}", EXIT_FAILURE)

    with thread_limit():
        report, preds = evaluate_network(net, samples)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", {f"synthetic_{args.split}": report})
        write_pr_csv(out / "pr_curve.csv", report.pr_curve)
        for s, p in zip(samples, preds):
            write_image(out / f"pred_{s.id:05d}.pgm", p[None])
    except OSError as exc:
        raise CommandError(f"cannot write evaluation output: {exc.filename or out}: {exc.strerror}", EXIT_FAILURE) from None
    print(f"{args.split}: n={len(samples)} maxF={report.max_f:.4f} MAE={report.mae:.4f} "
          f"IoU={report.iou:.4f} S={report.s_measure:.4f} -> {out}")
    return 0


def cmd_count_params(args):
    from .net import SODNet, checkpoint_size

    cfg = _load_run_config(args.config)
    nets = {"configured": SODNet(cfg.net), "plain-twin": SODNet(cfg.net.replace(decoder="plain"))}
    print(f"{'block':<20}{'configured':>14}{'plain-twin':>14}")
    tables = {name: dict(net.block_table()) for name, net in nets.items()}
    for block in tables["configured"]:
        a = tables["configured"][block].total
        b = tables["plain-twin"][block].total
        print(f"{block:<20}{a:>14d}{b:>14d}")
    totals = {name: sum(c.total for c in t.values()) for name, t in tables.items()}
    dec = {name: net.decoder_params().total for name, net in nets.items()}
    print(f"{'decoder':<20}{dec['configured']:>14d}{dec['plain-twin']:>14d}")
    print(f"{'total':<20}{totals['configured']:>14d}{totals['plain-twin']:>14d}")
    sizes = {name: checkpoint_size(net) for name, net in nets.items()}
    print(f"{'checkpoint bytes':<20}{sizes['configured']:>14d}{sizes['plain-twin']:>14d}")
    print(f"decoder ratio: {dec['configured'] / dec['plain-twin']:.4f}")
    print(f"total ratio: {totals['configured'] / totals['plain-twin']:.4f}")
    return 0


DEFAULT_ITERS = {"quadratic": 500, "rosenbrock": 5000, "micro_sod": 120}


def cmd_optbench(args):
    from .optim import BENCH_ALGORITHMS, TASKS, optbench, write_trace_csv

    if args.task not in TASKS:
        raise CommandError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}", EXIT_USAGE)
    iters = args.iters if args.iters is not None else DEFAULT_ITERS[args.task]
    if iters < 1:
        raise CommandError("--iters must be >= 1", EXIT_USAGE)
    with thread_limit():
        traces = optbench(args.task, BENCH_ALGORITHMS, iters, seed=args.seed)
    out = Path(args.out)
    path = out / f"optbench_{args.task}.csv" if out.suffix != ".csv" else out
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_trace_csv(path, traces)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror}", EXIT_FAILURE) from None
    unit = "epochs" if args.task == "micro_sod" else "iterations"
    print(f"task {args.task}, {iters} {unit} -> {path}")
    for name, trace in traces.items():
        drop = 1.0 - trace[-1] / trace[0] if trace[0] else 0.0
        print(f"  {name:<9} initial {trace[0]:.6g} final {trace[-1]:.6g} ({100 * drop:.1f}% lower)")
    if "adam" in traces and "adax" in traces:
        print("  " + convergence_note(traces["adam"], traces["adax"], unit))
    return 0


def convergence_note(adam, adax, unit="iterations"):
    """Which of Adam/AdaX first reaches the better of their two final losses (+10%)."""
    target = 1.1 * min(adam[-1], adax[-1])

    def first(trace):
        hit = np.nonzero(np.asarray(trace) <= target)[0]
        return int(hit[0]) if hit.size else None

    def when(step):
        return "never" if step is None else f"at {step}"

    return f"reached {target:.4g}: adam {when(first(adam))}, adax {when(first(adax))} ({unit})"


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="csod", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic saliency dataset")
    g.add_argument("--seed", type=int, default=7, help="master seed (default 7)")
    g.add_argument("--size", type=int, default=64, help="image side in pixels, at least 16")
    g.add_argument("--train", type=int, default=200, help="number of training samples")
    g.add_argument("--test", type=int, default=50, help="number of test samples")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network from a run config")
    t.add_argument("config", help="run config file (key=value lines)")
    t.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--config", help="run config; supplies checkpoint and dataset")
    e.add_argument("--checkpoint", help="checkpoint file, overrides the config")
    e.add_argument("--data", help="dataset root, overrides the config")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out", help="output directory for metrics and predictions")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", help="parameter accounting vs the plain-decoder twin")
    c.add_argument("config", help="run config file")
    c.set_defaults(func=cmd_count_params)

    o = sub.add_parser("optbench", help="optimizer comparison traces")
    o.add_argument("--task", required=True, help="quadratic, rosenbrock or micro_sod")
    o.add_argument("--iters", type=int, help="iterations (task-specific default)")
    o.add_argument("--seed", type=int, default=0, help="seed for the task setup")
    o.add_argument("--out", default=".", help="CSV file or directory")
    o.set_defaults(func=cmd_optbench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        thread_count()  # reject a malformed CSOD_THREADS before any work starts
        return args.func(args)
    except CommandError as exc:
        print(f"csod {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
