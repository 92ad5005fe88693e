"""Command-line entry point: gen-data, train, eval, beta-sweep, trace.

Exit codes: 0 success, 2 config error, 3 data format error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, FormatError, PoseDRLError
from .evaluation import (
    beta_sweep, evaluate_dataset, network_policy, oracle_policy, oracle_predictor, positions_observer,
    run_inference, sweep_table,
)
from .phantom import phantom_set
from .pose_graph import LANDMARK_NAMES
from .trainer import MetricsWriter, Trainer, network_from_checkpoint
from .volume import LabeledVolume, load_volume, save_volume

log = logging.getLogger("posedrl")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4
MANIFEST_FIELDS = ["index", "seed", "path"]


# ------------------------------------------------------------------ manifests


def write_manifest(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ConfigError(f"manifest {path} does not exist") from None
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise FormatError(f"{path}: manifest needs columns {MANIFEST_FIELDS}")
    return rows


def load_manifest_volumes(path) -> list[LabeledVolume]:
    if not path:
        raise ConfigError("no data manifest given")
    base = Path(path).parent
    return [load_volume(base / row["path"]) for row in read_manifest(path)]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if args.seed is None else args.seed
    rows = []
    for i, (vseed, v) in enumerate(phantom_set(cfg.phantom, args.count, seed)):
        name = f"vol_{i:05d}.lsv"
        save_volume(v, out / name)
        rows.append({"index": i, "seed": vseed, "path": name})
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} volumes to {out}")
    return EXIT_OK


def _train_one(cfg: RunConfig, out: Path, volumes, deterministic: bool, resume=None,
               stop_at: int | None = None, time_limit_s: float | None = None) -> Trainer:
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, volumes, metrics_path)
    else:
        (out / "config.txt").write_text(dump_config(cfg))
        trainer = Trainer(volumes, cfg.train, cfg.net.build(), cfg.reward,
                          metrics=MetricsWriter(metrics_path), deterministic=deterministic)
    total = trainer.cfg.total_learner_steps
    until = total if stop_at is None else min(stop_at, total)
    every = cfg.checkpoint_every

    if trainer.deterministic:
        def periodic(tr):
            if every > 0 and tr.learner_steps % every == 0:
                tr.save_checkpoint(out / f"checkpoint_{tr.learner_steps:07d}.lsc")

        trainer.run_sync(until_step=until, callback=periodic)
    else:
        while trainer.learner_steps < until:
            target = until if every <= 0 else min(until, (trainer.learner_steps // every + 1) * every)
            counts = trainer.run_async(duration_s=time_limit_s, until_step=target)
            trainer.save_checkpoint(out / f"checkpoint_{trainer.learner_steps:07d}.lsc")
            log.info("async segment: %s", counts)
            if time_limit_s is not None:
                break
    trainer.save_checkpoint(out / "final.lsc")
    return trainer


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg = replace(cfg, out=args.out)
    volumes = load_manifest_volumes(args.data or cfg.data.train)
    trainer = _train_one(cfg, Path(cfg.out), volumes, args.deterministic, args.resume, args.stop_at,
                         args.time_limit)
    print(f"trained {trainer.learner_steps} learner steps; checkpoint {Path(cfg.out) / 'final.lsc'}")
    return EXIT_OK


def _write_eval(result, out: Path | None) -> None:
    print(result.report(), end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(result.report())
        (out / "eval.csv").write_text(result.to_csv())


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    ev = cfg.eval
    repeats = ev.repeats if args.repeats is None else args.repeats
    threshold = ev.threshold_mm if args.threshold_mm is None else args.threshold_mm
    seed = ev.seed if args.seed is None else args.seed
    volumes = load_manifest_volumes(args.data or cfg.data.eval)
    if args.oracle:
        result = evaluate_dataset(volumes, repeats=repeats, seed=seed, threshold_mm=threshold,
                                  predictor=oracle_predictor)
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        net = network_from_checkpoint(args.checkpoint)
        if args.config is not None and net.cfg != cfg.net.build():
            raise FormatError("checkpoint architecture differs from the configured network")
        result = evaluate_dataset(volumes, network_policy(net), net.cfg.encoder.patch, repeats, seed,
                                  threshold, ev.max_steps, init_fraction=cfg.train.init_fraction)
    _write_eval(result, Path(args.out) if args.out else None)
    return EXIT_OK


def _parse_floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def cmd_beta_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.out)
    betas = _parse_floats(args.betas, "--betas")
    seeds = tuple(int(s) for s in _parse_floats(args.seeds, "--seeds"))
    if any(b < 0 for b in betas):
        raise ConfigError("betas must be >= 0")
    train_vols = load_manifest_volumes(cfg.data.train)
    eval_vols = load_manifest_volumes(cfg.data.eval)
    out.mkdir(parents=True, exist_ok=True)

    def on_done(row, trainer):
        sub = out / f"beta_{row.beta:g}" / f"seed_{row.seed}"
        sub.mkdir(parents=True, exist_ok=True)
        trainer.save_checkpoint(sub / "final.lsc")
        (sub / "report.txt").write_text(row.result.report())
        (sub / "eval.csv").write_text(row.result.to_csv())

    rows = beta_sweep(train_vols, eval_vols, cfg.train, cfg.net.build(), betas, seeds,
                      cfg.eval.repeats, cfg.eval.threshold_mm, on_done=on_done, reward_cfg=cfg.reward)
    table = sweep_table(rows)
    (out / "summary.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def projection_rows(trace, drop_axis: int = 1) -> list[list]:
    """Flatten every path onto the plane orthogonal to ``drop_axis``."""
    keep = [a for a in range(3) if a != drop_axis]
    rows = []
    for k, path in enumerate(trace.paths):
        for t, p in enumerate(path):
            rows.append([LANDMARK_NAMES[k], t, p[keep[0]], p[keep[1]]])
    return rows


def cmd_trace(args) -> int:
    cfg = load_config(args.config, args.set)
    v = load_volume(args.volume)
    max_steps = cfg.eval.max_steps if args.max_steps is None else args.max_steps
    seed = cfg.eval.seed if args.seed is None else args.seed
    if args.oracle:
        final, trace = run_inference(v, oracle_policy(v), 1, max_steps, seed,
                                     init_fraction=cfg.train.init_fraction, observe=positions_observer)
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        net = network_from_checkpoint(args.checkpoint)
        final, trace = run_inference(v, network_policy(net), net.cfg.encoder.patch, max_steps, seed,
                                     init_fraction=cfg.train.init_fraction)
    out = Path(args.out)
    (out / "agents").mkdir(parents=True, exist_ok=True)
    for k, path in enumerate(trace.paths):
        with open(out / "agents" / f"{k:02d}_{LANDMARK_NAMES[k]}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "x", "y", "z"])
            w.writerows([t, *p] for t, p in enumerate(path))
    axes = "xyz"
    keep = [a for a in axes if a != axes[args.drop_axis]]
    with open(out / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["landmark", "step", keep[0], keep[1]])
        w.writerows(projection_rows(trace, args.drop_axis))
    with open(out / "final.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["landmark", "x", "y", "z", "gt_x", "gt_y", "gt_z", "stopped_at"])
        for k, name in enumerate(LANDMARK_NAMES):
            w.writerow([name, *final[k], *(f"{c:.4f}" for c in v.landmarks_gt[k]), trace.stopped_at[k]])
    print(f"wrote traces for {len(trace.paths)} agents to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posedrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")

    g = sub.add_parser("gen-data", help="write phantom volumes and a manifest")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="training manifest (overrides data.train)")
    t.add_argument("--out")
    t.add_argument("--deterministic", action="store_true", help="1 actor / 1 learner lockstep")
    t.add_argument("--resume", help="continue from an LSC1 checkpoint")
    t.add_argument("--stop-at", type=int, help="stop after this many learner steps")
    t.add_argument("--time-limit", type=float, help="wall-clock limit in seconds (asynchronous mode)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="evaluation manifest (overrides data.eval)")
    e.add_argument("--repeats", type=int)
    e.add_argument("--threshold-mm", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--oracle", action="store_true", help="place every agent on its landmark (test hook)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("beta-sweep", help="train and evaluate one model per beta")
    common(b)
    b.add_argument("--betas", default="0,1,2,5")
    b.add_argument("--seeds", default="0")
    b.add_argument("--out")
    b.set_defaults(func=cmd_beta_sweep)

    r = sub.add_parser("trace", help="export search paths for one volume")
    common(r)
    r.add_argument("--checkpoint")
    r.add_argument("--volume", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--max-steps", type=int)
    r.add_argument("--drop-axis", type=int, default=1, choices=(0, 1, 2),
                   help="axis removed in projection.csv")
    r.add_argument("--oracle", action="store_true", help="agents walk straight to their landmark")
    r.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (PoseDRLError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
