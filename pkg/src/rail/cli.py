"""Command-line entry points.

Subcommands: gen-expert, train, eval, export-weights, verify. All commands
are deterministic under identical flags and seeds; the RAIL_SEED
environment variable overrides --seed everywhere.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .discriminator import DiscriminatorParams
from .errors import (ConfigError, DomainError, EngineError, FormatError,
                     RailError, TrainingHalted)
from .formats import (config_digest, read_checkpoint, read_demos,
                      write_checkpoint, write_demos)
from .highway import (DrivingStats, evaluate_policy, scripted_expert,
                      trajectory_stats_rows)
from .policy import NoiseSchedule
from .runs import load_run_config, make_run_dir, new_manifest, verify_run
from .training import (DemonstrationSet, IterationReport, bc_train,
                       rail_train, record_demonstrations)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _effective_seed(args) -> int:
    env_seed = os.environ.get("RAIL_SEED")
    if env_seed is not None:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"RAIL_SEED must be an integer, got {env_seed!r}")
    return args.seed


def cmd_gen_expert(args) -> int:
    config = load_run_config(args.config)
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    seed = _effective_seed(args)
    demos = record_demonstrations(config.env, scripted_expert,
                                  args.episodes, seed)
    digest = config_digest(config.env.to_dict())
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        os.makedirs(out.parent, exist_ok=True)
    write_demos(out, demos.episodes, demos.n, demos.p, digest,
                source=demos.source)
    stats = trajectory_stats_rows(demos.episodes)
    sidecar = out.with_suffix(out.suffix + ".stats.csv")
    sidecar.write_text(DrivingStats.CSV_HEADER + "\n" + stats.csv_row() + "\n")
    print(f"wrote {len(demos.episodes)} episodes to {out}")
    print(f"mean expert speed: {stats.avg_speed:.2f} km/h")
    return EXIT_OK


def _load_demos(path) -> DemonstrationSet:
    episodes, header = read_demos(path)
    return DemonstrationSet(episodes, int(header["n"]), int(header["p"]),
                            source=str(header.get("source", "")))


def _checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.rckp"


def _bc_init_from(path, config):
    ckpt = read_checkpoint(path)
    expected = config.env.observation_dim
    if ckpt.params.n != expected:
        raise ConfigError(
            f"init checkpoint has n={ckpt.params.n}, environment expects "
            f"{expected}")
    return ckpt


def cmd_train(args) -> int:
    config = load_run_config(args.config, require_demos=True)
    seed = _effective_seed(args) if (args.seed is not None or
                                     os.environ.get("RAIL_SEED")) else None
    rail_cfg = config.rail
    if seed is not None:
        rail_cfg = replace(rail_cfg, seed=seed)
    if args.workers is not None:
        rail_cfg = replace(rail_cfg, workers=args.workers)
    run_dir = make_run_dir(config)
    digest = config.digest()
    manifest = new_manifest(config.experiment, digest)
    demos = _load_demos(config.demos)
    if demos.n != config.env.observation_dim:
        raise ConfigError(
            f"demos have n={demos.n}, environment expects "
            f"{config.env.observation_dim}")

    if args.algo == "bc":
        bc_seed = seed if seed is not None else config.bc.seed
        losses = []
        params, norm = bc_train(
            demos, config.policy.kind, config.policy.hidden,
            config.bc.epochs, bc_seed, config.bc.learning_rate,
            on_epoch=lambda epoch, loss: losses.append((epoch, loss)))
        ckpt_path = run_dir / "bc_policy.rckp"
        write_checkpoint(ckpt_path, params, norm,
                         extra={"config_digest": digest, "algo": "bc",
                                "seed": bc_seed})
        metrics_path = run_dir / "bc_metrics.csv"
        with open(metrics_path, "w") as f:
            f.write("epoch,loss\n")
            for epoch, loss in losses:
                f.write(f"{epoch},{loss!r}\n")
        manifest.add(run_dir, ckpt_path, "checkpoint")
        manifest.add(run_dir, metrics_path, "metrics")
        manifest.write(run_dir)
        print(f"bc checkpoint written to {ckpt_path}")
        return EXIT_OK

    # --algo rail
    init = norm_init = disc_init = sched_init = None
    start_iteration = 0
    metrics_path = run_dir / "metrics.csv"
    if args.resume:
        last = _find_last_checkpoint(run_dir)
        if last is None:
            raise ConfigError(f"--resume found no checkpoints in {run_dir}")
        ckpt = read_checkpoint(last)
        extra = ckpt.extra or {}
        init, norm_init, disc_init = ckpt.params, ckpt.normalizer, ckpt.disc
        start_iteration = int(extra.get("iteration", 0))
        best = extra.get("best_metric")
        sched_init = NoiseSchedule(
            nu=float(extra.get("nu", rail_cfg.nu_init)),
            nu_init=rail_cfg.nu_init, tau=rail_cfg.tau,
            eval_period=rail_cfg.eval_period,
            best_metric=-math.inf if best is None else float(best))
        _truncate_metrics(metrics_path, start_iteration)
        print(f"resuming from {last.name} at iteration {start_iteration}")
    elif args.init:
        ckpt = _bc_init_from(args.init, config)
        init, norm_init = ckpt.params, ckpt.normalizer

    period = max(1, rail_cfg.iterations // 10)
    fresh = not (args.resume and metrics_path.exists())
    metrics_file = open(metrics_path, "w" if fresh else "a")
    if fresh:
        metrics_file.write(IterationReport.CSV_HEADER + "\n")

    def on_iteration(report, state):
        metrics_file.write(report.csv_row() + "\n")
        metrics_file.flush()
        if report.iteration % period == 0 or \
                report.iteration == rail_cfg.iterations:
            extra = {
                "config_digest": digest,
                "iteration": report.iteration,
                "nu": state.schedule.nu,
                "best_metric": None if math.isinf(state.schedule.best_metric)
                else state.schedule.best_metric,
                "seed": rail_cfg.seed,
            }
            write_checkpoint(run_dir / _checkpoint_name(report.iteration),
                             state.params, state.normalizer, state.disc,
                             extra=extra)

    try:
        params, norm, disc, reports = rail_train(
            config.env, demos, rail_cfg,
            init=init, init_normalizer=norm_init, init_disc=disc_init,
            init_schedule=sched_init, start_iteration=start_iteration,
            kind=config.policy.kind, hidden=config.policy.hidden,
            on_iteration=on_iteration)
    finally:
        metrics_file.close()

    final_extra = {"config_digest": digest, "iteration": rail_cfg.iterations,
                   "seed": rail_cfg.seed}
    final_path = run_dir / "policy_final.rckp"
    write_checkpoint(final_path, params, norm, disc, extra=final_extra)
    manifest.add(run_dir, metrics_path, "metrics")
    for ckpt_file in sorted(run_dir.glob("ckpt_*.rckp")):
        manifest.add(run_dir, ckpt_file, "checkpoint")
    manifest.add(run_dir, final_path, "checkpoint")
    manifest.write(run_dir)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def _find_last_checkpoint(run_dir: Path):
    ckpts = sorted(run_dir.glob("ckpt_*.rckp"))
    return ckpts[-1] if ckpts else None


def _truncate_metrics(metrics_path: Path, max_iteration: int):
    if not metrics_path.exists():
        return
    lines = metrics_path.read_text().splitlines()
    kept = [lines[0]] if lines else [IterationReport.CSV_HEADER]
    for line in lines[1:]:
        try:
            iteration = int(line.split(",", 1)[0])
        except ValueError:
            continue
        if iteration <= max_iteration:
            kept.append(line)
    metrics_path.write_text("\n".join(kept) + "\n")


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    seed = _effective_seed(args)
    if args.expert:
        policy = scripted_expert
        label = "scripted-expert"
    else:
        if not args.checkpoint:
            raise ConfigError("provide --checkpoint or --expert")
        ckpt = _bc_init_from(args.checkpoint, config)
        mu, inv_sigma = ckpt.normalizer.transform()
        policy = (ckpt.params, mu, inv_sigma)
        label = str(args.checkpoint)
    stats = evaluate_policy(policy, config.env, args.episodes, seed)
    print(f"policy: {label}")
    print(DrivingStats.CSV_HEADER)
    print(stats.csv_row())
    if args.out:
        Path(args.out).write_text(
            DrivingStats.CSV_HEADER + "\n" + stats.csv_row() + "\n")
        print(f"stats written to {args.out}")
    return EXIT_OK


def _factorizations(total: int):
    pairs = []
    for rows in range(1, int(math.isqrt(total)) + 1):
        if total % rows == 0:
            pairs.append((rows, total // rows))
            if rows != total // rows:
                pairs.append((total // rows, rows))
    return sorted(pairs)


def cmd_export_weights(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    params = ckpt.params
    if args.layer == 1:
        matrix = params.w_in
    else:
        if params.w_out is None:
            raise ConfigError("linear policy has no second layer")
        matrix = params.w_out
    total = matrix.size
    if args.reshape:
        try:
            rows, cols = (int(v) for v in args.reshape.lower().split("x"))
        except ValueError:
            raise ConfigError("--reshape must look like ROWSxCOLS, e.g. 30x121")
        if rows * cols != total:
            options = ", ".join(f"{r}x{c}" for r, c in _factorizations(total))
            raise ConfigError(
                f"cannot reshape {matrix.shape[0]}x{matrix.shape[1]} "
                f"({total} values) to {rows}x{cols}; valid: {options}")
        matrix = matrix.reshape(rows, cols)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        os.makedirs(out.parent, exist_ok=True)
    with open(out, "w") as f:
        for row in matrix:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    counts, edges = np.histogram(matrix.reshape(-1), bins=50)
    hist_path = out.with_name(out.stem + "_hist.csv")
    with open(hist_path, "w") as f:
        f.write("bin_left,bin_right,count\n")
        for i, c in enumerate(counts):
            f.write(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} matrix to {out}")
    print(f"wrote histogram to {hist_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    problems = verify_run(args.run)
    if problems:
        for p in problems:
            print(f"FAIL: {p}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"ok: all artifacts in {args.run} match their manifest")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rail",
        description="Derivative-free adversarial imitation learning for "
                    "highway driving policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-expert",
                       help="record scripted-expert demonstrations")
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_expert)

    p = sub.add_parser("train", help="train a policy with bc or rail")
    p.add_argument("--config", required=True)
    p.add_argument("--algo", choices=("bc", "rail"), required=True)
    p.add_argument("--init", help="checkpoint used to initialize rail")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the last checkpoint in the run dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the expert")
    p.add_argument("--checkpoint")
    p.add_argument("--expert", action="store_true")
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-weights",
                       help="dump a policy layer as CSV for heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, choices=(1, 2), default=1)
    p.add_argument("--reshape", help="ROWSxCOLS, product must match the layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("verify", help="check run artifacts against manifest")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingHalted as exc:
        print(f"training halted: {exc}", file=sys.stderr)
        dump_path = Path("training_halt_dump.json")
        dump_path.write_text(json.dumps(exc.dump, indent=2, sort_keys=True))
        print(f"state dump written to {dump_path}", file=sys.stderr)
        return EXIT_RUNTIME
    except (EngineError, RailError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
