import argparse
import csv
import json
import logging
import os
import os.path as op
import sys
import time
from dataclasses import asdict, replace
from logging.handlers import RotatingFileHandler

import numpy as np

from . import PKG_NAME, config, logger
from .aleatoric import ConvergenceError, calibration_sweep, is_monotone, write_calibration_csv
from .benchmark import BenchmarkSuite, run_suite
from .checkpoint import CheckpointError
from .config import ConfigError, parse_cell
from .deploy import AgentFactory, DeployModels
from .expert import CollectConfig, ExpertAgent, collect_demos, collect_frames
from .filelock import FileLocker
from .policy import (
    PolicyConfig,
    PolicyNet,
    TrainConfig,
    evaluate_mse,
    load_demos,
    mean_baseline_mse,
    save_demos,
    split_records,
    stack_records,
    style_uncertainty,
    train_policy,
)
from .report import (
    BenchmarkReport,
    load_metrics,
    load_traces,
    write_chosen_frequency,
    write_success_series,
    write_summary,
    write_uncertainty_hist,
)
from .town import Task, Town, load_town, save_town
from .translator import StylePool, Translator, TranslatorConfig, train_translator
from .utils import atomic_write, derive_seed, humantime, write_jsonl
from .world import OBS_DIM, TEST_STYLE, StyleId

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

# File names inside the output directory
ARTIFACTS = {
    "dataset": "demos.jsonl",
    "collect-summary": "collect_summary.json",
    "town": "town.json",
    "policy": "policy.ckpt",
    "cil": "cil.ckpt",
    "translator": "translator.ckpt",
    "policy-curve": "policy_curve.csv",
    "cil-curve": "cil_curve.csv",
    "translator-curve": "translator_curve.csv",
    "style-pool": "style_pool.json",
    "calibration": "calibration.csv",
    "metrics": "metrics.jsonl",
    "traces": "traces.jsonl",
    "report-csv": "report.csv",
    "report-txt": "report.txt",
    "success-series": "success_series.csv",
    "uncertainty-hist": "uncertainty_hist.csv",
    "chosen-frequency": "chosen_frequency.csv",
    "summary": "summary.csv",
}

# Sub-streams of the run seed
_SEED_COLLECT = 1
_SEED_SPLIT = 2
_SEED_POLICY = 3
_SEED_BENCHMARK = 5
_SEED_TEST_FRAMES = 6
_SEED_TRANSLATOR = 7
_SEED_POOL = 8
_SEED_CALIBRATE = 9


class MissingArtifactError(FileNotFoundError):
    pass


def config_logger(logfile: str = None, level: str = "INFO"):
    """Configure the logging system with a console handler and, when
    `logfile` is given, a rotating file handler."""
    logger.handlers.clear()
    logger.propagate = False
    try:
        logger.setLevel(level.upper() or logging.INFO)
    except ValueError:
        logger.setLevel(logging.INFO)

    # Console handler
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(handler)

    # File handler
    if logfile:
        handler = RotatingFileHandler(logfile, maxBytes=10485760, backupCount=2, encoding="utf-8")
        handler.setFormatter(
            logging.Formatter(
                "[%(asctime)s] %(levelname)s: %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
        logger.addHandler(handler)


def artifact(conf: dict, name: str) -> str:
    if name == "dataset" and conf["dataset"]:
        return conf["dataset"]
    return op.join(conf["out-dir"], ARTIFACTS[name])


def require(path: str, hint: str) -> str:
    if not op.isfile(path):
        raise MissingArtifactError(f'"{path}" does not exist; {hint}.')
    return path


def _town(conf: dict) -> Town:
    path = conf["collect"]["town"]
    return load_town(path) if path else Town()


def _collect_config(conf: dict, **kwargs) -> CollectConfig:
    c = conf["collect"]
    cfg = CollectConfig(
        episodes=c["episodes"],
        dynamic=c["dynamic"],
        record_every=c["record-every"],
        noise=float(c["steer-noise"]),
        noise_rate=float(c["noise-rate"]),
        noise_duration=float(c["noise-duration"]),
        min_segments=c["min-segments"],
        max_segments=c["max-segments"],
        max_time=float(c["max-time"]),
        balance=c["balance"],
    )
    return replace(cfg, **kwargs)


def _load_dataset(conf: dict, cache: dict = None):
    path = require(artifact(conf, "dataset"), "run `collect` first")
    if cache is not None and path in cache:
        return cache[path]
    records = load_demos(path)
    if not records:
        raise MissingArtifactError(f'"{path}" holds no demonstrations.')
    if cache is not None:
        cache[path] = records
    return records


def _write_rows(path: str, header, rows, append: bool = False) -> None:
    """Write a CSV; with `append`, rows of an existing file are kept."""
    old = []
    if append and op.isfile(path):
        with open(path, "r", encoding="utf-8", newline="") as f:
            old = list(csv.reader(f))[1:]
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(old)
        w.writerows(rows)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_collect(conf: dict, args) -> int:
    town = _town(conf)
    records, summary = collect_demos(town, _collect_config(conf), seed=derive_seed(conf["seed"], _SEED_COLLECT))
    if not records:
        raise RuntimeError("No demonstrations were recorded.")

    save_demos(artifact(conf, "dataset"), records)
    save_town(town, artifact(conf, "town"))
    with atomic_write(artifact(conf, "collect-summary")) as f:
        json.dump(asdict(summary), f, indent=2)

    logger.info("Commands: %s", ", ".join(f"{k} {v}" for k, v in summary.commands.items()))
    logger.info("Styles: %s", ", ".join(f"{k} {v}" for k, v in summary.styles.items()))
    logger.info("Collisions during collection: %d", summary.collisions)
    return EXIT_OK


def cmd_train(conf: dict, args) -> int:
    target = getattr(args, "target", None) or "policy"
    if target == "translator":
        return cmd_translate_train(conf, args)

    p = conf["policy"]
    heads = "none" if target == "cil" else p["heads"]
    if target == "policy" and heads == "none":
        raise ConfigError("policy.heads", 'use "--target cil" to train a policy without uncertainty heads')
    records = _load_dataset(conf)
    train, held = split_records(records, p["holdout"], np.random.default_rng(derive_seed(conf["seed"], _SEED_SPLIT)))

    ckpt = artifact(conf, target)
    net = adam = None
    history, initial = [], None
    if getattr(args, "resume", False) and op.isfile(ckpt):
        net, meta, adam = PolicyNet.load(ckpt)
        if net.config.heads != heads:
            raise ConfigError("policy.heads", f'"{ckpt}" holds a "{net.config.heads}" policy')
        if adam is None:
            raise CheckpointError(f'"{ckpt}" carries no optimizer state to resume from.')
        history = list(meta.get("curve", []))
        initial = meta.get("initial_loss")
        logger.info('Resuming "%s" after %d epochs.', ckpt, len(history))

    result = train_policy(
        train,
        TrainConfig(
            epochs=p["epochs"],
            batch_size=p["batch-size"],
            lr=float(p["lr"]),
            seed=derive_seed(conf["seed"], _SEED_POLICY),
        ),
        PolicyConfig(obs_dim=OBS_DIM, trunk=tuple(p["trunk"]), branch_hidden=p["branch-hidden"], heads=heads),
        net,
        adam,
    )
    curve = history + result.curve
    result.net.save(
        ckpt,
        {
            "seed": conf["seed"],
            "epochs": len(curve),
            "curve": curve,
            "initial_loss": result.initial_loss if initial is None else initial,
        },
        result.adam,
    )
    _write_rows(
        artifact(conf, f"{target}-curve"),
        ("epoch", "loss"),
        ((len(history) + i + 1, repr(v)) for i, v in enumerate(result.curve)),
        append=bool(history),
    )

    if held:
        logger.info(
            "Held-out action MSE %.6f (mean-action baseline %.6f) on %d records.",
            evaluate_mse(result.net, held),
            mean_baseline_mse(train, held),
            len(held),
        )
        if result.net.has_uncertainty:
            for style, var in style_uncertainty(result.net, held).items():
                logger.info('Mean predicted variance under "%s": %.6g', style, var)
    return EXIT_OK


def cmd_translate_train(conf: dict, args) -> int:
    t = conf["translator"]
    seed = conf["seed"]
    records = _load_dataset(conf)
    train_frames = stack_records(records).frames
    test_frames = collect_frames(
        _town(conf),
        _collect_config(conf, episodes=t["test-episodes"], balance=False),
        TEST_STYLE,
        seed=derive_seed(seed, _SEED_TEST_FRAMES),
    )

    cfg = TranslatorConfig(
        obs_dim=train_frames.shape[1],
        content_dim=t["content-dim"],
        hidden=t["hidden"],
        disc_hidden=t["hidden"],
        iterations=t["iterations"],
        batch_size=t["batch-size"],
        lr=float(t["lr"]),
        w_image=float(t["w-image"]),
        w_content=float(t["w-content"]),
        w_style=float(t["w-style"]),
        w_adversarial=float(t["w-adversarial"]),
        seed=derive_seed(seed, _SEED_TRANSLATOR),
    )
    ckpt = artifact(conf, "translator")
    translator = adam = None
    done = 0
    if getattr(args, "resume", False) and op.isfile(ckpt):
        translator, meta, adam = Translator.load(ckpt)
        done = int(meta.get("iterations", 0))
        logger.info('Resuming "%s" after %d iterations.', ckpt, done)

    result = train_translator(train_frames, test_frames, cfg, translator, adam)
    result.translator.save(ckpt, {"seed": seed, "iterations": done + cfg.iterations}, result.adam)
    _write_rows(
        artifact(conf, "translator-curve"),
        ("iteration", "image", "content", "style", "adversarial", "discriminator"),
        ((done + i + 1, *map(repr, row)) for i, row in enumerate(result.curves.rows())),
        append=bool(done),
    )

    pool = StylePool.build(records, np.random.default_rng(derive_seed(seed, _SEED_POOL)), per_style=t["pool-size"])
    pool.save(artifact(conf, "style-pool"))
    logger.info('Style pool of %d frames written to "%s"', len(pool), artifact(conf, "style-pool"))
    return EXIT_OK


def cmd_calibrate(conf: dict, args) -> int:
    k = conf["calibrate"]
    rows = calibration_sweep(
        [float(v) for v in k["noise-levels"]],
        n_labels=k["labels"],
        epochs=k["epochs"],
        lr=float(k["lr"]),
        seed=derive_seed(conf["seed"], _SEED_CALIBRATE),
    )
    write_calibration_csv(rows, artifact(conf, "calibration"))
    if is_monotone(rows):
        logger.info("Recovered variances increase with the true variance.")
    else:
        logger.warning("Recovered variances are not monotone in the true variance.")
    return EXIT_OK


def expert_factory(trial: int) -> ExpertAgent:
    return ExpertAgent()


def _cell_factory(conf: dict, agent: str, strategy, cache: dict):
    """Load what one benchmark cell needs. Raises MissingArtifactError when
    a checkpoint, the style pool or the dataset is absent."""
    if agent == "expert":
        return expert_factory
    target = "policy" if agent == "uail" else "cil"
    path = require(artifact(conf, target), f"run `train --target {target}` first")
    if path not in cache:
        cache[path] = PolicyNet.load(path)[0]
    policy = cache[path]
    if policy.has_uncertainty != (agent == "uail"):
        raise CheckpointError(f'"{path}" does not hold a {agent} policy.')

    models = DeployModels()
    if strategy.needs_translator or strategy.needs_pool:
        tpath = require(artifact(conf, "translator"), "run `translate-train` first")
        if tpath not in cache:
            cache[tpath] = Translator.load(tpath)[0]
        models.translator = cache[tpath]
    if strategy.needs_pool:
        ppath = require(artifact(conf, "style-pool"), "run `translate-train` first")
        if ppath not in cache:
            cache[ppath] = StylePool.load(ppath, _load_dataset(conf, cache)).encode_with(models.translator)
        models.pool = cache[ppath]

    b = conf["benchmark"]
    strategy = replace(strategy, per_dimension=b["per-dimension"])
    return AgentFactory(policy, strategy, models, record_trace=b["trace"] and strategy.stochastic)


def cmd_benchmark(conf: dict, args) -> int:
    b = conf["benchmark"]
    town = _town(conf)
    weather = StyleId(b["weather"])
    seeds = [derive_seed(conf["seed"], _SEED_BENCHMARK, k) for k in range(b["trials"])]

    factories, missing, cache = {}, [], {}
    for cell in b["cells"]:
        agent, strategy = parse_cell(cell)
        try:
            factories[cell] = _cell_factory(conf, agent, strategy, cache)
        except MissingArtifactError as e:
            logger.error("Skipping cell %s: %s", cell, e)
            missing.append(cell)

    metrics, traces = [], []
    for task in b["tasks"]:
        suite = BenchmarkSuite.create(
            town,
            Task(task),
            weather,
            b["routes"],
            time_limit_factor=float(b["time-limit-factor"]),
            terminate_on_collision=b["terminate-on-collision"],
        )
        # expert times are cached on the suite before it is shipped to workers
        for r in range(len(suite.routes)):
            for s in seeds:
                suite.time_limit(r, s)
        for cell, factory in factories.items():
            start = time.perf_counter()
            results = run_suite(factory, suite, seeds, conf["workers"])
            for res in results:
                metrics.append(res.metrics)
                traces.extend(res.trace)
            logger.info(
                "%s on %s: %d of %d episodes successful (%s)",
                cell,
                task,
                sum(r.metrics.success for r in results),
                len(results),
                humantime(time.perf_counter() - start),
            )

    write_jsonl(artifact(conf, "metrics"), (m.to_dict() for m in metrics))
    write_jsonl(artifact(conf, "traces"), traces)
    report = BenchmarkReport.build(metrics)
    report.write_csv(artifact(conf, "report-csv"))
    report.write_text(artifact(conf, "report-txt"), missing)
    logger.info("Benchmark under %s:\n%s", weather.value, report.text(missing))
    if missing:
        logger.error("%d cell(s) were skipped for missing artifacts.", len(missing))
        return EXIT_MISSING
    return EXIT_OK


def cmd_report(conf: dict, args) -> int:
    files = getattr(args, "files", None) or [artifact(conf, "metrics")]
    for path in files:
        require(path, "run `benchmark` first")
    trace_files = getattr(args, "traces", None) or [artifact(conf, "traces")]
    episodes = load_metrics(files)
    traces = load_traces([p for p in trace_files if op.isfile(p)])

    report = BenchmarkReport.build(episodes)
    write_success_series(report, artifact(conf, "success-series"))
    write_uncertainty_hist(traces, artifact(conf, "uncertainty-hist"))
    write_chosen_frequency(traces, artifact(conf, "chosen-frequency"))
    write_summary(report, traces, artifact(conf, "summary"))
    logger.info("Report of %d episodes and %d trace steps:\n%s", len(episodes), len(traces), report.text())
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "translate-train": cmd_translate_train,
    "calibrate": cmd_calibrate,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file; a template is written if it does not exist")
    common.add_argument("--seed", type=int, help="run seed (required unless set in the file)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="benchmark worker processes")
    common.add_argument("--strategy", help='comma-separated benchmark cells, e.g. "uail/stochastic-cross,cil/direct"')
    common.add_argument("--task", choices=[t.value for t in Task])
    common.add_argument("--weather", choices=[s.value for s in StyleId])
    common.add_argument("--trials", type=int)
    common.add_argument("--episodes", type=int, help="collection episodes")
    common.add_argument("--no-dynamic", action="store_true", help="collect without dynamic agents")
    common.add_argument("--epochs", type=int, help="training epochs, translator iterations or calibration epochs")

    parser = argparse.ArgumentParser(prog=PKG_NAME, description="Uncertainty-aware imitation learning lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common], help="record expert demonstrations")
    train = sub.add_parser("train", parents=[common], help="train a policy or the translator")
    train.add_argument("--target", choices=("policy", "cil", "translator"), default="policy")
    train.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    translate = sub.add_parser("translate-train", parents=[common], help="train the translator and the style pool")
    translate.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    sub.add_parser("calibrate", parents=[common], help="run the variance recovery sweep")
    sub.add_parser("benchmark", parents=[common], help="run the driving benchmark")
    report = sub.add_parser("report", parents=[common], help="derive tables and plot data")
    report.add_argument("files", nargs="*", help="metrics JSON-lines files")
    report.add_argument("--traces", nargs="*", help="selection trace JSON-lines files")
    return parser


def _cells(text: str):
    if not text:
        return None
    cells = [s.strip() for s in text.split(",") if s.strip()]
    return [c if "/" in c or c == "expert" else f"uail/{c}" for c in cells]


def overrides_from_args(args) -> dict:
    """Dotted config keys set by command-line flags."""
    command = args.command
    if command == "translate-train" or (command == "train" and args.target == "translator"):
        epochs_key = "translator.iterations"
    elif command == "calibrate":
        epochs_key = "calibrate.epochs"
    else:
        epochs_key = "policy.epochs"
    return {
        "seed": args.seed,
        "out-dir": args.out,
        "workers": args.workers,
        "collect.episodes": args.episodes,
        "collect.dynamic": False if args.no_dynamic else None,
        epochs_key: args.epochs,
        "benchmark.cells": _cells(args.strategy),
        "benchmark.tasks": [args.task] if args.task else None,
        "benchmark.weather": args.weather,
        "benchmark.trials": args.trials,
    }


def main(argv=None) -> int:
    """Entry point for the lab. Returns the process exit code: 0 success,
    2 configuration error, 3 missing artifact, 4 numerical failure, 1 any
    other failure."""
    args = build_parser().parse_args(argv)
    try:
        conf = config.parse(args.config, overrides_from_args(args))
    except ConfigError as e:
        sys.stderr.write(f"Configuration error: {e}\n")
        return EXIT_CONFIG

    conf["out-dir"] = op.abspath(conf["out-dir"])
    os.makedirs(conf["out-dir"], exist_ok=True)
    config_logger(op.join(conf["out-dir"], PKG_NAME + ".log"), conf["log-level"])

    flock = FileLocker(op.join(conf["out-dir"], f".{PKG_NAME}.lock"), blocking=False)
    code = EXIT_OK
    try:
        flock.acquire()
        start = time.perf_counter()
        logger.info('%s: seed %d, output "%s"', args.command, conf["seed"], conf["out-dir"])
        code = COMMANDS[args.command](conf, args)
    except ConfigError as e:
        logger.critical("Configuration error: %s", e)
        code = EXIT_CONFIG
    except (MissingArtifactError, CheckpointError) as e:
        logger.critical(e)
        code = EXIT_MISSING
    except (FloatingPointError, ConvergenceError) as e:
        logger.critical(e)
        code = EXIT_NUMERIC
    except Exception as e:
        logger.critical(e)
        code = EXIT_FAILURE
    else:
        logger.info("Execution completed in %s.", humantime(time.perf_counter() - start))
    finally:
        flock.release()
    return code
