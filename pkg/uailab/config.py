import json
import os.path as op
from copy import deepcopy

from .benchmark import ROUTES_PER_TASK
from .deploy import Strategy
from .policy import HEADS
from .town import Task
from .utils import atomic_write
from .world import StyleId

_NUMBER = (int, float)

# Config fields with keys, expected types, and default values. Sections are
# tuples of fields. A None default marks a value the user must supply.
FIELDS = (
    ("log-level", str, "INFO"),
    ("seed", int, None),
    ("out-dir", str, "runs"),
    ("dataset", str, ""),
    ("workers", int, 1),
    (
        "collect",
        dict,
        (
            ("episodes", int, 80),
            ("dynamic", bool, True),
            ("record-every", int, 2),
            ("steer-noise", _NUMBER, 0.3),
            ("noise-rate", _NUMBER, 0.02),
            ("noise-duration", _NUMBER, 1.0),
            ("min-segments", int, 4),
            ("max-segments", int, 7),
            ("max-time", _NUMBER, 120.0),
            ("balance", bool, True),
            ("town", str, ""),
        ),
    ),
    (
        "policy",
        dict,
        (
            ("epochs", int, 50),
            ("batch-size", int, 256),
            ("lr", _NUMBER, 5e-4),
            ("trunk", list, [128, 64]),
            ("branch-hidden", int, 32),
            ("heads", str, "separate"),
            ("holdout", _NUMBER, 0.1),
        ),
    ),
    (
        "translator",
        dict,
        (
            ("iterations", int, 3000),
            ("batch-size", int, 64),
            ("lr", _NUMBER, 1e-3),
            ("content-dim", int, 32),
            ("hidden", int, 64),
            ("w-image", _NUMBER, 10.0),
            ("w-content", _NUMBER, 1.0),
            ("w-style", _NUMBER, 1.0),
            ("w-adversarial", _NUMBER, 1.0),
            ("test-episodes", int, 10),
            ("pool-size", int, 10),
        ),
    ),
    (
        "calibrate",
        dict,
        (
            ("noise-levels", list, [0.01, 0.04, 0.16, 0.64]),
            ("labels", int, 512),
            ("epochs", int, 3000),
            ("lr", _NUMBER, 5e-2),
        ),
    ),
    (
        "benchmark",
        dict,
        (
            (
                "cells",
                list,
                [
                    "cil/direct",
                    "cil/deterministic-single",
                    "uail/direct",
                    "uail/deterministic-single",
                    "uail/stochastic-single",
                    "uail/stochastic-random",
                    "uail/stochastic-cross",
                ],
            ),
            ("tasks", list, [t.value for t in Task]),
            ("weather", str, StyleId.DAYTIME_HARD_RAIN.value),
            ("trials", int, 3),
            ("routes", int, ROUTES_PER_TASK),
            ("time-limit-factor", _NUMBER, 3.0),
            ("terminate-on-collision", bool, False),
            ("per-dimension", bool, True),
            ("trace", bool, True),
        ),
    ),
)

AGENTS = ("uail", "cil", "expert")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(ValueError):
    """A rejected configuration; the message names the offending key."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f'"{key}": {message}')
        self.key = key


def _typecheck(val, _type) -> bool:
    # bool is an int subclass; only a bool field accepts it
    if isinstance(val, bool):
        return _type is bool
    return isinstance(val, _type)


def _typename(_type) -> str:
    if isinstance(_type, tuple):
        return "number"
    return {str: "string", int: "integer", bool: "boolean", list: "list"}.get(_type, _type.__name__)


def makeconfig(fields: tuple, userconf: dict = None, strict: bool = True, _path: str = "") -> dict:
    """
    Construct a config dict from a template and user settings. In strict mode
    a wrong type or an unknown key raises ConfigError; otherwise the default
    replaces it.
    """
    if userconf is None:
        userconf = {}
    elif not isinstance(userconf, dict):
        if strict:
            raise ConfigError(_path.rstrip(".") or "<root>", "expected an object")
        userconf = {}
    if strict:
        known = {key for key, _, _ in fields}
        for key in userconf:
            if key not in known:
                raise ConfigError(_path + key, "unknown key")

    conf = {}
    for key, _type, default in fields:
        name = _path + key
        if _type is dict:
            conf[key] = makeconfig(default, userconf.get(key), strict, name + ".")
            continue
        if key not in userconf:
            conf[key] = deepcopy(default)
            continue
        val = userconf[key]
        if val is None and default is None:
            conf[key] = None
        elif _typecheck(val, _type):
            conf[key] = val
        elif strict:
            raise ConfigError(name, f"expected {_typename(_type)}, got {val!r}")
        else:
            conf[key] = deepcopy(default)
    return conf


def apply_overrides(conf: dict, overrides: dict) -> None:
    """Set dotted keys such as "benchmark.trials"; None values are skipped."""
    for dotted, val in overrides.items():
        if val is None:
            continue
        *sections, key = dotted.split(".")
        node = conf
        for s in sections:
            node = node[s]
        if key not in node:
            raise ConfigError(dotted, "unknown key")
        node[key] = val


def parse(file: str = None, overrides: dict = None) -> dict:
    """Read, complete and validate a configuration.

    A missing file is created from the template and the run stops so that
    the user can review it. Keys absent from an existing file are written
    back with their defaults. `overrides` are applied afterwards and never
    persisted.
    """
    if file is None:
        conf = makeconfig(FIELDS)
    else:
        try:
            with open(file, "r", encoding="utf-8") as f:
                userconf = json.load(f)
        except FileNotFoundError:
            json_dump(makeconfig(FIELDS), file)
            raise ConfigError(
                "config",
                f'a template has been created at "{file}". '
                "Review the settings (the seed is required) and run again.",
            )
        except ValueError as e:  # including JSONDecodeError
            raise ConfigError("config", f'corrupted file "{file}": {e}')
        if not isinstance(userconf, dict):
            raise ConfigError("config", f'"{file}" does not hold an object.')
        conf = makeconfig(FIELDS, userconf)
        if conf != userconf:
            json_dump(conf, file)

    apply_overrides(conf, overrides or {})
    validate(conf)
    return conf


def _positive(conf: dict, *keys: str) -> None:
    for dotted in keys:
        section, _, key = dotted.rpartition(".")
        val = conf[section][key] if section else conf[key]
        if val <= 0:
            raise ConfigError(dotted, f"must be positive, got {val!r}")


def _number_list(val, key: str, min_len: int = 1) -> None:
    if len(val) < min_len:
        raise ConfigError(key, f"needs at least {min_len} entries")
    for x in val:
        if not _typecheck(x, _NUMBER):
            raise ConfigError(key, f"expected numbers, got {x!r}")


def parse_cell(text: str):
    """Split "agent/strategy" into the agent name and a Strategy (None for
    the expert)."""
    agent, sep, rest = text.partition("/")
    if agent not in AGENTS:
        raise ValueError(f'unknown agent "{agent}", expect one of {AGENTS}')
    if agent == "expert":
        if sep and rest not in ("", "state"):
            raise ValueError("the expert reads the simulator state and takes no strategy")
        return agent, None
    if not rest:
        raise ValueError(f'cell "{text}" names no strategy')
    strategy = Strategy.parse(rest)
    if agent == "cil" and strategy.stochastic:
        raise ValueError(f"{strategy} selects by uncertainty; the CIL baseline predicts none")
    return agent, strategy


def validate(conf: dict) -> None:
    """Raise ConfigError on the first value the lab cannot run with."""
    if conf["seed"] is None:
        raise ConfigError("seed", "required; set it in the file or pass --seed")
    if conf["seed"] < 0:
        raise ConfigError("seed", "must be non-negative")
    if conf["log-level"].upper() not in LOG_LEVELS:
        raise ConfigError("log-level", f"expect one of {LOG_LEVELS}")
    if not conf["out-dir"]:
        raise ConfigError("out-dir", "must not be empty")
    _positive(conf, "workers")

    c = conf["collect"]
    _positive(
        conf,
        "collect.episodes",
        "collect.record-every",
        "collect.min-segments",
        "collect.noise-duration",
        "collect.max-time",
    )
    if c["min-segments"] > c["max-segments"]:
        raise ConfigError("collect.max-segments", "must not be below collect.min-segments")
    if c["steer-noise"] < 0:
        raise ConfigError("collect.steer-noise", "must not be negative")
    if not 0 <= c["noise-rate"] <= 1:
        raise ConfigError("collect.noise-rate", "must lie in [0, 1]")
    if c["town"] and not op.isfile(c["town"]):
        raise ConfigError("collect.town", f'no such file "{c["town"]}"')

    p = conf["policy"]
    _positive(conf, "policy.epochs", "policy.batch-size", "policy.lr", "policy.branch-hidden")
    if p["heads"] not in HEADS:
        raise ConfigError("policy.heads", f"expect one of {HEADS}")
    if not p["trunk"] or not all(_typecheck(w, int) and w > 0 for w in p["trunk"]):
        raise ConfigError("policy.trunk", "expected a non-empty list of positive integers")
    if not 0 <= p["holdout"] < 1:
        raise ConfigError("policy.holdout", "must lie in [0, 1)")

    t = conf["translator"]
    _positive(
        conf,
        "translator.iterations",
        "translator.batch-size",
        "translator.lr",
        "translator.content-dim",
        "translator.hidden",
        "translator.test-episodes",
        "translator.pool-size",
    )
    for key in ("w-image", "w-content", "w-style", "w-adversarial"):
        if t[key] < 0:
            raise ConfigError(f"translator.{key}", "must not be negative")

    k = conf["calibrate"]
    _number_list(k["noise-levels"], "calibrate.noise-levels", min_len=3)
    if any(x < 0 for x in k["noise-levels"]):
        raise ConfigError("calibrate.noise-levels", "variances must not be negative")
    _positive(conf, "calibrate.labels", "calibrate.epochs", "calibrate.lr")
    if k["labels"] < 2:
        raise ConfigError("calibrate.labels", "needs at least 2 labels")

    b = conf["benchmark"]
    if not b["cells"]:
        raise ConfigError("benchmark.cells", "must not be empty")
    for cell in b["cells"]:
        if not isinstance(cell, str):
            raise ConfigError("benchmark.cells", f"expected strings, got {cell!r}")
        try:
            parse_cell(cell)
        except ValueError as e:
            raise ConfigError("benchmark.cells", str(e))
    if not b["tasks"]:
        raise ConfigError("benchmark.tasks", "must not be empty")
    for task in b["tasks"]:
        try:
            Task(task)
        except ValueError:
            raise ConfigError("benchmark.tasks", f"unknown task {task!r}, expect one of {[t.value for t in Task]}")
    try:
        StyleId(b["weather"])
    except ValueError:
        raise ConfigError("benchmark.weather", f"unknown condition {b['weather']!r}")
    _positive(conf, "benchmark.trials", "benchmark.routes", "benchmark.time-limit-factor")
    if b["routes"] > ROUTES_PER_TASK:
        raise ConfigError("benchmark.routes", f"at most {ROUTES_PER_TASK} routes per task")


def json_dump(data, file: str):
    with atomic_write(file) as f:
        json.dump(data, f, indent=4, ensure_ascii=False)
