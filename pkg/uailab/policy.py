"""Branched conditional policy with per-action log-variance heads.

A shared trunk reads the flattened frame and the normalized speed; four
action branches and four uncertainty branches, one per high-level command,
sit on top of it. The command picks which branch pair produces the output.
Selection is done with exact 0/1 row masks, so a sample never sends
gradient into the branches of other commands.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint, logger
from .aleatoric import (
    AleatoricPrediction,
    aleatoric_loss,
    aleatoric_terms,
    clamp_log_variance,
)
from .nn import (
    DimensionError,
    NonFiniteError,
    ParamStore,
    Tape,
    Tensor,
    add,
    columns,
    concat,
    init_mlp,
    mean,
    mlp,
    mul_mask,
    reduce_sum,
    sigmoid,
    square,
    sub,
    tanh,
)
from .optim import AdamState, adam_step
from .utils import atomic_write, iter_jsonl

HEADS = ("separate", "joint", "none")


class HighLevelCommand(IntEnum):
    STRAIGHT = 0
    LEFT = 1
    RIGHT = 2
    FOLLOW_LANE = 3


class ActionTriple(NamedTuple):
    accelerate: float
    steer: float
    brake: float


class UncertaintyTriple(NamedTuple):
    accelerate: float
    steer: float
    brake: float


ACTION_LOW = np.array([0.0, -1.0, 0.0])
ACTION_HIGH = np.array([1.0, 1.0, 1.0])


def clip_action(a) -> ActionTriple:
    return ActionTriple(*np.clip(np.asarray(a, dtype=np.float64), ACTION_LOW, ACTION_HIGH).tolist())


@dataclass
class PolicyInput:
    frame: np.ndarray
    velocity: float
    command: HighLevelCommand


@dataclass
class PolicyOutput:
    action: ActionTriple
    log_variances: Optional[UncertaintyTriple]

    @property
    def has_uncertainty(self) -> bool:
        return self.log_variances is not None


@dataclass
class DemoRecord:
    id: int
    frame: np.ndarray
    velocity: float
    command: HighLevelCommand
    action: ActionTriple
    style: str

    def __post_init__(self):
        a = np.asarray(self.action, dtype=np.float64)
        if np.any(a < ACTION_LOW) or np.any(a > ACTION_HIGH):
            raise ValueError(f"Record {self.id}: action {a.tolist()} out of range")


@dataclass
class PolicyConfig:
    obs_dim: int = 256
    trunk: Tuple[int, ...] = (128, 64)
    branch_hidden: int = 32
    heads: str = "separate"
    v_max: float = 10.0

    def __post_init__(self):
        self.trunk = tuple(self.trunk)
        if self.heads not in HEADS:
            raise ValueError(f'Unknown head layout "{self.heads}", expect one of {HEADS}')

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = list(self.trunk)
        return d


class PolicyNet:
    """Parameters plus architecture of one branched policy."""

    def __init__(
        self,
        config: PolicyConfig,
        params: Optional[ParamStore] = None,
        seed: int = 0,
        init: str = "auto",
    ) -> None:
        self.config = config
        self.trunk_spec = tuple((w, "relu") for w in config.trunk)
        out = 6 if config.heads == "joint" else 3
        self.branch_spec = ((config.branch_hidden, "relu"), (out, "linear"))
        self.unc_spec = ((config.branch_hidden, "relu"), (3, "linear"))
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            init_mlp(params, "trunk", config.obs_dim + 1, self.trunk_spec, rng, init)
            feat = config.trunk[-1]
            for c in HighLevelCommand:
                init_mlp(params, f"branch.{c.value}.act", feat, self.branch_spec, rng, init)
                if config.heads == "separate":
                    init_mlp(params, f"branch.{c.value}.unc", feat, self.unc_spec, rng, init)
        self.params = params
        self._check_params()

    def _check_params(self) -> None:
        expected = ParamStore()
        rng = np.random.default_rng(0)
        init_mlp(expected, "trunk", self.config.obs_dim + 1, self.trunk_spec, rng, "zero")
        for c in HighLevelCommand:
            init_mlp(expected, f"branch.{c.value}.act", self.config.trunk[-1], self.branch_spec, rng, "zero")
            if self.config.heads == "separate":
                init_mlp(expected, f"branch.{c.value}.unc", self.config.trunk[-1], self.unc_spec, rng, "zero")
        for name, value in expected.items():
            if name not in self.params:
                raise DimensionError(f'Policy parameters lack "{name}"')
            if self.params[name].shape != value.shape:
                raise DimensionError(
                    f'Parameter "{name}" has shape {list(self.params[name].shape)}, '
                    f"architecture expects {list(value.shape)}"
                )
        extra = set(self.params) - set(expected)
        if extra:
            raise DimensionError(f"Unexpected policy parameters: {sorted(extra)[:5]}")

    @property
    def has_uncertainty(self) -> bool:
        return self.config.heads != "none"

    def inputs(self, frames, velocities) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[None, :]
        if frames.ndim != 2 or frames.shape[1] != self.config.obs_dim:
            raise DimensionError(
                f"policy: frame width {list(frames.shape)} does not match "
                f"observation size {self.config.obs_dim}"
            )
        v = np.asarray(velocities, dtype=np.float64).reshape(-1, 1)
        if v.shape[0] != frames.shape[0]:
            raise DimensionError("policy: one velocity per frame expected")
        return np.concatenate([frames, v / self.config.v_max], axis=1)

    def forward_tensors(
        self, tape: Tape, frames, velocities, commands
    ) -> Tuple[Tensor, Optional[Tensor]]:
        """Squashed actions (n, 3) and clamped log-variances (n, 3) on `tape`."""
        x = tape.constant(self.inputs(frames, velocities))
        commands = np.asarray(commands, dtype=np.int64).ravel()
        if commands.shape[0] != x.shape[0]:
            raise DimensionError("policy: one command per frame expected")
        h = mlp(self.params, "trunk", self.trunk_spec, x)

        raw_act = raw_unc = None
        for c in HighLevelCommand:
            mask = (commands == c.value).astype(np.float64)
            out = mul_mask(mlp(self.params, f"branch.{c.value}.act", self.branch_spec, h), mask)
            raw_act = out if raw_act is None else add(raw_act, out)
            if self.config.heads == "separate":
                out = mul_mask(mlp(self.params, f"branch.{c.value}.unc", self.unc_spec, h), mask)
                raw_unc = out if raw_unc is None else add(raw_unc, out)

        if self.config.heads == "joint":
            raw_unc = columns(raw_act, 3, 6)
            raw_act = columns(raw_act, 0, 3)

        action = concat(
            [
                sigmoid(columns(raw_act, 0, 1)),
                tanh(columns(raw_act, 1, 2)),
                sigmoid(columns(raw_act, 2, 3)),
            ]
        )
        log_var = None if raw_unc is None else clamp_log_variance(raw_unc)
        return action, log_var

    def forward_batch(self, frames, velocities, commands) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        action, log_var = self.forward_tensors(Tape(), frames, velocities, commands)
        return action.data, None if log_var is None else log_var.data

    def loss_tensor(self, tape: Tape, frames, velocities, commands, targets) -> Tensor:
        """Per-sample training loss, shape (n,)."""
        action, log_var = self.forward_tensors(tape, frames, velocities, commands)
        targets = tape.constant(np.asarray(targets, dtype=np.float64))
        if log_var is None:
            return reduce_sum(square(sub(targets, action)), axis=1)
        return reduce_sum(aleatoric_terms(action, log_var, targets), axis=1)

    def save(self, path: str, meta: Optional[dict] = None, adam: Optional[AdamState] = None) -> None:
        arrays = self.params.state_dict()
        info = {"kind": "policy", "config": self.config.to_dict()}
        if adam is not None:
            arrays.update(adam.export())
            info["adam"] = adam.hyper()
        info.update(meta or {})
        checkpoint.save(path, arrays, info)

    @classmethod
    def load(cls, path: str) -> Tuple["PolicyNet", dict, Optional[AdamState]]:
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "policy":
            raise checkpoint.CheckpointError(f'"{path}" does not hold a policy.')
        params = ParamStore()
        for name, value in arrays.items():
            if not name.startswith("adam."):
                params.add(name, value)
        adam = AdamState.restore(arrays, meta["adam"]) if "adam" in meta else None
        return cls(PolicyConfig.from_dict(meta["config"]), params), meta, adam


def policy_forward(net: PolicyNet, inp: PolicyInput) -> PolicyOutput:
    actions, log_vars = net.forward_batch(inp.frame[None, :], [inp.velocity], [int(inp.command)])
    return PolicyOutput(
        ActionTriple(*actions[0].tolist()),
        None if log_vars is None else UncertaintyTriple(*log_vars[0].tolist()),
    )


def policy_loss(output: PolicyOutput, target: ActionTriple) -> float:
    """Sum of one aleatoric term per action dimension."""
    if output.log_variances is None:
        return cil_loss(output, target)
    return aleatoric_loss(AleatoricPrediction(output.action, output.log_variances), target)


def cil_loss(output: PolicyOutput, target: ActionTriple) -> float:
    r = np.asarray(target, dtype=np.float64) - np.asarray(output.action, dtype=np.float64)
    return float(np.sum(r * r))


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass
class DemoArrays:
    ids: np.ndarray
    frames: np.ndarray
    velocities: np.ndarray
    commands: np.ndarray
    actions: np.ndarray
    styles: List[str]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, index) -> "DemoArrays":
        return DemoArrays(
            self.ids[index],
            self.frames[index],
            self.velocities[index],
            self.commands[index],
            self.actions[index],
            [self.styles[i] for i in np.atleast_1d(np.arange(len(self))[index])],
        )


def stack_records(records: Sequence[DemoRecord]) -> DemoArrays:
    if not records:
        raise ValueError("No demonstration records.")
    return DemoArrays(
        ids=np.array([r.id for r in records], dtype=np.int64),
        frames=np.stack([np.asarray(r.frame, dtype=np.float64) for r in records]),
        velocities=np.array([r.velocity for r in records], dtype=np.float64),
        commands=np.array([int(r.command) for r in records], dtype=np.int64),
        actions=np.array([tuple(r.action) for r in records], dtype=np.float64),
        styles=[r.style for r in records],
    )


def record_to_dict(r: DemoRecord) -> dict:
    return {
        "id": int(r.id),
        "frame": np.asarray(r.frame, dtype=np.float64).tolist(),
        "velocity": float(r.velocity),
        "command": int(r.command),
        "action": [float(a) for a in r.action],
        "style": r.style,
    }


def record_from_dict(d: dict) -> DemoRecord:
    return DemoRecord(
        id=d["id"],
        frame=np.asarray(d["frame"], dtype=np.float64),
        velocity=d["velocity"],
        command=HighLevelCommand(d["command"]),
        action=ActionTriple(*d["action"]),
        style=d["style"],
    )


def save_demos(path: str, records: Sequence[DemoRecord]) -> None:
    """One record per line; frames are inline arrays of floats."""
    with atomic_write(path) as f:
        for r in records:
            f.write(json.dumps(record_to_dict(r), separators=(",", ":")))
            f.write("\n")
    logger.info('Saved %d demonstration records to "%s"', len(records), path)


def load_demos(path: str) -> List[DemoRecord]:
    return [record_from_dict(d) for d in iter_jsonl(path)]


def split_records(
    records: Sequence[DemoRecord], holdout: float, rng: np.random.Generator
) -> Tuple[List[DemoRecord], List[DemoRecord]]:
    order = rng.permutation(len(records))
    n_test = int(round(len(records) * holdout))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return [records[i] for i in train], [records[i] for i in test]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 5e-4
    seed: int = 0


@dataclass
class TrainResult:
    net: PolicyNet
    adam: AdamState
    curve: List[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def dataset_loss(net: PolicyNet, data: DemoArrays, batch_size: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        losses = net.loss_tensor(
            Tape(), data.frames[sl], data.velocities[sl], data.commands[sl], data.actions[sl]
        )
        total += float(losses.data.sum())
    return total / len(data)


def _locate_non_finite(net: PolicyNet, data: DemoArrays, batch: np.ndarray) -> int:
    for i in batch:
        try:
            net.loss_tensor(
                Tape(),
                data.frames[i : i + 1],
                data.velocities[i : i + 1],
                data.commands[i : i + 1],
                data.actions[i : i + 1],
            )
        except NonFiniteError:
            return int(data.ids[i])
    return -1


def train_policy(
    records: Sequence[DemoRecord],
    config: TrainConfig,
    policy_config: Optional[PolicyConfig] = None,
    net: Optional[PolicyNet] = None,
    adam: Optional[AdamState] = None,
) -> TrainResult:
    """Mini-batch Adam over demonstrations with the command-masked loss.

    Pass `net` and `adam` to resume a run; the curve then continues from the
    restored optimizer step.
    """
    data = stack_records(records)
    if net is None:
        net = PolicyNet(policy_config or PolicyConfig(obs_dim=data.frames.shape[1]), seed=config.seed)
    if adam is None:
        adam = AdamState(lr=config.lr)

    missing = set(HighLevelCommand) - set(HighLevelCommand(c) for c in np.unique(data.commands))
    if missing:
        logger.warning(
            "Training data lacks commands: %s", ", ".join(c.name for c in sorted(missing))
        )

    rng = np.random.default_rng([config.seed, adam.step])
    initial = dataset_loss(net, data)
    logger.info(
        "Training %s policy on %d records: initial loss %.6f",
        net.config.heads,
        len(data),
        initial,
    )

    curve = []
    n = len(data)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo : lo + config.batch_size]
            tape = Tape()
            try:
                losses = net.loss_tensor(
                    tape,
                    data.frames[batch],
                    data.velocities[batch],
                    data.commands[batch],
                    data.actions[batch],
                )
                loss = mean(losses)
                net.params.zero_grad()
                tape.backward(loss)
            except NonFiniteError as e:
                raise NonFiniteError(
                    "Non-finite loss during policy training",
                    epoch=epoch,
                    batch=b,
                    sample=_locate_non_finite(net, data, batch),
                ) from e
            adam_step(net.params, adam)
            total += float(losses.data.sum())
        curve.append(total / n)
        logger.info(
            "Epoch %d/%d: loss %.6f (%.2f s)",
            epoch + 1,
            config.epochs,
            curve[-1],
            time.perf_counter() - start,
        )

    if curve and curve[-1] > initial:
        logger.warning("Final loss %.6f is above the initial loss %.6f.", curve[-1], initial)
    return TrainResult(net=net, adam=adam, curve=curve, initial_loss=initial)


def evaluate_mse(net: PolicyNet, records: Sequence[DemoRecord]) -> float:
    data = stack_records(records)
    actions, _ = net.forward_batch(data.frames, data.velocities, data.commands)
    return float(np.mean((actions - data.actions) ** 2))


def mean_baseline_mse(train: Sequence[DemoRecord], test: Sequence[DemoRecord]) -> float:
    """MSE of always predicting the training-set mean action."""
    mu = stack_records(train).actions.mean(axis=0)
    return float(np.mean((stack_records(test).actions - mu) ** 2))


def style_uncertainty(net: PolicyNet, records: Sequence[DemoRecord], dimension: Optional[int] = None) -> Dict[str, float]:
    """Mean predicted variance per style, of one action `dimension` or
    averaged over the three actions."""
    if not net.has_uncertainty:
        raise ValueError("The policy has no uncertainty heads.")
    data = stack_records(records)
    _, log_vars = net.forward_batch(data.frames, data.velocities, data.commands)
    var = np.exp(log_vars)
    var = var.mean(axis=1) if dimension is None else var[:, dimension]
    out = {}
    for style in sorted(set(data.styles)):
        mask = np.array([s == style for s in data.styles])
        out[style] = float(var[mask].mean())
    return out
