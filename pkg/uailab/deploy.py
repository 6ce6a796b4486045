"""Deployment strategies and minimum-uncertainty action selection.

At each step a stochastic strategy encodes the content of the test frame,
decodes it under M training-domain styles, runs the policy on all M frames
and assembles the action dimension by dimension from the candidate with the
smallest predicted log-variance. With the ":oracle" argument the candidates
are exact re-renders of the world state in the training styles instead.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import logger
from .nn import NonFiniteError
from .policy import ActionTriple, HighLevelCommand, PolicyNet, PolicyOutput, UncertaintyTriple
from .translator import (
    STYLE_DIM,
    StylePool,
    Translator,
    fixed_style_code,
    oracle_translate,
    translate_to_train,
)
from .world import TRAINING_STYLES, StyleId, WorldState


class StrategyKind(Enum):
    DIRECT = "direct"
    DETERMINISTIC_SINGLE = "deterministic-single"
    STOCHASTIC_SINGLE = "stochastic-single"
    STOCHASTIC_RANDOM = "stochastic-random"
    STOCHASTIC_CROSS = "stochastic-cross"


STOCHASTIC = (StrategyKind.STOCHASTIC_SINGLE, StrategyKind.STOCHASTIC_RANDOM, StrategyKind.STOCHASTIC_CROSS)
SINGLE = (StrategyKind.DETERMINISTIC_SINGLE, StrategyKind.STOCHASTIC_SINGLE)


@dataclass(frozen=True)
class Strategy:
    """`style` is None for single-style strategies whose condition is pinned
    per trial. `mode` picks how candidates are rendered in the training
    styles: "learned" goes through the translator, "oracle" re-renders the
    world state. It defaults to "oracle" for DeterministicSingle and to
    "learned" for the stochastic strategies."""

    kind: StrategyKind
    style: Optional[str] = None
    m: int = 3
    mode: Optional[str] = None
    per_dimension: bool = True

    def __post_init__(self):
        if self.style is not None and not StyleId(self.style).is_training:
            raise ValueError(f'"{self.style}" is not a training style.')
        if self.m < 1:
            raise ValueError("A strategy needs at least one candidate.")
        if self.mode is None:
            default = "oracle" if self.kind is StrategyKind.DETERMINISTIC_SINGLE else "learned"
            object.__setattr__(self, "mode", default)
        if self.mode not in ("oracle", "learned"):
            raise ValueError(f'Unknown translation mode "{self.mode}"')

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """`kind[:arg[:arg]]`, e.g. "stochastic-cross", "stochastic-random:5",
        "deterministic-single:daytime:learned", "stochastic-cross:oracle"."""
        head, *args = text.strip().split(":")
        try:
            kind = StrategyKind(head)
        except ValueError:
            raise ValueError(
                f'Unknown strategy "{head}", expect one of {[k.value for k in StrategyKind]}'
            ) from None
        if len(args) > (0 if kind is StrategyKind.DIRECT else 1 if kind is StrategyKind.STOCHASTIC_CROSS else 2):
            raise ValueError(f'Too many arguments in strategy "{text}"')
        if kind is StrategyKind.STOCHASTIC_RANDOM:
            m = int(args[0]) if args and args[0] else 3
            return cls(kind, m=m, mode=args[1] if len(args) > 1 else None)
        if kind in SINGLE:
            style = args[0] if args and args[0] else None
            return cls(kind, style=style, mode=args[1] if len(args) > 1 else None)
        if kind is StrategyKind.STOCHASTIC_CROSS:
            return cls(kind, mode=args[0] if args else None)
        return cls(kind)

    def __str__(self) -> str:
        oracle = self.mode == "oracle"
        if self.kind is StrategyKind.STOCHASTIC_RANDOM:
            return f"{self.kind.value}:{self.m}" + (":oracle" if oracle else "")
        if self.kind is StrategyKind.DETERMINISTIC_SINGLE:
            return f"{self.kind.value}:{self.style or ''}:{self.mode}"
        if self.kind is StrategyKind.STOCHASTIC_SINGLE:
            if oracle:
                return f"{self.kind.value}:{self.style or ''}:oracle"
            return f"{self.kind.value}:{self.style}" if self.style else self.kind.value
        if self.kind is StrategyKind.STOCHASTIC_CROSS and oracle:
            return f"{self.kind.value}:oracle"
        return self.kind.value

    @property
    def stochastic(self) -> bool:
        return self.kind in STOCHASTIC

    @property
    def candidates(self) -> int:
        if self.kind is StrategyKind.STOCHASTIC_RANDOM:
            return self.m
        if self.kind is StrategyKind.STOCHASTIC_CROSS:
            return len(TRAINING_STYLES)
        return 1

    @property
    def needs_translator(self) -> bool:
        return self.kind is not StrategyKind.DIRECT and self.mode == "learned"

    @property
    def needs_pool(self) -> bool:
        return self.needs_translator and self.kind is not StrategyKind.STOCHASTIC_RANDOM


@dataclass
class SelectionTrace:
    """Per-step record of a selection. Rows and `chosen` index the candidates
    as generated; rows of excluded candidates are None."""

    actions: List[Optional[List[float]]]
    log_vars: Optional[List[Optional[List[float]]]]
    chosen: List[int]
    action: List[float]
    strategy: str = ""
    step: int = 0
    command: int = int(HighLevelCommand.FOLLOW_LANE)
    excluded: List[int] = field(default_factory=list)
    fallback: bool = False

    def replay(self) -> ActionTriple:
        return ActionTriple(*(self.actions[j][d] for d, j in enumerate(self.chosen)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class ForwardCounter:
    """Per-run invocation counts of the policy, encoder and decoder (rows)."""

    policy: int = 0
    encode: int = 0
    decode: int = 0

    def reset(self) -> None:
        self.policy = self.encode = self.decode = 0


@dataclass
class DeployModels:
    translator: Optional[Translator] = None
    pool: Optional[StylePool] = None
    counter: ForwardCounter = field(default_factory=ForwardCounter)
    fixed_codes: Dict[str, np.ndarray] = field(default_factory=dict)


def style_conditions(strategy: Strategy, rng: np.random.Generator, style: Optional[str] = None) -> List[str]:
    """Training conditions of the candidates of one step. StochasticRandom
    draws its M conditions only when rendering by oracle."""
    kind = strategy.kind
    if kind in SINGLE:
        return [StyleId(strategy.style or style or TRAINING_STYLES[0]).value]
    if kind is StrategyKind.STOCHASTIC_CROSS:
        return [s.value for s in TRAINING_STYLES]
    if kind is StrategyKind.STOCHASTIC_RANDOM:
        return [TRAINING_STYLES[i].value for i in rng.integers(len(TRAINING_STYLES), size=strategy.m)]
    return []


def make_styles(
    strategy: Strategy,
    pool: Optional[StylePool],
    rng: np.random.Generator,
    style: Optional[str] = None,
) -> List[np.ndarray]:
    """Style codes for one step. `style` fills in a per-trial condition when
    the strategy does not fix one."""
    kind = strategy.kind
    if kind is StrategyKind.STOCHASTIC_RANDOM:
        return list(rng.standard_normal((strategy.m, STYLE_DIM)))
    if kind not in (StrategyKind.STOCHASTIC_SINGLE, StrategyKind.STOCHASTIC_CROSS):
        return []
    if pool is None or not len(pool) or pool.codes is None:
        raise ValueError("The style pool is empty or has not been encoded.")

    out = []
    for cond in style_conditions(strategy, rng, style):
        codes = pool.codes.get(cond)
        if codes is None or not len(codes):
            raise ValueError(f'The style pool has no "{cond}" frames.')
        out.append(codes[rng.integers(len(codes))])
    return out


def select_action(candidates: Sequence[PolicyOutput], per_dimension: bool = True) -> Tuple[ActionTriple, SelectionTrace]:
    """Per dimension, take the action of the candidate with the smallest
    log-variance; ties go to the lowest index."""
    if not candidates:
        raise ValueError("select_action needs at least one candidate.")
    actions = np.array([tuple(c.action) for c in candidates], dtype=np.float64)
    if any(c.log_variances is None for c in candidates):
        if len(candidates) > 1:
            raise ValueError("Selecting among several candidates needs uncertainties.")
        chosen = np.zeros(3, dtype=np.int64)
        log_vars = None
    else:
        u = np.array([tuple(c.log_variances) for c in candidates], dtype=np.float64)
        if per_dimension:
            chosen = np.argmin(u, axis=0)
        else:
            chosen = np.full(3, np.argmin(u.sum(axis=1)))
        log_vars = u.tolist()
    action = ActionTriple(*(float(actions[j, d]) for d, j in enumerate(chosen)))
    trace = SelectionTrace(
        actions=actions.tolist(),
        log_vars=log_vars,
        chosen=[int(j) for j in chosen],
        action=list(action),
    )
    return action, trace


def _outputs(actions: np.ndarray, log_vars: Optional[np.ndarray]) -> List[PolicyOutput]:
    return [
        PolicyOutput(
            ActionTriple(*actions[i].tolist()),
            None if log_vars is None else UncertaintyTriple(*log_vars[i].tolist()),
        )
        for i in range(len(actions))
    ]


def _forward(policy: PolicyNet, frames: np.ndarray, velocity: float, command: int) -> List[Optional[PolicyOutput]]:
    """Candidate outputs; a candidate whose forward is non-finite becomes None."""
    n = len(frames)
    try:
        actions, log_vars = policy.forward_batch(frames, [velocity] * n, [command] * n)
        return _outputs(actions, log_vars)
    except NonFiniteError:
        pass
    out = []
    for i in range(n):
        try:
            a, u = policy.forward_batch(frames[i : i + 1], [velocity], [command])
            out.extend(_outputs(a, u))
        except NonFiniteError:
            out.append(None)
    return out


def deploy_step(
    strategy: Strategy,
    models: DeployModels,
    policy: PolicyNet,
    obs_test: np.ndarray,
    velocity: float,
    command: HighLevelCommand,
    rng: np.random.Generator,
    state: Optional[WorldState] = None,
    step: int = 0,
    style: Optional[str] = None,
) -> Tuple[ActionTriple, SelectionTrace]:
    """One control step of a strategy. `state` is required by the oracle
    translator; `style` names the condition of a trial-pinned single-style
    strategy."""
    counter = models.counter
    kind = strategy.kind
    command = int(command)

    if kind is StrategyKind.DIRECT:
        frames = np.asarray(obs_test, dtype=np.float64)[None, :]
    elif strategy.mode == "oracle":
        if state is None:
            raise ValueError("Oracle translation needs the world state.")
        frames = np.stack([oracle_translate(state, cond) for cond in style_conditions(strategy, rng, style)])
    elif kind is StrategyKind.DETERMINISTIC_SINGLE:
        cond = StyleId(strategy.style or style or TRAINING_STYLES[0]).value
        code = models.fixed_codes.get(cond)
        if code is None:
            code = models.fixed_codes[cond] = fixed_style_code(models.translator, models.pool, cond)
        frames = np.stack(translate_to_train(models.translator, obs_test, [code]))
        counter.encode += 1
        counter.decode += 1
    else:
        if models.translator is None:
            raise ValueError(f"Strategy {strategy} needs a trained translator.")
        styles = make_styles(strategy, models.pool, rng, style)
        frames = np.stack(translate_to_train(models.translator, obs_test, styles))
        counter.encode += 1
        counter.decode += len(styles)

    outputs = _forward(policy, frames, velocity, command)
    counter.policy += len(frames)
    excluded = [i for i, o in enumerate(outputs) if o is None]
    kept = [o for o in outputs if o is not None]
    fallback = False
    if excluded:
        logger.warning("Step %d: excluded non-finite candidates %s", step, excluded)
    if not kept:
        logger.warning("Step %d: every candidate was excluded, falling back to the raw frame.", step)
        a, u = policy.forward_batch(np.asarray(obs_test, dtype=np.float64)[None, :], [velocity], [command])
        counter.policy += 1
        kept = _outputs(a, u)
        fallback = True

    action, trace = select_action(kept, strategy.per_dimension)
    if excluded and not fallback:
        # rows and indices refer to the candidates as generated; excluded rows are None
        index = [i for i, o in enumerate(outputs) if o is not None]
        actions: List[Optional[List[float]]] = [None] * len(outputs)
        log_vars: List[Optional[List[float]]] = [None] * len(outputs)
        for j, i in enumerate(index):
            actions[i] = trace.actions[j]
            log_vars[i] = trace.log_vars[j] if trace.log_vars is not None else None
        trace.actions = actions
        trace.log_vars = log_vars if trace.log_vars is not None else None
        trace.chosen = [index[j] for j in trace.chosen]
    trace.strategy = str(strategy)
    trace.step = step
    trace.command = command
    trace.excluded = excluded
    trace.fallback = fallback
    return action, trace


# --------------------------------------------------------------------------
# Agents
# --------------------------------------------------------------------------


def check_strategy(policy: PolicyNet, strategy: Strategy) -> None:
    if strategy.stochastic and not policy.has_uncertainty:
        raise ValueError(
            f"Strategy {strategy} chooses among candidates by uncertainty; "
            "the policy has no uncertainty heads."
        )


class PolicyAgent:
    """Drives a trained policy through a strategy; optionally keeps the
    selection trace of every step."""

    def __init__(
        self,
        policy: PolicyNet,
        strategy: Strategy,
        models: Optional[DeployModels] = None,
        record_trace: bool = False,
    ) -> None:
        check_strategy(policy, strategy)
        models = models or DeployModels()
        if strategy.needs_translator and models.translator is None:
            raise ValueError(f"Strategy {strategy} needs a trained translator.")
        if strategy.needs_pool:
            if models.pool is None:
                raise ValueError(f"Strategy {strategy} needs a style pool.")
            if models.pool.codes is None:
                models.pool.encode_with(models.translator)
        self.policy = policy
        self.strategy = strategy
        self.models = models
        self.record_trace = record_trace
        self.rng = np.random.default_rng(0)
        self.style: Optional[str] = strategy.style
        self.context: dict = {}
        self.steps = 0
        self.trace: List[dict] = []

    @property
    def name(self) -> str:
        return "uail" if self.policy.has_uncertainty else "cil"

    def reset(self, seed: int, trial: int = 0, **context) -> None:
        self.rng = np.random.default_rng([seed, 11])
        self.style = self.strategy.style or TRAINING_STYLES[trial % len(TRAINING_STYLES)].value
        self.context = dict(context, trial=trial, seed=seed, agent=self.name)
        self.steps = 0
        self.trace = []

    def __call__(self, obs) -> ActionTriple:
        action, trace = deploy_step(
            self.strategy,
            self.models,
            self.policy,
            obs.frame,
            obs.velocity,
            obs.command,
            self.rng,
            state=obs.state,
            step=self.steps,
            style=self.style,
        )
        if self.record_trace:
            self.trace.append(dict(self.context, **trace.to_dict()))
        self.steps += 1
        return action

    def pop_trace(self) -> List[dict]:
        trace, self.trace = self.trace, []
        return trace


class UAILAgent(PolicyAgent):
    def __init__(self, policy: PolicyNet, strategy: Strategy, models=None, record_trace=False) -> None:
        if not policy.has_uncertainty:
            raise ValueError("UAILAgent needs a policy with uncertainty heads.")
        super().__init__(policy, strategy, models, record_trace)


class CILAgent(PolicyAgent):
    def __init__(self, policy: PolicyNet, strategy: Strategy, models=None, record_trace=False) -> None:
        if policy.has_uncertainty:
            raise ValueError("CILAgent expects a policy without uncertainty heads.")
        super().__init__(policy, strategy, models, record_trace)


@dataclass
class AgentFactory:
    """Picklable recipe that builds one agent per benchmark job."""

    policy: PolicyNet
    strategy: Strategy
    models: Optional[DeployModels] = None
    record_trace: bool = False

    def __call__(self, trial: int) -> PolicyAgent:
        cls = UAILAgent if self.policy.has_uncertainty else CILAgent
        return cls(self.policy, self.strategy, self.models, self.record_trace)
