"""The state-based demonstrator and demonstration collection."""

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import logger
from .policy import ActionTriple, DemoRecord, HighLevelCommand, clip_action
from .town import Route, Town, random_walk
from .utils import derive_seed
from .world import (
    ACCEL,
    BRAKE,
    CAR_LENGTH,
    DRAG,
    DT,
    GOAL_RADIUS,
    MAX_STEER,
    TRAINING_STYLES,
    WHEELBASE,
    StyleId,
    WorldState,
    detect_infractions,
    new_episode,
    render,
    step,
)

CRUISE_SPEED = 5.0
LOOKAHEAD = 4.0
LOOKAHEAD_GAIN = 0.4
HAZARD_MARGIN = 6.0
CORRIDOR = 2.0
FOLLOW_RANGE = 15.0
FOLLOW_GAP = 4.0
COMMAND_RADIUS = 8.0
COMMAND_HOLD = 2.0


class ExpertDecision(NamedTuple):
    action: ActionTriple
    command: HighLevelCommand
    off_road: bool
    hazard: Optional[float]


def braking_envelope(speed: float) -> float:
    return speed * speed / (2 * BRAKE) + HAZARD_MARGIN


def nearest_hazard(state: WorldState) -> Optional[float]:
    """Distance from the front bumper to the closest agent inside the
    corridor ahead, or None."""
    fwd = state.forward
    right = np.array([fwd[1], -fwd[0]])
    front = state.centre + fwd * (CAR_LENGTH / 2)
    best = None
    for agent in state.active_agents():
        x, y, _ = agent.pose
        pts = np.vstack([agent.corners(), [x, y]]) - front
        ahead = pts @ fwd
        lateral = np.abs(pts @ right)
        inside = (ahead >= 0.0) & (ahead <= FOLLOW_RANGE) & (lateral <= CORRIDOR)
        if inside.any():
            d = float(ahead[inside].min())
            best = d if best is None else min(best, d)
    return best


def pure_pursuit(state: WorldState) -> float:
    route = state.route
    lookahead = LOOKAHEAD + LOOKAHEAD_GAIN * state.speed
    target = route.point_at(state.route_s + lookahead)
    dx, dy = target - state.position
    alpha = math.atan2(dy, dx) - state.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    dist = max(math.hypot(dx, dy), 1.0)
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), dist)
    return float(np.clip(delta / MAX_STEER, -1.0, 1.0))


def expert_decision(state: WorldState) -> ExpertDecision:
    route = state.route
    if len(route.waypoints) == 0:
        raise ValueError("The expert needs a route to follow.")
    command = route.command_at(state.route_s, COMMAND_RADIUS, COMMAND_HOLD)
    road, _ = state.town.classify(state.centre[0], state.centre[1])
    off_road = not bool(road)
    if off_road:
        logger.debug("Expert recovering from off-road pose at t=%.2f", state.t)

    steer = pure_pursuit(state)
    hazard = nearest_hazard(state)
    if hazard is not None and hazard < braking_envelope(state.speed):
        return ExpertDecision(ActionTriple(0.0, steer, 1.0), command, off_road, hazard)

    target = CRUISE_SPEED
    if hazard is not None:
        target = min(target, max(0.5 * (hazard - FOLLOW_GAP), 0.0))
    feedforward = target * DRAG / ACCEL
    accel = float(np.clip(0.8 * (target - state.speed) + feedforward, 0.0, 1.0))
    brake = float(np.clip(0.5 * (state.speed - target - 0.5), 0.0, 1.0))
    if brake > 0:
        accel = 0.0
    return ExpertDecision(ActionTriple(accel, steer, brake), command, off_road, hazard)


def expert_action(state: WorldState) -> Tuple[ActionTriple, HighLevelCommand]:
    d = expert_decision(state)
    return d.action, d.command


class ExpertAgent:
    """Action source that reads the simulator state instead of pixels."""

    name = "expert"

    def reset(self, seed: int, **context) -> None:
        pass

    def __call__(self, obs) -> ActionTriple:
        return expert_action(obs.state)[0]


# --------------------------------------------------------------------------
# Demonstration collection
# --------------------------------------------------------------------------


class SteeringNoise:
    """Triangular steering impulses that start at random and last a fixed
    number of steps."""

    def __init__(self, rng: np.random.Generator, amplitude: float, rate: float, steps: int) -> None:
        self.rng = rng
        self.amplitude = amplitude
        self.rate = rate
        self.steps = max(steps, 2)
        self._k = 0
        self._peak = 0.0

    def __call__(self) -> float:
        if self.amplitude <= 0:
            return 0.0
        if self._k == 0:
            if self.rng.random() >= self.rate:
                return 0.0
            self._k = self.steps
            self._peak = self.rng.uniform(-self.amplitude, self.amplitude)
        self._k -= 1
        phase = (self.steps - self._k) / self.steps
        return self._peak * (1.0 - abs(2.0 * phase - 1.0))


@dataclass
class CollectConfig:
    episodes: int = 80
    dynamic: bool = True
    record_every: int = 2
    noise: float = 0.3
    noise_rate: float = 0.02
    noise_duration: float = 1.0
    min_segments: int = 4
    max_segments: int = 7
    max_time: float = 120.0
    balance: bool = True


@dataclass
class CollectSummary:
    episodes: int = 0
    skipped: int = 0
    collisions: int = 0
    records: int = 0
    commands: Dict[str, int] = field(default_factory=dict)
    styles: Dict[str, int] = field(default_factory=dict)


def balance_records(records: Sequence[DemoRecord], rng: np.random.Generator) -> List[DemoRecord]:
    """Resample every (command, style) cell to the same size and renumber.

    Large cells are subsampled, small ones (usually intersections) are
    resampled with replacement.
    """
    cells: Dict[Tuple[int, str], List[int]] = {}
    for i, r in enumerate(records):
        cells.setdefault((int(r.command), r.style), []).append(i)
    target = int(round(len(records) / len(cells)))
    keep = []
    for key in sorted(cells):
        idx = np.array(cells[key])
        if idx.size >= target:
            keep.extend(rng.choice(idx, target, replace=False).tolist())
        else:
            keep.extend(idx.tolist())
            keep.extend(rng.choice(idx, target - idx.size, replace=True).tolist())
    keep.sort()
    return [replace(records[i], id=n) for n, i in enumerate(keep)]


def _rollouts(
    town: Town, config: CollectConfig, seed: int, summary: CollectSummary
) -> Iterator[Tuple[WorldState, ExpertDecision]]:
    """Yield (state, clean decision) every `record_every` steps of noisy
    expert episodes over random routes."""
    rng = np.random.default_rng([seed, 1])
    noise_steps = int(round(config.noise_duration / DT))
    max_steps = int(round(config.max_time / DT))

    for episode in range(config.episodes):
        nodes = random_walk(
            town, rng, int(rng.integers(config.min_segments, config.max_segments + 1))
        )
        if nodes is None:
            summary.skipped += 1
            continue
        state = new_episode(
            town, Route(town, nodes), seed=derive_seed(seed, 4, episode), dynamic=config.dynamic
        )
        noise = SteeringNoise(
            np.random.default_rng([seed, 2, episode]), config.noise, config.noise_rate, noise_steps
        )
        for k in range(max_steps):
            if state.goal_distance <= GOAL_RADIUS:
                break
            decision = expert_decision(state)
            if k % config.record_every == 0:
                yield state, decision
            a = decision.action
            state = step(state, clip_action((a.accelerate, a.steer + noise(), a.brake)))
            hit = detect_infractions(state)
            if hit.collision_static or hit.collision_car or hit.collision_pedestrian:
                summary.collisions += 1
                logger.debug("Collection episode %d ended by a collision at t=%.2f", episode, state.t)
                break
        summary.episodes += 1
        logger.debug("Collection episode %d: route %s", episode, nodes)

    if summary.skipped:
        logger.warning("Skipped %d unreachable routes during collection.", summary.skipped)


def collect_demos(
    town: Town,
    config: CollectConfig,
    styles: Sequence[StyleId] = TRAINING_STYLES,
    seed: int = 0,
) -> Tuple[List[DemoRecord], CollectSummary]:
    """Drive the expert over random routes and record styled frames.

    Styles are assigned round-robin over recorded frames. Executed steering
    carries injected noise; the recorded label is always the clean expert
    action for the state actually reached.
    """
    styles = [StyleId(s) for s in styles]
    if not styles:
        raise ValueError("collect_demos needs at least one style.")
    for s in styles:
        if not s.is_training:
            raise ValueError(f'Style "{s.value}" is not a training style.')

    summary = CollectSummary()
    records: List[DemoRecord] = []
    for state, decision in _rollouts(town, config, seed, summary):
        style = styles[len(records) % len(styles)]
        records.append(
            DemoRecord(
                id=len(records),
                frame=render(state, style),
                velocity=state.speed,
                command=decision.command,
                action=decision.action,
                style=style.value,
            )
        )

    if config.balance and records:
        records = balance_records(records, np.random.default_rng([seed, 3]))

    summary.records = len(records)
    summary.commands = {
        c.name: n for c, n in sorted(Counter(HighLevelCommand(r.command) for r in records).items())
    }
    summary.styles = dict(sorted(Counter(r.style for r in records).items()))
    logger.info(
        "Collected %d records from %d episodes (%d skipped).",
        summary.records,
        summary.episodes,
        summary.skipped,
    )
    return records, summary


def collect_frames(town: Town, config: CollectConfig, style: StyleId, seed: int = 0) -> np.ndarray:
    """Unlabelled frames of one condition, for domains that must never
    contribute demonstrations (the testing condition)."""
    style = StyleId(style)
    summary = CollectSummary()
    frames = [render(state, style) for state, _ in _rollouts(town, config, seed, summary)]
    if not frames:
        raise ValueError("No frames were recorded; every route was skipped.")
    logger.info('Collected %d unlabelled "%s" frames from %d episodes.', len(frames), style.value, summary.episodes)
    return np.stack(frames)
