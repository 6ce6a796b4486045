"""Benchmark suites, the episode loop and per-episode metrics."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import logger
from .expert import COMMAND_HOLD, COMMAND_RADIUS, ExpertAgent
from .policy import ActionTriple, HighLevelCommand, clip_action
from .town import Route, Task, Town, benchmark_routes
from .world import (
    GOAL_RADIUS,
    INFRACTION_CLASSES,
    Infractions,
    StyleId,
    WorldState,
    detect_infractions,
    new_episode,
    render,
    step,
)

SCHEMA_VERSION = 1
ROUTES_PER_TASK = 25
EXPERT_MAX_TIME = 300.0


@dataclass
class Observation:
    frame: np.ndarray
    velocity: float
    command: HighLevelCommand
    state: WorldState


@dataclass
class EpisodeMetrics:
    task: str
    weather: str
    route: int
    seed: int
    success: bool
    distance_fraction: float
    distance: float
    infractions: Dict[str, int]
    steps: int
    time: float
    time_limit: float
    agent: str = ""
    strategy: str = ""
    trial: int = 0
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0.0 <= self.distance_fraction <= 1.0:
            raise ValueError(f"distance fraction {self.distance_fraction} outside [0, 1]")
        if any(n < 0 for n in self.infractions.values()):
            raise ValueError("Negative infraction count")

    def between(self, cls: str) -> float:
        """Metres driven per infraction of one class in this episode."""
        return self.distance / (self.infractions[cls] + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeMetrics":
        return cls(**d)


class EpisodeResult(NamedTuple):
    metrics: EpisodeMetrics
    trace: List[dict]


@dataclass
class BenchmarkSuite:
    town: Town
    task: Task
    weather: StyleId
    routes: List[List[int]]
    time_limit_factor: float = 3.0
    min_time_limit: float = 20.0
    terminate_on_collision: bool = False
    _routes: Dict[int, Route] = field(default_factory=dict, repr=False)
    _expert_times: Dict[Tuple[int, int], float] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, town: Town, task: Task, weather: StyleId, n_routes: int = ROUTES_PER_TASK, **kwargs):
        return cls(town, Task(task), StyleId(weather), benchmark_routes(town, Task(task), n_routes), **kwargs)

    @property
    def dynamic(self) -> bool:
        return self.task.dynamic

    def route(self, index: int) -> Route:
        r = self._routes.get(index)
        if r is None:
            r = self._routes[index] = Route(self.town, self.routes[index])
        return r

    def expert_time(self, index: int, seed: int) -> float:
        """Simulated seconds the expert needs on this route and seed."""
        key = (index, seed)
        t = self._expert_times.get(key)
        if t is None:
            state = new_episode(self.town, self.route(index), seed, self.dynamic)
            agent = ExpertAgent()
            while state.goal_distance > GOAL_RADIUS and state.t < EXPERT_MAX_TIME:
                state = step(state, agent(Observation(None, state.speed, None, state)))
            t = self._expert_times[key] = state.t
            if state.goal_distance > GOAL_RADIUS:
                logger.warning("Expert did not finish route %d (seed %d) of %s.", index, seed, self.task.value)
        return t

    def time_limit(self, index: int, seed: int) -> float:
        return max(self.time_limit_factor * self.expert_time(index, seed), self.min_time_limit)


def run_episode(
    agent: Callable[[Observation], ActionTriple],
    suite: BenchmarkSuite,
    route_index: int,
    seed: int,
    trial: int = 0,
) -> EpisodeMetrics:
    """Drive `agent` along one route until the goal, the time limit or a
    terminal collision. Infractions count rising edges of each condition."""
    route = suite.route(route_index)
    state = new_episode(suite.town, route, seed, suite.dynamic)
    limit = suite.time_limit(route_index, seed)
    reset = getattr(agent, "reset", None)
    if reset is not None:
        reset(seed, task=suite.task.value, weather=suite.weather.value, route=route_index, trial=trial)

    counts = dict.fromkeys(INFRACTION_CLASSES, 0)
    previous = Infractions()
    distance = 0.0
    success = False
    while True:
        if state.goal_distance <= GOAL_RADIUS:
            success = True
            break
        if state.t >= limit:
            break
        obs = Observation(
            frame=render(state, suite.weather),
            velocity=state.speed,
            command=route.command_at(state.route_s, COMMAND_RADIUS, COMMAND_HOLD),
            state=state,
        )
        nxt = step(state, clip_action(agent(obs)))
        distance += math.hypot(nxt.x - state.x, nxt.y - state.y)
        state = nxt
        now = detect_infractions(state)
        for name, was, hit in zip(INFRACTION_CLASSES, previous, now):
            if hit and not was:
                counts[name] += 1
        previous = now
        if suite.terminate_on_collision and (
            now.collision_static or now.collision_car or now.collision_pedestrian
        ):
            break

    fraction = 1.0 if success else min(max(state.route_s / route.length, 0.0), 1.0)
    metrics = EpisodeMetrics(
        task=suite.task.value,
        weather=suite.weather.value,
        route=route_index,
        seed=seed,
        success=success,
        distance_fraction=fraction,
        distance=distance,
        infractions=counts,
        steps=state.step_index,
        time=state.t,
        time_limit=limit,
        agent=getattr(agent, "name", type(agent).__name__),
        strategy=str(getattr(agent, "strategy", "")),
        trial=trial,
    )
    logger.debug(
        "%s/%s route %d seed %d: %s, %.1f m",
        suite.task.value,
        suite.weather.value,
        route_index,
        seed,
        "success" if success else "failure",
        distance,
    )
    return metrics


def _run_job(job) -> EpisodeResult:
    factory, suite, route_index, seed, trial = job
    agent = factory(trial)
    metrics = run_episode(agent, suite, route_index, seed, trial)
    pop = getattr(agent, "pop_trace", None)
    return EpisodeResult(metrics, pop() if pop is not None else [])


def run_suite(
    factory: Callable[[int], Callable[[Observation], ActionTriple]],
    suite: BenchmarkSuite,
    seeds: Sequence[int],
    workers: int = 1,
    routes: Optional[Sequence[int]] = None,
) -> List[EpisodeResult]:
    """Run every route once per trial seed.

    `factory(trial)` builds a fresh agent; it must be picklable when
    `workers > 1`. Results come back in (trial, route) order whatever the
    worker count.
    """
    routes = range(len(suite.routes)) if routes is None else routes
    jobs = [(factory, suite, r, seed, trial) for trial, seed in enumerate(seeds) for r in routes]
    if workers <= 1:
        return [_run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_run_job, jobs, chunksize=max(len(jobs) // (4 * workers), 1)))
