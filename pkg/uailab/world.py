"""World state, kinematics, dynamic agents, styled rendering and infractions."""

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from .policy import ActionTriple, clip_action
from .town import Route, Town
from .utils import seeded_rng

DT = 0.05
WHEELBASE = 2.5
MAX_STEER = 0.5
ACCEL = 4.0
BRAKE = 8.0
DRAG = 0.1
V_MAX = 10.0

CAR_LENGTH = 4.5
CAR_WIDTH = 2.0
REAR_OVERHANG = 1.0
PEDESTRIAN_SIZE = 0.6
PEDESTRIAN_SPEED = 1.2
TRIGGER_RADIUS = 15.0
GOAL_RADIUS = 2.0

GRID = 16
CELL = 1.5
OBS_DIM = GRID * GRID

BUILDING, SIDEWALK, ROAD, MARKING, ROUTE, AGENT = 0.1, 0.3, 0.5, 0.65, 0.8, 1.0

INFRACTION_CLASSES = (
    "opposite_lane",
    "sidewalk",
    "collision_static",
    "collision_car",
    "collision_pedestrian",
)


# --------------------------------------------------------------------------
# Styles
# --------------------------------------------------------------------------


class StyleId(Enum):
    DAYTIME = "daytime"
    DAYTIME_AFTER_RAIN = "daytime-after-rain"
    CLEAR_SUNSET = "clear-sunset"
    DAYTIME_HARD_RAIN = "daytime-hard-rain"

    @property
    def is_training(self) -> bool:
        return self in TRAINING_STYLES


class StyleParams(NamedTuple):
    brightness: float
    contrast: float
    noise: float
    bias: float


TRAINING_STYLES = (StyleId.DAYTIME, StyleId.DAYTIME_AFTER_RAIN, StyleId.CLEAR_SUNSET)
TEST_STYLE = StyleId.DAYTIME_HARD_RAIN
IDENTITY_STYLE = StyleParams(1.0, 1.0, 0.0, 0.0)

STYLE_PARAMS = {
    StyleId.DAYTIME: StyleParams(1.0, 1.0, 0.0, 0.0),
    StyleId.DAYTIME_AFTER_RAIN: StyleParams(0.85, 0.9, 0.03, 0.05),
    StyleId.CLEAR_SUNSET: StyleParams(0.75, 1.1, 0.01, 0.1),
    StyleId.DAYTIME_HARD_RAIN: StyleParams(0.55, 0.6, 0.12, 0.2),
}

Style = Union[StyleId, StyleParams, str]


def style_params(style: Style) -> StyleParams:
    if isinstance(style, StyleParams):
        return style
    try:
        return STYLE_PARAMS[StyleId(style)]
    except ValueError:
        raise ValueError(f'Unknown style "{style}"') from None


def rain_field(seed: int, step: int) -> np.ndarray:
    """Structured noise in [-1, 1]: vertical streaks plus a little speckle."""
    rng = seeded_rng(seed, step)
    streaks = rng.uniform(-1.0, 1.0, GRID)
    speckle = rng.uniform(-1.0, 1.0, (GRID, GRID))
    return (0.7 * streaks[None, :] + 0.3 * speckle).ravel()


def apply_style(clean: np.ndarray, params: StyleParams, noise: Optional[np.ndarray] = None) -> np.ndarray:
    y = params.bias + params.brightness * (0.5 + params.contrast * (clean - 0.5))
    if noise is not None and params.noise:
        y = y + params.noise * noise
    return np.clip(y, 0.0, 1.0)


def invert_style(frame: np.ndarray, params: StyleParams) -> np.ndarray:
    """Exact inverse of `apply_style` without noise and clipping."""
    return 0.5 + ((frame - params.bias) / params.brightness - 0.5) / params.contrast


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def box_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    f = np.array([c, s]) * (length / 2)
    r = np.array([s, -c]) * (width / 2)
    centre = np.array([cx, cy])
    return np.array([centre + f + r, centre + f - r, centre - f - r, centre - f + r])


def rect_corners(rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def _axes(corners: np.ndarray) -> np.ndarray:
    edges = np.array([corners[1] - corners[0], corners[3] - corners[0]])
    return edges / np.linalg.norm(edges, axis=1, keepdims=True)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two rectangles given as (4, 2) corners."""
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa = a @ axis
        pb = b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def _interp_path(path: np.ndarray, cum: np.ndarray, s: float) -> Tuple[float, float, float]:
    s = min(max(s, 0.0), cum[-1])
    x = float(np.interp(s, cum, path[:, 0]))
    y = float(np.interp(s, cum, path[:, 1]))
    k = min(int(np.searchsorted(cum, s, side="right")), len(cum) - 1)
    d = path[k] - path[max(k - 1, 0)]
    return x, y, math.atan2(d[1], d[0])


# --------------------------------------------------------------------------
# Agents
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Agent:
    """A scripted car or pedestrian moving along `path` at constant speed.

    Pedestrians wait for the ego vehicle to come within the trigger radius
    of their start point; cars leave the world when their path runs out.
    """

    kind: str
    path: np.ndarray
    cum: np.ndarray
    speed: float
    s: float = 0.0
    triggered: bool = True

    @classmethod
    def along(cls, kind: str, path: np.ndarray, speed: float, s: float = 0.0, triggered: bool = True):
        path = np.asarray(path, dtype=np.float64)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
        return cls(kind, path, cum, speed, s, triggered)

    @property
    def length(self) -> float:
        return CAR_LENGTH if self.kind == "car" else PEDESTRIAN_SIZE

    @property
    def width(self) -> float:
        return CAR_WIDTH if self.kind == "car" else PEDESTRIAN_SIZE

    @property
    def gone(self) -> bool:
        return self.kind == "car" and self.s >= self.cum[-1]

    @property
    def pose(self) -> Tuple[float, float, float]:
        return _interp_path(self.path, self.cum, self.s)

    @property
    def velocity(self) -> float:
        if not self.triggered or self.s >= self.cum[-1]:
            return 0.0
        return self.speed

    def corners(self) -> np.ndarray:
        x, y, h = self.pose
        return box_corners(x, y, h, self.length, self.width)

    def advanced(self, ego: np.ndarray, dt: float) -> "Agent":
        triggered = self.triggered
        if not triggered:
            triggered = float(np.hypot(*(self.path[0] - ego))) <= TRIGGER_RADIUS
        if not triggered:
            return self
        return replace(self, s=min(self.s + self.speed * dt, self.cum[-1]), triggered=True)


def spawn_agents(route: Route, seed: int) -> Tuple[Agent, ...]:
    """Lead car, two oncoming cars and two crossing pedestrians."""
    rng = seeded_rng(seed, 17)
    town = route.town
    agents = []

    start = min(18.0 + rng.uniform(0.0, 6.0), route.length / 2)
    k = int(np.searchsorted(route.s, start))
    agents.append(Agent.along("car", route.waypoints[k:], 3.5 + rng.uniform(0.0, 1.0)))

    reverse = route.reversed_route()
    for frac in sorted(rng.uniform(0.0, 0.5, 2)):
        agents.append(
            Agent.along("car", reverse.waypoints, 4.0 + rng.uniform(0.0, 1.0), s=frac * reverse.length)
        )

    nodes = np.array([town.node_pos(n) for n in route.nodes])
    ok = np.array(
        [
            route.segment[k] >= 0
            and 20.0 <= route.s[k] <= route.length - 10.0
            and np.min(np.hypot(*(nodes - route.waypoints[k]).T)) > 12.0
            for k in range(len(route.s))
        ]
    )
    candidates = np.flatnonzero(ok)
    if candidates.size:
        picks = sorted(rng.choice(candidates, size=min(2, candidates.size), replace=False))
        lane = town.lane_width / 2
        reach = town.half + town.sidewalk / 2
        for k in picks:
            d = route.direction_at(int(k))
            right = np.array([d[1], -d[0]])
            centre = route.waypoints[k] - right * lane
            path = np.array([centre + right * reach, centre - right * reach])
            agents.append(Agent.along("pedestrian", path, PEDESTRIAN_SPEED, triggered=False))
    return tuple(agents)


# --------------------------------------------------------------------------
# World state
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WorldState:
    """Ego pose refers to the rear axle; the body box starts REAR_OVERHANG
    behind it."""

    town: Town
    route: Route
    x: float
    y: float
    heading: float
    speed: float = 0.0
    t: float = 0.0
    step_index: int = 0
    progress: int = 0
    agents: Tuple[Agent, ...] = field(default_factory=tuple)
    seed: int = 0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def centre(self) -> np.ndarray:
        return self.position + self.forward * (CAR_LENGTH / 2 - REAR_OVERHANG)

    def corners(self) -> np.ndarray:
        c = self.centre
        return box_corners(c[0], c[1], self.heading, CAR_LENGTH, CAR_WIDTH)

    @property
    def route_s(self) -> float:
        return float(self.route.s[self.progress])

    @property
    def goal_distance(self) -> float:
        return float(np.hypot(*(self.route.goal - self.position)))

    def active_agents(self):
        return [a for a in self.agents if not a.gone]


def new_episode(town: Town, route: Route, seed: int, dynamic: bool = False) -> WorldState:
    p = route.start
    return WorldState(
        town=town,
        route=route,
        x=float(p[0]),
        y=float(p[1]),
        heading=route.start_heading,
        agents=spawn_agents(route, seed) if dynamic else (),
        seed=seed,
    )


def step(state: WorldState, action, dt: float = DT) -> WorldState:
    """Kinematic bicycle update. The action is clipped into range first."""
    a: ActionTriple = clip_action(action)
    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = state.heading + v * math.tan(a.steer * MAX_STEER) / WHEELBASE * dt
    heading = math.atan2(math.sin(heading), math.cos(heading))
    speed = v + (a.accelerate * ACCEL - a.brake * BRAKE - DRAG * v) * dt
    speed = min(max(speed, 0.0), V_MAX)

    ego = np.array([x, y])
    progress = state.route.nearest(ego, state.progress)
    return replace(
        state,
        x=x,
        y=y,
        heading=heading,
        speed=speed,
        t=state.t + dt,
        step_index=state.step_index + 1,
        progress=progress,
        agents=tuple(agent.advanced(ego, dt) for agent in state.agents),
    )


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

_rows, _cols = np.mgrid[0:GRID, 0:GRID]
# Metres ahead of and to the right of the ego centre, per cell.
_AHEAD = ((GRID - 1 - _rows) + 0.5) * CELL - 3.0
_RIGHT = (_cols - GRID / 2 + 0.5) * CELL


def _sample_points(state: WorldState) -> Tuple[np.ndarray, np.ndarray]:
    c = state.centre
    ch, sh = math.cos(state.heading), math.sin(state.heading)
    px = c[0] + _AHEAD * ch + _RIGHT * sh
    py = c[1] + _AHEAD * sh - _RIGHT * ch
    return px, py


def clean_frame(state: WorldState, route_ahead: float = 40.0) -> np.ndarray:
    """The unstyled egocentric grid, flattened row-major (top row first)."""
    town = state.town
    px, py = _sample_points(state)
    road, sidewalk = town.classify(px, py)
    img = np.full(px.shape, BUILDING)
    img[sidewalk] = SIDEWALK
    img[road] = ROAD
    img[town.lane_marking(px, py, CELL / 2)] = MARKING

    route = state.route
    stop = int(np.searchsorted(route.s, state.route_s + route_ahead))
    ahead = route.waypoints[state.progress : max(stop, state.progress + 1)]
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    d2 = ((pts[:, None, :] - ahead[None, :, :]) ** 2).sum(axis=-1).min(axis=1)
    img[(d2 <= (0.75 * CELL) ** 2).reshape(px.shape)] = ROUTE

    for agent in state.active_agents():
        x, y, h = agent.pose
        dx, dy = px - x, py - y
        along = dx * math.cos(h) + dy * math.sin(h)
        across = -dx * math.sin(h) + dy * math.cos(h)
        inside = (np.abs(along) <= agent.length / 2 + CELL / 2) & (
            np.abs(across) <= agent.width / 2 + CELL / 2
        )
        img[inside] = AGENT
    return img.ravel()


def render(state: WorldState, style: Style, noise: bool = True) -> np.ndarray:
    """Styled observation. The noise field is seeded by (episode seed, step)."""
    params = style_params(style)
    field_ = rain_field(state.seed, state.step_index) if noise else None
    return apply_style(clean_frame(state), params, field_)


# --------------------------------------------------------------------------
# Infractions
# --------------------------------------------------------------------------


class Infractions(NamedTuple):
    opposite_lane: bool = False
    sidewalk: bool = False
    collision_static: bool = False
    collision_car: bool = False
    collision_pedestrian: bool = False


def detect_infractions(state: WorldState) -> Infractions:
    """Conditions that hold at this instant; event counting happens in the
    benchmark."""
    town = state.town
    centre = state.centre
    front = centre + state.forward * (CAR_LENGTH / 2)
    _, sidewalk = town.classify(np.array([centre[0], front[0]]), np.array([centre[1], front[1]]))

    opposite = False
    offset = town.centreline_offset(centre)
    d = state.route.direction_at(state.progress)
    if offset is not None and d is not None:
        opposite = float(offset @ np.array([-d[1], d[0]])) > 0.3

    ego = state.corners()
    static = False
    blocks = town.block_array
    near = np.hypot(
        np.clip(centre[0], blocks[:, 0], blocks[:, 2]) - centre[0],
        np.clip(centre[1], blocks[:, 1], blocks[:, 3]) - centre[1],
    ) < CAR_LENGTH
    for rect in blocks[near]:
        if boxes_overlap(ego, rect_corners(rect)):
            static = True
            break

    car = pedestrian = False
    for agent in state.active_agents():
        if boxes_overlap(ego, agent.corners()):
            if agent.kind == "car":
                car = True
            else:
                pedestrian = True
    return Infractions(opposite, bool(sidewalk.any()), static, car, pedestrian)

