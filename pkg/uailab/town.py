"""Grid town: roads, sidewalks, building blocks and lane-centre routes.

Intersections sit on a regular grid. Every road carries one lane per
direction (right-hand traffic) and is flanked by sidewalk bands; whatever is
neither road nor sidewalk is building. Routes are node sequences turned into
dense lane-centre waypoints with circular arcs at turns.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import logger
from .policy import HighLevelCommand
from .utils import atomic_write

RIGHT_TURN_RADIUS = 5.0
LEFT_TURN_RADIUS = 8.0
START_PAD = 6.0
END_PAD = 6.0
WAYPOINT_SPACING = 1.0


class Task(Enum):
    STRAIGHT = "straight"
    ONE_TURN = "one-turn"
    NAVIGATION = "navigation"
    NAVIGATION_DYNAMIC = "navigation-dynamic"

    @property
    def dynamic(self) -> bool:
        return self is Task.NAVIGATION_DYNAMIC


Rect = Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


def _right(d: np.ndarray) -> np.ndarray:
    return np.array([d[1], -d[0]])


def _left(d: np.ndarray) -> np.ndarray:
    return np.array([-d[1], d[0]])


@dataclass
class Town:
    nx: int = 5
    ny: int = 5
    spacing: float = 30.0
    lane_width: float = 3.5
    sidewalk: float = 3.0
    corner: float = 2.5  # square curb cut-out at each intersection corner
    routes: Dict[str, List[List[int]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("A town needs at least a 2x2 grid of intersections.")
        if self.spacing < 2 * (self.lane_width + LEFT_TURN_RADIUS) + 1:
            raise ValueError("Intersection spacing is too small for turn arcs.")
        if not 0 <= self.corner < self.sidewalk:
            raise ValueError("The curb corner cut must be narrower than the sidewalk.")
        self.xs = np.arange(self.nx) * self.spacing
        self.ys = np.arange(self.ny) * self.spacing

    # ---- graph ----

    @property
    def half(self) -> float:
        """Half width of a road (one full lane on each side)."""
        return self.lane_width

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def node_id(self, i: int, j: int) -> int:
        return j * self.nx + i

    def node_ij(self, n: int) -> Tuple[int, int]:
        return n % self.nx, n // self.nx

    def node_pos(self, n: int) -> np.ndarray:
        i, j = self.node_ij(n)
        return np.array([self.xs[i], self.ys[j]])

    def neighbors(self, n: int) -> List[int]:
        i, j = self.node_ij(n)
        out = []
        for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < self.nx and 0 <= b < self.ny:
                out.append(self.node_id(a, b))
        return out

    def degree(self, n: int) -> int:
        return len(self.neighbors(n))

    def is_connected_path(self, nodes: Sequence[int]) -> bool:
        return len(nodes) >= 2 and all(
            b in self.neighbors(a) for a, b in zip(nodes, nodes[1:])
        )

    # ---- geometry ----

    def road_rects(self) -> List[Rect]:
        h = self.half
        x1, y1 = self.xs[-1], self.ys[-1]
        rects = [(-h, y - h, x1 + h, y + h) for y in self.ys]
        rects += [(x - h, -h, x + h, y1 + h) for x in self.xs]
        return rects

    def sidewalk_rects(self) -> List[Rect]:
        w = self.half + self.sidewalk
        x1, y1 = self.xs[-1], self.ys[-1]
        rects = [(-w, y - w, x1 + w, y + w) for y in self.ys]
        rects += [(x - w, -w, x + w, y1 + w) for x in self.xs]
        return rects

    def blocks(self) -> List[Rect]:
        """Static obstacles: the building blocks between roads plus a wall
        ring around the town."""
        w = self.half + self.sidewalk
        out = []
        for i in range(self.nx - 1):
            for j in range(self.ny - 1):
                out.append((self.xs[i] + w, self.ys[j] + w, self.xs[i + 1] - w, self.ys[j + 1] - w))
        x1, y1 = self.xs[-1], self.ys[-1]
        t = 20.0
        out += [
            (-w - t, -w - t, x1 + w + t, -w),
            (-w - t, y1 + w, x1 + w + t, y1 + w + t),
            (-w - t, -w, -w, y1 + w),
            (x1 + w, -w, x1 + w + t, y1 + w),
        ]
        return out

    @cached_property
    def block_array(self) -> np.ndarray:
        return np.array(self.blocks(), dtype=np.float64)

    def _axis_distances(self, px: np.ndarray, py: np.ndarray):
        dx = np.abs(px[..., None] - self.xs).min(axis=-1)
        dy = np.abs(py[..., None] - self.ys).min(axis=-1)
        return dx, dy

    def classify(self, px, py) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized surface lookup: (road mask, sidewalk mask)."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        h, w = self.half, self.half + self.sidewalk
        x1, y1 = self.xs[-1], self.ys[-1]
        dx, dy = self._axis_distances(px, py)
        road = (
            ((dy <= h) & (px >= -h) & (px <= x1 + h))
            | ((dx <= h) & (py >= -h) & (py <= y1 + h))
            | ((dx <= h + self.corner) & (dy <= h + self.corner))
        )
        near = ((dy <= w) & (px >= -w) & (px <= x1 + w)) | (
            (dx <= w) & (py >= -w) & (py <= y1 + w)
        )
        return road, near & ~road

    def in_intersection(self, px, py, margin: float = 0.0) -> np.ndarray:
        dx, dy = self._axis_distances(np.asarray(px, float), np.asarray(py, float))
        lim = self.half + margin
        return (dx <= lim) & (dy <= lim)

    def lane_marking(self, px, py, width: float) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        road, _ = self.classify(px, py)
        dx, dy = self._axis_distances(px, py)
        on_centre = (dx <= width) | (dy <= width)
        return road & on_centre & ~self.in_intersection(px, py)

    def centreline_offset(self, p: np.ndarray) -> Optional[np.ndarray]:
        """Offset from the nearest road centreline, or None off-road and in
        intersections."""
        road, _ = self.classify(p[0], p[1])
        if not road or self.in_intersection(p[0], p[1], margin=self.corner):
            return None
        dx, dy = self._axis_distances(np.asarray(p[0]), np.asarray(p[1]))
        if dy <= self.half:
            yc = self.ys[np.abs(self.ys - p[1]).argmin()]
            return np.array([0.0, p[1] - yc])
        xc = self.xs[np.abs(self.xs - p[0]).argmin()]
        return np.array([p[0] - xc, 0.0])

    # ---- persistence ----

    def to_dict(self) -> dict:
        return {
            "grid": {
                "nx": self.nx,
                "ny": self.ny,
                "spacing": self.spacing,
                "lane-width": self.lane_width,
                "sidewalk": self.sidewalk,
                "corner": self.corner,
            },
            "intersections": [
                {"id": n, "pos": self.node_pos(n).tolist()} for n in range(self.n_nodes)
            ],
            "road-segments": [
                [a, b] for a in range(self.n_nodes) for b in self.neighbors(a) if a < b
            ],
            "roads": [list(r) for r in self.road_rects()],
            "sidewalk-bands": [list(r) for r in self.sidewalk_rects()],
            "blocks": [list(r) for r in self.blocks()],
            "routes": self.routes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Town":
        g = d["grid"]
        town = cls(
            nx=g["nx"],
            ny=g["ny"],
            spacing=g["spacing"],
            lane_width=g["lane-width"],
            sidewalk=g["sidewalk"],
            corner=g.get("corner", 2.5),
            routes={k: [list(r) for r in v] for k, v in d.get("routes", {}).items()},
        )
        for task, routes in town.routes.items():
            Task(task)
            for r in routes:
                if not town.is_connected_path(r):
                    raise ValueError(f"Route {r} of task {task} is not a connected path.")
        return town


def save_town(town: Town, path: str) -> None:
    with atomic_write(path) as f:
        json.dump(town.to_dict(), f, indent=2)


def load_town(path: str) -> Town:
    with open(path, "r", encoding="utf-8") as f:
        return Town.from_dict(json.load(f))


# --------------------------------------------------------------------------
# Routes
# --------------------------------------------------------------------------


@dataclass
class Maneuver:
    command: HighLevelCommand
    node: int
    s_start: float
    s_end: float


class Route:
    """Dense lane-centre waypoints for a node path.

    `segment[k]` is the index of the straight road segment waypoint k lies
    on, or -1 inside a turn arc.
    """

    def __init__(self, town: Town, nodes: Sequence[int]) -> None:
        if not town.is_connected_path(nodes):
            raise ValueError(f"Route {list(nodes)} is not a connected path.")
        self.town = town
        self.nodes = list(nodes)
        pts, seg, marks = self._polyline()
        self.waypoints, self.segment, self.s = _resample(pts, seg, WAYPOINT_SPACING)
        self.maneuvers = [
            Maneuver(cmd, node, self._arc_s(a), self._arc_s(b)) for cmd, node, a, b in marks
        ]
        self.directions = [
            (town.node_pos(b) - town.node_pos(a)) / town.spacing
            for a, b in zip(self.nodes, self.nodes[1:])
        ]

    def _arc_s(self, p: np.ndarray) -> float:
        k = int(np.argmin(np.sum((self.waypoints - p) ** 2, axis=1)))
        return float(self.s[k])

    def _polyline(self):
        town = self.town
        lane = town.lane_width / 2
        P = [town.node_pos(n) for n in self.nodes]
        D = [(b - a) / np.linalg.norm(b - a) for a, b in zip(P, P[1:])]

        pts = [P[0] + D[0] * START_PAD + _right(D[0]) * lane]
        seg = [0]
        marks = []
        for i in range(1, len(P) - 1):
            d_in, d_out = D[i - 1], D[i]
            corner = P[i] + _right(d_in) * lane + _right(d_out) * lane
            cross = d_in[0] * d_out[1] - d_in[1] * d_out[0]
            if abs(cross) < 1e-9:
                entry = P[i] - d_in * town.half + _right(d_in) * lane
                exit_ = P[i] + d_in * town.half + _right(d_in) * lane
                pts += [entry, exit_]
                seg += [i - 1, i]
                if town.degree(self.nodes[i]) >= 3:
                    marks.append((HighLevelCommand.STRAIGHT, self.nodes[i], entry, exit_))
                continue
            left = cross > 0
            r = LEFT_TURN_RADIUS if left else RIGHT_TURN_RADIUS
            t_in = corner - d_in * r
            t_out = corner + d_out * r
            centre = t_in + (_left(d_in) if left else _right(d_in)) * r
            a0 = math.atan2(*(t_in - centre)[::-1])
            sweep = math.pi / 2 if left else -math.pi / 2
            n = max(int(abs(sweep) * r / 0.25), 8)
            arc = [
                centre + r * np.array([math.cos(a0 + sweep * k / n), math.sin(a0 + sweep * k / n)])
                for k in range(n + 1)
            ]
            pts.append(arc[0])
            seg.append(i - 1)
            pts += arc[1:-1]
            seg += [-1] * (len(arc) - 2)
            pts.append(arc[-1])
            seg.append(i)
            marks.append(
                (HighLevelCommand.LEFT if left else HighLevelCommand.RIGHT, self.nodes[i], t_in, t_out)
            )
        pts.append(P[-1] - D[-1] * END_PAD + _right(D[-1]) * lane)
        seg.append(len(D) - 1)
        return np.array(pts), np.array(seg), marks

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    @property
    def start_heading(self) -> float:
        d = self.directions[0]
        return math.atan2(d[1], d[0])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        return np.array(
            [np.interp(s, self.s, self.waypoints[:, 0]), np.interp(s, self.s, self.waypoints[:, 1])]
        )

    def direction_at(self, k: int) -> Optional[np.ndarray]:
        seg = self.segment[k]
        return None if seg < 0 else self.directions[seg]

    def nearest(self, p: np.ndarray, start: int = 0, window: int = 40) -> int:
        """Index of the closest waypoint in [start, start + window)."""
        stop = min(start + window, len(self.waypoints))
        d = np.sum((self.waypoints[start:stop] - p) ** 2, axis=1)
        return start + int(np.argmin(d))

    def command_at(self, s: float, radius: float = 8.0, hold: float = 2.0) -> HighLevelCommand:
        for m in self.maneuvers:
            if m.s_start - radius <= s <= m.s_end + hold:
                return m.command
        return HighLevelCommand.FOLLOW_LANE

    def turn_count(self) -> int:
        return sum(m.command in (HighLevelCommand.LEFT, HighLevelCommand.RIGHT) for m in self.maneuvers)

    def reversed_route(self) -> "Route":
        return Route(self.town, self.nodes[::-1])


def _resample(pts: np.ndarray, seg: np.ndarray, step: float):
    """Resample a polyline at constant arc-length spacing. Each new point takes
    the segment tag of the polyline piece it falls on."""
    d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], d > 1e-9])
    pts, seg = pts[keep], seg[keep]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    s = np.arange(0.0, cum[-1], step)
    if cum[-1] - s[-1] > 1e-9:
        s = np.append(s, cum[-1])
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    piece = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 2)
    # A piece ending on a turn arc belongs to the arc.
    tags = np.where((seg[piece] < 0) | (seg[piece + 1] < 0), -1, seg[piece + 1])
    tags = np.where(seg[piece] == seg[piece + 1], seg[piece], tags)
    return np.stack([x, y], axis=1), tags.astype(np.int64), s


# --------------------------------------------------------------------------
# Route generation
# --------------------------------------------------------------------------


def random_walk(
    town: Town,
    rng: np.random.Generator,
    n_segments: int,
    turns: Optional[int] = None,
    min_turns: int = 0,
    tries: int = 50,
) -> Optional[List[int]]:
    """A self-avoiding walk of `n_segments` with an exact (`turns`) or
    minimal (`min_turns`) number of turns; None if no walk was found."""
    for _ in range(tries):
        node = int(rng.integers(town.n_nodes))
        path = [node]
        ok = True
        for _ in range(n_segments):
            options = [n for n in town.neighbors(path[-1]) if n not in path]
            if not options:
                ok = False
                break
            path.append(int(options[rng.integers(len(options))]))
        if not ok:
            continue
        k = _count_turns(town, path)
        if turns is not None and k != turns:
            continue
        if k < min_turns:
            continue
        return path
    return None


def _count_turns(town: Town, path: Sequence[int]) -> int:
    count = 0
    for a, b, c in zip(path, path[1:], path[2:]):
        d1 = town.node_pos(b) - town.node_pos(a)
        d2 = town.node_pos(c) - town.node_pos(b)
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) > 1e-9:
            count += 1
    return count


def benchmark_routes(town: Town, task: Task, n: int = 25, seed: int = 2019) -> List[List[int]]:
    """The fixed route list of a task. Routes stored in the town file win;
    otherwise they are generated deterministically."""
    key = Task.NAVIGATION.value if task is Task.NAVIGATION_DYNAMIC else task.value
    stored = town.routes.get(task.value) or town.routes.get(key)
    if stored:
        if len(stored) < n:
            raise ValueError(f"Town file lists {len(stored)} routes for {task.value}, need {n}.")
        return [list(r) for r in stored[:n]]

    rng = np.random.default_rng([seed, list(Task).index(Task(key))])
    found = []
    attempts = 0
    while len(found) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError(f"Unable to generate {n} routes for task {task.value}.")
        if key == Task.STRAIGHT.value:
            path = random_walk(town, rng, int(rng.integers(2, 4)), turns=0)
        elif key == Task.ONE_TURN.value:
            path = random_walk(town, rng, int(rng.integers(2, 5)), turns=1)
        else:
            path = random_walk(town, rng, int(rng.integers(4, 7)), min_turns=2)
        if path is not None and path not in found:
            found.append(path)
    logger.debug("Generated %d routes for %s", len(found), task.value)
    return found
