"""Procedural corridor obstacle course and avatar navigation.

The course is a corridor of six tiles (two straight, two left and two right
corners). Positions are kept in the corridor frame: ``s`` is arc length
along the centreline and ``u`` the signed lateral offset (positive to the
left). Obstacles are rectangles in that frame; moving obstacles slide
across the corridor sinusoidally.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .agents import Agent, Percept, Vision
from .core import Event, TrialRecord, VisualFieldProfile, seed_for
from .mask import NO_LATENCY, LatencyModel

log = logging.getLogger(__name__)

TILE_MULTISET = ("S", "S", "L", "L", "R", "R")
LAYOUTS: tuple[tuple[str, ...], ...] = tuple(sorted(set(itertools.permutations(TILE_MULTISET))))
TILE_LENGTH = 56.0 / 6.0
CORNER_RADIUS = TILE_LENGTH / (math.pi / 2.0)
CORRIDOR_WIDTH = 8.0
HALF_WIDTH = CORRIDOR_WIDTH / 2.0
AVATAR_RADIUS = 0.2
EYE_HEIGHT = 1.7
N_OBSTACLES = 12
BASE_SPEED = 1.5
TIME_FACTOR = 1.6
TIME_SHRINK = 0.98
PATH_MARGIN = 0.1
GRID_RES = 0.1
MAX_TURN_RATE = 180.0  # deg/s of body rotation
PERCEPTION_RANGE = 15.0
# perception and steering decisions run at 10 Hz; motion and contacts at dt
CONTROL_PERIOD = 0.1
CATEGORIES = ("wall", "near-ground", "ceiling", "moving")


def layout_count() -> int:
    return len(LAYOUTS)


def generate_layout(seed: int) -> tuple[str, ...]:
    """Tile sequence for a seed; uniform over the 90 distinct sequences."""
    return LAYOUTS[int(np.random.default_rng(seed).integers(len(LAYOUTS)))]


@dataclass(frozen=True)
class ObstacleType:
    name: str
    category: str
    u0: float
    u1: float
    depth: float
    height: float  # representative height of the part the eye fixates
    amplitude: float = 0.0
    period: float = 0.0


# 4 types per category
OBSTACLE_POOL: tuple[ObstacleType, ...] = (
    ObstacleType("wall-left-short", "wall", 1.0, 4.0, 0.3, 1.2),
    ObstacleType("wall-right-short", "wall", -4.0, -1.0, 0.3, 1.2),
    ObstacleType("wall-left-long", "wall", -1.0, 4.0, 0.3, 1.2),
    ObstacleType("wall-right-long", "wall", -4.0, 1.0, 0.3, 1.2),
    ObstacleType("crate-left", "near-ground", 1.4, 2.6, 0.8, 0.4),
    ObstacleType("crate-centre", "near-ground", -0.6, 0.6, 0.8, 0.4),
    ObstacleType("crate-right", "near-ground", -2.6, -1.4, 0.8, 0.4),
    ObstacleType("beam-low", "near-ground", -1.2, 1.2, 0.5, 0.3),
    ObstacleType("lamp-left", "ceiling", 0.8, 2.2, 0.6, 2.0),
    ObstacleType("lamp-right", "ceiling", -2.2, -0.8, 0.6, 2.0),
    ObstacleType("banner-centre", "ceiling", -1.0, 1.0, 0.4, 2.1),
    ObstacleType("pipe-left", "ceiling", 2.0, 3.5, 0.6, 2.0),
    ObstacleType("slider-slow", "moving", -0.5, 0.5, 0.6, 1.0, 3.0, 16.0),
    ObstacleType("slider-mid", "moving", -0.5, 0.5, 0.6, 1.0, 3.0, 12.0),
    ObstacleType("slider-fast", "moving", -0.4, 0.4, 0.6, 1.0, 2.5, 10.0),
    ObstacleType("slider-wide", "moving", -0.7, 0.7, 0.6, 1.0, 2.5, 14.0),
)


@dataclass(frozen=True)
class Obstacle:
    id: int
    kind: str
    category: str
    s0: float
    s1: float
    u0: float  # static span, or the span around the moving centre
    u1: float
    height: float
    amplitude: float = 0.0
    period: float = 0.0
    phase: float = 0.0

    @property
    def moving(self) -> bool:
        return self.category == "moving"

    @property
    def half(self) -> float:
        return (self.u1 - self.u0) / 2.0

    def span_at(self, t: float) -> tuple[float, float]:
        if not self.moving:
            return self.u0, self.u1
        c = self.amplitude * math.sin(2.0 * math.pi * t / self.period + self.phase)
        return c - self.half, c + self.half

    def info(self) -> dict:
        return {"s0": self.s0, "s1": self.s1, "u0": self.u0, "u1": self.u1, "moving": self.moving,
                "amp": self.amplitude, "period": self.period, "phase": self.phase, "half": self.half,
                "category": self.category}

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "category": self.category, "s0": self.s0, "s1": self.s1,
                "u0": self.u0, "u1": self.u1, "amplitude": self.amplitude, "period": self.period, "phase": self.phase}


class Course:
    """Corridor geometry for a tile sequence."""

    def __init__(self, layout, obstacles=()):
        layout = tuple(layout)
        if sorted(layout) != sorted(TILE_MULTISET):
            raise ValueError(f"layout must permute {TILE_MULTISET}, got {layout}")
        self.layout = layout
        self.obstacles: tuple[Obstacle, ...] = tuple(obstacles)
        self.length = TILE_LENGTH * len(layout)
        self.kappas = tuple(0.0 if t == "S" else (1.0 / CORNER_RADIUS if t == "L" else -1.0 / CORNER_RADIUS)
                            for t in layout)
        # world pose (x, y, theta) at each tile start; start faces +y
        poses = [(0.0, 0.0, math.pi / 2)]
        for k in self.kappas:
            poses.append(self._advance(poses[-1], k, TILE_LENGTH))
        self._poses = poses

    @staticmethod
    def _advance(pose, kappa, ds):
        x, y, th = pose
        if kappa == 0.0:
            return x + ds * math.cos(th), y + ds * math.sin(th), th
        dth = kappa * ds
        r = 1.0 / kappa
        return (x + r * (math.sin(th + dth) - math.sin(th)),
                y - r * (math.cos(th + dth) - math.cos(th)), th + dth)

    def tile_index(self, s: float) -> int:
        return min(max(int(s // TILE_LENGTH), 0), len(self.layout) - 1)

    def kappa_at(self, s: float) -> float:
        return self.kappas[self.tile_index(s)]

    def to_world(self, s: float, u: float) -> tuple[float, float]:
        """World coordinates (top-down, metres) of a corridor-frame point."""
        i = self.tile_index(s)
        x, y, th = self._advance(self._poses[i], self.kappas[i], s - i * TILE_LENGTH)
        return x - u * math.sin(th), y + u * math.cos(th)

    def heading_at(self, s: float) -> float:
        i = self.tile_index(s)
        return self._advance(self._poses[i], self.kappas[i], s - i * TILE_LENGTH)[2]


def _place_obstacles(rng: np.random.Generator, length: float) -> tuple[Obstacle, ...]:
    kinds = rng.choice(len(OBSTACLE_POOL), N_OBSTACLES, replace=False)
    slots = np.linspace(5.0, length - 4.0, N_OBSTACLES)
    jitter = rng.uniform(-0.5, 0.5, N_OBSTACLES)
    phases = rng.uniform(0.0, 2.0 * math.pi, N_OBSTACLES)
    out = []
    for i, (k, c, j, ph) in enumerate(zip(kinds, slots, jitter, phases)):
        ot = OBSTACLE_POOL[int(k)]
        sc = float(c + j)
        out.append(Obstacle(i, ot.name, ot.category, sc - ot.depth / 2, sc + ot.depth / 2, ot.u0, ot.u1, ot.height,
                            ot.amplitude, ot.period, float(ph) if ot.category == "moving" else 0.0))
    return tuple(out)


def occupancy_grid(course: Course, t: float = 0.0, clearance: float = AVATAR_RADIUS + PATH_MARGIN,
                   res: float = GRID_RES) -> np.ndarray:
    """Boolean grid over (s, u) cell centres: True where the avatar centre cannot be.

    Obstacles (moving ones at time ``t``) and walls are dilated by
    ``clearance``. Rows index s, columns index u.
    """
    ns = int(round(course.length / res))
    nu = int(round(CORRIDOR_WIDTH / res))
    s = (np.arange(ns) + 0.5) * res
    u = -HALF_WIDTH + (np.arange(nu) + 0.5) * res
    blocked = np.zeros((ns, nu), dtype=bool)
    blocked[:, np.abs(u) > HALF_WIDTH - clearance] = True
    for ob in course.obstacles:
        u0, u1 = ob.span_at(t)
        rs = (s >= ob.s0 - clearance) & (s <= ob.s1 + clearance)
        cu = (u >= u0 - clearance) & (u <= u1 + clearance)
        blocked[np.ix_(rs, cu)] = True
    return blocked


def path_exists(course: Course, t: float = 0.0) -> bool:
    """A connected clear region joins the start row to the goal row."""
    free = ~occupancy_grid(course, t)
    labels, _ = ndimage.label(free)
    start = set(labels[0][labels[0] > 0].tolist())
    goal = set(labels[-1][labels[-1] > 0].tolist())
    return bool(start & goal)


def generate_course(seed: int, max_retries: int = 50) -> Course:
    """Random layout and obstacle set; obstacles are redrawn until passable."""
    rng = np.random.default_rng(seed)
    layout = LAYOUTS[int(rng.integers(len(LAYOUTS)))]
    length = TILE_LENGTH * len(layout)
    for attempt in range(max_retries):
        if attempt:
            log.info("course %d impassable; redrawing obstacles (attempt %d)", seed, attempt)
            rng = np.random.default_rng(seed_for("course", seed, attempt))
        course = Course(layout, _place_obstacles(rng, length))
        if path_exists(course):
            return course
    raise RuntimeError(f"no passable obstacle set for seed {seed}")


@dataclass
class AvatarState:
    s: float = 0.0
    u: float = 0.0
    heading: float = 0.0  # degrees relative to the corridor direction, positive = left
    speed: float = 0.0
    radius: float = AVATAR_RADIUS


def _rect_distance(s, u, s0, s1, u0, u1, kappa):
    ds = max(s0 - s, 0.0, s - s1) * max(1.0 - kappa * u, 1e-6)
    du = max(u0 - u, 0.0, u - u1)
    return math.hypot(ds, du)


def contacts(avatar: AvatarState, course: Course, t: float) -> set:
    """Surfaces currently touching the avatar's footprint circle."""
    hit = set()
    r = avatar.radius
    if HALF_WIDTH - avatar.u <= r:
        hit.add("wall-left")
    if HALF_WIDTH + avatar.u <= r:
        hit.add("wall-right")
    kappa = course.kappa_at(avatar.s)
    for ob in course.obstacles:
        if ob.s0 - avatar.s > 2.0 or avatar.s - ob.s1 > 2.0:
            continue
        u0, u1 = ob.span_at(t)
        if _rect_distance(avatar.s, avatar.u, ob.s0, ob.s1, u0, u1, kappa) <= r:
            hit.add(ob.id)
    return hit


class CollisionCounter:
    """One collision per contact onset; continuous contact is not re-counted."""

    def __init__(self):
        self.touching: set = set()
        self.count = 0

    def update(self, current: set) -> list:
        new = sorted(current - self.touching, key=str)
        self.touching = set(current)
        self.count += len(new)
        return new


def detect_collision(avatar: AvatarState, course: Course, t: float = 0.0, counter: Optional[CollisionCounter] = None) -> list:
    """Newly started contacts (all current contacts when no counter is given)."""
    cur = contacts(avatar, course, t)
    if counter is None:
        return sorted(cur, key=str)
    return counter.update(cur)


@dataclass(frozen=True)
class NavigationConfig:
    speed: float = BASE_SPEED
    time_limit: float = 56.0 / BASE_SPEED * TIME_FACTOR
    seed: int = 0
    level: int = 1
    obstacles: bool = True

    def __post_init__(self):
        if self.speed <= 0 or self.time_limit <= 0:
            raise ValueError("speed and time limit must be positive")

    @property
    def dt(self) -> float:
        return min(0.05, 0.1 / self.speed)

    @classmethod
    def for_level(cls, level: int, seed: int = 0) -> "NavigationConfig":
        """Speed +4 % of base per level; time budget shrinks 2 % per level."""
        if not 1 <= level <= 100:
            raise ValueError(f"level out of range: {level}")
        speed = BASE_SPEED * (1.0 + 0.04 * (level - 1))
        limit = 56.0 / speed * TIME_FACTOR * TIME_SHRINK ** (level - 1)
        return cls(speed=speed, time_limit=limit, seed=seed, level=level)


@dataclass(frozen=True)
class NavigationOutcome:
    trial_duration: float
    collisions: int
    timeout: bool


def _look_fn(avatar: AvatarState):
    """Map a point ``d`` m ahead at lateral ``u`` to body-relative gaze angles."""

    def look(d: float, u: float, level: str):
        d = max(d, 0.5)
        az = -(math.degrees(math.atan2(u - avatar.u, d)) - avatar.heading)
        h = 0.1 if level == "floor" else EYE_HEIGHT
        el = math.degrees(math.atan2(h - EYE_HEIGHT, d))
        return az, el

    return look


def _perceive_and_decide(t, avatar, obs, course, vision, agent, look):
    """Percepts of obstacles ahead (three fixation points each) and the agent's command."""
    near = [ob for ob in obs if ob.s1 > avatar.s and ob.s0 - avatar.s < PERCEPTION_RANGE]
    percepts = []
    if near:
        az, el = [], []
        scale = max(1.0 - course.kappa_at(avatar.s) * avatar.u, 0.3)
        for ob in near:
            fwd = max((0.5 * (ob.s0 + ob.s1) - avatar.s) * scale, 0.3)
            u0, u1 = ob.span_at(t)
            e = math.degrees(math.atan2(ob.height - EYE_HEIGHT, fwd))
            for uu in (u0 + 0.1, 0.5 * (u0 + u1), u1 - 0.1):
                az.append(-(math.degrees(math.atan2(uu - avatar.u, fwd)) - avatar.heading))
                el.append(e)
        seen = vision.visible(t, az, el)
        for j, ob in enumerate(near):
            if seen[3 * j: 3 * j + 3].any():
                percepts.append(Percept(ob.id, az[3 * j + 1], el[3 * j + 1], None, ob.info()))
    return agent.navigate(t, avatar, percepts, look)


def run_navigation_trial(
    cfg: NavigationConfig,
    agent: Agent,
    vf: VisualFieldProfile,
    latency: LatencyModel = NO_LATENCY,
    session: int = 1,
    trial: int = 1,
    render_seed: Optional[int] = None,
    course: Optional[Course] = None,
) -> TrialRecord:
    if course is None:
        course = generate_course(cfg.seed)
        if not cfg.obstacles:
            course = Course(course.layout)
    controller = agent.new_controller()
    vision = Vision(vf, controller, latency, omniscient=agent.omniscient)
    avatar = AvatarState(speed=0.0)
    counter = CollisionCounter()
    look = _look_fn(avatar)
    agent.begin_navigation({"speed": cfg.speed, "half_width": HALF_WIDTH})
    events = [Event(0.0, "trial-start", {"layout": "".join(course.layout), "n_obstacles": len(course.obstacles)})]

    obs = course.obstacles
    dt = cfg.dt
    max_turn = MAX_TURN_RATE * dt
    n_steps = int(math.ceil(cfg.time_limit / dt))
    end_t = None
    control_every = max(int(round(CONTROL_PERIOD / dt)), 1)
    heading_cmd = speed_cmd = 0.0
    for k in range(n_steps):
        t = k * dt
        if k % control_every == 0:
            heading_cmd, speed_cmd = _perceive_and_decide(t, avatar, obs, course, vision, agent, look)
        speed = min(max(float(speed_cmd), 0.0), cfg.speed)
        dh = max(min(float(heading_cmd) - avatar.heading, max_turn), -max_turn)
        avatar.heading = max(min(avatar.heading + dh, 89.0), -89.0)
        avatar.speed = speed
        psi = math.radians(avatar.heading)
        kappa = course.kappa_at(avatar.s)
        s_prev = avatar.s
        ds = speed * math.cos(psi) / max(1.0 - kappa * avatar.u, 1e-3) * dt
        avatar.s += ds
        avatar.u = max(min(avatar.u + speed * math.sin(psi) * dt, HALF_WIDTH - AVATAR_RADIUS),
                       -(HALF_WIDTH - AVATAR_RADIUS))
        t_next = (k + 1) * dt
        for hit in counter.update(contacts(avatar, course, t_next)):
            events.append(Event(round(t_next, 6), "collision", {"obstacle": hit}))
        if avatar.s >= course.length:
            frac = (course.length - s_prev) / ds if ds > 0 else 1.0
            end_t = t + frac * dt
            events.append(Event(round(end_t, 6), "goal-reached", {}))
            break
    timeout = end_t is None
    if timeout:
        end_t = cfg.time_limit
        events.append(Event(round(end_t, 6), "timeout", {"s": round(avatar.s, 4)}))
    duration = round(end_t, 6)
    samples = controller.render(duration, np.random.default_rng(render_seed if render_seed is not None else cfg.seed + 1))
    return TrialRecord(
        task="navigation",
        session=session,
        trial=trial,
        level=cfg.level,
        seed=cfg.seed,
        events=tuple(events),
        samples=samples,
        outcome={
            "duration": duration,
            "collisions": counter.count,
            "timeout": timeout,
            "layout": "".join(course.layout),
        },
    )
