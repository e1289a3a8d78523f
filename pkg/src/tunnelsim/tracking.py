"""Multiple-object tracking task."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .agents import Agent, Percept, Vision
from .core import Event, TrialRecord, VisualFieldProfile
from .mask import NO_LATENCY, LatencyModel

BASE_TARGETS = 5
BASE_MARKED = 2
BASE_SPEED = 3.0
BASE_AREA = (52.0, 39.0)
MAX_AREA = (80.0, 60.0)
LEVEL_GAIN = 0.04

PHYSICS_DT = 1.0 / 30.0
SELECTION_TIMEOUT = 30.0


@dataclass(frozen=True)
class TrackingConfig:
    n_targets: int = BASE_TARGETS
    n_marked: int = BASE_MARKED
    speed: float = BASE_SPEED
    area_w: float = BASE_AREA[0]
    area_h: float = BASE_AREA[1]
    trial_duration: float = 10.0
    seed: int = 0
    level: int = 1
    separation: float = 4.0
    margin: float = 3.0
    turn_rate: float = 0.5
    turn_cone: float = 45.0
    target_radius: float = 1.5

    def __post_init__(self):
        if not 0 < self.n_marked < self.n_targets:
            raise ValueError("need 0 < n_marked < n_targets")
        if self.area_w > MAX_AREA[0] + 1e-9 or self.area_h > MAX_AREA[1] + 1e-9:
            raise ValueError("play area exceeds 80 x 60 degrees")

    @classmethod
    def for_level(cls, level: int, seed: int = 0) -> "TrackingConfig":
        """Difficulty schedule: +4 % of base per level on speed and area, one
        extra target every 5 levels (unmarked first, then marked, alternating)."""
        if not 1 <= level <= 100:
            raise ValueError(f"level out of range: {level}")
        gain = 1.0 + LEVEL_GAIN * (level - 1)
        extra = (level - 1) // 5
        rng = np.random.default_rng(seed)
        return cls(
            n_targets=BASE_TARGETS + extra,
            n_marked=BASE_MARKED + extra // 2,
            speed=BASE_SPEED * gain,
            area_w=min(BASE_AREA[0] * gain, MAX_AREA[0]),
            area_h=min(BASE_AREA[1] * gain, MAX_AREA[1]),
            trial_duration=float(rng.uniform(8.0, 12.0)),
            seed=seed,
            level=level,
        )


@dataclass(frozen=True)
class TrackingOutcome:
    incorrect_selections: int
    score: int


@dataclass
class TrackingState:
    pos: np.ndarray  # (n, 2) azimuth, elevation
    heading: np.ndarray  # (n,) radians, 0 = rightward
    t: float
    cfg: TrackingConfig


def spawn_targets(cfg: TrackingConfig) -> TrackingState:
    """Targets start clustered on rings around the area centre, heading outward."""
    n = cfg.n_targets
    pos = np.zeros((n, 2))
    heading = np.zeros(n)
    placed = 0
    ring = 0
    while placed < n:
        ring += 1
        radius = ring * cfg.separation * 1.05
        capacity = max(int(2 * math.pi * radius / (cfg.separation * 1.05)), 1)
        k = min(capacity, n - placed)
        for j in range(k):
            a = 2 * math.pi * j / k + ring * 0.5
            pos[placed] = (radius * math.cos(a), radius * math.sin(a))
            heading[placed] = a
            placed += 1
    return TrackingState(pos, heading, 0.0, cfg)


def _inside(p, w, h):
    return -w / 2 <= p[0] <= w / 2 and -h / 2 <= p[1] <= h / 2


def step_targets(state: TrackingState, dt: float, rng: np.random.Generator):
    """Advance all targets by exactly ``speed * dt``.

    Headings are re-drawn within a cone at a Poisson rate; a target near a
    wall and heading outward turns toward a random interior point; a move
    that would bring two targets closer than the separation threshold (or
    leave the area) is rotated to the nearest admissible heading.
    Returns the new state and the heading-change events.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = state.cfg
    n = len(state.heading)
    w, h = cfg.area_w, cfg.area_h
    pos = state.pos.copy()
    heading = state.heading.copy()
    t = state.t + dt
    events = []

    redraw = rng.random(n) < 1.0 - math.exp(-cfg.turn_rate * dt)
    cone = math.radians(cfg.turn_cone)
    jitter = rng.uniform(-cone, cone, n)
    for i in np.flatnonzero(redraw):
        heading[i] += jitter[i]
        events.append(Event(round(t, 6), "heading-change", {"target": int(i), "reason": "random"}))

    mw, mh = w / 2 - cfg.margin, h / 2 - cfg.margin
    for i, (x, y) in enumerate(pos.tolist()):
        if -mw <= x <= mw and -mh <= y <= mh:
            continue
        dx, dy = math.cos(heading[i]), math.sin(heading[i])
        outward = (x > mw and dx > 0) or (x < -mw and dx < 0) or (y > mh and dy > 0) or (y < -mh and dy < 0)
        if outward:
            gx, gy = rng.uniform(-mw, mw), rng.uniform(-mh, mh)
            heading[i] = math.atan2(gy - y, gx - x)
            events.append(Event(round(t, 6), "heading-change", {"target": int(i), "reason": "boundary"}))

    step = cfg.speed * dt
    sep2 = cfg.separation ** 2
    proposal = pos.copy()
    proposal[:, 0] += step * np.cos(heading)
    proposal[:, 1] += step * np.sin(heading)
    dx = proposal[:, 0, None] - proposal[None, :, 0]
    dy = proposal[:, 1, None] - proposal[None, :, 1]
    d2 = dx * dx + dy * dy
    np.fill_diagonal(d2, np.inf)
    if d2.min() >= sep2 and np.abs(proposal[:, 0]).max() <= w / 2 and np.abs(proposal[:, 1]).max() <= h / 2:
        return TrackingState(proposal, heading, t, cfg), events

    # sequential repair: each target checks against already-updated neighbours
    offsets = [0.0]
    for k in range(1, 13):
        offsets += [math.radians(15 * k), -math.radians(15 * k)]
    for i in range(n):
        others = np.delete(pos, i, axis=0)
        best, best_gap = None, -math.inf
        for off in offsets:
            a = heading[i] + off
            cand = pos[i] + step * np.array([math.cos(a), math.sin(a)])
            if not _inside(cand, w, h):
                continue
            gap = ((others - cand) ** 2).sum(1).min() if len(others) else math.inf
            if gap >= sep2:
                best = (a, cand)
                break
            if gap > best_gap:
                best_gap, best_fallback = gap, (a, cand)
        if best is None:
            best = best_fallback
        heading[i], pos[i] = best
    return TrackingState(pos, heading, t, cfg), events


def score_trial(selections, marked_set) -> TrackingOutcome:
    """2 for no incorrect selection, 1 for exactly one, 0 otherwise."""
    marked = set(marked_set)
    incorrect = sum(1 for s in selections if s not in marked)
    score = 2 if incorrect == 0 else 1 if incorrect == 1 else 0
    return TrackingOutcome(incorrect, score)


def run_tracking_trial(
    cfg: TrackingConfig,
    agent: Agent,
    vf: VisualFieldProfile,
    latency: LatencyModel = NO_LATENCY,
    session: int = 1,
    trial: int = 1,
    render_seed: Optional[int] = None,
) -> TrialRecord:
    rng = np.random.default_rng(cfg.seed)
    controller = agent.new_controller()
    vision = Vision(vf, controller, latency, omniscient=agent.omniscient)
    state = spawn_targets(cfg)
    n = cfg.n_targets
    marked = sorted(int(i) for i in rng.choice(n, cfg.n_marked, replace=False))
    is_marked = np.zeros(n, dtype=bool)
    is_marked[marked] = True
    events = [Event(0.0, "spawn", {"target": i, "az": float(state.pos[i, 0]), "el": float(state.pos[i, 1])}) for i in range(n)]
    events += [Event(0.0, "mark", {"target": i}) for i in marked]
    agent.begin_tracking({"n_marked": cfg.n_marked, "area_w": cfg.area_w, "area_h": cfg.area_h})

    t = 0.0
    steps = int(round(cfg.trial_duration / PHYSICS_DT))
    m_idx = np.array(marked)
    for k in range(steps):
        t = k * PHYSICS_DT
        # only marked targets carry an indicator; unmarked ones are not tracked
        mpos = state.pos[m_idx].tolist()
        seen = vision.visible(t, [p[0] for p in mpos], [p[1] for p in mpos])
        percepts = []
        for i, p, s in zip(marked, mpos, seen):
            if s:
                h = float(state.heading[i])
                percepts.append(Percept(i, p[0], p[1], True,
                                        {"vaz": cfg.speed * math.cos(h), "vel": cfg.speed * math.sin(h)}))
        agent.track(t, percepts)
        state, evs = step_targets(state, PHYSICS_DT, rng)
        events.extend(evs)
    t_stop = round(steps * PHYSICS_DT, 6)
    events.append(Event(t_stop, "stop", {"markers_visible": False}))

    # selection phase: targets are still and the agent may look at all of them
    candidates = [Percept(i, float(state.pos[i, 0]), float(state.pos[i, 1]), None) for i in range(n)]
    t_sel = controller.free_at(t_stop)
    controller.hold(t_sel)
    chosen = agent.select(t_sel, candidates, cfg.n_marked)
    timeout = chosen is None
    t_end = t_sel
    selections = []
    if not timeout:
        for cid in list(chosen)[: cfg.n_marked]:
            land = controller.saccade_to(t_end, float(state.pos[cid, 0]), float(state.pos[cid, 1]))
            t_end = land + agent.cfg.selection_dwell
            if t_end - t_stop > SELECTION_TIMEOUT:
                timeout = True
                break
            selections.append(cid)
            events.append(Event(round(t_end, 6), "selection", {"target": int(cid), "correct": bool(is_marked[cid])}))
    if timeout:
        t_end = t_stop + SELECTION_TIMEOUT
        events.append(Event(round(t_end, 6), "timeout", {}))
        outcome = TrackingOutcome(cfg.n_marked, 0)
    else:
        outcome = score_trial(selections, marked)
    duration = round(t_end, 6)
    samples = controller.render(duration, np.random.default_rng(render_seed if render_seed is not None else cfg.seed + 1))
    return TrialRecord(
        task="tracking",
        session=session,
        trial=trial,
        level=cfg.level,
        seed=cfg.seed,
        events=tuple(events),
        samples=samples,
        outcome={
            "incorrect": outcome.incorrect_selections,
            "score": outcome.score,
            "timeout": timeout,
            "duration": duration,
            "n_targets": n,
            "n_marked": cfg.n_marked,
        },
    )
