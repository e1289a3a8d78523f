"""Gaze-contingent visual search task."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .agents import Agent, Percept, Vision
from .core import Event, TrialRecord, VisualFieldProfile
from .mask import NO_LATENCY, LatencyModel, in_field
from .tracking import BASE_AREA, LEVEL_GAIN, MAX_AREA

log = logging.getLogger(__name__)

N_MARKED = 3
BASE_DISTRACTORS = 6
PHYSICS_DT = 1.0 / 30.0
SELECT_RADIUS = 1.5
SELECT_DWELL = 0.4


@dataclass(frozen=True)
class SearchConfig:
    target_radius: float = 2.0
    n_marked: int = N_MARKED
    distractor_count: int = BASE_DISTRACTORS
    area_w: float = BASE_AREA[0]
    area_h: float = BASE_AREA[1]
    duration: float = 20.0
    seed: int = 0
    level: int = 1

    def __post_init__(self):
        if self.n_marked != N_MARKED:
            raise ValueError("the search task always has exactly 3 marked targets")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be non-negative")
        if not (0 < self.area_w <= MAX_AREA[0] + 1e-9 and 0 < self.area_h <= MAX_AREA[1] + 1e-9):
            raise ValueError("play area must be positive and at most 80 x 60 degrees")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @classmethod
    def for_level(cls, level: int, seed: int = 0) -> "SearchConfig":
        """Area grows like the tracking area; one more distractor every 3 levels."""
        if not 1 <= level <= 100:
            raise ValueError(f"level out of range: {level}")
        gain = 1.0 + LEVEL_GAIN * (level - 1)
        return cls(
            distractor_count=BASE_DISTRACTORS + (level - 1) // 3,
            area_w=min(BASE_AREA[0] * gain, MAX_AREA[0]),
            area_h=min(BASE_AREA[1] * gain, MAX_AREA[1]),
            seed=seed,
            level=level,
        )


@dataclass(frozen=True)
class SearchOutcome:
    targets_found: int
    adjusted_score: float


def adjusted_score(t: int, w: float, h: float) -> float:
    """Targets found weighted by play-area size."""
    if t < 0:
        raise ValueError("target count must be non-negative")
    if w <= 0 or h <= 0:
        raise ValueError("area dimensions must be positive")
    return float(t * (w * h))


def _area_grid(w, h, n=33):
    xs = np.linspace(-w / 2, w / 2, n)
    ys = np.linspace(-h / 2, h / 2, n)
    xx, yy = np.meshgrid(xs, ys)
    return xx.ravel(), yy.ravel()


def respawn_target(rng: np.random.Generator, gaze: tuple[float, float], vf: VisualFieldProfile,
                   area_w: float, area_h: float, max_batches: int = 200) -> tuple[float, float, bool]:
    """Uniform position in the play area outside the field centred on ``gaze``.

    Returns ``(az, el, fallback)``; ``fallback`` is True when the field covers
    the whole area and the position is uniform over the area instead.
    """
    gx, gy = _area_grid(area_w, area_h)
    if in_field(vf, gaze[0], gaze[1], gx, gy).all():
        log.info("field covers the play area; respawning uniformly")
        return float(rng.uniform(-area_w / 2, area_w / 2)), float(rng.uniform(-area_h / 2, area_h / 2)), True
    for _ in range(max_batches):
        az = rng.uniform(-area_w / 2, area_w / 2, 64)
        el = rng.uniform(-area_h / 2, area_h / 2, 64)
        outside = np.flatnonzero(~in_field(vf, gaze[0], gaze[1], az, el))
        if len(outside):
            k = outside[0]
            return float(az[k]), float(el[k]), False
    log.info("admissible region too small to hit; respawning uniformly")
    return float(rng.uniform(-area_w / 2, area_w / 2)), float(rng.uniform(-area_h / 2, area_h / 2)), True


def _initial_positions(rng, n, w, h, min_sep):
    pos = []
    for _ in range(n):
        for attempt in range(200):
            p = (rng.uniform(-w / 2, w / 2), rng.uniform(-h / 2, h / 2))
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_sep ** 2 for q in pos):
                break
        pos.append(p)
    return np.array(pos, dtype=float).reshape(n, 2)


def _held_fixation(controller, t, az, el) -> bool:
    """Gaze within the selection radius of (az, el) over the last dwell period."""
    if t < SELECT_DWELL - 1e-9:
        return False
    for tt in np.linspace(t - SELECT_DWELL, t, 5):
        gaz, gel = controller.gaze_at(float(tt))
        if np.hypot(gaz - az, gel - el) > SELECT_RADIUS:
            return False
    return True


def run_search_trial(
    cfg: SearchConfig,
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
    n = cfg.n_marked + cfg.distractor_count
    pos = _initial_positions(rng, n, cfg.area_w, cfg.area_h, 2 * cfg.target_radius)
    marked = np.zeros(n, dtype=bool)
    marked[: cfg.n_marked] = True
    ids = list(range(n))
    next_id = n
    events = [
        Event(0.0, "spawn", {"target": i, "kind": "marked" if marked[i] else "distractor",
                              "az": float(pos[i, 0]), "el": float(pos[i, 1])})
        for i in range(n)
    ]
    agent.begin_search({"area_w": cfg.area_w, "area_h": cfg.area_h})

    found = errors = fallbacks = 0
    steps = int(round(cfg.duration / PHYSICS_DT))
    for k in range(steps + 1):
        t = k * PHYSICS_DT
        seen = vision.visible(t, pos[:, 0], pos[:, 1])
        percepts = [Percept(ids[i], float(pos[i, 0]), float(pos[i, 1]), bool(marked[i]))
                    for i in np.flatnonzero(seen)]
        chosen = agent.search_step(t, percepts)
        if chosen is None or chosen not in ids:
            continue
        i = ids.index(chosen)
        if not _held_fixation(controller, t, pos[i, 0], pos[i, 1]):
            continue
        ts = round(t, 6)
        kind = "marked" if marked[i] else "distractor"
        events.append(Event(ts, "select", {"target": chosen, "kind": kind}))
        if not marked[i]:
            errors += 1
            continue
        found += 1
        gaze = vision.center(t)
        az, el, fb = respawn_target(rng, gaze, vf, cfg.area_w, cfg.area_h)
        fallbacks += fb
        pos[i] = (az, el)
        ids[i] = next_id
        events.append(Event(ts, "respawn", {"target": next_id, "replaces": chosen, "az": az, "el": el,
                                            "gaze_az": gaze[0], "gaze_el": gaze[1], "fallback": fb}))
        next_id += 1

    outcome = SearchOutcome(found, adjusted_score(found, cfg.area_w, cfg.area_h))
    samples = controller.render(cfg.duration, np.random.default_rng(render_seed if render_seed is not None else cfg.seed + 1))
    return TrialRecord(
        task="search",
        session=session,
        trial=trial,
        level=cfg.level,
        seed=cfg.seed,
        events=tuple(events),
        samples=samples,
        outcome={
            "found": outcome.targets_found,
            "p_adj": outcome.adjusted_score,
            "errors": errors,
            "area_w": cfg.area_w,
            "area_h": cfg.area_h,
            "respawn_fallbacks": fallbacks,
            "duration": cfg.duration,
        },
    )
