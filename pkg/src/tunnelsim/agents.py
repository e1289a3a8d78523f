"""Synthetic observers that close the simulation loop.

An agent owns a :class:`GazeController` (a piecewise oculomotor plant that
is rendered to a 90 Hz trace at the end of a trial) and receives the world
only through a :class:`Vision` gate, which filters by the visual-field mask.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import SAMPLE_RATE, GazeTrace, VisualFieldProfile, combine_scalar
from .mask import NO_LATENCY, FieldTest, LatencyModel

POLICIES = ("auto", "fixation", "boustrophedon", "pursuit", "navwalker", "omniscient", "replay")


@dataclass(frozen=True)
class AgentConfig:
    policy: str = "auto"
    reaction_delay: float = 0.2
    fixation_dwell: float = 0.3
    eye_range: float = 25.0
    saccade_base: float = 0.020
    saccade_slope: float = 0.002
    memory_decay: float = 1.0
    selection_dwell: float = 0.4
    row_spacing_factor: float = 1.6
    tracker_noise: float = 0.03
    blink_rate: float = 0.03
    blink_duration: float = 0.15
    dropout_prob: float = 0.01
    missing_prob: float = 0.001
    invalid_mark_prob: float = 0.0
    seed: int = 0
    # per-session additive ramp, e.g. {"memory_decay": -0.02}
    session_ramp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown agent policy {self.policy!r}")
        if self.eye_range <= 0:
            raise ValueError("eye_range must be positive")
        if self.reaction_delay < 0 or self.fixation_dwell < 0 or self.memory_decay < 0:
            raise ValueError("delays, dwell and memory decay must be non-negative")
        unknown = set(self.session_ramp) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"session_ramp names unknown fields {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown agent config keys {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def for_session(self, session: int) -> "AgentConfig":
        """Apply the per-session ramp (session 1 is the unmodified config)."""
        if not self.session_ramp:
            return self
        changes = {}
        for name, step in self.session_ramp.items():
            changes[name] = max(getattr(self, name) + step * (session - 1), 0.0)
        return replace(self, **changes)


def split_gaze(head: tuple[float, float], eye: tuple[float, float], target: tuple[float, float], eye_range: float):
    """Eye-first allocation of a gaze target; the head carries what the eye cannot.

    Returns the new ``(head, eye)`` pair. The eye-in-head offset is clamped
    to ``eye_range`` (by magnitude) and the head takes the remainder.
    """
    dx = target[0] - head[0]
    dy = target[1] - head[1]
    n = math.hypot(dx, dy)
    if n <= eye_range:
        return head, (dx, dy)
    k = eye_range / n
    ex, ey = dx * k, dy * k
    return (target[0] - ex, target[1] - ey), (ex, ey)


def _eye_profile(s):
    return (1.0 - np.cos(np.pi * s)) / 2.0


def _head_profile(s):
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


class GazeController:
    """Piecewise head/eye plant.

    Each segment starts at ``t0``, moves head and eye from their current
    positions to targets over ``dur`` seconds (raised-cosine for the eye,
    minimum-jerk for the head), then lets the head drift at a pursuit
    velocity until the next segment begins.
    """

    def __init__(self, cfg: AgentConfig, head=(0.0, 0.0), eye=(0.0, 0.0), rate: float = SAMPLE_RATE):
        self.cfg = cfg
        self.rate = rate
        self._t0 = [0.0]
        self._seg = [(0.0, head[0], head[1], head[0], head[1], eye[0], eye[1], eye[0], eye[1], 0.0, 0.0)]
        self.busy_until = 0.0
        self.saccade_log: list[tuple[float, float, float, float]] = []

    def _index(self, t: float) -> int:
        return max(bisect.bisect_right(self._t0, t) - 1, 0)

    def state_at(self, t: float) -> tuple[float, float, float, float]:
        i = self._index(t)
        t0 = self._t0[i]
        dur, h0x, h0y, h1x, h1y, e0x, e0y, e1x, e1y, vx, vy = self._seg[i]
        dt = t - t0
        if dur > 0 and dt < dur:
            s = max(dt / dur, 0.0)
            fe = (1.0 - math.cos(math.pi * s)) / 2.0
            fh = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
            return (h0x + (h1x - h0x) * fh, h0y + (h1y - h0y) * fh, e0x + (e1x - e0x) * fe, e0y + (e1y - e0y) * fe)
        after = max(dt - dur, 0.0)
        return (h1x + vx * after, h1y + vy * after, e1x, e1y)

    def gaze_at(self, t: float) -> tuple[float, float]:
        return combine_scalar(*self.state_at(t))

    def delayed_gaze(self, t: float, lat: LatencyModel) -> tuple[float, float]:
        if lat.eye_latency == 0 and lat.head_latency == 0:
            return self.gaze_at(t)
        hx, hy, _, _ = self.state_at(max(t - lat.head_latency, 0.0))
        _, _, ex, ey = self.state_at(max(t - lat.eye_latency, 0.0))
        return combine_scalar(hx, hy, ex, ey)

    def in_saccade(self, t: float) -> bool:
        i = self._index(t)
        return t < self._t0[i] + self._seg[i][0]

    def _append(self, t: float, seg) -> None:
        if t < self._t0[-1]:
            raise ValueError(f"gaze command at t={t} precedes the last segment at t={self._t0[-1]}")
        if t == self._t0[-1] and len(self._t0) > 1:
            self._t0.pop()
            self._seg.pop()
        self._t0.append(t)
        self._seg.append(seg)

    def saccade_to(self, t: float, az: float, el: float, min_amplitude: float = 0.5) -> float:
        """Command a gaze shift starting at t; returns the time it lands."""
        hx, hy, ex, ey = self.state_at(t)
        gaz, gel = combine_scalar(hx, hy, ex, ey)
        amp = math.hypot(az - gaz, el - gel)
        if amp < min_amplitude:
            self.hold(t)
            return t
        (nhx, nhy), (nex, ney) = split_gaze((hx, hy), (ex, ey), (az, el), self.cfg.eye_range)
        dur = self.cfg.saccade_base + self.cfg.saccade_slope * amp
        self._append(t, (dur, hx, hy, nhx, nhy, ex, ey, nex, ney, 0.0, 0.0))
        self.busy_until = t + dur
        self.saccade_log.append((t, t + dur, math.hypot(nhx - hx, nhy - hy), math.hypot(nex - ex, ney - ey)))
        return t + dur

    def pursue(self, t: float, vaz: float, vel: float) -> None:
        """Smooth head drift at the given angular velocity (deg/s) from t on."""
        hx, hy, ex, ey = self.state_at(t)
        self._append(t, (0.0, hx, hy, hx, hy, ex, ey, ex, ey, vaz, vel))

    def hold(self, t: float) -> None:
        self.pursue(t, 0.0, 0.0)

    def free_at(self, t: float) -> float:
        """Earliest time not before t at which a new command can be issued."""
        return max(t, self._t0[-1], self.busy_until)

    def render(self, duration: float, rng: Optional[np.random.Generator] = None) -> GazeTrace:
        """Sample the plant at the tracker rate over [0, duration] and add tracker artefacts."""
        n = int(math.floor(duration * self.rate + 1e-9)) + 1
        times = np.arange(n) / self.rate
        t0 = np.asarray(self._t0)
        seg = np.asarray(self._seg)
        idx = np.searchsorted(t0, times, side="right") - 1
        idx = np.maximum(idx, 0)
        s_ = seg[idx]
        dur = s_[:, 0]
        dt = times - t0[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(dur > 0, np.clip(dt / np.where(dur > 0, dur, 1.0), 0.0, 1.0), 1.0)
        after = np.maximum(dt - dur, 0.0)
        fe = _eye_profile(s)
        fh = _head_profile(s)
        hx = s_[:, 1] + (s_[:, 3] - s_[:, 1]) * fh + s_[:, 9] * after
        hy = s_[:, 2] + (s_[:, 4] - s_[:, 2]) * fh + s_[:, 10] * after
        ex = s_[:, 5] + (s_[:, 7] - s_[:, 5]) * fe
        ey = s_[:, 6] + (s_[:, 8] - s_[:, 6]) * fe
        valid = np.ones(n, dtype=bool)
        cfg = self.cfg
        if rng is not None:
            if cfg.tracker_noise > 0:
                ex = ex + rng.normal(0.0, cfg.tracker_noise, n)
                ey = ey + rng.normal(0.0, cfg.tracker_noise, n)
            if cfg.blink_rate > 0:
                k = rng.poisson(cfg.blink_rate * duration)
                for start in np.sort(rng.uniform(0.0, duration, k)):
                    valid[(times >= start) & (times < start + cfg.blink_duration)] = False
            if cfg.dropout_prob > 0 and rng.random() < cfg.dropout_prob:
                frac = rng.uniform(0.15, 0.6)
                start = rng.uniform(0.0, duration * (1.0 - frac))
                valid[(times >= start) & (times < start + frac * duration)] = False
            if cfg.missing_prob > 0 and rng.random() < cfg.missing_prob:
                return GazeTrace.empty()
        return GazeTrace(
            np.round(times, 6), np.round(hx, 4), np.round(hy, 4), np.round(ex, 4), np.round(ey, 4), valid
        )


class ReplayController(GazeController):
    """Plays back a recorded trace; rendering returns it unchanged."""

    def __init__(self, cfg: AgentConfig, trace: GazeTrace):
        super().__init__(cfg)
        if len(trace) == 0:
            raise ValueError("cannot replay an empty trace")
        self.trace = trace

    def state_at(self, t):
        k = max(int(np.searchsorted(self.trace.t, t, side="right")) - 1, 0)
        tr = self.trace
        return float(tr.hx[k]), float(tr.hy[k]), float(tr.ex[k]), float(tr.ey[k])

    def in_saccade(self, t):
        return False

    def saccade_to(self, t, az, el, min_amplitude=0.5):
        raise RuntimeError("replayed gaze cannot be commanded")

    def pursue(self, t, vaz, vel):
        pass

    def render(self, duration, rng=None):
        return self.trace


class Vision:
    """The only path from world state to an agent.

    ``visible`` answers, for a batch of world directions, whether each lies
    inside the field at the (possibly delayed) mask centre. Nothing is
    visible mid-saccade. Omniscient vision sees everything.
    """

    def __init__(self, vf: VisualFieldProfile, controller: GazeController, latency: LatencyModel = NO_LATENCY,
                 omniscient: bool = False):
        self.vf = vf
        self.controller = controller
        self.latency = latency
        self.omniscient = omniscient
        self.queries = 0
        self._inside = FieldTest(vf)

    def center(self, t: float) -> tuple[float, float]:
        return self.controller.delayed_gaze(t, self.latency)

    def visible(self, t: float, az, el) -> np.ndarray:
        self.queries += 1
        if not isinstance(az, list):
            az = np.atleast_1d(np.asarray(az, dtype=float))
            el = np.atleast_1d(np.asarray(el, dtype=float))
        if self.omniscient:
            return np.ones(len(az), dtype=bool)
        if self.controller.in_saccade(t):
            return np.zeros(len(az), dtype=bool)
        caz, cel = self.center(t)
        return self._inside(caz, cel, az, el)


@dataclass(frozen=True)
class Percept:
    """Something the agent saw: an id, a direction and task-specific attributes."""

    id: int
    az: float
    el: float
    marked: Optional[bool] = None
    info: dict = field(default_factory=dict)


def boustrophedon_path(area_w: float, area_h: float, row_spacing: float, step: Optional[float] = None):
    """Serpentine waypoints covering a ``w x h`` area centred on (0, 0).

    Rows run top to bottom ``row_spacing`` apart, starting on the top edge;
    the last row is clamped onto the bottom edge. When the spacing is at
    least the area height a single row through the middle is returned.
    Without ``step`` each row is just its two end points.
    """
    if row_spacing <= 0:
        raise ValueError("row_spacing must be positive")
    if row_spacing >= area_h:
        ys = [0.0]
    else:
        ys = []
        y = area_h / 2.0
        while y > -area_h / 2.0 + 1e-9:
            ys.append(y)
            y -= row_spacing
        if ys[-1] > -area_h / 2.0 + 1e-9:
            ys.append(-area_h / 2.0)
    if step is None:
        xs = np.array([-area_w / 2.0, area_w / 2.0])
    else:
        n = max(int(math.ceil(area_w / step)), 1)
        xs = np.linspace(-area_w / 2.0, area_w / 2.0, n + 1)
    path = []
    for k, y in enumerate(ys):
        row = xs if k % 2 == 0 else xs[::-1]
        path.extend((float(x), float(y)) for x in row)
    return path


class Agent:
    """Base policy: holds gaze where it is and selects nothing."""

    omniscient = False

    def __init__(self, cfg: AgentConfig, vf: Optional[VisualFieldProfile] = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.own_radius = vf.mean_radius() if vf is not None else 10.0
        self.controller: GazeController = GazeController(cfg)
        self.next_time = 0.0

    def new_controller(self) -> GazeController:
        self.controller = GazeController(self.cfg)
        self.next_time = 0.0
        return self.controller

    # tracking
    def begin_tracking(self, ctx: dict) -> None:
        pass

    def track(self, t: float, percepts: Sequence[Percept]) -> None:
        pass

    def select(self, t: float, candidates: Sequence[Percept], n_select: int) -> Optional[list[int]]:
        return []

    # search
    def begin_search(self, ctx: dict) -> None:
        pass

    def search_step(self, t: float, percepts: Sequence[Percept]) -> Optional[int]:
        return None

    # navigation
    def begin_navigation(self, ctx: dict) -> None:
        pass

    def navigate(self, t: float, avatar, percepts: Sequence[Percept], look) -> tuple[float, float]:
        return 0.0, 0.0


class FixationAgent(Agent):
    """Never moves its gaze. Selects a marked search target only if it sits on the fixation point."""

    def search_step(self, t, percepts):
        gaz, gel = self.controller.gaze_at(t)
        for p in percepts:
            if p.marked and math.hypot(p.az - gaz, p.el - gel) <= 1.5:
                return p.id
        return None

    def select(self, t, candidates, n_select):
        return [p.id for p in candidates[:n_select]]

    def navigate(self, t, avatar, percepts, look):
        return 0.0, self.speed

    def begin_navigation(self, ctx):
        self.speed = ctx["speed"]


class PursuitAgent(Agent):
    """Multiple-object tracker with decaying positional memory.

    While a marked target is outside the field, the agent's positional
    uncertainty for it grows as ``memory_decay * time_unseen`` degrees. At
    the stop, the selection is a posterior sample of the track-to-target
    assignment: Gumbel-perturbed Gaussian log-likelihoods solved as an
    assignment problem. Zero decay is exact recall; infinite decay is a
    uniformly random choice.
    """

    def begin_tracking(self, ctx):
        self.n_marked = ctx["n_marked"]
        self.area = (ctx["area_w"], ctx["area_h"])
        self.last_seen: dict[int, float] = {}
        self.last_pos: dict[int, tuple[float, float, float, float]] = {}
        self.focus: Optional[int] = None

    def _remember(self, t, percepts):
        for p in percepts:
            if p.marked:
                self.last_seen[p.id] = t
                self.last_pos[p.id] = (p.az, p.el, p.info.get("vaz", 0.0), p.info.get("vel", 0.0))

    def track(self, t, percepts):
        self._remember(t, percepts)
        if t < self.next_time or not self.last_seen:
            return
        visible = {p.id: p for p in percepts if p.marked}
        # refresh the track seen longest ago
        order = sorted(self.last_seen, key=lambda i: (self.last_seen[i], i))
        choice = order[0]
        if choice == self.focus and len(order) > 1:
            choice = order[1]
        if choice in visible:
            p = visible[choice]
            az, el, vaz, vel = p.az, p.el, p.info.get("vaz", 0.0), p.info.get("vel", 0.0)
        else:
            az, el, vaz, vel = self.last_pos[choice]
            gap = t - self.last_seen[choice]
            w, h = self.area
            az = min(max(az + vaz * gap, -w / 2), w / 2)
            el = min(max(el + vel * gap, -h / 2), h / 2)
        land = self.controller.saccade_to(t, az, el)
        self.controller.pursue(land, vaz, vel)
        self.focus = choice
        self.next_time = land + self.cfg.fixation_dwell

    def uncertainty(self, t: float, track: int) -> float:
        if track not in self.last_seen:
            return math.inf
        return self.cfg.memory_decay * (t - self.last_seen[track])

    def select(self, t, candidates, n_select):
        tracks = sorted(self.last_seen)
        # tracks never seen are pure guesses
        unseen = n_select - len(tracks)
        m = len(tracks) + max(unseen, 0)
        n = len(candidates)
        if n == 0 or m == 0:
            return []
        pos = np.array([(c.az, c.el) for c in candidates])
        score = self.rng.gumbel(size=(m, n))
        for r, tr in enumerate(tracks):
            sigma = self.uncertainty(t, tr)
            if math.isinf(sigma):
                continue
            true = candidates_lookup(candidates, tr)
            if true is None:
                continue
            d2 = ((pos - true) ** 2).sum(axis=1)
            if sigma == 0:
                score[r] += np.where(d2 == 0, 0.0, -np.inf)
            else:
                score[r] += -d2 / (2.0 * sigma * sigma)
        score = np.where(np.isfinite(score), score, -1e300)
        rows, cols = linear_sum_assignment(score, maximize=True)
        return [candidates[c].id for c in cols[: min(n_select, n)]]


def candidates_lookup(candidates, track_id):
    for c in candidates:
        if c.id == track_id:
            return np.array([c.az, c.el])
    return None


class RandomSelectionAgent(PursuitAgent):
    """Memoryless tracker: never refreshes memory, so every selection is a guess."""

    def _remember(self, t, percepts):
        pass

    def track(self, t, percepts):
        pass


class BoustrophedonAgent(Agent):
    """Serpentine scanner for the search task.

    Rows are ``row_spacing_factor`` field radii apart and fixations one
    radius apart along each row. A visible marked target interrupts the scan:
    after the reaction delay the agent saccades to it and holds fixation for
    ``selection_dwell`` before selecting.
    """

    def begin_search(self, ctx):
        r = max(self.own_radius, 1.0)
        self.path = boustrophedon_path(ctx["area_w"], ctx["area_h"], self.cfg.row_spacing_factor * r, step=r)
        self.k = 0
        self.direction = 1
        self.pending: Optional[int] = None

    def _next_waypoint(self):
        wp = self.path[self.k]
        if len(self.path) > 1:
            nxt = self.k + self.direction
            if not 0 <= nxt < len(self.path):
                self.direction = -self.direction
                nxt = self.k + self.direction
            self.k = nxt
        return wp

    def search_step(self, t, percepts):
        if t < self.next_time:
            return None
        if self.pending is not None:
            chosen, self.pending = self.pending, None
            self.next_time = t
            return chosen
        marked = [p for p in percepts if p.marked]
        if marked:
            gaz, gel = self.controller.gaze_at(t)
            p = min(marked, key=lambda q: (math.hypot(q.az - gaz, q.el - gel), q.id))
            land = self.controller.saccade_to(t + self.cfg.reaction_delay, p.az, p.el)
            self.pending = p.id
            self.next_time = land + self.cfg.selection_dwell
            return None
        az, el = self._next_waypoint()
        land = self.controller.saccade_to(t, az, el)
        self.next_time = land + self.cfg.fixation_dwell
        return None


class NavWalker(Agent):
    """Walks the corridor, swerving around obstacles it has seen.

    Gaze alternates between floor level and head level at a few look-ahead
    distances and lateral offsets (a serpentine sweep of the path ahead).
    Steering picks a free lane past the next known obstacle, weighing the
    cost of then reaching a free lane past the one after it. Moving
    obstacles are predicted over the time window the avatar would spend
    beside them; if no lane is free the walker slows down to time its pass.
    """

    LOOK_DIST = (4.0, 7.0, 10.0)
    LOOK_U = (-2.5, 0.0, 2.5)
    CLEARANCE = 0.45
    HORIZON = 10.0
    SPEED_FACTORS = (1.0, 0.7, 0.45, 0.25)

    def begin_navigation(self, ctx):
        self.speed = ctx["speed"]
        self.half_width = ctx["half_width"]
        self.known: dict[int, dict] = {}
        self.pattern = []
        for i, d in enumerate(self.LOOK_DIST):
            us = self.LOOK_U if i % 2 == 0 else self.LOOK_U[::-1]
            for j, u in enumerate(us):
                self.pattern.append((d, u, "floor" if (i + j) % 2 == 0 else "head"))
        self.k = 0
        limit = self.half_width - 0.5
        self.lanes = np.linspace(-limit, limit, 29)

    def _free(self, ob, t, s, speed):
        """Lanes clear of ``ob`` while the avatar passes it at ``speed``."""
        lo, hi = ob["u0"], ob["u1"]
        if ob.get("moving"):
            v = max(speed, 0.05)
            arrive = t + max(ob["s0"] - s - 0.4, 0.0) / v
            leave = t + max(ob["s1"] - s + 0.4, 0.0) / v
            tt = np.linspace(arrive, leave, 6)
            cs = ob["amp"] * np.sin(2 * math.pi * tt / ob["period"] + ob["phase"])
            lo, hi = float(cs.min()) - ob["half"], float(cs.max()) + ob["half"]
        return ~((self.lanes >= lo - self.CLEARANCE) & (self.lanes <= hi + self.CLEARANCE))

    def _plan(self, t, s, u):
        ahead = sorted((ob for ob in self.known.values()
                        if ob["s1"] + 0.4 > s and ob["s0"] - s < self.HORIZON), key=lambda o: o["s0"])
        if not ahead:
            return 0.0, self.speed, None
        first = ahead[0]
        second = ahead[1] if len(ahead) > 1 else None
        alongside = first["s0"] - s < 0.4
        for factor in self.SPEED_FACTORS:
            speed = self.speed * factor
            free = self._free(first, t, s, speed)
            if alongside and free.any():
                # already beside it: stay within the gap that contains us
                j = int(np.argmin(np.abs(self.lanes - u)))
                if free[j]:
                    lo = hi = j
                    while lo > 0 and free[lo - 1]:
                        lo -= 1
                    while hi < len(free) - 1 and free[hi + 1]:
                        hi += 1
                    keep = np.zeros_like(free)
                    keep[lo:hi + 1] = True
                    free = keep
            if not free.any():
                continue
            cand = self.lanes[free]
            cost = np.abs(cand - u) + 1e-3 * np.abs(cand)
            if second is not None:
                free2 = self._free(second, t, s, speed)
                if free2.any():
                    nxt = self.lanes[free2]
                    cost = cost + np.abs(cand[:, None] - nxt[None, :]).min(axis=1)
            return float(cand[int(np.argmin(cost))]), speed, first
        # no lane at any speed: wait short of the obstacle, otherwise push on
        if first["s0"] - s > 0.8:
            return u, 0.0, first
        return u, self.speed, first

    def navigate(self, t, avatar, percepts, look):
        for p in percepts:
            self.known[p.id] = p.info
        if t >= self.next_time:
            d, u_look, level = self.pattern[self.k % len(self.pattern)]
            self.k += 1
            az, el = look(d, u_look, level)
            land = self.controller.saccade_to(t, az, el)
            self.next_time = land + self.cfg.fixation_dwell
        s, u = avatar.s, avatar.u
        target, speed, first = self._plan(t, s, u)
        reach = 2.0 if first is None else min(max(first["s0"] - s - 0.3, 0.8), 3.0)
        heading = math.degrees(math.atan2(target - u, reach))
        return max(min(heading, 60.0), -60.0), speed


class OmniscientAgent(Agent):
    """Reads unmasked world state. Tracks perfectly, searches directly, avoids every obstacle."""

    omniscient = True

    def __init__(self, cfg, vf=None):
        super().__init__(cfg, vf)
        self._tracker = PursuitAgent(replace(cfg, memory_decay=0.0), vf)
        self._walker = NavWalker(cfg, vf)

    def new_controller(self):
        c = super().new_controller()
        self._tracker.controller = c
        self._walker.controller = c
        self._tracker.next_time = 0.0
        self._walker.next_time = 0.0
        return c

    def begin_tracking(self, ctx):
        self._tracker.begin_tracking(ctx)

    def track(self, t, percepts):
        self._tracker.track(t, percepts)

    def select(self, t, candidates, n_select):
        return self._tracker.select(t, candidates, n_select)

    def search_step(self, t, percepts):
        if t < self.next_time:
            return None
        if getattr(self, "_pending", None) is not None:
            chosen, self._pending = self._pending, None
            return chosen
        marked = [p for p in percepts if p.marked]
        if not marked:
            self.next_time = t + 0.1
            return None
        gaz, gel = self.controller.gaze_at(t)
        p = min(marked, key=lambda q: (math.hypot(q.az - gaz, q.el - gel), q.id))
        land = self.controller.saccade_to(t, p.az, p.el)
        self._pending = p.id
        self.next_time = land + self.cfg.selection_dwell
        return None

    def begin_navigation(self, ctx):
        self._walker.begin_navigation(ctx)

    def navigate(self, t, avatar, percepts, look):
        return self._walker.navigate(t, avatar, percepts, look)


class ReplayAgent(Agent):
    """Reproduces a recorded gaze trace exactly; takes no task actions."""

    def __init__(self, cfg: AgentConfig, trace: GazeTrace, vf=None):
        super().__init__(cfg, vf)
        self.trace = trace
        self.controller = ReplayController(cfg, trace)

    def new_controller(self):
        self.controller = ReplayController(self.cfg, self.trace)
        return self.controller

    def select(self, t, candidates, n_select):
        return None

    def begin_navigation(self, ctx):
        self.speed = ctx["speed"]

    def navigate(self, t, avatar, percepts, look):
        return 0.0, self.speed


_TASK_DEFAULT = {"tracking": PursuitAgent, "search": BoustrophedonAgent, "navigation": NavWalker}
_BY_POLICY = {
    "fixation": FixationAgent,
    "boustrophedon": BoustrophedonAgent,
    "pursuit": PursuitAgent,
    "navwalker": NavWalker,
    "omniscient": OmniscientAgent,
}


def make_agent(cfg: AgentConfig, task: str, vf: Optional[VisualFieldProfile] = None, trace: Optional[GazeTrace] = None) -> Agent:
    if cfg.policy == "replay":
        if trace is None:
            raise ValueError("replay policy needs a recorded trace")
        return ReplayAgent(cfg, trace, vf)
    if cfg.policy == "auto":
        return _TASK_DEFAULT[task](cfg, vf)
    return _BY_POLICY[cfg.policy](cfg, vf)
