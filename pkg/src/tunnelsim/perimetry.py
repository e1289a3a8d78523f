"""Kinetic perimetry: a target sweeps inward along each meridian until seen."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .core import MERIDIAN_STEP, N_MERIDIANS, AngularPos, VisualFieldProfile
from .mask import boundary_at


class SweepComplete(Exception):
    """The target has reached the fixation point."""


@dataclass(frozen=True)
class PerimetryConfig:
    start_eccentricity: float = 45.0
    target_speed: float = 3.0
    target_radius: float = 0.72
    meridian_step: float = MERIDIAN_STEP
    fixation_tolerance: float = 2.0
    frame_rate: float = 75.0
    max_attempts: int = 3
    # "center": detection when the target centre crosses the boundary;
    # "edge": when its leading edge does (reads extent + target_radius)
    detection: str = "center"

    def __post_init__(self):
        if self.start_eccentricity <= 0 or self.target_speed <= 0 or self.frame_rate <= 0:
            raise ValueError("eccentricity, speed and frame rate must be positive")
        if abs(360.0 / self.meridian_step - round(360.0 / self.meridian_step)) > 1e-9:
            raise ValueError("meridian_step must divide 360")
        if self.detection not in ("center", "edge"):
            raise ValueError(f"unknown detection mode {self.detection!r}")

    @property
    def sweep_duration(self) -> float:
        return self.start_eccentricity / self.target_speed

    @property
    def frame_step(self) -> float:
        return self.target_speed / self.frame_rate

    @property
    def meridians(self) -> np.ndarray:
        n = int(round(360.0 / self.meridian_step))
        return np.arange(n) * self.meridian_step


def target_eccentricity(t: float, cfg: PerimetryConfig = PerimetryConfig()) -> float:
    if t < 0:
        raise ValueError("negative sweep time")
    if t > cfg.sweep_duration + 1e-9:
        raise SweepComplete(t)
    return max(cfg.start_eccentricity - cfg.target_speed * t, 0.0)


def target_position(meridian: float, t: float, cfg: PerimetryConfig = PerimetryConfig()) -> AngularPos:
    """Target centre in the fixation-centred frame at sweep time t."""
    ecc = target_eccentricity(t, cfg)
    m = math.radians(meridian)
    return AngularPos(ecc * math.cos(m), ecc * math.sin(m))


class Responder(Protocol):
    def start_sweep(self, eye: str, meridian: float) -> None: ...

    def fixation(self, t: float) -> AngularPos:
        """Gaze offset from the central marker at sweep time t."""

    def respond(self, t: float, eccentricity: Optional[float], meridian: float) -> bool:
        """Called once per frame; ``eccentricity`` is None while the target is hidden."""


@dataclass
class ModelResponder:
    """Synthetic observer with a known field, a reaction delay and fixation lapses.

    ``lapse_rate`` is the rate (1/s) of glances away from the marker; each
    glance lasts ``lapse_duration`` and lands ``lapse_amplitude`` degrees off.
    """

    truth: VisualFieldProfile
    reaction_delay: float = 0.0
    lapse_rate: float = 0.0
    lapse_duration: float = 0.3
    lapse_amplitude: float = 5.0
    seed: int = 0
    target_radius: float = 0.72
    mode: str = "center"
    _rng: np.random.Generator = field(init=False, repr=False)
    _seen_at: Optional[float] = field(init=False, default=None, repr=False)
    _lapses: list = field(init=False, default_factory=list, repr=False)
    _extent: float = field(init=False, default=0.0, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def start_sweep(self, eye: str, meridian: float) -> None:
        extents = self.truth.right if eye == "right" else self.truth.left
        self._extent = float(boundary_at(extents, meridian))
        self._seen_at = None
        self._lapses = []
        if self.lapse_rate > 0:
            t = 0.0
            while True:
                t += self._rng.exponential(1.0 / self.lapse_rate)
                if t > 60.0:
                    break
                self._lapses.append(t)

    def fixation(self, t: float) -> AngularPos:
        for start in self._lapses:
            if start <= t < start + self.lapse_duration:
                return AngularPos(self.lapse_amplitude, 0.0)
        return AngularPos(0.0, 0.0)

    def respond(self, t: float, eccentricity: Optional[float], meridian: float) -> bool:
        if eccentricity is not None and self._seen_at is None:
            lead = self.target_radius if self.mode == "edge" else 0.0
            if eccentricity - lead <= self._extent and self._extent > 0:
                self._seen_at = t
        return self._seen_at is not None and t >= self._seen_at + self.reaction_delay - 1e-12


class NeverResponder:
    def start_sweep(self, eye, meridian):
        pass

    def fixation(self, t):
        return AngularPos(0.0, 0.0)

    def respond(self, t, eccentricity, meridian):
        return False


ABORTED = None


def run_sweep(meridian: float, responder: Responder, cfg: PerimetryConfig = PerimetryConfig(), eye: str = "right"):
    """Run one inward sweep.

    Returns the target eccentricity at the frame the responder signals,
    0.0 if the target reached the centre unseen, or ``None`` if fixation
    broke (the sweep is aborted).
    """
    responder.start_sweep(eye, meridian)
    n_frames = int(math.floor(cfg.sweep_duration * cfg.frame_rate + 1e-9))
    for k in range(n_frames + 1):
        t = k / cfg.frame_rate
        fix = responder.fixation(t)
        if math.hypot(fix.azimuth, fix.elevation) > cfg.fixation_tolerance:
            return ABORTED
        ecc = target_eccentricity(t, cfg)
        if responder.respond(t, ecc, meridian):
            return ecc
    return 0.0


@dataclass(frozen=True)
class PerimetryResult:
    right: tuple[tuple[float, Optional[float]], ...]
    left: tuple[tuple[float, Optional[float]], ...]
    aborted_sweeps: int = 0
    label: str = ""

    def crossings(self, eye: str) -> list[Optional[float]]:
        return [c for _, c in getattr(self, eye)]

    def to_profile(self) -> VisualFieldProfile:
        """Measured profile; a missing meridian takes the mean of its measured neighbours."""
        eyes = {}
        for eye in ("right", "left"):
            vals = self.crossings(eye)
            if all(v is None for v in vals):
                raise ValueError(f"no meridian measured for the {eye} eye")
            filled = []
            n = len(vals)
            for i, v in enumerate(vals):
                if v is not None:
                    filled.append(v)
                    continue
                nb = []
                for step in (1, -1):
                    j = (i + step) % n
                    while vals[j] is None:
                        j = (j + step) % n
                    nb.append(vals[j])
                filled.append(sum(nb) / 2.0)
            eyes[eye] = tuple(filled)
        return VisualFieldProfile(eyes["right"], eyes["left"], self.label)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "right": [[m, c] for m, c in self.right],
            "left": [[m, c] for m, c in self.left],
            "aborted_sweeps": self.aborted_sweeps,
        }


def _measure_eye(eye: str, responder: Responder, cfg: PerimetryConfig):
    meridians = [float(m) for m in cfg.meridians]
    result = {m: None for m in meridians}
    attempts = {m: 0 for m in meridians}
    queue = deque(meridians)
    aborted = 0
    while queue:
        m = queue.popleft()
        attempts[m] += 1
        crossing = run_sweep(m, responder, cfg, eye)
        if crossing is ABORTED:
            aborted += 1
            if attempts[m] < cfg.max_attempts:
                queue.append(m)
            continue
        result[m] = crossing
    return tuple((m, result[m]) for m in meridians), aborted


def run_perimetry(truth: VisualFieldProfile, responder: Optional[Responder] = None, cfg: PerimetryConfig = PerimetryConfig()) -> PerimetryResult:
    """Measure both eyes, one sweep per meridian, re-queueing aborted sweeps."""
    if responder is None:
        responder = ModelResponder(truth, target_radius=cfg.target_radius, mode=cfg.detection)
    if len(cfg.meridians) != N_MERIDIANS:
        raise ValueError(f"profiles need {N_MERIDIANS} meridians; meridian_step={cfg.meridian_step}")
    right, ab_r = _measure_eye("right", responder, cfg)
    left, ab_l = _measure_eye("left", responder, cfg)
    return PerimetryResult(right, left, ab_r + ab_l, truth.label)


def measure_profile(truth: VisualFieldProfile, reaction_delay: float = 0.0, seed: int = 0, lapse_rate: float = 0.0,
                    cfg: PerimetryConfig = PerimetryConfig()) -> VisualFieldProfile:
    responder = ModelResponder(truth, reaction_delay=reaction_delay, lapse_rate=lapse_rate, seed=seed,
                               target_radius=cfg.target_radius, mode=cfg.detection)
    return run_perimetry(truth, responder, cfg).to_profile()
