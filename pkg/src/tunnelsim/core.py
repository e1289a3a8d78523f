"""Shared domain types, angular geometry and the trial-log schema.

Angles are degrees throughout. Directions use a right-handed frame with
x to the right, y up and z straight ahead; an orientation ``(azimuth,
elevation)`` is a yaw about the vertical axis followed by a pitch about
the rotated horizontal axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
import orjson

SCHEMA_VERSION = 1
SAMPLE_RATE = 90.0
N_MERIDIANS = 24
MERIDIAN_STEP = 15.0
MAX_EXTENT = 180.0

TASKS = ("tracking", "search", "navigation")


class InvalidFrameError(ValueError):
    """Raised when a gaze sample flagged invalid is used as a direction."""


class TrialLogError(ValueError):
    """Malformed trial-log line."""

    def __init__(self, message: str, line: int | None = None, path: str = ""):
        self.line = line
        self.path = path
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(f"at {path}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class HealthyFieldExtent:
    width: float = 180.0
    height: float = 135.0

    @property
    def area(self) -> float:
        return self.width * self.height


HEALTHY_FIELD = HealthyFieldExtent()


@dataclass(frozen=True)
class AngularPos:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not -180.0 <= self.azimuth <= 180.0:
            raise ValueError(f"azimuth out of range: {self.azimuth}")
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation out of range: {self.elevation}")


def wrap180(angle):
    """Wrap degrees into [-180, 180)."""
    return (np.asarray(angle) + 180.0) % 360.0 - 180.0


def direction(azimuth, elevation):
    """Unit vectors for (azimuth, elevation) arrays, stacked on the last axis."""
    az = np.radians(azimuth)
    el = np.radians(elevation)
    ce = np.cos(el)
    return np.stack([ce * np.sin(az), np.sin(el), ce * np.cos(az)], axis=-1)


def to_angles(vec):
    """Inverse of :func:`direction`; returns ``(azimuth, elevation)`` arrays."""
    vec = np.asarray(vec, dtype=float)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    az = np.degrees(np.arctan2(x, z))
    el = np.degrees(np.arctan2(y, np.hypot(x, z)))
    return az, el


def orientation_matrix(azimuth: float, elevation: float) -> np.ndarray:
    """Rotation taking the straight-ahead axis onto ``direction(az, el)``."""
    a = math.radians(azimuth)
    e = math.radians(elevation)
    ca, sa, ce, se = math.cos(a), math.sin(a), math.cos(e), math.sin(e)
    yaw = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, ce, se], [0.0, -se, ce]])
    return yaw @ pitch


def angular_distance(a: AngularPos, b: AngularPos) -> float:
    """Great-circle angle between two directions, in [0, 180]."""
    return float(angular_distance_arrays(a.azimuth, a.elevation, b.azimuth, b.elevation))


def angular_distance_arrays(az1, el1, az2, el2):
    # haversine form stays accurate for tiny separations
    p1, p2 = np.radians(el1), np.radians(el2)
    dlat = p2 - p1
    dlon = np.radians(np.asarray(az2) - np.asarray(az1))
    h = np.sin(dlat / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2) ** 2
    return np.degrees(2 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))


def great_circle(az1: float, el1: float, az2: float, el2: float) -> float:
    """Scalar great-circle distance in degrees (haversine)."""
    p1, p2 = math.radians(el1), math.radians(el2)
    dp = p2 - p1
    dl = math.radians(az2 - az1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return math.degrees(2.0 * math.asin(min(math.sqrt(h), 1.0)))


def combine_arrays(hx, hy, ex, ey):
    """Vectorised head-then-eye composition; returns world ``(az, el)``."""
    hx = np.radians(np.asarray(hx, dtype=float))
    hy = np.radians(np.asarray(hy, dtype=float))
    ex = np.radians(np.asarray(ex, dtype=float))
    ey = np.radians(np.asarray(ey, dtype=float))
    # eye direction in the head frame
    cey = np.cos(ey)
    x, y, z = cey * np.sin(ex), np.sin(ey), cey * np.cos(ex)
    # pitch by head elevation
    chy, shy = np.cos(hy), np.sin(hy)
    y2 = chy * y + shy * z
    z2 = -shy * y + chy * z
    # yaw by head azimuth
    chx, shx = np.cos(hx), np.sin(hx)
    x3 = chx * x + shx * z2
    z3 = -shx * x + chx * z2
    az = np.degrees(np.arctan2(x3, z3))
    el = np.degrees(np.arctan2(y2, np.hypot(x3, z3)))
    return az, el


def local_polar(center_az: float, center_el: float, az, el):
    """Eccentricity and meridian angle of directions around a gaze centre.

    The meridian angle is measured counter-clockwise from the rightward
    horizontal in the gaze-centred frame, in degrees [0, 360).
    """
    rot = orientation_matrix(center_az, center_el)
    vec = direction(az, el) @ rot  # rows times R == R^T applied per row
    ecc = np.degrees(np.arccos(np.clip(vec[..., 2], -1.0, 1.0)))
    bearing = np.degrees(np.arctan2(vec[..., 1], vec[..., 0])) % 360.0
    return ecc, bearing


def from_local_polar(center_az: float, center_el: float, ecc, bearing):
    """Inverse of :func:`local_polar`."""
    ecc_r = np.radians(ecc)
    b = np.radians(bearing)
    s = np.sin(ecc_r)
    local = np.stack([s * np.cos(b), s * np.sin(b), np.cos(ecc_r)], axis=-1)
    world = local @ orientation_matrix(center_az, center_el).T
    return to_angles(world)


@dataclass(frozen=True)
class GazeSample:
    t: float
    head: AngularPos
    eye: AngularPos
    valid: bool = True


def combine_gaze(s: GazeSample) -> AngularPos:
    """World gaze direction: head orientation composed with eye-in-head."""
    if not s.valid:
        raise InvalidFrameError(f"invalid frame at t={s.t}")
    az, el = combine_arrays(s.head.azimuth, s.head.elevation, s.eye.azimuth, s.eye.elevation)
    return AngularPos(float(az), float(el))


class GazeTrace:
    """Columnar gaze trace: times, head and eye angles, validity."""

    __slots__ = ("t", "hx", "hy", "ex", "ey", "valid")

    def __init__(self, t, hx, hy, ex, ey, valid=None):
        self.t = np.asarray(t, dtype=float)
        self.hx = np.asarray(hx, dtype=float)
        self.hy = np.asarray(hy, dtype=float)
        self.ex = np.asarray(ex, dtype=float)
        self.ey = np.asarray(ey, dtype=float)
        if valid is None:
            valid = np.ones(self.t.shape, dtype=bool)
        self.valid = np.asarray(valid, dtype=bool)
        n = self.t.shape[0]
        for name in ("hx", "hy", "ex", "ey", "valid"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name} has shape {getattr(self, name).shape}, expected ({n},)")

    @classmethod
    def empty(cls) -> "GazeTrace":
        z = np.zeros(0)
        return cls(z, z, z, z, z, np.zeros(0, dtype=bool))

    @classmethod
    def from_samples(cls, samples: Iterable[GazeSample]) -> "GazeTrace":
        rows = [(s.t, s.head.azimuth, s.head.elevation, s.eye.azimuth, s.eye.elevation, s.valid) for s in samples]
        if not rows:
            return cls.empty()
        t, hx, hy, ex, ey, v = zip(*rows)
        return cls(t, hx, hy, ex, ey, v)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[GazeSample]:
        for t, hx, hy, ex, ey, v in zip(
            self.t.tolist(), self.hx.tolist(), self.hy.tolist(), self.ex.tolist(), self.ey.tolist(), self.valid.tolist()
        ):
            yield GazeSample(t, AngularPos(hx, hy), AngularPos(ex, ey), v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GazeTrace):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__
        )

    def __repr__(self) -> str:
        span = f"{self.t[0]:.3f}..{self.t[-1]:.3f}s" if len(self) else "empty"
        return f"GazeTrace(n={len(self)}, {span})"

    def gaze(self):
        """Combined world gaze ``(az, el)`` for every sample (valid or not)."""
        return combine_arrays(self.hx, self.hy, self.ex, self.ey)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) > 1 else 0.0

    def invalid_ratio(self) -> float:
        if len(self) == 0:
            return 1.0
        return float(np.count_nonzero(~self.valid)) / len(self)

    def slice_time(self, t0: float, t1: float) -> "GazeTrace":
        m = (self.t >= t0) & (self.t <= t1)
        return GazeTrace(self.t[m], self.hx[m], self.hy[m], self.ex[m], self.ey[m], self.valid[m])


@dataclass(frozen=True)
class VisualFieldProfile:
    """Radial field extents at 24 meridians (15 degree spacing) for each eye."""

    right: tuple[float, ...]
    left: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        for eye in ("right", "left"):
            values = tuple(float(v) for v in getattr(self, eye))
            if len(values) != N_MERIDIANS:
                raise ValueError(f"{eye} eye needs {N_MERIDIANS} meridians, got {len(values)}")
            for k, v in enumerate(values):
                if not (0.0 <= v <= MAX_EXTENT) or math.isnan(v):
                    raise ValueError(f"{eye} extent at meridian {k * MERIDIAN_STEP:g} out of range: {v}")
            object.__setattr__(self, eye, values)

    @classmethod
    def circular(cls, radius: float, label: str = "", left_radius: float | None = None) -> "VisualFieldProfile":
        left = radius if left_radius is None else left_radius
        return cls((radius,) * N_MERIDIANS, (left,) * N_MERIDIANS, label)

    @classmethod
    def from_diameters(cls, right_diameter: float, left_diameter: float, label: str = "") -> "VisualFieldProfile":
        return cls.circular(right_diameter / 2.0, label, left_diameter / 2.0)

    @classmethod
    def full(cls, label: str = "full") -> "VisualFieldProfile":
        return cls.circular(MAX_EXTENT, label)

    @property
    def meridians(self) -> np.ndarray:
        return np.arange(N_MERIDIANS) * MERIDIAN_STEP

    def extents(self) -> np.ndarray:
        """Cyclopean extents: the mean of both eyes per meridian."""
        return (np.asarray(self.right) + np.asarray(self.left)) / 2.0

    def mean_radius(self) -> float:
        return float(self.extents().mean())

    def rotated(self, steps: int) -> "VisualFieldProfile":
        """Profile rotated counter-clockwise by ``steps`` meridians."""
        return VisualFieldProfile(
            tuple(np.roll(self.right, steps)), tuple(np.roll(self.left, steps)), self.label
        )

    def to_json(self) -> dict:
        m = [float(a) for a in self.meridians]
        return {
            "label": self.label,
            "right": [[a, e] for a, e in zip(m, self.right)],
            "left": [[a, e] for a, e in zip(m, self.left)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "VisualFieldProfile":
        if not isinstance(data, dict):
            raise ValueError("profile must be a JSON object")
        eyes = {}
        for eye in ("right", "left"):
            pairs = data.get(eye)
            if pairs is None:
                raise ValueError(f"profile is missing the {eye!r} eye")
            by_angle = {}
            for pair in pairs:
                angle, extent = float(pair[0]), float(pair[1])
                by_angle[round(angle % 360.0, 6)] = extent
            expected = [round(a, 6) for a in (np.arange(N_MERIDIANS) * MERIDIAN_STEP).tolist()]
            missing = [a for a in expected if a not in by_angle]
            if missing:
                raise ValueError(f"{eye} eye is missing meridians {missing}")
            eyes[eye] = tuple(by_angle[a] for a in expected)
        return cls(eyes["right"], eyes["left"], str(data.get("label", "")))


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=True)
class TrialRecord:
    task: str
    session: int
    trial: int
    level: int
    seed: int
    events: tuple[Event, ...] = ()
    samples: GazeTrace = field(default_factory=GazeTrace.empty)
    outcome: dict = field(default_factory=dict)
    invalid: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 1 <= self.level <= 100:
            raise ValueError(f"difficulty level out of range: {self.level}")
        if self.session < 1:
            raise ValueError(f"session index must be >= 1: {self.session}")
        object.__setattr__(self, "events", tuple(self.events))

    @property
    def duration(self) -> float:
        return float(self.outcome.get("duration", self.samples.duration))


SAMPLE_COLUMNS = ("t", "hx", "hy", "ex", "ey", "v")


def serialize_trial(record: TrialRecord) -> bytes:
    """One JSON line (without the trailing newline) for a trial.

    Samples are stored column-wise: ``{"t": [...], "hx": [...], ..., "v": [...]}``.
    """
    s = record.samples
    samples = {"t": s.t, "hx": s.hx, "hy": s.hy, "ex": s.ex, "ey": s.ey, "v": s.valid}
    doc = {
        "version": SCHEMA_VERSION,
        "task": record.task,
        "session": record.session,
        "trial": record.trial,
        "level": record.level,
        "seed": record.seed,
        "invalid": record.invalid,
        "events": [{"t": e.t, "kind": e.kind, "payload": e.payload} for e in record.events],
        "samples": samples,
        "outcome": record.outcome,
    }
    return orjson.dumps(doc, option=orjson.OPT_SERIALIZE_NUMPY)


def _require(doc: dict, key: str, kinds, line, path=""):
    if not isinstance(doc, dict):
        raise TrialLogError("expected an object", line, path or "$")
    if key not in doc:
        raise TrialLogError(f"missing field {key!r}", line, f"{path}.{key}" if path else key)
    value = doc[key]
    if kinds is not None and (not isinstance(value, kinds) or (isinstance(value, bool) and bool not in _as_tuple(kinds))):
        raise TrialLogError(f"field has type {type(value).__name__}", line, f"{path}.{key}" if path else key)
    return value


def _as_tuple(kinds):
    return kinds if isinstance(kinds, tuple) else (kinds,)


_NUM = (int, float)


def parse_trial(line: bytes | str, line_no: int | None = None) -> TrialRecord:
    """Parse one log line produced by :func:`serialize_trial`."""
    try:
        doc = orjson.loads(line)
    except orjson.JSONDecodeError as exc:
        raise TrialLogError(f"not valid JSON ({exc})", line_no) from None
    version = _require(doc, "version", int, line_no)
    if version != SCHEMA_VERSION:
        raise TrialLogError(f"unsupported schema version {version}", line_no, "version")
    task = _require(doc, "task", str, line_no)
    session = _require(doc, "session", int, line_no)
    trial = _require(doc, "trial", int, line_no)
    level = _require(doc, "level", int, line_no)
    seed = _require(doc, "seed", int, line_no)
    invalid = _require(doc, "invalid", bool, line_no)
    outcome = _require(doc, "outcome", dict, line_no)
    raw_events = _require(doc, "events", list, line_no)
    events = []
    for i, ev in enumerate(raw_events):
        p = f"events[{i}]"
        t = _require(ev, "t", _NUM, line_no, p)
        kind = _require(ev, "kind", str, line_no, p)
        payload = _require(ev, "payload", dict, line_no, p)
        events.append(Event(t, kind, payload))
    raw = _require(doc, "samples", dict, line_no)
    cols = {}
    for key in SAMPLE_COLUMNS:
        col = _require(raw, key, list, line_no, "samples")
        kind = bool if key == "v" else _NUM
        try:
            arr = np.array(col, dtype=bool if key == "v" else float)
            ok = arr.ndim == 1 and all(type(x) is bool for x in col) if key == "v" else arr.ndim == 1
        except (TypeError, ValueError):
            ok = False
        if not ok:
            for i, x in enumerate(col):
                if not isinstance(x, kind) or (kind is _NUM and isinstance(x, bool)):
                    raise TrialLogError(f"sample value has type {type(x).__name__}", line_no, f"samples.{key}[{i}]")
            raise TrialLogError("malformed sample column", line_no, f"samples.{key}")
        cols[key] = arr
    n = len(cols["t"])
    for key in SAMPLE_COLUMNS:
        if len(cols[key]) != n:
            raise TrialLogError(f"column length {len(cols[key])} != {n}", line_no, f"samples.{key}")
    samples = GazeTrace(cols["t"], cols["hx"], cols["hy"], cols["ex"], cols["ey"], cols["v"])
    try:
        return TrialRecord(task, session, trial, level, seed, tuple(events), samples, outcome, invalid)
    except ValueError as exc:
        raise TrialLogError(str(exc), line_no) from None


def write_trials(path, records: Iterable[TrialRecord]) -> int:
    n = 0
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(serialize_trial(rec))
            fh.write(b"\n")
            n += 1
    return n


def read_trials(path) -> Iterator[TrialRecord]:
    with open(path, "rb") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                yield parse_trial(line, i)


def seed_for(*parts: Any) -> int:
    """Stable 63-bit seed derived from arbitrary printable parts."""
    import hashlib

    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def rng_for(*parts: Any) -> np.random.Generator:
    return np.random.default_rng(seed_for(*parts))


def as_pairs(values: Sequence[float]) -> list[list[float]]:
    return [[float(a), float(v)] for a, v in zip(np.arange(len(values)) * MERIDIAN_STEP, values)]


def combine_scalar(hx: float, hy: float, ex: float, ey: float) -> tuple[float, float]:
    """Scalar twin of :func:`combine_arrays` for hot loops."""
    hx, hy, ex, ey = math.radians(hx), math.radians(hy), math.radians(ex), math.radians(ey)
    cey = math.cos(ey)
    x, y, z = cey * math.sin(ex), math.sin(ey), cey * math.cos(ex)
    chy, shy = math.cos(hy), math.sin(hy)
    y2 = chy * y + shy * z
    z2 = -shy * y + chy * z
    chx, shx = math.cos(hx), math.sin(hx)
    x3 = chx * x + shx * z2
    z3 = -shx * x + chx * z2
    return math.degrees(math.atan2(x3, z3)), math.degrees(math.atan2(y2, math.hypot(x3, z3)))
