"""Offline gaze analytics: saccade detection, the five gaze parameters and
trial exclusion."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    HEALTHY_FIELD,
    SAMPLE_RATE,
    GazeTrace,
    TrialRecord,
    VisualFieldProfile,
    angular_distance_arrays,
    combine_arrays,
    great_circle,
)
from .mask import FieldTest, boundary_at

EXCLUSION_THRESHOLD = 0.10
DVF_CELL = 0.5
DVF_WINDOW = 3.0
DVF_STRIDE = 0.5

GAZE_PARAMETERS = ("dvf", "expl_ratio", "sacc_freq", "head_eye_ratio", "elev_azim_ratio")
PERFORMANCE_PARAMETERS = ("score", "found", "p_adj", "duration", "log_duration", "collisions")


class DetectorDegenerateError(ValueError):
    """No sample is slow enough to estimate the noise level."""


@dataclass(frozen=True)
class SaccadeDetectorParams:
    smoothing_window: int = 5
    velocity_prefilter: float = 50.0
    k_peak: float = 6.0
    k_onset: float = 3.0
    # "gate": drop samples at or above the prefilter from the mu/sigma estimate;
    # "lowpass": clip the velocity signal at the prefilter instead
    prefilter_mode: str = "gate"

    def __post_init__(self):
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        if not self.k_peak > self.k_onset > 0:
            raise ValueError("need k_peak > k_onset > 0")
        if self.prefilter_mode not in ("gate", "lowpass"):
            raise ValueError(f"unknown prefilter mode {self.prefilter_mode!r}")


@dataclass(frozen=True)
class SaccadeEvent:
    t_onset: float
    t_end: float
    amplitude: float
    head_amplitude: float
    eye_amplitude: float
    azimuth_travel: float
    elevation_travel: float
    exploratory: bool
    i_onset: int = 0
    i_end: int = 0

    @property
    def head_eye_ratio(self) -> float:
        if self.eye_amplitude == 0:
            return math.inf
        return self.head_amplitude / self.eye_amplitude


@dataclass(frozen=True)
class Detection:
    saccades: tuple[SaccadeEvent, ...]
    mu: float
    sigma: float
    v_max: float
    v_onset: float
    velocity: np.ndarray = field(repr=False, compare=False, default=None)


def _moving_average(x: np.ndarray, valid: np.ndarray, w: int) -> np.ndarray:
    """Centred moving average; windows touching an invalid sample are NaN."""
    n = len(x)
    if w == 1:
        return np.where(valid, x, np.nan)
    xv = np.where(valid, x, 0.0)
    c = np.concatenate([[0.0], np.cumsum(xv)])
    cv = np.concatenate([[0], np.cumsum(~valid)])
    half = w // 2
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) - half + w, 0, n)
    full = (hi - lo) == w
    out = (c[hi] - c[lo]) / np.maximum(hi - lo, 1)
    bad = (cv[hi] - cv[lo]) > 0
    return np.where(full & ~bad, out, np.nan)


def angular_velocity(trace: GazeTrace, window: int = 5):
    """Smoothed world-gaze angular speed (deg/s), aligned to samples; v[0] is NaN."""
    az, el = trace.gaze()
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    saz = _moving_average(az, trace.valid, window)
    sel = _moving_average(el, trace.valid, window)
    v = np.full(len(trace), np.nan)
    if len(trace) > 1:
        dt = np.diff(trace.t)
        d = angular_distance_arrays(saz[:-1], sel[:-1], saz[1:], sel[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            v[1:] = np.where(dt > 0, d / dt, np.nan)
    return v, az, el


def thresholds(v: np.ndarray, params: SaccadeDetectorParams = SaccadeDetectorParams()):
    """(mu, sigma, v_max, v_onset) from the velocity signal."""
    finite = v[np.isfinite(v)]
    if params.prefilter_mode == "gate":
        slow = finite[finite < params.velocity_prefilter]
    else:
        slow = np.minimum(finite, params.velocity_prefilter)
    if slow.size == 0:
        raise DetectorDegenerateError("no sample below the velocity prefilter")
    mu = float(slow.mean())
    sigma = float(slow.std())
    return mu, sigma, mu + params.k_peak * sigma, mu + params.k_onset * sigma


def classify_exploratory(endpoint: tuple[float, float], gaze_at_onset: tuple[float, float],
                         vf: VisualFieldProfile | FieldTest) -> bool:
    """True when the saccade lands outside the field visible at its onset."""
    ft = vf if isinstance(vf, FieldTest) else FieldTest(vf)
    ecc, bearing = ft.polar(float(gaze_at_onset[0]), float(gaze_at_onset[1]), float(endpoint[0]), float(endpoint[1]))
    return ecc > ft.boundary(bearing)


def decompose_head_eye(trace: GazeTrace, i_onset: int, i_end: int) -> tuple[float, float]:
    """Head and eye-in-head angular travel between two samples."""
    head = great_circle(float(trace.hx[i_onset]), float(trace.hy[i_onset]), float(trace.hx[i_end]), float(trace.hy[i_end]))
    eye = great_circle(float(trace.ex[i_onset]), float(trace.ey[i_onset]), float(trace.ex[i_end]), float(trace.ey[i_end]))
    return head, eye


def detect_saccades(trace: GazeTrace, vf: Optional[VisualFieldProfile] = None,
                    params: SaccadeDetectorParams = SaccadeDetectorParams()) -> Detection:
    """Adaptive-threshold saccade detection on the combined head+eye gaze.

    Peaks are runs above ``v_max``; each is extended to where the velocity
    falls back under ``v_onset``. Overlapping or touching events merge.
    Events containing an invalid sample are dropped.
    """
    if np.count_nonzero(trace.valid) < params.smoothing_window:
        raise DetectorDegenerateError("fewer valid samples than the smoothing window")
    v, az, el = angular_velocity(trace, params.smoothing_window)
    mu, sigma, v_max, v_onset = thresholds(v, params)
    n = len(v)
    finite = np.isfinite(v)
    vv = np.where(finite, v, -np.inf)
    above = vv > v_max
    # extension runs through gaps so that a saccade interrupted by invalid
    # samples spans them (and is dropped below) instead of splitting in two
    extend = (vv > v_onset) | ~finite
    spans = []
    if above.any():
        edges = np.flatnonzero(np.diff(np.concatenate([[0], above.astype(np.int8), [0]])))
        for a, b in zip(edges[::2], edges[1::2] - 1):
            lo = a
            while lo > 1 and extend[lo - 1]:
                lo -= 1
            hi = b
            while hi < n - 1 and extend[hi + 1]:
                hi += 1
            # velocity index i covers samples i-1 -> i
            s0, s1 = lo - 1, hi
            if spans and s0 <= spans[-1][1] + 1:
                spans[-1] = (spans[-1][0], max(spans[-1][1], s1))
            else:
                spans.append((s0, s1))
    events = []
    ft = FieldTest(vf) if vf is not None else None
    for s0, s1 in spans:
        s0 = max(s0, 0)
        if not trace.valid[s0: s1 + 1].all() or not np.isfinite(v[max(s0, 1): s1 + 1]).all():
            continue
        amp = great_circle(float(az[s0]), float(el[s0]), float(az[s1]), float(el[s1]))
        head, eye = decompose_head_eye(trace, s0, s1)
        expl = classify_exploratory((az[s1], el[s1]), (az[s0], el[s0]), ft) if ft is not None else False
        events.append(SaccadeEvent(
            float(trace.t[s0]), float(trace.t[s1]), amp, head, eye,
            float(abs(az[s1] - az[s0])), float(abs(el[s1] - el[s0])), expl, int(s0), int(s1),
        ))
    return Detection(tuple(events), mu, sigma, v_max, v_onset, v)


DVF_PHASES = 4


class _Footprints:
    """Field footprints on the raster, one per sub-cell gaze phase.

    The gaze position is quantised to 1/``phases`` of a cell; a raster cell
    belongs to the footprint when its centre lies inside the boundary around
    that position (planar offsets in degrees of azimuth and elevation).
    """

    def __init__(self, vf: VisualFieldProfile, cell: float, phases: int = DVF_PHASES):
        self.ext = vf.extents()
        self.cell = cell
        self.phases = phases
        self.k = int(math.ceil(float(self.ext.max()) / cell)) + 1
        self._cache: dict = {}

    def get(self, px: int, py: int) -> np.ndarray:
        key = (px, py)
        kern = self._cache.get(key)
        if kern is None:
            off = np.arange(-self.k, self.k + 1) * self.cell
            dx = ((px + 0.5) / self.phases - 0.5) * self.cell
            dy = ((py + 0.5) / self.phases - 0.5) * self.cell
            xx, yy = np.meshgrid(off - dx, off - dy)
            bearing = np.degrees(np.arctan2(yy, xx)) % 360.0
            kern = np.hypot(xx, yy) < boundary_at(self.ext, bearing)
            self._cache[key] = kern
        return kern


@functools.lru_cache(maxsize=64)
def _footprints(vf: VisualFieldProfile, cell: float) -> _Footprints:
    return _Footprints(vf, cell)


@dataclass(frozen=True)
class DvfResult:
    percent: float
    windows: int
    truncated: bool


def dynamic_visual_field(trace: GazeTrace, vf: VisualFieldProfile, window: float = DVF_WINDOW,
                         stride: float = DVF_STRIDE, cell: float = DVF_CELL) -> DvfResult:
    """Mean share (%) of the 180 x 135 degree potential field seen per sliding window.

    The potential field is an equirectangular raster. A cell counts as
    observed in a window when it lay inside the field around the gaze of any
    valid sample in that window. Windows start at t=0 and advance by
    ``stride``; a trace shorter than one window yields a single truncated
    window.
    """
    if window <= 0 or stride <= 0 or cell <= 0:
        raise ValueError("window, stride and cell must be positive")
    nx = int(round(HEALTHY_FIELD.width / cell))
    ny = int(round(HEALTHY_FIELD.height / cell))
    total = nx * ny
    m = trace.valid
    if not m.any():
        return DvfResult(0.0, 0, True)
    az, el = combine_arrays(trace.hx[m], trace.hy[m], trace.ex[m], trace.ey[m])
    t = trace.t[m] - trace.t[0]
    fp = _footprints(vf, cell)
    q = fp.phases
    qx = np.floor((np.asarray(az) + HEALTHY_FIELD.width / 2) / cell * q).astype(np.int64)
    qy = np.floor((np.asarray(el) + HEALTHY_FIELD.height / 2) / cell * q).astype(np.int64)
    gx, gy = qx // q, qy // q
    k = fp.k
    # working box: everything any stamp can reach, clipped to the raster
    x0, x1 = max(int(gx.min()) - k, 0), min(int(gx.max()) + k + 1, nx)
    y0, y1 = max(int(gy.min()) - k, 0), min(int(gy.max()) + k + 1, ny)
    if x0 >= x1 or y0 >= y1:
        return DvfResult(0.0, 1, False)
    bw, bh = x1 - x0, y1 - y0

    duration = float(trace.t[-1] - trace.t[0])
    per_window = int(round(window / stride))
    truncated = duration < window - 1e-9
    n_win = 1 if truncated else int(math.floor((duration - window) / stride + 1e-9)) + 1
    n_blocks = n_win + per_window - 1
    block = np.minimum((t / stride + 1e-9).astype(np.int64), n_blocks - 1)

    # unique quantised gaze positions per block
    span_x = int(qx.max() - qx.min()) + 1
    span_y = int(qy.max() - qy.min()) + 1
    key = (block * span_y + (qy - qy.min())) * span_x + (qx - qx.min())
    _, first = np.unique(key, return_index=True)
    ub, ux, uy = block[first], gx[first], gy[first]
    upx, upy = qx[first] % q, qy[first] % q
    starts = np.searchsorted(ub, np.arange(n_blocks + 1))

    counts = np.zeros((bh, bw), dtype=np.int32)
    stamps: list[Optional[np.ndarray]] = [None] * n_blocks
    total_seen = 0.0

    def stamp(b: int) -> np.ndarray:
        img = np.zeros((bh, bw), dtype=bool)
        for j in range(starts[b], starts[b + 1]):
            cx, cy = int(ux[j]) - x0, int(uy[j]) - y0
            ax0, ax1 = max(cx - k, 0), min(cx + k + 1, bw)
            ay0, ay1 = max(cy - k, 0), min(cy + k + 1, bh)
            if ax0 >= ax1 or ay0 >= ay1:
                continue
            kern = fp.get(int(upx[j]), int(upy[j]))
            img[ay0:ay1, ax0:ax1] |= kern[ay0 - (cy - k): ay1 - (cy - k), ax0 - (cx - k): ax1 - (cx - k)]
        return img

    for b in range(n_blocks):
        stamps[b] = stamp(b)
        counts += stamps[b]
        if b >= per_window:
            counts -= stamps[b - per_window]
            stamps[b - per_window] = None
        if b >= per_window - 1 or truncated and b == n_blocks - 1:
            total_seen += np.count_nonzero(counts) / total
    return DvfResult(100.0 * total_seen / n_win, n_win, truncated)


@dataclass(frozen=True)
class TrialGazeMetrics:
    dvf: float
    expl_ratio: float
    sacc_freq: float
    head_eye_ratio: float
    elev_azim_ratio: float
    invalid_ratio: float
    n_saccades: int
    excluded: bool = False
    missing: bool = False
    flags: tuple[str, ...] = ()


def _nan_metrics(invalid_ratio, excluded, missing, flags=()):
    nan = math.nan
    return TrialGazeMetrics(nan, nan, nan, nan, nan, invalid_ratio, 0, excluded, missing, tuple(flags))


def trial_metrics(trace: GazeTrace, vf: VisualFieldProfile,
                  params: SaccadeDetectorParams = SaccadeDetectorParams(),
                  threshold: float = EXCLUSION_THRESHOLD) -> TrialGazeMetrics:
    """All five gaze parameters for one trial, or an excluded/missing marker.

    Ratios without a denominator (no saccades, no eye travel, no azimuth
    travel) are NaN and flagged.
    """
    if len(trace) == 0:
        return _nan_metrics(1.0, False, True, ("missing",))
    inv = trace.invalid_ratio()
    if inv > threshold:
        return _nan_metrics(inv, True, False, ("invalid-frames",))
    flags = []
    try:
        det = detect_saccades(trace, vf, params)
    except DetectorDegenerateError:
        return _nan_metrics(inv, True, False, ("detector-degenerate",))
    sacc = det.saccades
    dur = trace.duration
    dvf = dynamic_visual_field(trace, vf)
    if dvf.truncated:
        flags.append("dvf-truncated")
    n = len(sacc)
    freq = n / dur if dur > 0 else math.nan
    if n:
        expl = sum(s.exploratory for s in sacc) / n
        ratios = [s.head_eye_ratio for s in sacc if math.isfinite(s.head_eye_ratio)]
        he = float(np.mean(ratios)) if ratios else math.nan
        az_t = sum(s.azimuth_travel for s in sacc)
        el_t = sum(s.elevation_travel for s in sacc)
        ea = el_t / az_t if az_t > 0 else math.nan
        if not ratios:
            flags.append("no-eye-travel")
        if az_t == 0:
            flags.append("no-azimuth-travel")
    else:
        expl = he = ea = math.nan
        flags.append("no-saccades")
    return TrialGazeMetrics(dvf.percent, expl, freq, he, ea, inv, n, False, False, tuple(flags))


# -- batch analysis -------------------------------------------------------

METRIC_COLUMNS = (
    "trial_id", "participant", "group", "task", "session", "trial", "level",
    *GAZE_PARAMETERS, "invalid_ratio", "excluded", "missing", "n_saccades",
    *PERFORMANCE_PARAMETERS, "timeout", "vf_radius", "flags",
)


def performance_columns(record: TrialRecord) -> dict:
    o = record.outcome
    row = {k: math.nan for k in PERFORMANCE_PARAMETERS}
    row["timeout"] = bool(o.get("timeout", False))
    if record.task == "tracking":
        row["score"] = o.get("score", math.nan)
    elif record.task == "search":
        row["found"] = o.get("found", math.nan)
        row["p_adj"] = o.get("p_adj", math.nan)
    else:
        d = o.get("duration", math.nan)
        row["duration"] = d
        row["log_duration"] = math.log(d) if d and d > 0 else math.nan
        row["collisions"] = o.get("collisions", math.nan)
    return row


def metrics_row(record: TrialRecord, vf: VisualFieldProfile, participant: str = "", group: str = "",
                params: SaccadeDetectorParams = SaccadeDetectorParams()) -> dict:
    if record.invalid:
        m = _nan_metrics(record.samples.invalid_ratio() if len(record.samples) else 1.0, True, False, ("marked-invalid",))
    else:
        m = trial_metrics(record.samples, vf, params)
    row = {
        "trial_id": f"{participant}:{record.session}:{record.trial}",
        "participant": participant,
        "group": group,
        "task": record.task,
        "session": record.session,
        "trial": record.trial,
        "level": record.level,
    }
    for k in GAZE_PARAMETERS:
        row[k] = getattr(m, k)
    row["invalid_ratio"] = m.invalid_ratio
    row["excluded"] = m.excluded
    row["missing"] = m.missing
    row["n_saccades"] = m.n_saccades
    row.update(performance_columns(record))
    row["vf_radius"] = vf.mean_radius()
    row["flags"] = ";".join(m.flags)
    return row


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            n += 1
    return n


_INT_COLS = {"session", "trial", "level", "n_saccades"}
_BOOL_COLS = {"excluded", "missing", "timeout"}
_STR_COLS = {"trial_id", "participant", "group", "task", "flags"}


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METRIC_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"metrics file lacks columns {missing}")
        rows = []
        for line_no, raw in enumerate(reader, start=2):
            row = {}
            try:
                for c in METRIC_COLUMNS:
                    v = raw[c]
                    if c in _STR_COLS:
                        row[c] = v
                    elif c in _INT_COLS:
                        row[c] = int(v)
                    elif c in _BOOL_COLS:
                        row[c] = v == "1"
                    else:
                        row[c] = float(v) if v != "" else math.nan
            except ValueError as exc:
                raise ValueError(f"line {line_no}, column {c}: {exc}") from None
            rows.append(row)
    return rows


@dataclass
class ExclusionSummary:
    total: int = 0
    analyzed: int = 0
    missing: int = 0
    excluded: int = 0

    def add(self, row: dict) -> None:
        self.total += 1
        if row["missing"]:
            self.missing += 1
        elif row["excluded"]:
            self.excluded += 1
        else:
            self.analyzed += 1

    @property
    def consistent(self) -> bool:
        return self.analyzed + self.missing + self.excluded == self.total

    def to_dict(self) -> dict:
        return asdict(self)


def exclusion_summary(rows: Iterable[dict], by: Sequence[str] = ("group", "task")) -> dict:
    """Trial bookkeeping per (group, task): total = analyzed + missing + excluded."""
    out: dict = {}
    for row in rows:
        key = tuple(row[c] for c in by)
        out.setdefault(key, ExclusionSummary()).add(row)
    return out


def inject_saccades(amplitudes: Sequence[float], isi: float = 0.6, velocity_noise: float = 2.0,
                    rate: float = SAMPLE_RATE, seed: int = 0, lead: float = 0.6,
                    base: float = 0.020, slope: float = 0.002):
    """Synthetic eye-only trace with saccades of known amplitude and timing.

    Saccades alternate direction along random headings, follow a
    raised-cosine profile lasting ``base + slope * amplitude`` seconds, and
    are separated by ``isi`` seconds of fixation. Noise is a random walk
    whose per-axis velocity has standard deviation ``velocity_noise``.
    ``amplitudes`` are planar displacements in (azimuth, elevation).
    Returns ``(trace, truth)`` where ``truth`` is a list of
    (t_start, t_end, great-circle amplitude).
    """
    rng = np.random.default_rng(seed)
    timing = []
    t = lead
    for a in amplitudes:
        d = base + slope * a
        timing.append((t, t + d, float(a)))
        t += d + isi
    total = t + lead
    n = int(math.floor(total * rate)) + 1
    times = np.arange(n) / rate
    x = np.zeros(n)
    y = np.zeros(n)
    truth = []
    cx = cy = 0.0
    for (t0, t1, a) in timing:
        ang = rng.uniform(0, 2 * math.pi)
        dx, dy = a * math.cos(ang), a * math.sin(ang)
        # keep the gaze near the centre
        if abs(cx + dx) > 30 or abs(cy + dy) > 25:
            dx, dy = -dx, -dy
        s = np.clip((times - t0) / (t1 - t0), 0.0, 1.0)
        f = (1.0 - np.cos(np.pi * s)) / 2.0
        x += dx * f
        y += dy * f
        # amplitude is the great-circle distance between the fixations
        truth.append((t0, t1, float(angular_distance_arrays(cx, cy, cx + dx, cy + dy))))
        cx += dx
        cy += dy
    step = velocity_noise / rate
    x += np.cumsum(rng.normal(0.0, step, n))
    y += np.cumsum(rng.normal(0.0, step, n))
    zeros = np.zeros(n)
    trace = GazeTrace(np.round(times, 6), zeros, zeros, x, y, np.ones(n, dtype=bool))
    return trace, truth


def match_detections(detected: Sequence[SaccadeEvent], truth, tolerance: float = 0.05):
    """(true positives, recall, precision) by temporal overlap with slack."""
    used = set()
    tp = 0
    for t0, t1, _ in truth:
        for j, s in enumerate(detected):
            if j in used:
                continue
            if s.t_onset <= t1 + tolerance and s.t_end >= t0 - tolerance:
                used.add(j)
                tp += 1
                break
    recall = tp / len(truth) if truth else 1.0
    precision = tp / len(detected) if detected else 1.0
    return tp, recall, precision
