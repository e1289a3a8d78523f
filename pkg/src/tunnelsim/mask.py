"""Gaze-contingent tunnel-vision masks.

Alpha is 0 where the scene is visible and 1 where it is blacked out. The
field boundary is the closed curve that linearly interpolates the 24
meridian extents; alpha ramps linearly across a blur band centred on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    MERIDIAN_STEP,
    N_MERIDIANS,
    AngularPos,
    GazeTrace,
    VisualFieldProfile,
    combine_arrays,
    local_polar,
)

DEFAULT_BLUR = 2.0
DEFAULT_RESOLUTION = 0.25
MASK_EXTENT = 50.0


class MaskConfigError(ValueError):
    pass


def boundary_at(extents, bearing):
    """Field boundary eccentricity along ``bearing`` (degrees, any range)."""
    extents = np.asarray(extents, dtype=float)
    xp = np.arange(N_MERIDIANS + 1) * MERIDIAN_STEP
    fp = np.append(extents, extents[0])
    return np.interp(np.asarray(bearing) % 360.0, xp, fp)


def ramp_alpha(ecc, boundary, blur: float = DEFAULT_BLUR):
    """Alpha for eccentricity ``ecc`` given the boundary along the same ray.

    The band half-width shrinks to the boundary itself for fields smaller
    than the blur, so the gaze centre stays transparent for any positive
    extent.
    """
    ecc = np.asarray(ecc, dtype=float)
    boundary = np.asarray(boundary, dtype=float)
    half = np.minimum(blur / 2.0, boundary)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (ecc - (boundary - half)) / (2.0 * half)
    # zero-width band: hard edge
    a = np.where(half > 0, a, np.where(ecc < boundary, 0.0, np.where(ecc > boundary, 1.0, 0.5)))
    return np.clip(a, 0.0, 1.0)


def field_alpha(vf: VisualFieldProfile, gaze_az: float, gaze_el: float, az, el, blur: float = DEFAULT_BLUR):
    """Alpha of world directions for a mask centred on the given gaze."""
    ecc, bearing = local_polar(gaze_az, gaze_el, az, el)
    return ramp_alpha(ecc, boundary_at(vf.extents(), bearing), blur)


@dataclass(frozen=True, eq=False)
class MaskRaster:
    """Alpha grid over a gaze-centred local frame (x right, y up, degrees).

    Local coordinates are azimuthal-equidistant: the distance of a cell from
    the origin is its eccentricity.
    """

    alpha: np.ndarray
    resolution: float
    extent: float
    extents: tuple[float, ...]
    blur: float

    @property
    def axis(self) -> np.ndarray:
        n = self.alpha.shape[0]
        return -self.extent + self.resolution * (np.arange(n) + 0.5)

    def alpha_at(self, x, y):
        """Exact alpha at local coordinates (not snapped to the grid)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ecc = np.hypot(x, y)
        bearing = np.degrees(np.arctan2(y, x))
        return ramp_alpha(ecc, boundary_at(self.extents, bearing), self.blur)

    def cell_alpha(self, x: float, y: float) -> float:
        """Alpha of the raster cell containing local point (x, y)."""
        n = self.alpha.shape[0]
        i = int(np.clip((y + self.extent) // self.resolution, 0, n - 1))
        j = int(np.clip((x + self.extent) // self.resolution, 0, n - 1))
        return float(self.alpha[i, j])

    def to_pgm(self, path=None, maxval: int = 255) -> str:
        """Plain-text PGM (P2) with row 0 at the top; white is visible."""
        grey = np.rint((1.0 - self.alpha[::-1]) * maxval).astype(int)
        h, w = grey.shape
        lines = ["P2", f"# tunnel-vision mask, {self.resolution} deg/cell", f"{w} {h}", str(maxval)]
        lines.extend(" ".join(map(str, row)) for row in grey)
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def build_mask(
    vf: VisualFieldProfile,
    blur: float = DEFAULT_BLUR,
    resolution: float = DEFAULT_RESOLUTION,
    extent: float = MASK_EXTENT,
) -> MaskRaster:
    if not resolution > 0:
        raise MaskConfigError(f"resolution must be positive, got {resolution}")
    if blur < 0:
        raise MaskConfigError(f"blur must be non-negative, got {blur}")
    n = int(round(2 * extent / resolution))
    axis = -extent + resolution * (np.arange(n) + 0.5)
    xx, yy = np.meshgrid(axis, axis)
    extents = tuple(float(e) for e in vf.extents())
    ecc = np.hypot(xx, yy)
    bearing = np.degrees(np.arctan2(yy, xx))
    alpha = ramp_alpha(ecc, boundary_at(extents, bearing), blur)
    alpha.setflags(write=False)
    return MaskRaster(alpha, resolution, extent, extents, blur)


@dataclass(frozen=True)
class LatencyModel:
    eye_latency: float = 0.079
    head_latency: float = 0.005

    def __post_init__(self):
        if self.eye_latency < 0 or self.head_latency < 0:
            raise ValueError("latencies must be non-negative")


NO_LATENCY = LatencyModel(0.0, 0.0)


def _held(trace: GazeTrace, t: float) -> int:
    """Index of the latest sample at or before t (earliest if none)."""
    k = int(np.searchsorted(trace.t, t, side="right"))
    return max(k - 1, 0)


def delayed_gaze(history: GazeTrace, t: float, lat: LatencyModel) -> tuple[float, float]:
    """Mask centre at time t: delayed head composed with delayed eye."""
    if len(history) == 0:
        raise ValueError("empty gaze history")
    ih = _held(history, t - lat.head_latency)
    ie = _held(history, t - lat.eye_latency)
    az, el = combine_arrays(history.hx[ih], history.hy[ih], history.ex[ie], history.ey[ie])
    return float(az), float(el)


def visible_at(mask: MaskRaster, gaze_history: GazeTrace, world_point: AngularPos, t: float, lat: LatencyModel = LatencyModel()) -> float:
    """Alpha at a world direction, for a mask following the delayed gaze.

    History shorter than the latency falls back to the earliest sample.
    """
    caz, cel = delayed_gaze(gaze_history, t, lat)
    ecc, bearing = local_polar(caz, cel, world_point.azimuth, world_point.elevation)
    return float(ramp_alpha(ecc, boundary_at(mask.extents, bearing), mask.blur))


def is_in_simulated_field(vf: VisualFieldProfile, gaze: AngularPos, point: AngularPos, blur: float = DEFAULT_BLUR) -> bool:
    return bool(field_alpha(vf, gaze.azimuth, gaze.elevation, point.azimuth, point.elevation, blur) < 0.5)


class FieldTest:
    """Precomputed inside-the-field test for one profile (alpha < 0.5).

    Circular profiles reduce to a cosine comparison; general profiles
    interpolate the boundary along each direction's meridian.
    """

    def __init__(self, vf: VisualFieldProfile):
        ext = np.asarray(vf.extents(), dtype=float)
        self._xp = np.arange(N_MERIDIANS + 1) * MERIDIAN_STEP
        self._fp = np.append(ext, ext[0]).tolist()
        self._circular = bool(np.all(ext == ext[0]))
        self._cos_r = math.cos(math.radians(float(ext[0])))
        self._radius = float(ext[0])

    def __call__(self, gaze_az: float, gaze_el: float, az, el) -> np.ndarray:
        if isinstance(az, list) and len(az) <= 16:
            return np.array(self._points(gaze_az, gaze_el, az, el), dtype=bool)
        az = np.radians(np.asarray(az, dtype=float))
        el = np.radians(np.asarray(el, dtype=float))
        ce = np.cos(el)
        x, y, z = ce * np.sin(az), np.sin(el), ce * np.cos(az)
        a, b = math.radians(gaze_az), math.radians(gaze_el)
        ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
        x1 = ca * x - sa * z
        z1 = sa * x + ca * z
        y2 = cb * y - sb * z1
        z2 = sb * y + cb * z1
        if self._circular:
            if self._radius >= 180.0:
                return z2 > -1.0 - 1e-12
            return z2 > self._cos_r
        ecc = np.degrees(np.arccos(np.clip(z2, -1.0, 1.0)))
        bearing = np.degrees(np.arctan2(y2, x1)) % 360.0
        return ecc < np.interp(bearing, self._xp, self._fp)


    def polar(self, gaze_az: float, gaze_el: float, az: float, el: float) -> tuple[float, float]:
        """Scalar eccentricity and bearing of one direction around the gaze."""
        a, b = math.radians(gaze_az), math.radians(gaze_el)
        ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
        pa, pe = math.radians(az), math.radians(el)
        ce = math.cos(pe)
        x, y, z = ce * math.sin(pa), math.sin(pe), ce * math.cos(pa)
        x1 = ca * x - sa * z
        z1 = sa * x + ca * z
        y2 = cb * y - sb * z1
        z2 = sb * y + cb * z1
        ecc = math.degrees(math.acos(min(max(z2, -1.0), 1.0)))
        return ecc, math.degrees(math.atan2(y2, x1)) % 360.0

    def boundary(self, bearing: float) -> float:
        """Field extent along a bearing (linear between meridians)."""
        fp = self._fp
        bearing %= 360.0
        k = min(int(bearing // MERIDIAN_STEP), N_MERIDIANS - 1)
        f = (bearing - k * MERIDIAN_STEP) / MERIDIAN_STEP
        return fp[k] + (fp[k + 1] - fp[k]) * f

    def _points(self, gaze_az, gaze_el, az, el) -> list:
        # scalar twin of the vectorised path; cheaper for a handful of points
        if self._circular and self._radius >= 180.0:
            return [True] * len(az)
        a, b = math.radians(gaze_az), math.radians(gaze_el)
        ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
        fp = self._fp
        out = []
        for pa, pe in zip(az, el):
            pa, pe = math.radians(pa), math.radians(pe)
            ce = math.cos(pe)
            x, y, z = ce * math.sin(pa), math.sin(pe), ce * math.cos(pa)
            z1 = sa * x + ca * z
            z2 = sb * y + cb * z1
            if self._circular:
                out.append(z2 > self._cos_r)
                continue
            x1 = ca * x - sa * z
            y2 = cb * y - sb * z1
            ecc = math.degrees(math.acos(min(max(z2, -1.0), 1.0)))
            bearing = math.degrees(math.atan2(y2, x1)) % 360.0
            k = min(int(bearing // MERIDIAN_STEP), N_MERIDIANS - 1)
            f = (bearing - k * MERIDIAN_STEP) / MERIDIAN_STEP
            out.append(ecc < fp[k] + (fp[k + 1] - fp[k]) * f)
        return out


def in_field(vf: VisualFieldProfile, gaze_az: float, gaze_el: float, az, el) -> np.ndarray:
    """Vectorised visibility test (alpha < 0.5, i.e. strictly inside the boundary)."""
    return FieldTest(vf)(gaze_az, gaze_el, az, el)
