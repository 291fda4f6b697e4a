"""Coordinate handling: normalization to the unit square, great-circle
distances, granularity thresholds, and Gaussian location sampling.

Latitude/longitude are degrees. Normalized coordinates live in [0,1)^2 with
circular semantics on both axes: an exact 1.0 wraps back to 0.0, so 0 and 1
denote the same longitude (and, deliberately, the two poles collapse onto the
equator-adjacent band when sampling wraps around).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

# IUGG mean Earth radius. Thresholds here are coarse (>= 1 km), so the
# spherical model is sufficient; no ellipsoidal correction.
EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class GeoCoord:
    """A point on Earth in degrees. lat in [-90, 90], lon in [-180, 180]."""

    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and math.isfinite(self.lon_deg)):
            raise ValueError(f"non-finite coordinate ({self.lat_deg}, {self.lon_deg})")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude {self.lat_deg} outside [-90, 90]")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise ValueError(f"longitude {self.lon_deg} outside [-180, 180]")


@dataclass(frozen=True)
class NormCoord:
    """Unit-square coordinate; u from latitude, v from longitude."""

    u: float
    v: float

    def __post_init__(self):
        if not (0.0 <= self.u < 1.0 and 0.0 <= self.v < 1.0):
            raise ValueError(f"normalized coordinate ({self.u}, {self.v}) outside [0,1)^2")


class GranularityLevel(Enum):
    """Distance thresholds (km) defining location relevance, coarse to fine."""

    CONTINENT = 2500.0
    COUNTRY = 750.0
    REGION = 200.0
    CITY = 25.0
    STREET = 1.0

    @property
    def threshold_km(self) -> float:
        return self.value


def _wrap_unit(x: float) -> float:
    # Python's % can round a tiny negative up to exactly 1.0; fold it back.
    x = x % 1.0
    return 0.0 if x >= 1.0 else x


def normalize_coord(c: GeoCoord) -> NormCoord:
    """Map degrees to the unit square: u = (lat+90)/180, v = (lon+180)/360.

    The exact upper boundary wraps to 0.0 on both axes (circular semantics).
    """
    u = (c.lat_deg + 90.0) / 180.0
    v = (c.lon_deg + 180.0) / 360.0
    return NormCoord(_wrap_unit(u), _wrap_unit(v))


def denormalize_coord(n: NormCoord) -> GeoCoord:
    """Inverse of :func:`normalize_coord` on its range."""
    return GeoCoord(n.u * 180.0 - 90.0, n.v * 360.0 - 180.0)


def haversine_km(a: GeoCoord, b: GeoCoord) -> float:
    """Great-circle distance in km on the mean-radius sphere."""
    lat1, lon1 = math.radians(a.lat_deg), math.radians(a.lon_deg)
    lat2, lon2 = math.radians(b.lat_deg), math.radians(b.lon_deg)
    s = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def haversine_km_many(origin: GeoCoord, lats_deg: np.ndarray, lons_deg: np.ndarray) -> np.ndarray:
    """Distances from one origin to many points; vectorized counterpart of
    :func:`haversine_km` (identical formula)."""
    lat1 = math.radians(origin.lat_deg)
    lon1 = math.radians(origin.lon_deg)
    lat2 = np.radians(np.asarray(lats_deg, dtype=np.float64))
    lon2 = np.radians(np.asarray(lons_deg, dtype=np.float64))
    s = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def sample_location(mean: NormCoord, sigma: float, rng: np.random.Generator) -> NormCoord:
    """Draw a coordinate from an axis-independent 2D normal around ``mean``,
    reduced modulo 1 into [0,1)^2 on both axes.

    sigma = 0 returns the mean exactly. sigma = 1 is statistically uniform on
    the unit square.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    u = rng.normal(mean.u, sigma)
    v = rng.normal(mean.v, sigma)
    return NormCoord(_wrap_unit(u), _wrap_unit(v))


def within_threshold(a: GeoCoord, b: GeoCoord, level: GranularityLevel) -> bool:
    """True when the great-circle distance is strictly below the level's
    threshold."""
    return haversine_km(a, b) < level.threshold_km
