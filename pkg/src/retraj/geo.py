"""Spherical-earth geometry helpers.

Coordinates are WGS84 decimal degrees; all distances are meters on a
sphere of radius EARTH_RADIUS_M.  Point-to-segment work happens in a
local equirectangular frame centered on the query point, which is
accurate to well under a centimeter at street scale.
"""

from __future__ import annotations

import math

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

_DEG = math.pi / 180.0
# meters per degree of latitude on the sphere
M_PER_DEG_LAT = EARTH_RADIUS_M * _DEG


def haversine_m(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    """Great-circle distance in meters between two points."""
    dphi = (lat2 - lat1) * _DEG
    dlam = (lng2 - lng1) * _DEG
    a = (
        math.sin(dphi / 2.0) ** 2
        + math.cos(lat1 * _DEG) * math.cos(lat2 * _DEG) * math.sin(dlam / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def haversine_m_arr(lats1, lngs1, lats2, lngs2) -> np.ndarray:
    """Vectorized haversine over numpy arrays (broadcasting allowed)."""
    lats1 = np.asarray(lats1, dtype=np.float64)
    lats2 = np.asarray(lats2, dtype=np.float64)
    dphi = (lats2 - lats1) * _DEG
    dlam = (np.asarray(lngs2, dtype=np.float64) - np.asarray(lngs1, dtype=np.float64)) * _DEG
    a = (
        np.sin(dphi / 2.0) ** 2
        + np.cos(lats1 * _DEG) * np.cos(lats2 * _DEG) * np.sin(dlam / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def polyline_length_m(coords: np.ndarray) -> float:
    """Total haversine length of a [P, 2] (lat, lng) polyline."""
    if len(coords) < 2:
        return 0.0
    return float(
        haversine_m_arr(coords[:-1, 0], coords[:-1, 1], coords[1:, 0], coords[1:, 1]).sum()
    )


def local_xy(lat0: float, lng0: float, lats, lngs):
    """Project (lats, lngs) to meters east/north of (lat0, lng0).

    Equirectangular with the cos factor taken at lat0; adequate for
    distances of a few kilometers.
    """
    x = (np.asarray(lngs, dtype=np.float64) - lng0) * _DEG * EARTH_RADIUS_M * math.cos(lat0 * _DEG)
    y = (np.asarray(lats, dtype=np.float64) - lat0) * M_PER_DEG_LAT
    return x, y


def offset_latlng(lat: float, lng: float, north_m: float, east_m: float) -> tuple[float, float]:
    """Move a point by the given meter offsets."""
    dlat = north_m / M_PER_DEG_LAT
    dlng = east_m / (M_PER_DEG_LAT * math.cos(lat * _DEG))
    return lat + dlat, lng + dlng


def point_segment_xy(px, py, ax, ay, bx, by) -> tuple[float, float]:
    """Distance from point P to segment AB in a planar frame.

    Returns (distance, t) where t in [0, 1] is the clamped projection
    parameter along AB.
    """
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq <= 0.0:
        return math.hypot(px - ax, py - ay), 0.0
    t = ((px - ax) * dx + (py - ay) * dy) / seg_sq
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy)), t
