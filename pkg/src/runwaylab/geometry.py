"""Geodetic runway descriptions to image-space bounding boxes.

A local East-North-Up tangent frame is anchored at the runway threshold;
aircraft poses live in that frame and a pinhole camera maps runway points
to pixels. Labels fall out of geometry alone, no human annotation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

# WGS-84
WGS84_A = 6378137.0                     # semi-major axis (m)
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)    # first eccentricity squared

# Local tangent approximation only holds at airport scale.
MAX_LOCAL_OFFSET_DEG = 1.0


class GeometryError(Exception):
    pass


class OutOfLocalRange(GeometryError):
    """Point is too far from the tangent-frame origin for the flat-earth map."""


def _curvature_radii(lat_rad: float) -> tuple[float, float]:
    """Meridian (M) and prime-vertical (N) radii of curvature."""
    s = math.sin(lat_rad)
    denom = math.sqrt(1.0 - WGS84_E2 * s * s)
    n = WGS84_A / denom
    m = WGS84_A * (1.0 - WGS84_E2) / (denom ** 3)
    return m, n


@dataclass(frozen=True)
class GeoPoint:
    """Geodetic position: degrees latitude/longitude, meters above ellipsoid."""

    lat: float
    lon: float
    alt: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon) and math.isfinite(self.alt)):
            raise ValueError("GeoPoint fields must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class EnuPoint:
    """Meters east/north/up in a local tangent frame with a stated origin."""

    east: float
    north: float
    up: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.east, self.north, self.up)):
            raise ValueError("EnuPoint fields must be finite")


@dataclass(frozen=True)
class RunwaySpec:
    """A runway: threshold center, true heading, and physical extent."""

    id: str
    threshold: GeoPoint
    heading: float      # degrees clockwise from true north, [0, 360)
    length: float       # meters
    width: float        # meters

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("runway length and width must be positive")
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"heading out of range: {self.heading}")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0 <= self.cx < self.image_width:
            raise ValueError("cx outside image")
        if not 0 <= self.cy < self.image_height:
            raise ValueError("cy outside image")


@dataclass(frozen=True)
class Pose:
    """Camera pose in the local ENU frame.

    Angles are intrinsic Z-Y-X (yaw, pitch, roll) in degrees: yaw clockwise
    from north, pitch positive nose-up, roll positive right-wing-down. The
    camera boresight is the body forward axis, image x right, image y down.
    """

    position: EnuPoint
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.yaw, self.pitch, self.roll)):
            raise ValueError("pose angles must be finite")

    def rotation_enu_to_camera(self) -> np.ndarray:
        """3x3 matrix taking ENU vectors to camera (x right, y down, z forward)."""
        psi = math.radians(self.yaw)
        theta = math.radians(self.pitch)
        phi = math.radians(self.roll)
        cps, sps = math.cos(psi), math.sin(psi)
        ct, st = math.cos(theta), math.sin(theta)
        cph, sph = math.cos(phi), math.sin(phi)
        # Body axes (forward, right, down) expressed in NED; rows of the
        # aerospace Z-Y-X direction cosine matrix.
        fwd = (ct * cps, ct * sps, -st)
        right = (sph * st * cps - cph * sps, sph * st * sps + cph * cps, sph * ct)
        down = (cph * st * cps + sph * sps, cph * st * sps - sph * cps, cph * ct)
        # Reorder NED (n, e, d) components into ENU (e, n, u) columns and
        # stack camera axes (right, down, forward) as rows.
        def ned_to_enu_row(v):
            return (v[1], v[0], -v[2])
        return np.array([ned_to_enu_row(right), ned_to_enu_row(down), ned_to_enu_row(fwd)])


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, corner form, origin top-left, y down."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.xmin, self.ymin, self.xmax, self.ymax)):
            raise ValueError("BBox fields must be finite")
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError("BBox corners out of order")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def clipped(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.xmin, 0.0), width),
            min(max(self.ymin, 0.0), height),
            min(max(self.xmax, 0.0), width),
            min(max(self.ymax, 0.0), height),
        )


def geodetic_to_enu(p: GeoPoint, origin: GeoPoint) -> EnuPoint:
    """Flat-earth small-angle map using curvature radii at the origin latitude."""
    dlat = p.lat - origin.lat
    dlon = p.lon - origin.lon
    if abs(dlat) >= MAX_LOCAL_OFFSET_DEG or abs(dlon) >= MAX_LOCAL_OFFSET_DEG:
        raise OutOfLocalRange(f"offsets ({dlat:.3f}, {dlon:.3f}) deg exceed the 1 deg local range")
    lat0 = math.radians(origin.lat)
    m, n = _curvature_radii(lat0)
    north = math.radians(dlat) * m
    east = math.radians(dlon) * n * math.cos(lat0)
    return EnuPoint(east, north, p.alt - origin.alt)


def enu_to_geodetic(p: EnuPoint, origin: GeoPoint) -> GeoPoint:
    """Inverse of geodetic_to_enu around the same origin."""
    lat0 = math.radians(origin.lat)
    m, n = _curvature_radii(lat0)
    lat = origin.lat + math.degrees(p.north / m)
    lon = origin.lon + math.degrees(p.east / (n * math.cos(lat0)))
    return GeoPoint(lat, lon, origin.alt + p.up)


def runway_corners(spec: RunwaySpec) -> tuple[GeoPoint, GeoPoint, GeoPoint, GeoPoint]:
    """Corners as (near-left, near-right, far-right, far-left).

    Counter-clockwise seen from above: offsets of +-width/2 perpendicular to
    the heading, with the far pair pushed length along the heading. Offsets
    are applied in the tangent plane and mapped back to geodetic.
    """
    h = math.radians(spec.heading)
    fwd = (math.sin(h), math.cos(h))        # (east, north) along heading
    right = (math.cos(h), -math.sin(h))     # heading + 90 deg
    half_w = spec.width / 2.0
    offsets = [
        (-half_w * right[0], -half_w * right[1]),
        (half_w * right[0], half_w * right[1]),
        (half_w * right[0] + spec.length * fwd[0], half_w * right[1] + spec.length * fwd[1]),
        (-half_w * right[0] + spec.length * fwd[0], -half_w * right[1] + spec.length * fwd[1]),
    ]
    return tuple(
        enu_to_geodetic(EnuPoint(e, n, 0.0), spec.threshold) for e, n in offsets
    )


def runway_corners_enu(spec: RunwaySpec) -> np.ndarray:
    """Corner coordinates in the threshold-anchored ENU frame, shape (4, 3)."""
    rows = []
    for g in runway_corners(spec):
        c = geodetic_to_enu(g, spec.threshold)
        rows.append((c.east, c.north, c.up))
    return np.array(rows)


def project(pt: EnuPoint, pose: Pose, k: CameraIntrinsics) -> Optional[tuple[float, float]]:
    """Pinhole projection; None when the point is at or behind the camera plane.

    Returned pixels may lie outside the image bounds.
    """
    r = pose.rotation_enu_to_camera()
    d = np.array([pt.east - pose.position.east,
                  pt.north - pose.position.north,
                  pt.up - pose.position.up])
    cam = r @ d
    if cam[2] <= 1e-9:
        return None
    u = k.cx + k.fx * cam[0] / cam[2]
    v = k.cy + k.fy * cam[1] / cam[2]
    return (u, v)


def _project_many(pts: np.ndarray, pose: Pose, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) ENU points -> (pixels (N, 2), in-front mask)."""
    r = pose.rotation_enu_to_camera()
    c = np.array([pose.position.east, pose.position.north, pose.position.up])
    cam = (pts - c) @ r.T
    front = cam[:, 2] > 1e-9
    z = np.where(front, cam[:, 2], 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = k.cx + k.fx * cam[:, 0] / z
    uv[:, 1] = k.cy + k.fy * cam[:, 1] / z
    return uv, front


def _boundary_samples(corners_enu: np.ndarray, per_edge: int) -> np.ndarray:
    """Evenly spaced points along the quadrilateral boundary, (4*per_edge, 3)."""
    out = []
    for i in range(4):
        a = corners_enu[i]
        b = corners_enu[(i + 1) % 4]
        t = np.linspace(0.0, 1.0, per_edge, endpoint=False)[:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out, axis=0)


def label_bbox(
    spec: RunwaySpec,
    pose: Pose,
    k: CameraIntrinsics,
    min_visible_fraction: float = 0.25,
    samples_per_edge: int = 64,
) -> Optional[BBox]:
    """Auto-label the runway from geometry alone.

    Samples the runway quadrilateral boundary densely, projects each sample,
    and returns the axis-aligned box of the in-image projections, clipped to
    image bounds. Returns None when the visible fraction (in-image projectable
    samples over all samples) falls below min_visible_fraction.
    """
    if not 0.0 < min_visible_fraction <= 1.0:
        raise ValueError("min_visible_fraction must be in (0, 1]")
    if samples_per_edge < 64:
        raise ValueError("samples_per_edge must be at least 64")
    corners = runway_corners_enu(spec)
    pts = _boundary_samples(corners, samples_per_edge)
    uv, front = _project_many(pts, pose, k)
    in_image = front & (uv[:, 0] >= 0.0) & (uv[:, 0] <= k.image_width) \
        & (uv[:, 1] >= 0.0) & (uv[:, 1] <= k.image_height)
    visible = in_image.sum() / len(pts)
    if visible < min_visible_fraction:
        return None
    vis = uv[in_image]
    box = BBox(vis[:, 0].min(), vis[:, 1].min(), vis[:, 0].max(), vis[:, 1].max())
    return box.clipped(k.image_width, k.image_height)


def load_runway_db(path: str | Path) -> dict[str, RunwaySpec]:
    """Load the runway database: a JSON array keyed by airport id.

    Records carry id, lat, lon, alt, heading_deg, length_m, width_m.
    """
    with open(path) as f:
        records = json.load(f)
    db: dict[str, RunwaySpec] = {}
    for rec in records:
        spec = RunwaySpec(
            id=rec["id"],
            threshold=GeoPoint(rec["lat"], rec["lon"], rec["alt"]),
            heading=rec["heading_deg"],
            length=rec["length_m"],
            width=rec["width_m"],
        )
        if spec.id in db:
            raise ValueError(f"duplicate airport id {spec.id!r}")
        db[spec.id] = spec
    return db
