"""Deterministic procedural renderer for toy runway scenes.

Two visual domains stand in for camera data and simulator output:

* real-style: per-pixel texture noise, vignetting, and a seeded hue jitter;
* synth-style: flat shading with a small systematic color shift.

This is the toolkit's central proxy assumption: the "real" domain is a
richer noise/texture model, not photographs, which keeps the domain gap
controllable and license-free.

Both day and night conditions exist; at night the runway surface is nearly
invisible and the scene is carried by bright point lights along the runway
edges and threshold. Everything is a pure function of its arguments: seeds
fully determine output.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from . import geometry
from .dataset import Condition, Dataset, Domain, Sample, save_manifest
from .geometry import BBox, CameraIntrinsics, EnuPoint, Pose, RunwaySpec

# Runway edge lights every 60 m; disc radius 1.5 px at the reference
# distance, scaled by 1/depth and clamped so every light stays visible.
LIGHT_SPACING_M = 60.0
LIGHT_RADIUS_PX = 1.5
LIGHT_REFERENCE_DEPTH_M = 400.0
LIGHT_RADIUS_MIN_PX = 2.5
LIGHT_RADIUS_MAX_PX = 4.5
THRESHOLD_LIGHT_COUNT = 10

DEFAULT_IMAGE_WIDTH = 320
DEFAULT_IMAGE_HEIGHT = 240

# Base palette (R, G, B); per-airport terrain offsets and style/condition
# effects are applied on top. Runway luma sits well below the ground's so
# the box stays visible in grayscale descriptors, not only in hue.
_DAY_SKY = np.array([126.0, 168.0, 224.0])
_DAY_GROUND = np.array([97.0, 116.0, 78.0])
_DAY_RUNWAY = np.array([76.0, 74.0, 79.0])
_DAY_MARKING = np.array([208.0, 207.0, 205.0])
_NIGHT_SKY = np.array([7.0, 8.0, 14.0])
_NIGHT_GROUND = np.array([10.0, 11.0, 14.0])
_NIGHT_RUNWAY = np.array([13.0, 13.0, 16.0])
_NIGHT_EDGE_GLOW = np.array([42.0, 40.0, 33.0])
_EDGE_LIGHT_COLOR = np.array([255.0, 243.0, 205.0])
_THRESHOLD_LIGHT_COLOR = np.array([208.0, 255.0, 214.0])
# Systematic synth-style shift: the simulated domain renders flat and
# noticeably cooler. The shift is chromatic and nearly luma-neutral, so the
# gap lives in color and texture statistics rather than raw brightness.
_SYNTH_SHIFT = np.array([-12.0, 4.0, 10.0])
_SYNTH_RUNWAY_SHIFT = np.array([-9.0, 2.0, 11.0])

_REAL_NOISE_AMPLITUDE = 10.0     # uniform per-pixel, per-channel
_REAL_VIGNETTE_STRENGTH = 0.22
_REAL_HUE_JITTER = 6.0           # per-image constant, uniform

# Terrain and surfacing vary by airport; the same variation feeds both
# styles, so airport diversity is transferable across the domain gap.
_AIRPORT_GROUND_RANGE = 26.0     # +- luma-ish, per channel structured
_AIRPORT_RUNWAY_RANGE = 9.0


class SceneStyle(str, Enum):
    REAL = "real_style"
    SYNTH = "synth_style"

    @property
    def domain(self) -> Domain:
        return Domain.REAL if self is SceneStyle.REAL else Domain.SYNTHETIC


class SceneGenError(Exception):
    pass


class UnknownAirport(SceneGenError):
    pass


class RetryExhausted(SceneGenError):
    pass


@dataclass(frozen=True)
class Range:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty range ({self.lo}, {self.hi})")

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class PoseRanges:
    """Approach-geometry sampling ranges.

    jitter applies independently to yaw and pitch, in degrees.
    """

    altitude: Range = Range(75.0, 125.0)
    lateral: Range = Range(-40.0, 40.0)
    distance: Range = Range(380.0, 680.0)
    jitter: Range = Range(-2.0, 2.0)


@dataclass(frozen=True)
class SceneConfig:
    domain: SceneStyle
    condition: Condition
    airport_id: str
    seed: int
    pose_ranges: PoseRanges = field(default_factory=PoseRanges)
    label_noise_px: float = 0.0    # optional bbox jitter; off keeps labels exact

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        if self.label_noise_px < 0:
            raise ValueError("label_noise_px must be non-negative")


@dataclass
class Image:
    """Row-major RGB image, 8 bits per channel."""

    width: int
    height: int
    pixels: np.ndarray    # uint8, shape (height, width, 3)

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8 with shape (height, width, 3)")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    def save_png(self, path: str | Path) -> None:
        PILImage.fromarray(self.pixels, mode="RGB").save(path, format="PNG")

    @classmethod
    def load_png(cls, path: str | Path) -> "Image":
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return cls.from_array(arr)

    def grayscale(self) -> np.ndarray:
        """ITU-R 601 luma as float64 in [0, 255]."""
        p = self.pixels.astype(np.float64)
        return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


def default_intrinsics(width: int = DEFAULT_IMAGE_WIDTH, height: int = DEFAULT_IMAGE_HEIGHT) -> CameraIntrinsics:
    # ~56 deg horizontal FOV at the default size
    f = 300.0 * width / DEFAULT_IMAGE_WIDTH
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                            image_width=width, image_height=height)


def _derive_rng(*parts) -> np.random.Generator:
    """Counter-based deterministic generator from a tuple of mixed keys.

    Floats are keyed by their IEEE-754 bits so the stream is a pure function
    of the exact argument values, portable across platforms.
    """
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, float):
            h.update(b"f" + struct.pack("<d", p))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        else:
            raise TypeError(f"cannot key rng on {type(p)}")
        h.update(b"\x1f")
    words = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def _draw(rng: np.random.Generator, r: Range) -> float:
    if r.lo == r.hi:
        return r.mid
    return float(rng.uniform(r.lo, r.hi))


def _airport_palette(airport_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-airport terrain and runway-surface color offsets."""
    rng = _derive_rng(airport_id, "airport-palette")
    ground = rng.uniform(-_AIRPORT_GROUND_RANGE, _AIRPORT_GROUND_RANGE, size=3)
    runway = rng.uniform(-_AIRPORT_RUNWAY_RANGE, _AIRPORT_RUNWAY_RANGE, size=3)
    return ground, runway


def sample_pose(config: SceneConfig, draw_index: int, runway: RunwaySpec) -> Pose:
    """Approach-like pose: camera behind the threshold, aimed at it, jittered.

    Deterministic in (config.seed, config.airport_id, draw_index); the runway
    supplies the approach direction. Positions are in the threshold-anchored
    ENU frame.
    """
    rng = _derive_rng(config.seed, config.airport_id, "pose", draw_index)
    pr = config.pose_ranges
    altitude = _draw(rng, pr.altitude)
    lateral = _draw(rng, pr.lateral)
    distance = _draw(rng, pr.distance)
    yaw_jitter = _draw(rng, pr.jitter)
    pitch_jitter = _draw(rng, pr.jitter)

    h = math.radians(runway.heading)
    fwd = (math.sin(h), math.cos(h))
    right = (math.cos(h), -math.sin(h))
    east = -distance * fwd[0] + lateral * right[0]
    north = -distance * fwd[1] + lateral * right[1]
    position = EnuPoint(east, north, altitude)

    # Aim the boresight at the threshold center (the ENU origin).
    ve, vn, vu = -east, -north, -altitude
    yaw = math.degrees(math.atan2(ve, vn)) + yaw_jitter
    pitch = math.degrees(math.atan2(vu, math.hypot(ve, vn))) + pitch_jitter
    return Pose(position=position, yaw=yaw, pitch=pitch, roll=0.0)


def _scene_masks(spec: RunwaySpec, pose: Pose, k: CameraIntrinsics):
    """Per-pixel classification into sky / ground / runway via ray casting."""
    w, h = k.image_width, k.image_height
    r = pose.rotation_enu_to_camera()
    xs = (np.arange(w) + 0.5 - k.cx) / k.fx
    ys = (np.arange(h) + 0.5 - k.cy) / k.fy
    gx, gy = np.meshgrid(xs, ys)
    # Ray directions in ENU: R^T @ (x, y, 1)
    de = r[0, 0] * gx + r[1, 0] * gy + r[2, 0]
    dn = r[0, 1] * gx + r[1, 1] * gy + r[2, 1]
    du = r[0, 2] * gx + r[1, 2] * gy + r[2, 2]

    cam_up = pose.position.up
    ground = (du < -1e-12) & (cam_up > 0)
    t = np.where(ground, -cam_up / np.where(du < -1e-12, du, -1.0), 0.0)
    pe = pose.position.east + t * de
    pn = pose.position.north + t * dn

    hh = math.radians(spec.heading)
    fwd = (math.sin(hh), math.cos(hh))
    rgt = (math.cos(hh), -math.sin(hh))
    along = pe * fwd[0] + pn * fwd[1]
    across = pe * rgt[0] + pn * rgt[1]
    runway = ground & (along >= 0.0) & (along <= spec.length) & (np.abs(across) <= spec.width / 2.0)
    # Daytime paint: centerline stripe plus a threshold bar near the runway start.
    centerline = runway & (np.abs(across) <= spec.width / 16.0) & (along >= spec.length / 25.0)
    threshold_bar = runway & (along <= spec.length / 50.0) & (np.abs(across) <= 0.85 * spec.width / 2.0)
    markings = centerline | threshold_bar
    # Night paint: the rows of edge and threshold lights bloom into a faint
    # continuous outline along the runway border.
    edge_glow = runway & ((np.abs(across) >= spec.width / 2.0 - spec.width / 12.0)
                          | (along <= spec.length / 60.0))
    return ground, runway, markings, edge_glow


def _light_points(spec: RunwaySpec) -> np.ndarray:
    """3D light positions (ENU): both edges every LIGHT_SPACING_M plus a threshold row."""
    h = math.radians(spec.heading)
    fwd = np.array([math.sin(h), math.cos(h), 0.0])
    rgt = np.array([math.cos(h), -math.sin(h), 0.0])
    half_w = spec.width / 2.0
    stations = np.arange(0.0, spec.length + 1e-9, LIGHT_SPACING_M)
    pts = []
    for s in stations:
        base = s * fwd
        pts.append(base - half_w * rgt)
        pts.append(base + half_w * rgt)
    for a in np.linspace(-half_w, half_w, THRESHOLD_LIGHT_COUNT):
        pts.append(a * rgt)
    return np.array(pts)


def edge_light_count(spec: RunwaySpec) -> int:
    """Number of edge lights placed along the two runway edges."""
    return 2 * len(np.arange(0.0, spec.length + 1e-9, LIGHT_SPACING_M))


def _draw_lights(canvas: np.ndarray, spec: RunwaySpec, pose: Pose, k: CameraIntrinsics) -> None:
    pts = _light_points(spec)
    r = pose.rotation_enu_to_camera()
    c = np.array([pose.position.east, pose.position.north, pose.position.up])
    cam = (pts - c) @ r.T
    h, w = canvas.shape[:2]
    n_threshold = THRESHOLD_LIGHT_COUNT
    for idx in range(len(pts)):
        x, y, z = cam[idx]
        if z <= 1e-9:
            continue
        u = k.cx + k.fx * x / z
        v = k.cy + k.fy * y / z
        radius = float(np.clip(LIGHT_RADIUS_PX * LIGHT_REFERENCE_DEPTH_M / z,
                               LIGHT_RADIUS_MIN_PX, LIGHT_RADIUS_MAX_PX))
        color = _THRESHOLD_LIGHT_COLOR if idx >= len(pts) - n_threshold else _EDGE_LIGHT_COLOR
        x0 = int(math.floor(u - radius - 1))
        x1 = int(math.ceil(u + radius + 1))
        y0 = int(math.floor(v - radius - 1))
        y1 = int(math.ceil(v + radius + 1))
        if x1 < 0 or y1 < 0 or x0 >= w or y0 >= h:
            continue
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dist = np.hypot(xx + 0.5 - u, yy + 0.5 - v)
        core = dist <= radius
        halo = (dist > radius) & (dist <= 2.0 * radius)
        patch = canvas[y0:y1 + 1, x0:x1 + 1]
        patch[core] = color
        fade = (0.6 * (2.0 - dist[halo] / radius))[:, None]
        patch[halo] = np.clip(patch[halo] + fade * color[None, :], 0.0, 255.0)


def render(
    config: SceneConfig,
    spec: RunwaySpec,
    pose: Pose,
    k: Optional[CameraIntrinsics] = None,
    min_visible_fraction: float = 0.25,
) -> tuple[Image, Optional[BBox]]:
    """Render one scene and its auto-label.

    The label is exactly geometry.label_bbox for the same inputs (unless the
    optional label-noise knob is enabled). NoLabel scenes still return an
    image, paired with None.
    """
    if k is None:
        k = default_intrinsics()
    ground, runway, markings, edge_glow = _scene_masks(spec, pose, k)
    canvas = np.empty((k.image_height, k.image_width, 3), dtype=np.float64)

    day = config.condition is Condition.DAY
    ground_offset, runway_offset = _airport_palette(config.airport_id)
    if day:
        sky_color = _DAY_SKY
        ground_color = _DAY_GROUND + ground_offset
        runway_color = _DAY_RUNWAY + runway_offset
    else:
        sky_color = _NIGHT_SKY
        ground_color = _NIGHT_GROUND + 0.06 * ground_offset
        runway_color = _NIGHT_RUNWAY + 0.06 * runway_offset

    canvas[:] = sky_color
    canvas[ground] = ground_color
    canvas[runway] = runway_color
    if day:
        canvas[markings] = _DAY_MARKING
    else:
        canvas[edge_glow] = _NIGHT_EDGE_GLOW

    if config.domain is SceneStyle.SYNTH:
        canvas += _SYNTH_SHIFT
        if day:
            canvas[runway] += _SYNTH_RUNWAY_SHIFT
    else:
        rng = _derive_rng(
            config.seed, config.airport_id, config.domain.value, config.condition.value,
            pose.position.east, pose.position.north, pose.position.up,
            pose.yaw, pose.pitch, pose.roll, "texture",
        )
        hue = rng.uniform(-_REAL_HUE_JITTER, _REAL_HUE_JITTER, size=3)
        noise = rng.uniform(-_REAL_NOISE_AMPLITUDE, _REAL_NOISE_AMPLITUDE,
                            size=canvas.shape)
        canvas += hue[None, None, :] + noise
        yy, xx = np.mgrid[0:k.image_height, 0:k.image_width]
        r2 = ((xx + 0.5 - k.cx) ** 2 + (yy + 0.5 - k.cy) ** 2) / (k.cx ** 2 + k.cy ** 2)
        canvas *= (1.0 - _REAL_VIGNETTE_STRENGTH * r2)[:, :, None]

    if not day:
        # Lights are emissive: drawn after the style effects so vignetting
        # and noise never dim them below full brightness.
        _draw_lights(canvas, spec, pose, k)

    image = Image.from_array(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))

    bbox = geometry.label_bbox(spec, pose, k, min_visible_fraction)
    if bbox is not None:
        bbox = BBox(float(bbox.xmin), float(bbox.ymin), float(bbox.xmax), float(bbox.ymax))
        if config.label_noise_px > 0:
            nrng = _derive_rng(config.seed, config.airport_id, "labelnoise",
                               pose.position.east, pose.position.north, pose.position.up)
            jitter = nrng.uniform(-config.label_noise_px, config.label_noise_px, size=4)
            x0, x1 = sorted((bbox.xmin + jitter[0], bbox.xmax + jitter[2]))
            y0, y1 = sorted((bbox.ymin + jitter[1], bbox.ymax + jitter[3]))
            bbox = BBox(x0, y0, x1, y1).clipped(k.image_width, k.image_height)
    return image, bbox


def generate_dataset(
    configs: list[SceneConfig],
    spec_db: dict[str, RunwaySpec],
    count_per_config: int | list[int],
    out_dir: str | Path,
    k: Optional[CameraIntrinsics] = None,
    min_visible_fraction: float = 0.25,
    name: str = "",
) -> Dataset:
    """Write the requested number of labeled PNGs per config plus a manifest.

    count_per_config is a single count applied to every config or one count
    per config. NoLabel draws are skipped and redrawn with the next
    draw_index; a retry cap of 100x the requested count aborts hopeless
    configs. Regeneration with identical arguments reproduces the manifest
    and image bytes.
    """
    if isinstance(count_per_config, int):
        counts = [count_per_config] * len(configs)
    else:
        counts = list(count_per_config)
        if len(counts) != len(configs):
            raise ValueError("one count per config required")
    if any(c <= 0 for c in counts):
        raise ValueError("count_per_config must be positive")
    if k is None:
        k = default_intrinsics()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    samples: list[Sample] = []
    for ci, (config, count) in enumerate(zip(configs, counts)):
        spec = spec_db.get(config.airport_id)
        if spec is None:
            raise UnknownAirport(f"airport {config.airport_id!r} not in runway database")
        kept = 0
        draw_index = 0
        cap = 100 * count
        while kept < count:
            if draw_index >= cap:
                raise RetryExhausted(
                    f"config {ci} ({config.airport_id}, {config.domain.value}, "
                    f"{config.condition.value}): {kept}/{count} after {cap} draws")
            pose = sample_pose(config, draw_index, spec)
            image, bbox = render(config, spec, pose, k, min_visible_fraction)
            draw_index += 1
            if bbox is None:
                continue
            fname = (f"c{ci:02d}_{config.airport_id}_{config.domain.value}_"
                     f"{config.condition.value}_{draw_index - 1:05d}.png")
            fpath = images_dir / fname
            image.save_png(fpath)
            samples.append(Sample(
                image_ref=str(fpath),
                bbox=bbox,
                domain=config.domain.domain,
                condition=config.condition,
                airport_id=config.airport_id,
            ))
            kept += 1

    ds = Dataset(tuple(samples), name=name or out_dir.name)
    save_manifest(ds, out_dir / "manifest.json")
    return ds
