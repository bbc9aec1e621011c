"""Bounding-box track ingestion, windowing, normalization, splits, and synthetic corpora.

All trajectories are sequences of (cx, cy, w, h) boxes in image pixels.
The canonical interchange format is JSONL with one record per frame:
``{"video_id", "track_id", "frame", "cx", "cy", "w", "h"}``. Adapters
convert JAAD-style and PIE-style CVAT XML annotations into it.
"""
from __future__ import annotations

import json
import math
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACK_FORMATS = ("jsonl", "jaad-xml", "pie")

DEFAULT_FPS = 30.0
DEFAULT_IMAGE_SIZE = (1920, 1080)


class ParseError(ValueError):
    """Malformed annotation input; message names the file and record."""


class EmptyDatasetError(ValueError):
    """A loader produced no tracks."""


class ConfigurationError(ValueError):
    """Invalid windowing / staging / split configuration."""


def _require_finite(name: str, values) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: center (cx, cy) plus width/height, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        _require_finite("BoundingBox", [self.cx, self.cy, self.w, self.h])
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width/height must be positive, got w={self.w} h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass
class Track:
    """One pedestrian's annotation stream within a video."""

    track_id: str
    video_id: str
    frames: list[int]
    boxes: list[BoundingBox]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError(
                f"track {self.track_id}: {len(self.frames)} frames vs {len(self.boxes)} boxes"
            )
        if any(nxt <= cur for cur, nxt in zip(self.frames, self.frames[1:])):
            raise ValueError(f"track {self.track_id}: frames must be strictly increasing")
        if self.fps <= 0:
            raise ValueError(f"track {self.track_id}: fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    def as_array(self) -> np.ndarray:
        """(L, 4) float64 matrix of (cx, cy, w, h) rows."""
        return np.array([b.as_array() for b in self.boxes], dtype=np.float64)

    def contiguous_segments(self) -> list["Track"]:
        """Split at frame gaps larger than 1; no interpolation is ever applied."""
        if not self.frames:
            return []
        segments = []
        start = 0
        for i in range(1, len(self.frames)):
            if self.frames[i] - self.frames[i - 1] > 1:
                segments.append(self._slice(start, i))
                start = i
        segments.append(self._slice(start, len(self.frames)))
        return segments

    def _slice(self, lo: int, hi: int) -> "Track":
        return Track(
            track_id=self.track_id,
            video_id=self.video_id,
            frames=self.frames[lo:hi],
            boxes=self.boxes[lo:hi],
            fps=self.fps,
        )


@dataclass(frozen=True)
class NormTransform:
    """Affine map between pixel boxes and normalized boxes: pixel = norm * scale + offset."""

    scale: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls) -> "NormTransform":
        return cls(scale=np.ones(4), offset=np.zeros(4))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.scale == 1.0) and np.all(self.offset == 0.0))

    def to_normalized(self, boxes: np.ndarray) -> np.ndarray:
        return (np.asarray(boxes, dtype=np.float64) - self.offset) / self.scale

    def to_pixels(self, boxes: np.ndarray) -> np.ndarray:
        return np.asarray(boxes, dtype=np.float64) * self.scale + self.offset


@dataclass
class TrajectoryWindow:
    """A fixed-length (observed, future) sample cut from one track.

    ``observed`` is tau x 4 and ``future`` rho x 4; both share one coordinate
    frame, pixel or normalized depending on ``norm_transform``. ``anchor`` is
    the last observed box in pixels.
    """

    observed: np.ndarray
    future: np.ndarray
    anchor: BoundingBox
    norm_transform: NormTransform = field(default_factory=NormTransform.identity)
    video_id: str = ""
    track_id: str = ""
    anchor_frame: int = 0
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.observed.ndim != 2 or self.observed.shape[1] != 4:
            raise ValueError("observed must be tau x 4")
        if self.future.ndim != 2 or self.future.shape[1] != 4:
            raise ValueError("future must be rho x 4")

    @property
    def tau(self) -> int:
        return self.observed.shape[0]

    @property
    def rho(self) -> int:
        return self.future.shape[0]

    @property
    def is_normalized(self) -> bool:
        return not self.norm_transform.is_identity

    def future_pixels(self) -> np.ndarray:
        return self.norm_transform.to_pixels(self.future)

    def observed_pixels(self) -> np.ndarray:
        return self.norm_transform.to_pixels(self.observed)


@dataclass
class TrajectoryBatch:
    """Windows sharing one (tau, rho) geometry."""

    windows: list[TrajectoryWindow]

    def __post_init__(self):
        if not self.windows:
            raise ValueError("a batch needs at least one window")
        tau, rho = self.windows[0].tau, self.windows[0].rho
        for w in self.windows:
            if (w.tau, w.rho) != (tau, rho):
                raise ValueError("all windows in a batch must share (tau, rho)")

    @property
    def n(self) -> int:
        return len(self.windows)

    @property
    def tau(self) -> int:
        return self.windows[0].tau

    @property
    def rho(self) -> int:
        return self.windows[0].rho

    def observed_array(self) -> np.ndarray:
        return np.stack([w.observed for w in self.windows])

    def future_array(self) -> np.ndarray:
        return np.stack([w.future for w in self.windows])


@dataclass(frozen=True)
class StageGoalTargets:
    """Supervision waypoints: row j is the future box at step offset times[j]."""

    k: int
    goals: np.ndarray
    times: tuple[int, ...]


@dataclass(frozen=True)
class SplitSpec:
    """Video-granular train/test/val split ratios plus the shuffle seed."""

    train_ratio: float = 0.5
    test_ratio: float = 0.4
    val_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.train_ratio + self.test_ratio + self.val_ratio
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1.0, got {total}")
        if min(self.train_ratio, self.test_ratio, self.val_ratio) < 0:
            raise ValueError("split ratios must be nonnegative")


# ---------------------------------------------------------------------------
# Loading and serialization


def load_tracks(path: str | Path, format: str = "jsonl") -> list[Track]:
    """Load annotation tracks from ``path`` in one of TRACK_FORMATS.

    Frame gaps are preserved untouched; windowing later refuses to span them.
    Raises ParseError on malformed records and EmptyDatasetError when the
    source yields no tracks.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation path does not exist: {path}")
    if format == "jsonl":
        tracks = _load_jsonl(path)
    elif format == "jaad-xml":
        tracks = _load_cvat_dir(path, pattern="*.xml", video_id_fn=lambda p: p.stem)
    elif format == "pie":
        tracks = _load_cvat_dir(path, pattern="*.xml", video_id_fn=_pie_video_id(path))
    else:
        raise ConfigurationError(f"unknown track format {format!r}; expected one of {TRACK_FORMATS}")
    if not tracks:
        raise EmptyDatasetError(f"no tracks found in {path} (format={format})")
    return tracks


def _load_jsonl(path: Path) -> list[Track]:
    by_key: dict[tuple[str, str], list[tuple[int, BoundingBox]]] = {}
    fps_by_key: dict[tuple[str, str], float] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["video_id"]), str(rec["track_id"]))
                frame = int(rec["frame"])
                box = BoundingBox(float(rec["cx"]), float(rec["cy"]), float(rec["w"]), float(rec["h"]))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad record: {exc}") from exc
            by_key.setdefault(key, []).append((frame, box))
            if "fps" in rec:
                fps_by_key[key] = float(rec["fps"])
    tracks = []
    for (video_id, track_id), rows in sorted(by_key.items()):
        rows.sort(key=lambda fb: fb[0])
        frames = [f for f, _ in rows]
        if len(set(frames)) != len(frames):
            raise ParseError(f"{path}: track {video_id}/{track_id} has duplicate frames")
        tracks.append(
            Track(
                track_id=track_id,
                video_id=video_id,
                frames=frames,
                boxes=[b for _, b in rows],
                fps=fps_by_key.get((video_id, track_id), DEFAULT_FPS),
            )
        )
    return tracks


def _pie_video_id(root: Path):
    def fn(p: Path) -> str:
        rel = p.relative_to(root) if p != root else Path(p.name)
        stem = str(rel.with_suffix("")).replace("/", "_")
        return stem.removesuffix("_annt")

    return fn


def _load_cvat_dir(path: Path, pattern: str, video_id_fn) -> list[Track]:
    files = sorted(path.rglob(pattern)) if path.is_dir() else [path]
    tracks: list[Track] = []
    for f in files:
        tracks.extend(_parse_cvat_xml(f, video_id_fn(f)))
    return tracks


def _parse_cvat_xml(path: Path, video_id: str) -> list[Track]:
    """Parse one CVAT-style annotation XML (the JAAD/PIE layout)."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ParseError(f"{path}: invalid XML: {exc}") from exc
    tracks = []
    for idx, tr in enumerate(root.findall("./track")):
        label = tr.get("label", "")
        if label and "ped" not in label.lower():
            continue
        frames: list[int] = []
        boxes: list[BoundingBox] = []
        ped_id = tr.get("id", str(idx))
        for b in tr.findall("./box"):
            id_attr = b.find('./attribute[@name="id"]')
            if id_attr is not None and id_attr.text:
                ped_id = id_attr.text
            if b.get("outside") == "1":
                continue
            try:
                frame = int(b.get("frame"))
                xtl, ytl = float(b.get("xtl")), float(b.get("ytl"))
                xbr, ybr = float(b.get("xbr")), float(b.get("ybr"))
                box = corners_to_cxcywh(xtl, ytl, xbr, ybr)
            except (TypeError, ValueError) as exc:
                raise ParseError(
                    f"{path}: track {ped_id!r} frame {b.get('frame')}: bad box: {exc}"
                ) from exc
            frames.append(frame)
            boxes.append(box)
        if not frames:
            continue
        order = np.argsort(frames, kind="stable")
        frames = [frames[i] for i in order]
        boxes = [boxes[i] for i in order]
        if len(set(frames)) != len(frames):
            raise ParseError(f"{path}: track {ped_id!r} has duplicate frames")
        tracks.append(Track(track_id=ped_id, video_id=video_id, frames=frames, boxes=boxes))
    return tracks


def write_tracks_jsonl(tracks: list[Track], path: str | Path) -> None:
    """Write tracks in the canonical JSONL interchange format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in sorted(tracks, key=lambda t: (t.video_id, t.track_id)):
            for frame, box in zip(t.frames, t.boxes):
                rec = {
                    "video_id": t.video_id,
                    "track_id": t.track_id,
                    "frame": frame,
                    "cx": box.cx,
                    "cy": box.cy,
                    "w": box.w,
                    "h": box.h,
                }
                if t.fps != DEFAULT_FPS:
                    rec["fps"] = t.fps
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Geometry


def cxcywh_to_corners(b: BoundingBox) -> tuple[float, float, float, float]:
    """(cx, cy, w, h) -> (x1, y1, x2, y2)."""
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def corners_to_cxcywh(x1: float, y1: float, x2: float, y2: float) -> BoundingBox:
    return BoundingBox(cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1)


def boxes_to_corners(boxes: np.ndarray) -> np.ndarray:
    """Vectorized corner form for (..., 4) cxcywh arrays."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half_w = boxes[..., 2] / 2
    half_h = boxes[..., 3] / 2
    return np.stack(
        [
            boxes[..., 0] - half_w,
            boxes[..., 1] - half_h,
            boxes[..., 0] + half_w,
            boxes[..., 1] + half_h,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Windowing and normalization


def window_tracks(
    tracks: list[Track], tau: int, rho: int, stride: int = 1
) -> list[TrajectoryWindow]:
    """Slide fixed (tau, rho) windows over every contiguous track segment.

    A contiguous segment of length L yields max(0, (L - tau - rho) // stride + 1)
    windows; windows never span frame gaps. Short tracks yield zero windows.
    """
    if tau < 1 or rho < 1 or stride < 1:
        raise ConfigurationError(f"tau, rho, stride must all be >= 1 (got {tau}, {rho}, {stride})")
    windows = []
    for track in tracks:
        for seg in track.contiguous_segments():
            arr = seg.as_array()
            span = tau + rho
            for start in range(0, len(seg) - span + 1, stride):
                anchor_idx = start + tau - 1
                windows.append(
                    TrajectoryWindow(
                        observed=arr[start : start + tau].copy(),
                        future=arr[start + tau : start + span].copy(),
                        anchor=seg.boxes[anchor_idx],
                        video_id=seg.video_id,
                        track_id=seg.track_id,
                        anchor_frame=seg.frames[anchor_idx],
                        fps=seg.fps,
                    )
                )
    return windows


def normalize_window(w: TrajectoryWindow, image_w: float, image_h: float) -> TrajectoryWindow:
    """Express a pixel window as offsets from the anchor box, scaled by image size.

    Every coordinate channel becomes (value - anchor_channel) / image_dim, which
    puts in-frame motion roughly in [-1, 1] and makes the representation
    translation-invariant. The returned window's transform inverts the map.
    """
    if image_w <= 0 or image_h <= 0:
        raise ConfigurationError("image dimensions must be positive")
    if w.is_normalized:
        raise ConfigurationError("window is already normalized")
    transform = NormTransform(
        scale=np.array([image_w, image_h, image_w, image_h], dtype=np.float64),
        offset=w.anchor.as_array(),
    )
    return TrajectoryWindow(
        observed=transform.to_normalized(w.observed),
        future=transform.to_normalized(w.future),
        anchor=w.anchor,
        norm_transform=transform,
        video_id=w.video_id,
        track_id=w.track_id,
        anchor_frame=w.anchor_frame,
        fps=w.fps,
    )


def denormalize_window(w: TrajectoryWindow) -> TrajectoryWindow:
    """Invert normalize_window, restoring pixel coordinates."""
    return TrajectoryWindow(
        observed=w.norm_transform.to_pixels(w.observed),
        future=w.norm_transform.to_pixels(w.future),
        anchor=w.anchor,
        norm_transform=NormTransform.identity(),
        video_id=w.video_id,
        track_id=w.track_id,
        anchor_frame=w.anchor_frame,
        fps=w.fps,
    )


def stage_times(rho: int, k: int) -> tuple[int, ...]:
    """Step offsets (j+1) * rho / k for j = 0..k-1; requires k to divide rho."""
    if not 1 <= k <= rho:
        raise ConfigurationError(f"stage count k={k} must lie in [1, rho={rho}]")
    if rho % k != 0:
        raise ConfigurationError(f"stage count k={k} must divide rho={rho}")
    step = rho // k
    return tuple(step * (j + 1) for j in range(k))


def stage_goal_targets(future: np.ndarray, k: int) -> StageGoalTargets:
    """Pick the k stage-goal supervision rows out of a rho x 4 future matrix."""
    future = np.asarray(future, dtype=np.float64)
    rho = future.shape[0]
    times = stage_times(rho, k)
    goals = future[np.array(times) - 1].copy()
    return StageGoalTargets(k=k, goals=goals, times=times)


# ---------------------------------------------------------------------------
# Splits


def split_dataset(
    tracks: list[Track], spec: SplitSpec = SplitSpec()
) -> tuple[list[Track], list[Track], list[Track]]:
    """Partition tracks into (train, test, val) at video granularity.

    All tracks of one video land in the same split, preventing leakage of
    overlapping windows. Deterministic given spec.seed.
    """
    videos = sorted({t.video_id for t in tracks})
    n_splits = sum(1 for r in (spec.train_ratio, spec.test_ratio, spec.val_ratio) if r > 0)
    if len(videos) < n_splits:
        raise ConfigurationError(f"{len(videos)} video(s) cannot fill {n_splits} splits")
    rng = random.Random(spec.seed)
    rng.shuffle(videos)
    n = len(videos)
    cut1 = round(n * spec.train_ratio)
    cut2 = round(n * (spec.train_ratio + spec.test_ratio))
    assignment = {
        "train": set(videos[:cut1]),
        "test": set(videos[cut1:cut2]),
        "val": set(videos[cut2:]),
    }
    for name, ratio in (("train", spec.train_ratio), ("test", spec.test_ratio), ("val", spec.val_ratio)):
        if ratio > 0 and not assignment[name]:
            raise ConfigurationError(f"split {name!r} (ratio {ratio}) received no videos")
    by_split = tuple(
        [t for t in tracks if t.video_id in assignment[name]] for name in ("train", "test", "val")
    )
    return by_split


def split_manifest(tracks: list[Track], spec: SplitSpec = SplitSpec()) -> dict:
    """JSON-ready manifest listing video ids per split plus the seed."""
    train, test, val = split_dataset(tracks, spec)
    return {
        "seed": spec.seed,
        "ratios": {"train": spec.train_ratio, "test": spec.test_ratio, "val": spec.val_ratio},
        "videos": {
            "train": sorted({t.video_id for t in train}),
            "test": sorted({t.video_id for t in test}),
            "val": sorted({t.video_id for t in val}),
        },
    }


def apply_split_manifest(tracks: list[Track], manifest: dict) -> dict[str, list[Track]]:
    videos = manifest["videos"]
    return {
        name: [t for t in tracks if t.video_id in set(videos[name])]
        for name in ("train", "test", "val")
    }


# ---------------------------------------------------------------------------
# Synthetic verification corpus

SYNTHETIC_MOTIONS = ("constant-velocity", "turn", "stop-go")


def generate_synthetic(
    n_tracks: int,
    length: int,
    motion: str = "constant-velocity",
    noise_sigma: float = 0.0,
    seed: int = 0,
    *,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
    speed_range: tuple[float, float] = (2.0, 6.0),
    turn_angle_deg: float = 90.0,
    dwell_fraction: float = 0.2,
    fps: float = DEFAULT_FPS,
) -> list[Track]:
    """Generate a deterministic synthetic corpus for desk-scale verification.

    Each track is one video. ``turn`` rotates the heading by turn_angle_deg at
    the track midpoint; ``stop-go`` inserts a zero-velocity dwell around the
    midpoint. Gaussian pixel noise is added i.i.d. per coordinate.
    """
    if motion not in SYNTHETIC_MOTIONS:
        raise ConfigurationError(f"unknown motion {motion!r}; expected one of {SYNTHETIC_MOTIONS}")
    if length < 2:
        raise ConfigurationError("length must be at least 2")
    rng = np.random.default_rng(seed)
    img_w, img_h = image_size
    tracks = []
    for i in range(n_tracks):
        start = np.array(
            [rng.uniform(0.25 * img_w, 0.75 * img_w), rng.uniform(0.3 * img_h, 0.7 * img_h)]
        )
        heading = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(*speed_range)
        w = rng.uniform(20.0, 60.0)
        h = rng.uniform(50.0, 120.0)
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        velocities = np.tile(vel, (length, 1))
        mid = length // 2
        if motion == "turn":
            a = math.radians(turn_angle_deg)
            rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
            velocities[mid:] = velocities[mid:] @ rot.T
        elif motion == "stop-go":
            dwell = max(1, int(round(dwell_fraction * length)))
            lo = max(0, mid - dwell // 2)
            velocities[lo : lo + dwell] = 0.0
        centers = start + np.vstack([np.zeros(2), np.cumsum(velocities[:-1], axis=0)])
        coords = np.column_stack([centers, np.full(length, w), np.full(length, h)])
        if noise_sigma > 0:
            coords = coords + rng.normal(0.0, noise_sigma, size=coords.shape)
            coords[:, 2:] = np.maximum(coords[:, 2:], 1.0)
        tracks.append(
            Track(
                track_id="ped_0000",
                video_id=f"synth_{i:04d}",
                frames=list(range(length)),
                boxes=[BoundingBox(*row) for row in coords],
                fps=fps,
            )
        )
    return tracks
