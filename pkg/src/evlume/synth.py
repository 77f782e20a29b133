"""Procedural paired-video generation and the on-disk dataset format.

A scene is a set of anti-aliased shapes drifting over a textured background;
the normal-light render is degraded to a low-light counterpart, and events are
simulated from the low-light frames (matching a sensor that records in the
dark). Samples are persisted as per-frame 8-bit PNGs, an EVST event binary,
a timestamps JSON, and a manifest JSON tying everything together.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .events import EventStream, simulate_events

MANIFEST_VERSION = 1
TEXTURES = ("flat", "gradient", "noise")


@dataclass
class SceneConfig:
    """Parameters of one procedural scene."""

    width: int = 64
    height: int = 64
    frames: int = 16
    fps: float = 30.0
    num_shapes: int = 3
    texture: str = "gradient"
    seed: int = 0

    def __post_init__(self):
        if min(self.width, self.height) < 32:
            raise ValueError("resolution must be at least 32 pixels")
        if self.frames < 4:
            raise ValueError("need at least 4 frames")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class DegradeConfig:
    """Low-light degradation: attenuation, gamma, and a Poisson-Gaussian
    noise stand-in (shot noise approximated by signal-dependent Gaussian)."""

    scale: float = 0.125  # ND8-style 1/8 attenuation
    gamma: float = 2.0
    read_noise: float = 0.02
    shot_gain: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.scale <= 1.0:
            raise ValueError("scale must be in (0, 1]")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")
        if self.read_noise < 0 or self.shot_gain < 0:
            raise ValueError("noise parameters must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeConfig":
        return cls(**d)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    base = rng.uniform(0.25, 0.75, size=3)
    if cfg.texture == "flat":
        bg = np.broadcast_to(base, (h, w, 3)).copy()
    elif cfg.texture == "gradient":
        yy, xx = np.mgrid[0:h, 0:w]
        direction = rng.uniform(-1.0, 1.0, size=2)
        ramp = (direction[0] * yy / h + direction[1] * xx / w)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9) - 0.5
        bg = base[None, None, :] + 0.4 * ramp[:, :, None]
    else:  # noise: smoothed random field
        field_ = rng.normal(0.0, 1.0, size=(h, w))
        kernel = np.ones(7) / 7.0
        for axis in (0, 1):
            field_ = np.apply_along_axis(
                lambda v: np.convolve(v, kernel, mode="same"), axis, field_)
        bg = base[None, None, :] + 0.3 * field_[:, :, None]
    return np.clip(bg, 0.0, 1.0)


def _shape_alpha(kind: str, cy, cx, size, yy, xx) -> np.ndarray:
    """Anti-aliased coverage from a signed distance to the shape boundary."""
    if kind == "circle":
        dist = np.hypot(yy - cy, xx - cx) - size
    else:  # box
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - size
    return np.clip(0.5 - dist, 0.0, 1.0)


def generate_scene(cfg: SceneConfig):
    """Render a scene -> (frames (T, H, W, 3) float32 in [0, 1], timestamps us).

    Shapes follow linear motion with a sinusoidal drift; identical configs
    produce identical output.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    bg = _background(cfg, rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    shapes = []
    for _ in range(cfg.num_shapes):
        shapes.append({
            "kind": rng.choice(["circle", "box"]),
            "color": rng.uniform(0.2, 0.95, size=3),
            "size": rng.uniform(0.08, 0.2) * min(h, w),
            "pos": rng.uniform([0.2 * h, 0.2 * w], [0.8 * h, 0.8 * w]),
            "vel": rng.uniform(-1.5, 1.5, size=2) * min(h, w) / 64.0,
            "amp": rng.uniform(0.0, 3.0, size=2),
            "freq": rng.uniform(0.1, 0.5, size=2),
            "phase": rng.uniform(0.0, 2 * np.pi, size=2),
        })

    frames = np.empty((cfg.frames, h, w, 3), dtype=np.float32)
    for t in range(cfg.frames):
        canvas = bg.copy()
        for s in shapes:
            drift = s["amp"] * np.sin(s["freq"] * t + s["phase"])
            cy, cx = s["pos"] + s["vel"] * t + drift
            alpha = _shape_alpha(s["kind"], cy, cx, s["size"], yy, xx)
            canvas = canvas * (1.0 - alpha[:, :, None]) + s["color"] * alpha[:, :, None]
        frames[t] = np.clip(canvas, 0.0, 1.0)

    timestamps = np.round(np.arange(cfg.frames) * 1e6 / cfg.fps).astype(np.int64)
    return frames, timestamps


def degrade(frames: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    """Low-light version: clamp(s * I^gamma + shot + read noise, 0, 1)."""
    frames = np.asarray(frames, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    signal = cfg.scale * frames ** cfg.gamma
    out = signal.copy()
    if cfg.shot_gain > 0:
        out = out + np.sqrt(cfg.shot_gain * signal) * rng.standard_normal(frames.shape)
    if cfg.read_noise > 0:
        out = out + cfg.read_noise * rng.standard_normal(frames.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------
# image and dataset I/O
# ----------------------------------------------------------------------
def save_image(path, img: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as an 8-bit PNG."""
    data = np.clip(np.asarray(img) * 255.0, 0, 255).round().astype(np.uint8)
    PILImage.fromarray(data).save(path)


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_gray16(path, img: np.ndarray) -> None:
    """Save an (H, W) float map in [0, 1] as a 16-bit grayscale PNG."""
    data = np.clip(np.asarray(img) * 65535.0, 0, 65535).round().astype(np.uint16)
    PILImage.fromarray(data).save(path)


def save_frames(directory, frames: np.ndarray) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = directory / f"frame_{i:04d}.png"
        save_image(p, frame)
        paths.append(p)
    return paths


def load_frames(directory) -> np.ndarray:
    paths = sorted(Path(directory).glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    return np.stack([load_image(p) for p in paths])


@dataclass
class PairedSample:
    """Paths (relative to the manifest directory) of one paired sequence."""

    sample_id: str
    split: str
    normal_dir: str
    low_dir: str
    events_path: str
    timestamps_path: str
    width: int
    height: int
    frame_count: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Manifest:
    root: Path
    samples: list
    metadata: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        payload = {
            "format_version": MANIFEST_VERSION,
            "metadata": self.metadata,
            "samples": [s.to_dict() for s in self.samples],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format_version") != MANIFEST_VERSION:
            raise ValueError("unsupported manifest version")
        samples = [PairedSample(**d) for d in payload["samples"]]
        return cls(path.parent, samples, payload.get("metadata", {}))


@dataclass
class SampleData:
    normal: np.ndarray      # (T, H, W, 3) float32
    low: np.ndarray
    timestamps: np.ndarray  # (T,) int64 microseconds
    events: EventStream


def load_sample(manifest: Manifest, sample: PairedSample) -> SampleData:
    root = Path(manifest.root)
    normal = load_frames(root / sample.normal_dir)
    low = load_frames(root / sample.low_dir)
    with open(root / sample.timestamps_path, "r", encoding="utf-8") as fh:
        timestamps = np.asarray(json.load(fh), dtype=np.int64)
    events = EventStream.load(root / sample.events_path)
    if normal.shape != low.shape or normal.shape[0] != timestamps.shape[0]:
        raise ValueError(f"inconsistent sample {sample.sample_id}")
    return SampleData(normal, low, timestamps, events)


def make_dataset(scene_cfgs, degrade_cfg: DegradeConfig, out_dir,
                 event_threshold: float = 0.2, noise_rate: float = 0.0,
                 events_from: str = "low", test_fraction: float = 0.2) -> Manifest:
    """Generate scenes, degrade them, simulate events, and persist everything.

    Events are simulated from the frames as stored on disk (post PNG
    quantization) so that loaders see data consistent with the event stream.
    The last round(n * test_fraction) scenes are tagged as the test split.
    """
    if not scene_cfgs:
        raise ValueError("need at least one scene")
    if events_from not in ("low", "normal"):
        raise ValueError("events_from must be 'low' or 'normal'")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = len(scene_cfgs)
    n_test = min(int(round(n * test_fraction)), n - 1) if n > 1 else 0

    samples = []
    for idx, scene_cfg in enumerate(scene_cfgs):
        sample_id = f"scene_{idx:03d}"
        sample_dir = out_dir / sample_id
        frames, timestamps = generate_scene(scene_cfg)
        per_scene = dataclasses.replace(degrade_cfg, seed=degrade_cfg.seed + idx)
        low = degrade(frames, per_scene)

        save_frames(sample_dir / "normal", frames)
        save_frames(sample_dir / "low", low)
        # re-read the quantized frames so events match what loaders will see
        stored = load_frames(sample_dir / ("low" if events_from == "low" else "normal"))
        events = simulate_events(stored, timestamps, threshold=event_threshold,
                                 noise_rate=noise_rate, seed=scene_cfg.seed)
        events.save(sample_dir / "events.evst")
        with open(sample_dir / "timestamps.json", "w", encoding="utf-8") as fh:
            json.dump([int(t) for t in timestamps], fh)

        samples.append(PairedSample(
            sample_id=sample_id,
            split="test" if idx >= n - n_test else "train",
            normal_dir=f"{sample_id}/normal",
            low_dir=f"{sample_id}/low",
            events_path=f"{sample_id}/events.evst",
            timestamps_path=f"{sample_id}/timestamps.json",
            width=scene_cfg.width,
            height=scene_cfg.height,
            frame_count=scene_cfg.frames,
        ))

    manifest = Manifest(out_dir, samples, metadata={
        "degrade": degrade_cfg.to_dict(),
        "event_threshold": event_threshold,
        "event_noise_rate": noise_rate,
        "events_from": events_from,
        "noise_model": "poisson-gaussian stand-in",
        "scenes": [c.to_dict() for c in scene_cfgs],
    })
    manifest.save()
    return manifest


def load_external_sequence(directory):
    """Minimal loader for a bare directory of frames (plus optional events).

    Expects frame_*.png files; reads events.evst and timestamps.json when
    present. Returns (frames, timestamps or None, EventStream or None).
    Untested against any published dataset layout.
    """
    directory = Path(directory)
    frames = load_frames(directory)
    timestamps = None
    ts_path = directory / "timestamps.json"
    if ts_path.exists():
        with open(ts_path, "r", encoding="utf-8") as fh:
            timestamps = np.asarray(json.load(fh), dtype=np.int64)
    events = None
    ev_path = directory / "events.evst"
    if ev_path.exists():
        events = EventStream.load(ev_path)
    return frames, timestamps, events
