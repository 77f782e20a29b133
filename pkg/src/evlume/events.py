"""Event-camera data model: streams, voxel grids, and a frame-driven simulator.

Conventions used throughout the package: timestamps are integer microseconds
(DAVIS-style), polarity is +1/-1, and pixel coordinates satisfy 0 <= x < width,
0 <= y < height. An :class:`EventStream` keeps its events sorted by timestamp
and stores them columnar for speed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

EVST_MAGIC = b"EVST"
EVST_VERSION = 1
# magic, version, width, height, count -- little-endian, packed
_EVST_HEADER = struct.Struct("<4sHHHQ")
_EVST_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

# Offset inside log() so zero-intensity pixels stay finite.
LOG_EPS = 1e-3
# Relative slack so a step of exactly k*threshold emits k events despite
# float rounding of the log difference.
_COUNT_GUARD = 1e-9

DEFAULT_BINS = 32
DEFAULT_THRESHOLD = 0.2


@dataclass(frozen=True)
class Event:
    """A single polarity event: microsecond timestamp, pixel, sign."""

    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Sorted polarity events plus sensor geometry.

    Columns are numpy arrays: ``t`` uint64 microseconds (non-decreasing),
    ``x``/``y`` uint16 pixel coordinates, ``p`` int8 in {-1, +1}.
    """

    def __init__(self, t, x, y, p, width: int, height: int):
        t = np.asarray(t, dtype=np.uint64)
        x = np.asarray(x, dtype=np.uint16)
        y = np.asarray(y, dtype=np.uint16)
        p = np.asarray(p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise ValueError("event columns must be 1-D arrays of equal length")
        if width <= 0 or height <= 0:
            raise ValueError("sensor dimensions must be positive")
        if t.size:
            if np.any(np.diff(t.astype(np.int64)) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if int(x.max()) >= width or int(y.max()) >= height:
                raise ValueError("event coordinates outside sensor bounds")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be +1 or -1")
        self.t = t
        self.x = x
        self.y = y
        self.p = p
        self.width = int(width)
        self.height = int(height)

    def __len__(self) -> int:
        return int(self.t.size)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def polarity_sum(self) -> int:
        return int(self.p.astype(np.int64).sum())

    def slice_time(self, t0: int, t1: int) -> "EventStream":
        """Events with t0 <= t <= t1 (endpoints included)."""
        sel = (self.t >= np.uint64(t0)) & (self.t <= np.uint64(t1))
        return EventStream(self.t[sel], self.x[sel], self.y[sel], self.p[sel],
                           self.width, self.height)

    # ------------------------------------------------------------------
    # binary EVST format
    # ------------------------------------------------------------------
    def save(self, path) -> None:
        """Write the stream as little-endian EVST records."""
        records = np.empty(len(self), dtype=_EVST_RECORD)
        records["t"] = self.t
        records["x"] = self.x
        records["y"] = self.y
        records["p"] = self.p
        header = _EVST_HEADER.pack(EVST_MAGIC, EVST_VERSION,
                                   self.width, self.height, len(self))
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())

    @classmethod
    def load(cls, path) -> "EventStream":
        with open(path, "rb") as fh:
            raw = fh.read(_EVST_HEADER.size)
            if len(raw) != _EVST_HEADER.size:
                raise ValueError(f"truncated EVST header in {path}")
            magic, version, width, height, count = _EVST_HEADER.unpack(raw)
            if magic != EVST_MAGIC:
                raise ValueError(f"bad magic {magic!r} in {path}")
            if version != EVST_VERSION:
                raise ValueError(f"unsupported EVST version {version}")
            records = np.frombuffer(fh.read(count * _EVST_RECORD.itemsize),
                                    dtype=_EVST_RECORD, count=count)
        return cls(records["t"], records["x"], records["y"], records["p"],
                   width, height)

    # ------------------------------------------------------------------
    # plain-text CSV (debugging aid)
    # ------------------------------------------------------------------
    @classmethod
    def from_csv(cls, path, width: int, height: int) -> "EventStream":
        """Read ``t,x,y,p`` lines; a non-numeric first line is treated as a header."""
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                try:
                    rows.append(tuple(int(float(v)) for v in parts[:4]))
                except ValueError:
                    if rows:
                        raise
                    continue  # header line
        if rows:
            arr = np.array(rows, dtype=np.int64)
            return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height)
        return cls([], [], [], [], width, height)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,x,y,p\n")
            for i in range(len(self)):
                fh.write(f"{int(self.t[i])},{int(self.x[i])},{int(self.y[i])},{int(self.p[i])}\n")


@dataclass
class VoxelGrid:
    """Temporal-bilinear rasterization of an event stream.

    ``data`` has shape (bins, height, width); values are raw polarity sums,
    not normalized (any normalization is a network-input concern).
    """

    data: np.ndarray
    t0: int
    t1: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 2:
            raise ValueError("voxel grid must be (bins, H, W) with bins >= 2")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("voxel grid contains non-finite values")
        if self.t1 <= self.t0:
            raise ValueError("voxel grid time range must be non-empty")

    @property
    def bins(self) -> int:
        return self.data.shape[0]


def build_voxel_grid(stream: EventStream, t0: int, t1: int,
                     bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Rasterize events in [t0, t1] into a (bins, H, W) voxel grid.

    Each event's normalized time t* = (bins-1)*(t-t0)/(t1-t0) splits its
    polarity between the two nearest bins with weights (1-frac, frac); an
    event exactly on a bin center contributes fully to that bin.
    """
    if t1 <= t0:
        raise ValueError("empty time range: t1 must exceed t0")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    sel = (stream.t >= np.uint64(max(t0, 0))) & (stream.t <= np.uint64(t1))
    if t0 < 0:
        sel = stream.t <= np.uint64(t1)  # all timestamps are unsigned
    if not sel.any():
        return VoxelGrid(grid, t0, t1)
    ts = stream.t[sel].astype(np.float64)
    xs = stream.x[sel].astype(np.intp)
    ys = stream.y[sel].astype(np.intp)
    ps = stream.p[sel].astype(np.float64)

    tstar = (bins - 1) * (ts - float(t0)) / (float(t1) - float(t0))
    k0 = np.floor(tstar)
    # w0 + w1 == 1.0 exactly in IEEE arithmetic by construction
    w0 = 1.0 - (tstar - k0)
    w1 = 1.0 - w0
    k0 = k0.astype(np.intp)
    k1 = k0 + 1

    np.add.at(grid, (k0, ys, xs), ps * w0)
    right = k1 < bins
    np.add.at(grid, (k1[right], ys[right], xs[right]), ps[right] * w1[right])
    return VoxelGrid(grid, t0, t1)


def _to_gray_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4 and frames.shape[-1] == 3:
        return frames @ np.array([0.299, 0.587, 0.114])
    if frames.ndim == 3:
        return frames
    raise ValueError("frames must be (T, H, W) or (T, H, W, 3)")


def simulate_events(frames: np.ndarray, timestamps, threshold: float = DEFAULT_THRESHOLD,
                    noise_rate: float = 0.0, seed: int = 0) -> EventStream:
    """Generate events from a frame sequence with a reference-crossing model.

    Per pixel, a reference log-intensity starts at log(I_0 + eps). Whenever a
    new frame moves the log intensity at least ``threshold`` away from the
    reference, floor(|delta|/threshold) events are emitted with polarity
    sign(delta) and timestamps linearly interpolated between the frame times
    (the i-th event at the i-th threshold crossing); the reference advances by
    the emitted multiple of threshold. Optional uniform background noise is
    added at ``noise_rate`` events/pixel/second with random polarity.

    Deterministic for identical inputs and seed. No refractory period.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    gray = _to_gray_frames(frames)
    if gray.shape[0] != timestamps.shape[0]:
        raise ValueError("frame count and timestamp count differ")
    if gray.shape[0] < 2:
        raise ValueError("need at least two frames")
    if np.any(np.diff(timestamps) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    if np.any(timestamps < 0):
        raise ValueError("timestamps must be non-negative")
    if threshold <= 0:
        raise ValueError("threshold must be positive")

    n_frames, height, width = gray.shape
    log_ref = np.log(gray[0] + LOG_EPS)

    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    for i in range(1, n_frames):
        t_prev = float(timestamps[i - 1])
        t_cur = float(timestamps[i])
        log_new = np.log(gray[i] + LOG_EPS)
        delta = log_new - log_ref
        mag = np.abs(delta)
        count = np.floor(mag / threshold + _COUNT_GUARD).astype(np.int64)
        fired = count > 0
        if fired.any():
            ys, xs = np.nonzero(fired)
            m = count[fired]
            sign = np.where(delta[fired] > 0, 1, -1).astype(np.int8)
            total = int(m.sum())
            # within-pixel crossing index 1..m
            k = np.arange(total, dtype=np.float64) - np.repeat(np.cumsum(m) - m, m) + 1.0
            frac = k * threshold / np.repeat(mag[fired], m)
            ev_t = np.floor(t_prev + frac * (t_cur - t_prev)).astype(np.int64)
            np.minimum(ev_t, int(t_cur), out=ev_t)
            chunks_t.append(ev_t)
            chunks_x.append(np.repeat(xs, m).astype(np.uint16))
            chunks_y.append(np.repeat(ys, m).astype(np.uint16))
            chunks_p.append(np.repeat(sign, m))
            log_ref[fired] += sign * m * threshold

    if noise_rate > 0:
        rng = np.random.default_rng(seed)
        duration_s = float(timestamps[-1] - timestamps[0]) / 1e6
        n_noise = int(rng.poisson(noise_rate * width * height * duration_s))
        if n_noise:
            chunks_t.append(rng.integers(timestamps[0], timestamps[-1],
                                         endpoint=True, size=n_noise))
            chunks_x.append(rng.integers(0, width, size=n_noise).astype(np.uint16))
            chunks_y.append(rng.integers(0, height, size=n_noise).astype(np.uint16))
            chunks_p.append(rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise))

    if not chunks_t:
        return EventStream([], [], [], [], width, height)
    t = np.concatenate(chunks_t)
    x = np.concatenate(chunks_x)
    y = np.concatenate(chunks_y)
    p = np.concatenate(chunks_p)
    order = np.argsort(t, kind="stable")
    return EventStream(t[order], x[order], y[order], p[order], width, height)
