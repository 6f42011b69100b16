"""Event stream parsing, temporal segmentation, and voxel-grid encoding.

On-disk formats
---------------
Event file (text, UTF-8)::

    # evsign-events v1 width=<u32> height=<u32>
    <t_us>,<x>,<y>,<p>          one event per line, p in {-1, 1}

Lines starting with '#' (after the header) and blank lines are ignored.

Voxel file (binary, little-endian): magic ``EVVG``, version u16 = 1, dims
P,B,H,W as u32, then P*B*H*W float32 values row-major (W fastest).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

VOXEL_MAGIC = b"EVVG"
VOXEL_VERSION = 1
_U32_MAX = 0xFFFFFFFF


class EventFormatError(ValueError):
    """Malformed event text file."""


class VoxelFormatError(ValueError):
    """Malformed EVVG container."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-sorted event records plus sensor geometry.

    Arrays are parallel; `t` is microseconds, non-decreasing. Polarity is
    exactly +-1.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event arrays must be parallel")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events must be sorted by timestamp")
            if self.t[0] < self.t_start or self.t[-1] > self.t_end:
                raise ValueError("events outside [t_start, t_end]")
            if np.any((self.x < 0) | (self.x >= self.width)):
                raise ValueError("x coordinate out of bounds")
            if np.any((self.y < 0) | (self.y >= self.height)):
                raise ValueError("y coordinate out of bounds")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +-1")

    def __len__(self) -> int:
        return len(self.t)

    def events(self) -> list[Event]:
        return [Event(int(t), int(x), int(y), int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.p)]

    @staticmethod
    def from_arrays(t, x, y, p, width: int, height: int) -> "EventStream":
        """Build a stream; out-of-order timestamps are stably sorted."""
        t = np.asarray(t, dtype=np.int64)
        x = np.asarray(x, dtype=np.int32)
        y = np.asarray(y, dtype=np.int32)
        p = np.asarray(p, dtype=np.int8)
        if len(t) and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        t_start = int(t[0]) if len(t) else 0
        t_end = int(t[-1]) if len(t) else 0
        return EventStream(t, x, y, p, width, height, t_start, t_end)


@dataclass(frozen=True)
class StreamSegment:
    """Events of one temporal window [t0, t1) of a clip."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t0: float
    t1: float

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class VoxelGrid:
    """Dense (P, B, H, W) tensor of bilinearly binned event polarity."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"voxel grid must be 4-D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("voxel grid contains non-finite values")

    @property
    def segments(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


# ----------------------------------------------------------------------
# text format


def parse_event_file(data: bytes | str) -> EventStream:
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    lines = text.splitlines()
    if not lines:
        raise EventFormatError("empty file: missing header")
    header = lines[0].strip()
    parts = header.split()
    if (len(parts) != 5 or parts[0] != "#" or parts[1] != "evsign-events"
            or parts[2] != "v1"):
        raise EventFormatError(f"bad header: {header!r}")
    dims = {}
    for part in parts[3:]:
        key, _, val = part.partition("=")
        dims[key] = val
    try:
        width = int(dims["width"])
        height = int(dims["height"])
    except (KeyError, ValueError) as exc:
        raise EventFormatError(f"bad header dimensions: {header!r}") from exc
    if not (0 < width <= _U32_MAX and 0 < height <= _U32_MAX):
        raise EventFormatError(f"header dimensions out of range: {header!r}")

    ts, xs, ys, ps = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise EventFormatError(f"line {lineno}: expected t,x,y,p: {line!r}")
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError as exc:
            raise EventFormatError(f"line {lineno}: non-integer field: {line!r}") from exc
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp")
        if not (0 <= x < width) or not (0 <= y < height):
            raise EventFormatError(f"line {lineno}: coordinate out of bounds")
        if p not in (-1, 1):
            raise EventFormatError(f"line {lineno}: polarity must be -1 or 1, got {p}")
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return EventStream.from_arrays(ts, xs, ys, ps, width, height)


def write_event_file(stream: EventStream) -> bytes:
    lines = [f"# evsign-events v1 width={stream.width} height={stream.height}"]
    for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        lines.append(f"{t},{x},{y},{p}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ----------------------------------------------------------------------
# segmentation and voxelization


def segment_stream(stream: EventStream, p_segments: int) -> list[StreamSegment]:
    """Split evenly into `p_segments` half-open windows of equal duration.

    Segment k covers [t_start + k*span/P, t_start + (k+1)*span/P); the last
    window is closed on the right. A zero-duration stream puts everything
    into segment 0.
    """
    if p_segments < 1:
        raise ValueError("segment count must be >= 1")
    span = stream.t_end - stream.t_start
    if span == 0:
        k = np.zeros(len(stream), dtype=np.int64)
    else:
        # exact integer arithmetic; t == t_end lands in the last segment
        k = (stream.t - stream.t_start) * p_segments // span
        k = np.minimum(k, p_segments - 1)
    segments = []
    for seg in range(p_segments):
        sel = k == seg
        t0 = stream.t_start + seg * span / p_segments
        t1 = stream.t_start + (seg + 1) * span / p_segments
        segments.append(StreamSegment(stream.t[sel], stream.x[sel],
                                      stream.y[sel], stream.p[sel], t0, t1))
    return segments


def voxelize_segment(t, x, y, p, bins: int, height: int, width: int,
                     t0: float, t1: float) -> np.ndarray:
    """Bilinearly deposit polarity into `bins` temporal bins.

    Normalized time t* = (B-1)(t - t0)/(t1 - t0); an event adds
    p * max(0, 1 - |b - t*|) to bin b at its pixel. A degenerate window
    (t1 == t0) maps everything to bin 0.
    """
    grid = np.zeros((bins, height, width), dtype=np.float32)
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    if len(t) == 0:
        return grid
    span = float(t1) - float(t0)
    if span == 0.0:
        tstar = np.zeros_like(t)
    else:
        tstar = (bins - 1) * (t - float(t0)) / span
    lo = np.floor(tstar).astype(np.int64)
    frac = tstar - lo
    flat = grid.ravel()
    for b, w in ((lo, (1.0 - frac) * p), (lo + 1, frac * p)):
        ok = (b >= 0) & (b < bins) & (np.abs(w) > 0)
        if np.any(ok):
            np.add.at(flat, (b[ok] * height + y[ok]) * width + x[ok],
                      w[ok].astype(np.float32))
    return grid


def encode_clip(stream: EventStream, p_segments: int, bins: int) -> VoxelGrid:
    """Segment then voxelize a full clip into a (P, B, H, W) grid."""
    parts = segment_stream(stream, p_segments)
    data = np.stack([
        voxelize_segment(s.t, s.x, s.y, s.p, bins, stream.height, stream.width,
                         s.t0, s.t1)
        for s in parts
    ])
    return VoxelGrid(data)


def segments_for_window(stream: EventStream, window_us: int) -> int:
    """Convenience: number of equal windows of at most `window_us` each."""
    if window_us <= 0:
        raise ValueError("window must be positive")
    span = stream.t_end - stream.t_start
    return max(1, -(-span // window_us))


# ----------------------------------------------------------------------
# EVVG container


def write_voxel(grid: VoxelGrid) -> bytes:
    dims = grid.data.shape
    if any(d > _U32_MAX for d in dims):
        raise VoxelFormatError(f"dimension overflow: {dims}")
    header = struct.pack("<4sH4I", VOXEL_MAGIC, VOXEL_VERSION, *dims)
    return header + grid.data.astype("<f4").tobytes()


def read_voxel(data: bytes) -> VoxelGrid:
    head_len = struct.calcsize("<4sH4I")
    if len(data) < head_len:
        raise VoxelFormatError("truncated header")
    magic, version, p, b, h, w = struct.unpack_from("<4sH4I", data)
    if magic != VOXEL_MAGIC:
        raise VoxelFormatError(f"bad magic: {magic!r}")
    if version != VOXEL_VERSION:
        raise VoxelFormatError(f"unsupported version: {version}")
    count = p * b * h * w
    payload = data[head_len:]
    if len(payload) != 4 * count:
        raise VoxelFormatError(
            f"payload length {len(payload)} != expected {4 * count}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return VoxelGrid(values.reshape(p, b, h, w))
