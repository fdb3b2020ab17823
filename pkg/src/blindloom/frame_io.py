"""Frame sequence I/O, crops, and the raw tensor container.

Frames live in memory as real values on the [0, 255] scale, shaped
(frames, channels, height, width).  On disk they are binary PGM (P5,
one channel) or PPM (P6, three channels) with maxval 255, named
frame_00000.pgm, frame_00001.pgm, ...  Intermediate tensors (flow
fields, masks, weight maps) use the "BLTT1" container: magic, four
little-endian u32 extents, then row-major little-endian float32 data.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"BLTT1"
FRAME_PATTERN = "frame_%05d"


@dataclass
class FrameSequence:
    """Ordered stack of frames, values on the [0, 255] scale."""

    frames: np.ndarray            # (T, C, H, W)
    frame_rate: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(
                f"FrameSequence expects (T, C, H, W), got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def channels(self):
        return self.frames.shape[1]

    @property
    def height(self):
        return self.frames.shape[2]

    @property
    def width(self):
        return self.frames.shape[3]

    def frame(self, i):
        return self.frames[i]

    def copy(self):
        return FrameSequence(self.frames.copy(), self.frame_rate)


@dataclass
class CropWindow:
    """Axis-aligned square window, must lie fully inside the frame."""

    top: int
    left: int
    size: int = 96

    def check(self, height, width):
        if (self.top < 0 or self.left < 0 or self.size <= 0
                or self.top + self.size > height
                or self.left + self.size > width):
            raise ValueError(
                f"crop window {self} out of bounds for {height}x{width} frame")


def quantize_u8(values):
    """Clamp to [0, 255] and round half away from zero to uint8."""
    clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 255.0)
    return np.floor(clipped + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_pnm(path):
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"(\s*(#[^\n]*\n)?)*([^\s#]+)", data[pos:])
        if not m:
            raise ValueError(f"{path}: malformed PNM header")
        tokens.append(m.group(3))
        pos += m.end()
    magic, width, height, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    payload = data[pos + 1:pos + 1 + width * height * channels]
    if len(payload) != width * height * channels:
        raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return img.transpose(2, 0, 1).astype(np.float64)


def _write_pnm(path, frame_u8):
    channels, height, width = frame_u8.shape
    if channels == 1:
        magic = b"P5"
    elif channels == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write {channels}-channel frame as PNM")
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    Path(path).write_bytes(header + frame_u8.transpose(1, 2, 0).tobytes())


def load_sequence(directory, pattern="frame_*.p?m"):
    """Load all frames matching pattern (lexicographic order) from a directory."""
    paths = sorted(Path(directory).glob(pattern))
    if len(paths) < 2:
        raise ValueError(
            f"{directory}: found {len(paths)} frames matching '{pattern}'; "
            "a temporal method needs at least 2")
    frames = [_read_pnm(p) for p in paths]
    shape = frames[0].shape
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise ValueError(
                f"{p}: frame shape {f.shape} differs from first frame {shape}")
    return FrameSequence(np.stack(frames))


def save_sequence(seq, directory):
    """Write frames as binary PGM/PPM, quantized to 8 bits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not np.all(np.isfinite(seq.frames)):
        raise ValueError("save_sequence: non-finite frame values")
    ext = "pgm" if seq.channels == 1 else "ppm"
    for i in range(len(seq)):
        name = (FRAME_PATTERN % i) + "." + ext
        _write_pnm(directory / name, quantize_u8(seq.frame(i)))


# ---------------------------------------------------------------------------
# cropping


def crop(obj, window: CropWindow):
    """Crop a FrameSequence or an array over its trailing two axes."""
    if isinstance(obj, FrameSequence):
        window.check(obj.height, obj.width)
        return FrameSequence(crop(obj.frames, window), obj.frame_rate)
    arr = np.asarray(obj)
    window.check(arr.shape[-2], arr.shape[-1])
    sl = (Ellipsis,
          slice(window.top, window.top + window.size),
          slice(window.left, window.left + window.size))
    return arr[sl]


def crop_flow(flow, window: CropWindow):
    """Crop an (H, W, 2) flow field with the same window semantics."""
    window.check(flow.shape[0], flow.shape[1])
    return flow[window.top:window.top + window.size,
                window.left:window.left + window.size, :]


# ---------------------------------------------------------------------------
# raw tensor container ("BLTT1")


def write_tensor(path, tensor):
    """Write an array (up to 4 axes) as magic + 4 u32 extents + f32 data."""
    arr = np.asarray(tensor, dtype="<f4")
    if arr.ndim > 4:
        raise ValueError(f"write_tensor: at most 4 axes, got {arr.ndim}")
    ext = (1,) * (4 - arr.ndim) + arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC_TENSOR)
        fh.write(struct.pack("<4I", *ext))
        fh.write(arr.tobytes())


def read_tensor(path):
    """Read a "BLTT1" file; returns a 4-axis float32 array."""
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC_TENSOR:
        raise ValueError(f"{path}: bad magic {blob[:5]!r}, expected BLTT1")
    if len(blob) < 5 + 16:
        raise ValueError(f"{path}: truncated header")
    ext = struct.unpack_from("<4I", blob, 5)
    count = int(np.prod(ext))
    if len(blob) != 5 + 16 + count * 4:
        raise ValueError(
            f"{path}: payload is {len(blob) - 21} bytes, "
            f"extents {ext} require {count * 4}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=21)
    return arr.reshape(tuple(int(e) for e in ext)).copy()
