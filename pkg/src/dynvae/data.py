"""Frame sequences: binary formats, PGM import, masks, windows and synthetic processes.

Frames are stored flattened as an ``(N, H*W*C)`` float64 array in
row-major, channel-last order with values in [0, 1]. Masks use the same
layout with ``True`` marking an observed pixel.

File layouts (all integers little-endian)::

    DVSQ  magic "DVSQ" | u16 version | u32 N, H, W, C | N*H*W*C f32
    DVMK  magic "DVMK" | u16 version | u32 N, H, W, C | N*H*W*C u8 in {0, 1}
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import EmptySequenceError, FormatError, InsufficientDataError, UnsupportedFormatError, UsageError
from .dynamics import stationary_B
from .tensor import Prng

SEQ_MAGIC = b"DVSQ"
MASK_MAGIC = b"DVMK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


@dataclass
class SequenceData:
    frames: np.ndarray
    height: int
    width: int
    channels: int = 1
    mask: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        d = self.height * self.width * self.channels
        if self.frames.ndim != 2 or self.frames.shape[1] != d:
            raise UsageError(f"frames must have shape (N, {d}), got {self.frames.shape}")
        if self.frames.size and (not np.all(np.isfinite(self.frames)) or self.frames.min() < 0 or self.frames.max() > 1):
            raise UsageError("frame values must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.frames.shape:
                raise UsageError(f"mask shape {self.mask.shape} does not match frames {self.frames.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def frame_dim(self):
        return self.frames.shape[1]

    @property
    def shape(self):
        return (self.n_frames, self.height, self.width, self.channels)

    def images(self):
        return self.frames.reshape(self.shape)

    def with_mask(self, mask):
        return SequenceData(self.frames, self.height, self.width, self.channels, mask, dict(self.extras))

    def slice(self, start, stop):
        mask = None if self.mask is None else self.mask[start:stop]
        return SequenceData(self.frames[start:stop], self.height, self.width, self.channels, mask)


def normalize(frames):
    """Clip into [0, 1]; idempotent."""
    return np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)


# --- binary formats -------------------------------------------------------


def _write_header(fh, magic, n, h, w, c):
    fh.write(_HEADER.pack(magic, FORMAT_VERSION, n, h, w, c))


def _read_header(buf, magic):
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the header", len(buf))
    got, version, n, h, w, c = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return n, h, w, c


def save_seq(seq, path):
    path = Path(path)
    with open(path, "wb") as fh:
        _write_header(fh, SEQ_MAGIC, seq.n_frames, seq.height, seq.width, seq.channels)
        fh.write(seq.frames.astype("<f4").tobytes())


def load_seq(path, allow_empty=False):
    """Read a DVSQ file.

    A header announcing zero frames is a well-formed file, but loading it
    raises :class:`EmptySequenceError` unless ``allow_empty`` is set.
    """
    buf = Path(path).read_bytes()
    n, h, w, c = _read_header(buf, SEQ_MAGIC)
    if n == 0 and not allow_empty:
        raise EmptySequenceError("sequence has no frames", 6)
    if min(h, w, c) == 0:
        raise FormatError("zero frame extent", 10)
    count = n * h * w * c
    end = _HEADER.size + 4 * count
    if len(buf) < end:
        raise FormatError(f"truncated payload: expected {end} bytes, got {len(buf)}", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after payload", end)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data) | (data < 0) | (data > 1))
    if bad.size:
        raise FormatError("pixel value outside [0, 1]", _HEADER.size + 4 * int(bad[0]))
    return SequenceData(data.reshape(n, h * w * c), h, w, c)


def save_mask(mask, shape, path):
    """Write a boolean mask of shape ``(N, H*W*C)`` for frames of ``shape = (N, H, W, C)``."""
    n, h, w, c = shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, h * w * c):
        raise UsageError(f"mask shape {mask.shape} does not match {(n, h * w * c)}")
    with open(path, "wb") as fh:
        _write_header(fh, MASK_MAGIC, n, h, w, c)
        fh.write(mask.astype(np.uint8).tobytes())


def load_mask(path):
    """Read a DVMK file; returns ``(mask, (N, H, W, C))``."""
    buf = Path(path).read_bytes()
    n, h, w, c = _read_header(buf, MASK_MAGIC)
    count = n * h * w * c
    end = _HEADER.size + count
    if len(buf) < end:
        raise FormatError(f"truncated payload: expected {end} bytes, got {len(buf)}", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after payload", end)
    raw = np.frombuffer(buf, dtype=np.uint8, count=count, offset=_HEADER.size)
    bad = np.flatnonzero(raw > 1)
    if bad.size:
        raise FormatError("mask byte other than 0 or 1", _HEADER.size + int(bad[0]))
    return raw.astype(bool).reshape(n, h * w * c), (n, h, w, c)


# --- PGM ------------------------------------------------------------------


def _pgm_header(buf, name):
    """Parse ``P5 width height maxval``; returns ``(w, h, maxval, data_offset)``."""
    if buf[:2] == b"P2":
        raise UnsupportedFormatError(f"{name}: ASCII PGM (P2) is not supported", 0)
    if buf[:2] != b"P5":
        raise FormatError(f"{name}: not a binary PGM file", 0)
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(f"{name}: truncated header", pos)
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise FormatError(f"{name}: bad header token {token!r}", start)
        tokens.append(int(token))
    if pos >= len(buf):
        raise FormatError(f"{name}: truncated header", pos)
    w, h, maxval = tokens
    if not 0 < maxval < 65536 or w == 0 or h == 0:
        raise FormatError(f"{name}: bad dimensions or maxval", pos)
    return w, h, maxval, pos + 1  # one whitespace byte ends the header


def read_pgm(path):
    buf = Path(path).read_bytes()
    w, h, maxval, off = _pgm_header(buf, os.fspath(path))
    width = 1 if maxval < 256 else 2
    end = off + w * h * width
    if len(buf) < end:
        raise FormatError(f"{path}: truncated pixel data", len(buf))
    dtype = np.uint8 if width == 1 else ">u2"
    pixels = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).astype(np.float64)
    return np.clip(pixels / maxval, 0.0, 1.0).reshape(h, w)


def write_pgm(image, path, maxval=255):
    """Write a 2-D array in [0, 1] as an 8-bit P5 file."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    pixels = np.rint(np.clip(image, 0, 1) * maxval).astype(np.uint8 if maxval < 256 else ">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_pgm_dir(directory):
    """Load every ``*.pgm`` in ``directory`` (lexicographic order) as one grayscale sequence."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise EmptySequenceError(f"no .pgm files in {directory}")
    images = [read_pgm(p) for p in files]
    h, w = images[0].shape
    for p, img in zip(files, images):
        if img.shape != (h, w):
            raise FormatError(f"{p.name}: size {img.shape[1]}x{img.shape[0]} differs from {w}x{h}")
    return SequenceData(np.stack([img.ravel() for img in images]), h, w, 1)


# --- windows --------------------------------------------------------------


class Windows(NamedTuple):
    frames: np.ndarray  # (count, k, d)
    masks: np.ndarray | None


def make_windows(seq, k):
    """All runs of ``k`` succeeding frames, in order."""
    if seq.n_frames < k:
        raise InsufficientDataError(f"need at least {k} frames, got {seq.n_frames}")
    count = seq.n_frames - k + 1
    idx = np.arange(count)[:, None] + np.arange(k)[None, :]
    masks = None if seq.mask is None else seq.mask[idx]
    return Windows(seq.frames[idx], masks)


def make_pairs(seq):
    return make_windows(seq, 2)


def make_triples(seq):
    return make_windows(seq, 3)


# --- masks ----------------------------------------------------------------


def _rect_size(h, w, target):
    best = None
    aspect = h / w
    for rh in range(1, h + 1):
        for rw in (math.floor(target / rh), math.ceil(target / rh)):
            if not 1 <= rw <= w:
                continue
            key = (abs(rh * rw - target), abs(math.log((rh / rw) / aspect)))
            if best is None or key < best[0]:
                best = (key, rh, rw)
    return best[1], best[2]


def gen_mask(shape, kind="salt_pepper", p=0.5, fraction=0.5, seed=0):
    """Observation mask of shape ``(N, H*W*C)``, ``True`` = observed.

    ``salt_pepper`` hides each pixel of each frame independently with
    probability ``p``. ``rectangle`` hides one axis-aligned rectangle whose
    area is ``round(fraction * H * W)`` pixels (exactly, whenever that count
    factors within the frame), at a seeded position shared by all frames.
    """
    n, h, w, c = (int(v) for v in shape)
    rng = Prng(seed)
    if kind == "salt_pepper":
        if not 0.0 <= p <= 1.0:
            raise UsageError("salt_pepper probability must lie in [0, 1]")
        return rng.uniform((n, h * w * c)) >= p
    if kind == "rectangle":
        if not 0.0 <= fraction <= 1.0:
            raise UsageError("rectangle fraction must lie in [0, 1]")
        frame = np.ones((h, w, c), dtype=bool)
        target = int(round(fraction * h * w))
        if target > 0:
            rh, rw = _rect_size(h, w, target)
            top = int(rng.integers(h - rh + 1))
            left = int(rng.integers(w - rw + 1))
            frame[top : top + rh, left : left + rw, :] = False
        return np.broadcast_to(frame.ravel(), (n, h * w * c)).copy()
    raise UsageError(f"unknown mask kind {kind!r}")


# --- synthetic processes --------------------------------------------------

SYNTHETIC_KINDS = ("rotating_dot", "bouncing_bar", "linear_lds", "cyclic_glyphs")


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic process. Lengths in pixels are absolute."""

    kind: str
    resolution: int | tuple = 16  # side length, or (height, width) for linear_lds
    length: int = 100
    seed: int = 0
    angular_velocity: float = 0.5
    noise_scale: float = 0.0
    cycle_period: int = 5
    radius: float | None = None  # rotating_dot circle radius, default 0.3 * resolution
    blob_sigma: float | None = None  # default 0.1 * resolution
    bar_width: float | None = None  # default 0.15 * resolution
    velocity: float = 1.0  # bouncing_bar, pixels per frame
    latent_dim: int = 2  # linear_lds
    decay: float = 0.95  # linear_lds eigenvalue modulus
    pixel_scale: float = 0.1  # linear_lds per-pixel signal std

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise UsageError(f"kind: unknown synthetic kind {self.kind!r}")
        if isinstance(self.resolution, (list, tuple)):
            if len(self.resolution) != 2 or self.kind != "linear_lds":
                raise UsageError("resolution: a (height, width) pair is only accepted for linear_lds")
            self.resolution = tuple(int(v) for v in self.resolution)
            if min(self.resolution) < 1 or self.resolution[0] * self.resolution[1] < 4:
                raise UsageError("resolution: frames need at least 4 pixels")
        elif self.resolution < 4:
            raise UsageError("resolution: must be at least 4")
        if self.length < 3:
            raise UsageError("length: must be at least 3")
        if self.cycle_period < 1 or self.cycle_period > len(_DIGITS):
            raise UsageError(f"cycle_period: must lie in 1..{len(_DIGITS)}")
        if self.latent_dim < 1:
            raise UsageError("latent_dim: must be positive")
        if not 0.0 <= self.decay < 1.0:
            raise UsageError("decay: must lie in [0, 1)")
        if self.noise_scale < 0:
            raise UsageError("noise_scale: must be non-negative")

    @property
    def frame_size(self):
        if isinstance(self.resolution, tuple):
            return self.resolution
        return (self.resolution, self.resolution)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise UsageError(f"{key}: unknown synthetic-spec field")
        if "kind" not in doc:
            raise UsageError("kind: field is required")
        return cls(**doc)


def gen_synthetic(spec):
    """Generate a sequence; deterministic given ``spec.seed``.

    ``linear_lds`` stores its ground truth (``A``, ``B``, ``C``, ``y_bar``,
    ``states``, ``clipped``) in ``extras``.
    """
    gen = {
        "rotating_dot": _rotating_dot,
        "bouncing_bar": _bouncing_bar,
        "linear_lds": _linear_lds,
        "cyclic_glyphs": _cyclic_glyphs,
    }[spec.kind]
    return gen(spec, Prng(spec.seed))


def _add_noise(frames, spec, rng):
    if spec.noise_scale > 0:
        frames = frames + spec.noise_scale * rng.gaussian(frames.shape)
    return normalize(frames)


def _rotating_dot(spec, rng):
    res = spec.resolution
    radius = 0.3 * res if spec.radius is None else spec.radius
    sigma = 0.1 * res if spec.blob_sigma is None else spec.blob_sigma
    centre = (res - 1) / 2.0
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    angle = spec.angular_velocity * np.arange(spec.length)
    cx = centre + radius * np.cos(angle)
    cy = centre + radius * np.sin(angle)
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    frames = np.exp(-d2 / (2.0 * sigma * sigma)).reshape(spec.length, -1)
    return SequenceData(_add_noise(frames, spec, rng), res, res, 1)


def _bouncing_bar(spec, rng):
    res = spec.resolution
    width = 0.15 * res if spec.bar_width is None else spec.bar_width
    span = res - width
    xx = np.arange(res, dtype=np.float64) + 0.5
    pos = np.abs(((spec.velocity * np.arange(spec.length)) % (2 * span)) - span)  # triangle wave in [0, span]
    left = pos[:, None]
    # soft-edged bar: coverage of each pixel column by [left, left + width]
    cover = np.clip(np.minimum(xx + 0.5, left + width) - np.maximum(xx - 0.5, left), 0.0, 1.0)
    frames = np.repeat(cover[:, None, :], res, axis=1).reshape(spec.length, -1)
    return SequenceData(_add_noise(frames, spec, rng), res, res, 1)


def _rotation_dynamics(n, decay, angle, rng):
    """Random-basis transition matrix with eigenvalues ``decay * exp(+-i angle)``."""
    core = np.zeros((n, n))
    for k in range(0, n - 1, 2):
        c, s = math.cos(angle * (1 + k // 2)), math.sin(angle * (1 + k // 2))
        core[k : k + 2, k : k + 2] = decay * np.array([[c, -s], [s, c]])
    if n % 2:
        core[-1, -1] = decay
    q, r = np.linalg.qr(rng.gaussian((n, n)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q @ core @ q.T


def _linear_lds(spec, rng):
    n = spec.latent_dim
    h, w = spec.frame_size
    d = h * w
    A = _rotation_dynamics(n, spec.decay, spec.angular_velocity, rng)
    B = stationary_B(A)
    C = rng.gaussian((d, n))
    C *= spec.pixel_scale / np.linalg.norm(C, axis=1, keepdims=True)  # every pixel has std pixel_scale
    y_bar = np.full(d, 0.5)
    states = np.zeros((spec.length, n))
    states[0] = rng.gaussian(n)
    drive = rng.gaussian((spec.length - 1, n)) @ B.T
    for t in range(1, spec.length):
        states[t] = A @ states[t - 1] + drive[t - 1]
    frames = y_bar + states @ C.T
    if spec.noise_scale > 0:
        frames = frames + spec.noise_scale * rng.gaussian(frames.shape)
    clipped = int(np.sum((frames < 0) | (frames > 1)))
    extras = {"A": A, "B": B, "C": C, "y_bar": y_bar, "states": states, "clipped": clipped}
    return SequenceData(normalize(frames), h, w, 1, extras=extras)


# 5x7 bitmap digits, one string per row
_DIGITS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]


def glyph(index, res):
    """Digit ``index`` rendered into a ``res x res`` canvas (nearest-neighbour upscaling)."""
    bitmap = np.array([[ch == "1" for ch in row] for row in _DIGITS[index]], dtype=np.float64)
    scale = max(1, (res - 2) // 7)
    big = np.kron(bitmap, np.ones((scale, scale)))
    canvas = np.zeros((res, res))
    top = (res - big.shape[0]) // 2
    left = (res - big.shape[1]) // 2
    canvas[top : top + big.shape[0], left : left + big.shape[1]] = big
    return canvas


def _cyclic_glyphs(spec, rng):
    res = spec.resolution
    k = spec.cycle_period
    bank = [glyph(i, res) for i in range(k)]
    shifts = rng.integers(3, (spec.length, 2)) - 1
    gains = 0.8 + 0.2 * rng.uniform(spec.length)
    frames = np.empty((spec.length, res * res))
    for t in range(spec.length):
        img = np.roll(bank[t % k], tuple(shifts[t]), axis=(0, 1))
        frames[t] = gains[t] * img.ravel()
    seq = SequenceData(_add_noise(frames, spec, rng), res, res, 1)
    seq.extras["labels"] = np.arange(spec.length) % k
    return seq
