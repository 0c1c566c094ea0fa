"""Raw multi-view texture+depth I/O, colour conversion and patch sampling.

Texture is planar YUV 4:2:0 (8-bit, or 10-bit little-endian in 16-bit
words); depth is planar single-channel 16-bit little-endian. All views of a
sequence share one geometry.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# BT.709 luma coefficients
KR = 0.2126
KB = 0.0722
KG = 1.0 - KR - KB

COLOR_MATRIX_BT709_LIMITED = "bt709-limited"


class SequenceSpecError(ValueError):
    """Raised for inconsistent or invalid sequence geometry."""


class DecodeError(ValueError):
    """Raised when a raw stream does not match its declared geometry."""


@dataclass(frozen=True)
class RawSequenceSpec:
    width: int
    height: int
    frame_count: int
    view_count: int = 1
    bit_depth: int = 8
    depth_bit_depth: int = 16
    start_frame: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SequenceSpecError(f"non-positive frame size {self.width}x{self.height}")
        if self.width % 2 or self.height % 2:
            raise SequenceSpecError(
                f"4:2:0 needs even dimensions, got {self.width}x{self.height}")
        if self.frame_count < 1:
            raise SequenceSpecError(f"frame_count must be >= 1, got {self.frame_count}")
        if self.view_count < 1:
            raise SequenceSpecError(f"view_count must be >= 1, got {self.view_count}")
        if not 8 <= self.bit_depth <= 16:
            raise SequenceSpecError(f"unsupported texture bit depth {self.bit_depth}")
        if not 1 <= self.depth_bit_depth <= 16:
            raise SequenceSpecError(f"unsupported depth bit depth {self.depth_bit_depth}")
        if self.start_frame < 0:
            raise SequenceSpecError(f"start_frame must be >= 0, got {self.start_frame}")

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self.bit_depth <= 8 else 2

    @property
    def frame_bytes(self) -> int:
        luma = self.width * self.height
        return (luma + 2 * (luma // 4)) * self.bytes_per_sample

    @property
    def depth_frame_bytes(self) -> int:
        return self.width * self.height * 2


@dataclass
class YUVFrame:
    """One planar 4:2:0 frame holding integer code values."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise SequenceSpecError(f"4:2:0 needs even dimensions, got {w}x{h}")
        if self.u.shape != (h // 2, w // 2) or self.v.shape != (h // 2, w // 2):
            raise SequenceSpecError(
                f"chroma planes {self.u.shape}/{self.v.shape} do not match luma {self.y.shape}")


@dataclass
class MultiViewVideo:
    """Normalised RGBD samples for K views, shaped [K, T, H, W, 4]."""

    samples: np.ndarray
    depth_range: tuple[float, float] = (0.0, 1.0)
    color_matrix_id: str = COLOR_MATRIX_BT709_LIMITED

    def __post_init__(self):
        if self.samples.ndim != 5 or self.samples.shape[-1] != 4:
            raise SequenceSpecError(
                f"samples must be [K, T, H, W, 4], got {self.samples.shape}")
        lo, hi = self.depth_range
        if lo > hi:
            raise SequenceSpecError(f"depth_range min {lo} exceeds max {hi}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.samples.shape

    @property
    def view_count(self) -> int:
        return self.samples.shape[0]

    @property
    def frame_count(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[2]

    @property
    def width(self) -> int:
        return self.samples.shape[3]


@dataclass(frozen=True)
class PatchIndex:
    view: int
    frame: int
    row: int
    col: int


@dataclass
class PatchBatch:
    indices: list[PatchIndex]
    targets: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.array([(p.view, p.frame, p.row, p.col) for p in self.indices],
                        dtype=np.int64).reshape(-1, 4)


# --------------------------------------------------------------------------
# Raw file I/O
# --------------------------------------------------------------------------

def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    return source.read()


def load_yuv420(source, spec: RawSequenceSpec, frames: int | None = None,
                skip: int = 0) -> list[YUVFrame]:
    """Decode ``frames`` planar 4:2:0 frames after skipping ``skip`` frames.

    ``source`` may be raw bytes, a path, or a binary file object. ``frames``
    defaults to ``spec.frame_count``; the stream must hold at least
    ``skip + frames`` frames.
    """
    data = _read_bytes(source)
    frames = spec.frame_count if frames is None else frames
    fb = spec.frame_bytes
    expected = (skip + frames) * fb
    if len(data) < expected:
        raise DecodeError(
            f"truncated YUV stream: expected {expected} bytes, got {len(data)}")
    dtype = np.uint8 if spec.bytes_per_sample == 1 else np.dtype("<u2")
    h, w = spec.height, spec.width
    n_luma, n_chroma = h * w, (h // 2) * (w // 2)
    peak = (1 << spec.bit_depth) - 1
    out = []
    for f in range(skip, skip + frames):
        buf = np.frombuffer(data, dtype=dtype, count=n_luma + 2 * n_chroma,
                            offset=f * fb).astype(np.int32)
        if buf.max(initial=0) > peak:
            raise DecodeError(
                f"frame {f}: sample value {buf.max()} exceeds {spec.bit_depth}-bit range")
        y = buf[:n_luma].reshape(h, w)
        u = buf[n_luma:n_luma + n_chroma].reshape(h // 2, w // 2)
        v = buf[n_luma + n_chroma:].reshape(h // 2, w // 2)
        out.append(YUVFrame(y, u, v, spec.bit_depth))
    return out


def encode_yuv420(frames: Sequence[YUVFrame]) -> bytes:
    parts = []
    for fr in frames:
        dtype = np.uint8 if fr.bit_depth <= 8 else np.dtype("<u2")
        for plane in (fr.y, fr.u, fr.v):
            parts.append(np.ascontiguousarray(plane, dtype=dtype).tobytes())
    return b"".join(parts)


def load_depth16(source, spec: RawSequenceSpec, frames: int | None = None,
                 skip: int = 0) -> np.ndarray:
    """Return depth frames as a float64 array [T, H, W] of raw code values."""
    data = _read_bytes(source)
    frames = spec.frame_count if frames is None else frames
    fb = spec.depth_frame_bytes
    expected = (skip + frames) * fb
    if len(data) < expected:
        raise DecodeError(
            f"truncated depth stream: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<u2", count=frames * spec.width * spec.height,
                        offset=skip * fb)
    return arr.reshape(frames, spec.height, spec.width).astype(np.float64)


def encode_depth16(depth: np.ndarray) -> bytes:
    return np.ascontiguousarray(depth, dtype="<u2").tobytes()


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Colour conversion (BT.709, limited range)
# --------------------------------------------------------------------------

def _scale(bit_depth: int) -> float:
    return float(1 << (bit_depth - 8))


def yuv_to_rgb(frame: YUVFrame) -> np.ndarray:
    """Convert one 4:2:0 frame to RGB in [0, 1], shaped [H, W, 3].

    Chroma is upsampled by sample repetition before the matrix is applied.
    """
    s = _scale(frame.bit_depth)
    y = (frame.y.astype(np.float64) - 16.0 * s) / (219.0 * s)
    cb = (frame.u.astype(np.float64) - 128.0 * s) / (224.0 * s)
    cr = (frame.v.astype(np.float64) - 128.0 * s) / (224.0 * s)
    cb = cb.repeat(2, axis=0).repeat(2, axis=1)
    cr = cr.repeat(2, axis=0).repeat(2, axis=1)
    r = y + 2.0 * (1.0 - KR) * cr
    b = y + 2.0 * (1.0 - KB) * cb
    g = (y - KR * r - KB * b) / KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def rgb_to_yuv(rgb: np.ndarray, bit_depth: int = 8) -> YUVFrame:
    """Inverse of :func:`yuv_to_rgb` with 2x2 mean chroma downsampling."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w, c = rgb.shape
    if c != 3:
        raise SequenceSpecError(f"expected 3 colour channels, got {c}")
    if h % 2 or w % 2:
        raise SequenceSpecError(f"4:2:0 needs even dimensions, got {w}x{h}")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = KR * r + KG * g + KB * b
    cb = (b - y) / (2.0 * (1.0 - KB))
    cr = (r - y) / (2.0 * (1.0 - KR))
    cb = cb.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    cr = cr.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    s = _scale(bit_depth)
    peak = (1 << bit_depth) - 1

    def code(x):
        return np.clip(np.rint(x), 0, peak).astype(np.int32)

    return YUVFrame(code(16.0 * s + 219.0 * s * y),
                    code(128.0 * s + 224.0 * s * cb),
                    code(128.0 * s + 224.0 * s * cr), bit_depth)


# --------------------------------------------------------------------------
# Depth normalisation and RGBD assembly
# --------------------------------------------------------------------------

def normalize_depth(depth) -> tuple[np.ndarray, tuple[float, float]]:
    """Min-max normalise depth over every view and frame of a sequence.

    ``depth`` is an array (or list of per-view arrays) of raw depth values.
    A constant sequence maps to all zeros.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.size == 0:
        raise SequenceSpecError("depth must hold at least one sample")
    lo, hi = float(d.min()), float(d.max())
    if hi == lo:
        return np.zeros_like(d), (lo, hi)
    return (d - lo) / (hi - lo), (lo, hi)


def denormalize_depth(depth: np.ndarray, depth_range: tuple[float, float]) -> np.ndarray:
    lo, hi = depth_range
    return np.asarray(depth, dtype=np.float64) * (hi - lo) + lo


def assemble_rgbd(texture, depth, depth_range=(0.0, 1.0),
                  color_matrix_id: str = COLOR_MATRIX_BT709_LIMITED) -> MultiViewVideo:
    """Concatenate RGB [K, T, H, W, 3] with normalised depth [K, T, H, W]."""
    tex = np.asarray(texture, dtype=np.float32)
    dep = np.asarray(depth, dtype=np.float32)
    if tex.ndim != 5 or tex.shape[-1] != 3:
        raise SequenceSpecError(f"texture must be [K, T, H, W, 3], got {tex.shape}")
    if dep.ndim == 5 and dep.shape[-1] == 1:
        dep = dep[..., 0]
    if dep.ndim != 4:
        raise SequenceSpecError(f"depth must be [K, T, H, W], got {dep.shape}")
    for name, a, b in zip("KTHW", tex.shape[:4], dep.shape):
        if a != b:
            raise SequenceSpecError(
                f"texture/depth mismatch in {name}: texture has {a}, depth has {b}")
    samples = np.concatenate([tex, dep[..., None]], axis=-1)
    return MultiViewVideo(samples, tuple(float(x) for x in depth_range), color_matrix_id)


# --------------------------------------------------------------------------
# Patch sampling
# --------------------------------------------------------------------------

def patch_grid(video_shape: Sequence[int], patch_size: int) -> tuple[int, int]:
    h, w = video_shape[2], video_shape[3]
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise SequenceSpecError(
            f"patch size {patch_size} must divide frame size {w}x{h}")
    return h // patch_size, w // patch_size


def crop_patch(samples: np.ndarray, idx: PatchIndex, patch_size: int) -> np.ndarray:
    m = patch_size
    return samples[idx.view, idx.frame,
                   idx.row * m:(idx.row + 1) * m, idx.col * m:(idx.col + 1) * m]


def all_patch_indices(video_shape: Sequence[int], patch_size: int) -> np.ndarray:
    """Every (view, frame, row, col) as an int64 array [N, 4] in raster order."""
    rows, cols = patch_grid(video_shape, patch_size)
    k, t = video_shape[0], video_shape[1]
    grid = np.stack(np.meshgrid(np.arange(k), np.arange(t), np.arange(rows),
                                np.arange(cols), indexing="ij"), axis=-1)
    return grid.reshape(-1, 4).astype(np.int64)


def _batch_from_array(video: MultiViewVideo, idx: np.ndarray, patch_size: int) -> PatchBatch:
    indices = [PatchIndex(*map(int, row)) for row in idx]
    targets = np.stack([crop_patch(video.samples, p, patch_size) for p in indices])
    return PatchBatch(indices, targets)


def sample_patch_batch(video: MultiViewVideo, batch_size: int, rng: np.random.Generator,
                       patch_size: int) -> PatchBatch:
    """Draw ``batch_size`` patches uniformly, with replacement, over all views and frames."""
    if batch_size < 1:
        raise SequenceSpecError(f"batch_size must be >= 1, got {batch_size}")
    rows, cols = patch_grid(video.shape, patch_size)
    highs = np.array([video.view_count, video.frame_count, rows, cols])
    idx = rng.integers(0, highs, size=(batch_size, 4))
    return _batch_from_array(video, idx, patch_size)


def iter_epoch_batches(video: MultiViewVideo, batch_size: int, rng: np.random.Generator,
                       patch_size: int) -> Iterator[np.ndarray]:
    """Yield index arrays covering every patch once, in shuffled order."""
    idx = all_patch_indices(video.shape, patch_size)
    order = rng.permutation(len(idx))
    for start in range(0, len(idx), batch_size):
        yield idx[order[start:start + batch_size]]


# --------------------------------------------------------------------------
# Sequence manifest
# --------------------------------------------------------------------------

_SPEC_KEYS = ("width", "height", "frame_count", "bit_depth", "depth_bit_depth", "start_frame")


@dataclass
class ViewFiles:
    texture: Path
    depth: Path


@dataclass
class SequenceManifest:
    spec: RawSequenceSpec
    views: list[ViewFiles] = field(default_factory=list)
    name: str = "sequence"

    @classmethod
    def load(cls, path) -> "SequenceManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent
        views_doc = doc.get("views") or []
        if not views_doc:
            raise SequenceSpecError(f"{path}: manifest lists no views")
        geometry = None
        views = []
        for n, v in enumerate(views_doc):
            g = {k: v.get(k, doc.get(k)) for k in _SPEC_KEYS}
            g.setdefault("bit_depth", 8)
            g = {k: val for k, val in g.items() if val is not None}
            if geometry is None:
                geometry = g
            elif g != geometry:
                raise SequenceSpecError(f"{path}: view {n} geometry {g} differs from view 0 {geometry}")
            views.append(ViewFiles(base / v["texture"], base / v["depth"]))
        try:
            spec = RawSequenceSpec(view_count=len(views), **geometry)
        except TypeError as exc:
            raise SequenceSpecError(f"{path}: incomplete geometry: {exc}") from None
        return cls(spec, views, doc.get("name", path.stem))

    def dump(self, path) -> None:
        path = Path(path)
        base = path.parent
        doc = {"name": self.name}
        doc.update({k: getattr(self.spec, k) for k in _SPEC_KEYS})
        doc["views"] = [{"texture": os.path.relpath(v.texture, base),
                         "depth": os.path.relpath(v.depth, base)} for v in self.views]
        path.write_text(json.dumps(doc, indent=2) + "\n")


def load_sequence(manifest: SequenceManifest) -> MultiViewVideo:
    """Read every view of a manifest into a normalised RGBD video."""
    spec = manifest.spec
    textures, depths = [], []
    for view in manifest.views:
        frames = load_yuv420(view.texture, spec, skip=spec.start_frame)
        textures.append(np.stack([yuv_to_rgb(f) for f in frames]))
        depths.append(load_depth16(view.depth, spec, skip=spec.start_frame))
    depth, depth_range = normalize_depth(np.stack(depths))
    return assemble_rgbd(np.stack(textures), depth, depth_range)


def video_to_raw(video: MultiViewVideo, bit_depth: int = 8,
                 depth_bit_depth: int = 16) -> list[tuple[bytes, bytes]]:
    """Convert RGBD samples back to per-view (YUV bytes, depth bytes)."""
    peak = (1 << depth_bit_depth) - 1
    out = []
    for k in range(video.view_count):
        frames = [rgb_to_yuv(np.clip(video.samples[k, t, ..., :3], 0, 1), bit_depth)
                  for t in range(video.frame_count)]
        depth = denormalize_depth(np.clip(video.samples[k, ..., 3], 0, 1), video.depth_range)
        out.append((encode_yuv420(frames),
                    encode_depth16(np.clip(np.rint(depth), 0, peak))))
    return out
