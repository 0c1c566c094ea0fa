"""Serialised model format.

Layout (all integers little-endian)::

    magic "MVIN" | u16 version | u32 header length | header | payloads | raw section

The header carries the model configuration (JSON plus its SHA-256), the
depth range and other side information, one record per parameter tensor,
a CRC32 of payloads + raw section, and finally a CRC32 of the header
itself. Regularised tensors are range coded; the others are stored as
float16 in the raw section.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .data_io import write_atomic
from .entropy import GaussianStats, QuantizedTensor, quantize_tensor, support_bounds
from .model import MultiViewINR
from .quantization import Sharing, step_shape
from .rangecoder import RangeDecodeError, decode_symbols, encode_symbols

MAGIC = b"MVIN"
VERSION = 1
KIND_CODED = 0
KIND_RAW = 1
_SHARING_CODES = {Sharing.PER_ROW: 0, Sharing.PER_COLUMN: 1, Sharing.PER_TENSOR: 2}
_SHARING_FROM_CODE = {v: k for k, v in _SHARING_CODES.items()}


class BitstreamError(ValueError):
    """Malformed, corrupted or incompatible bitstream."""


@dataclass
class GroupRecord:
    name: str
    kind: int
    shape: tuple[int, ...]
    sharing: Sharing = Sharing.PER_TENSOR
    steps: np.ndarray | None = None
    stats: GaussianStats | None = None
    count: int = 0
    nbytes: int = 0

    @property
    def bits(self) -> int:
        return 8 * self.nbytes


@dataclass
class DecodedModel:
    model: MultiViewINR
    depth_range: tuple[float, float]
    side_info: dict
    groups: list[GroupRecord] = field(default_factory=list)
    total_bytes: int = 0


@dataclass
class EncodedModel:
    data: bytes
    groups: list[GroupRecord]
    header_bytes: int

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    def rate_split(self, model: MultiViewINR | None = None) -> dict[str, int]:
        """Payload bits by owner: ``shared`` and ``view<k>`` for each view."""
        out: dict[str, int] = {}
        for g in self.groups:
            owner = "shared" if not g.name.startswith("views.") else "view" + g.name.split(".")[1]
            out[owner] = out.get(owner, 0) + g.bits
        return out

    @property
    def payload_bits(self) -> int:
        return sum(g.bits for g in self.groups)


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def blob(self, data: bytes, fmt="I"):
        self.pack(fmt, len(data))
        self.buf.write(data)

    def array(self, arr: np.ndarray, dtype):
        self.buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BitstreamError(
                f"truncated bitstream: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self.take(size))
        return values if len(values) > 1 else values[0]

    def blob(self, fmt="I") -> bytes:
        return self.take(self.unpack(fmt))

    def array(self, count: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).astype(dtype)


def quantize_model(model: MultiViewINR, quantizer) -> dict[str, QuantizedTensor]:
    """Symbols for every regularised tensor at the current step sizes."""
    params = dict(model.named_parameters())
    out = {}
    for name in quantizer.names:
        step = quantizer.step(name).detach().cpu().numpy()
        out[name] = quantize_tensor(params[name].detach().cpu().numpy(), step)
    return out


@torch.no_grad()
def apply_quantization(model: MultiViewINR, quantized: dict[str, QuantizedTensor]) -> None:
    """Overwrite parameters with what a decoder reconstructs from the bitstream."""
    for name, p in model.named_parameters():
        if name in quantized:
            p.copy_(torch.from_numpy(quantized[name].dequantize()))
        else:
            p.copy_(p.to(torch.float16).to(p.dtype))


def serialize_model(model: MultiViewINR, quantizer, depth_range=(0.0, 1.0),
                    side_info: dict | None = None,
                    quantized: dict[str, QuantizedTensor] | None = None) -> EncodedModel:
    """Encode a model; ``quantized`` may be passed to reuse an earlier quantisation."""
    if quantized is None:
        quantized = quantize_model(model, quantizer)
    config_json = model.config.canonical_json().encode()
    payloads, raws, groups = [], [], []
    for name, p in model.named_parameters():
        shape = tuple(p.shape)
        if name in quantized:
            q = quantized[name]
            units = q.unit_index()
            payload = encode_symbols(q.symbols.reshape(-1), q.tables(), units)
            payloads.append(payload)
            groups.append(GroupRecord(name, KIND_CODED, shape, quantizer.sharing[name],
                                      q.step.reshape(-1), q.stats, q.symbols.size, len(payload)))
        else:
            raw = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f2").tobytes()
            raws.append(raw)
            groups.append(GroupRecord(name, KIND_RAW, shape, count=p.numel(), nbytes=len(raw)))
    body = b"".join(payloads) + b"".join(raws)

    h = _Writer()
    h.blob(config_json)
    h.buf.write(model.config.digest())
    h.pack("dd", *map(float, depth_range))
    h.blob(json.dumps(side_info or {}, sort_keys=True).encode())
    h.pack("I", len(groups))
    for g in groups:
        h.blob(g.name.encode(), "H")
        h.pack("BB", g.kind, len(g.shape))
        h.pack(f"{len(g.shape)}I", *g.shape)
        if g.kind == KIND_CODED:
            h.pack("BI", _SHARING_CODES[g.sharing], g.steps.size)
            h.array(g.steps, np.float32)
            h.pack("ff", g.stats.mean, g.stats.std)
        h.pack("II", g.count, g.nbytes)
    h.pack("I", zlib.crc32(body))
    header = h.getvalue()
    header += struct.pack("<I", zlib.crc32(header))
    data = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + body
    return EncodedModel(data, groups, len(data) - len(body))


def read_groups(data: bytes):
    """Parse and verify the header; returns (config, depth_range, side_info, groups, body offset)."""
    if len(data) < 10 or data[:4] != MAGIC:
        raise BitstreamError("not a model bitstream (bad magic)")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if len(data) < 10 + header_len or header_len < 4:
        raise BitstreamError(
            f"truncated bitstream: header needs {header_len} bytes, have {len(data) - 10}")
    header = data[10:10 + header_len]
    if zlib.crc32(header[:-4]) != struct.unpack("<I", header[-4:])[0]:
        raise BitstreamError("header checksum mismatch")
    r = _Reader(header[:-4])
    config_json = r.blob()
    digest = r.take(32)
    try:
        config = ModelConfig.from_dict(json.loads(config_json))
    except (ValueError, TypeError) as exc:
        raise BitstreamError(f"bad model configuration in header: {exc}") from None
    if config.digest() != digest:
        raise BitstreamError("model configuration digest mismatch")
    depth_range = tuple(r.unpack("dd"))
    side_info = json.loads(r.blob())
    groups = []
    for _ in range(r.unpack("I")):
        name = r.blob("H").decode()
        kind, ndim = r.unpack("BB")
        shape = tuple(r.unpack(f"{ndim}I")) if ndim > 1 else ((r.unpack("I"),) if ndim else ())
        g = GroupRecord(name, kind, shape)
        if kind == KIND_CODED:
            code, n_steps = r.unpack("BI")
            g.sharing = _SHARING_FROM_CODE[code]
            g.steps = r.array(n_steps, np.float32)
            g.stats = GaussianStats(*r.unpack("ff"))
        elif kind != KIND_RAW:
            raise BitstreamError(f"unknown group kind {kind} for {name}")
        g.count, g.nbytes = r.unpack("II")
        groups.append(g)
    body_crc = r.unpack("I")
    body = data[10 + header_len:]
    expected = sum(g.nbytes for g in groups)
    if len(body) != expected:
        raise BitstreamError(f"payload size mismatch: expected {expected} bytes, got {len(body)}")
    if zlib.crc32(body) != body_crc:
        raise BitstreamError("payload checksum mismatch")
    return config, depth_range, side_info, groups, 10 + header_len


def deserialize_model(data: bytes) -> DecodedModel:
    config, depth_range, side_info, groups, offset = read_groups(data)
    model = MultiViewINR(config, seed=None)
    params = dict(model.named_parameters())
    if [g.name for g in groups] != list(params):
        raise BitstreamError("parameter layout does not match the model configuration")
    coded = [g for g in groups if g.kind == KIND_CODED]
    raw = [g for g in groups if g.kind == KIND_RAW]
    pos = offset
    with torch.no_grad():
        for g in coded:
            p = params[g.name]
            if tuple(p.shape) != g.shape:
                raise BitstreamError(f"{g.name}: shape {g.shape} != model shape {tuple(p.shape)}")
            step = g.steps.reshape(step_shape(g.shape, g.sharing))
            q = QuantizedTensor(np.zeros(g.shape, np.int64), step, g.stats,
                                *support_bounds(step, g.stats.mean))
            try:
                symbols = decode_symbols(data[pos:pos + g.nbytes], q.tables(), g.count,
                                         q.unit_index())
            except RangeDecodeError as exc:
                raise BitstreamError(f"{g.name}: {exc}") from None
            q.symbols = np.asarray(symbols, dtype=np.int64).reshape(g.shape)
            p.copy_(torch.from_numpy(q.dequantize()))
            pos += g.nbytes
        for g in raw:
            p = params[g.name]
            values = np.frombuffer(data[pos:pos + g.nbytes], dtype="<f2").astype(np.float32)
            p.copy_(torch.from_numpy(values.reshape(g.shape)))
            pos += g.nbytes
    model.eval()
    return DecodedModel(model, depth_range, side_info, groups, len(data))


def write_bitstream(path, encoded: EncodedModel) -> None:
    write_atomic(path, encoded.data)


def read_bitstream(path) -> DecodedModel:
    return deserialize_model(Path(path).read_bytes())
