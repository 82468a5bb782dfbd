"""Bit-exact packed checkpoint codec.

Layout (all integers little-endian):

    magic   4 bytes  "MPQ1"
    version u16      currently 1
    layers  u32
    per layer:
      out_dim u32, in_dim u32, r u32
      nflag   u8    low 7 bits: bit-width (0 = raw float64 weights);
                    0x80 set when full-precision shadow weights follow
      alpha   f64   scale (1.0 placeholder for raw layers)
      payload       n=0: A then B as f64
                    n>=1: level indices packed n bits each, two's
                    complement, LSB-first within bytes, A then B row-major,
                    zero-padded to a byte boundary per layer; the 1-bit
                    table maps bit 0 -> -alpha, bit 1 -> +alpha
      shadow        A then B as f64, only when the 0x80 flag is set

Activations and context offsets are architecture configuration and are not
stored; reconstruction takes them from the experiment config.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointCodeRangeError,
    CheckpointFieldError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .model import FactoredLayer, Network
from .numeric import Array
from .quant import QuantizedLayer, QuantizedNetwork, build_table

MAGIC = b"MPQ1"
VERSION = 1
_SHADOW_FLAG = 0x80
_VALID_BITS = (0, 1, 2, 4, 8, 16)


def pack_codes(codes: Array, n_bits: int) -> bytes:
    """Pack level indices LSB-first, zero-padded to a byte boundary."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if n_bits == 1:
        if np.any(np.abs(codes) != 1):
            raise CheckpointCodeRangeError("1-bit codes must be +/-1")
        u = ((codes + 1) // 2).astype(np.uint8)
    else:
        limit = 2 ** (n_bits - 1) - 1
        if np.any(np.abs(codes) > limit):
            raise CheckpointCodeRangeError(f"code outside +/-{limit} for {n_bits}-bit table")
        u = (codes & ((1 << n_bits) - 1)).astype(np.uint32)
    bits = np.zeros(codes.size * n_bits, dtype=np.uint8)
    for j in range(n_bits):
        bits[j::n_bits] = (u >> j) & 1
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, n_bits: int) -> Array:
    """Inverse of pack_codes; validates every index against the table range."""
    need = math.ceil(count * n_bits / 8)
    if len(buf) != need:
        raise CheckpointTruncatedError(f"expected {need} code bytes, got {len(buf)}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * n_bits]
    u = np.zeros(count, dtype=np.int64)
    for j in range(n_bits):
        u |= bits[j::n_bits].astype(np.int64) << j
    if n_bits == 1:
        return 2 * u - 1
    half = 1 << (n_bits - 1)
    codes = np.where(u >= half, u - (1 << n_bits), u)
    if np.any(np.abs(codes) > half - 1):
        raise CheckpointCodeRangeError(f"decoded code outside +/-{half - 1}")
    return codes


@dataclass
class CheckpointLayer:
    out_dim: int
    in_dim: int
    r: int
    n_bits: int  # 0 = raw float64 weights
    alpha: float
    codes_a: Array | None = None
    codes_b: Array | None = None
    full_a: Array | None = None  # payload for n=0, shadow otherwise
    full_b: Array | None = None

    @property
    def param_count(self) -> int:
        return self.out_dim * self.r + self.r * self.in_dim

    @property
    def has_shadow(self) -> bool:
        return self.n_bits > 0 and self.full_a is not None

    def byte_size(self) -> int:
        size = 12 + 1 + 8
        if self.n_bits == 0:
            size += self.param_count * 8
        else:
            size += math.ceil(self.param_count * self.n_bits / 8)
            if self.has_shadow:
                size += self.param_count * 8
        return size


@dataclass
class Checkpoint:
    version: int
    layers: list[CheckpointLayer]

    def byte_size(self) -> int:
        return 10 + sum(layer.byte_size() for layer in self.layers)

    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


def _layer_record(layer: CheckpointLayer) -> bytes:
    nflag = layer.n_bits | (_SHADOW_FLAG if layer.has_shadow else 0)
    head = struct.pack("<IIIBd", layer.out_dim, layer.in_dim, layer.r, nflag, layer.alpha)
    if layer.n_bits == 0:
        payload = layer.full_a.astype("<f8").tobytes() + layer.full_b.astype("<f8").tobytes()
    else:
        flat = np.concatenate([layer.codes_a.ravel(), layer.codes_b.ravel()])
        payload = pack_codes(flat, layer.n_bits)
        if layer.has_shadow:
            payload += layer.full_a.astype("<f8").tobytes()
            payload += layer.full_b.astype("<f8").tobytes()
    return head + payload


def checkpoint_from_model(model, include_shadow: bool = False) -> Checkpoint:
    """Snapshot a Network (raw records) or QuantizedNetwork (packed records)."""
    layers = []
    if isinstance(model, Network):
        for lay in model.layers:
            layers.append(
                CheckpointLayer(
                    out_dim=lay.out_dim, in_dim=lay.in_dim, r=lay.bottleneck,
                    n_bits=0, alpha=1.0, full_a=lay.a.copy(), full_b=lay.b.copy(),
                )
            )
    elif isinstance(model, QuantizedNetwork):
        shadow = model.shadow if include_shadow else None
        if include_shadow and shadow is None:
            raise ConfigError("model has no shadow weights to include")
        for i, ql in enumerate(model.qlayers):
            layers.append(
                CheckpointLayer(
                    out_dim=ql.codes_a.shape[0],
                    in_dim=ql.codes_b.shape[1],
                    r=ql.codes_a.shape[1],
                    n_bits=ql.table.n_bits,
                    alpha=ql.table.alpha,
                    codes_a=ql.codes_a.copy(),
                    codes_b=ql.codes_b.copy(),
                    full_a=shadow.layers[i].a.copy() if shadow else None,
                    full_b=shadow.layers[i].b.copy() if shadow else None,
                )
            )
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(model).__name__}")
    return Checkpoint(version=VERSION, layers=layers)


def encode_checkpoint(model, path: str, include_shadow: bool = False) -> Checkpoint:
    """Write the model atomically; returns the in-memory Checkpoint."""
    ckpt = model if isinstance(model, Checkpoint) else checkpoint_from_model(model, include_shadow)
    blob = MAGIC + struct.pack("<HI", ckpt.version, len(ckpt.layers))
    for layer in ckpt.layers:
        blob += _layer_record(layer)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(f"file ends inside {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def done(self):
        if self.pos != len(self.blob):
            raise CheckpointTruncatedError(
                f"{len(self.blob) - self.pos} trailing bytes after the last layer"
            )


def decode_checkpoint(path: str) -> Checkpoint:
    """Read and validate a checkpoint; every corruption class raises its own
    error: magic, version, truncation/trailing data, code range, bad field."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointMagicError("bad magic; not a packed checkpoint")
    version, n_layers = struct.unpack("<HI", reader.take(6, "header"))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}")
    layers = []
    for li in range(n_layers):
        out_dim, in_dim, r, nflag, alpha = struct.unpack(
            "<IIIBd", reader.take(21, f"layer {li} header")
        )
        n_bits = nflag & 0x7F
        has_shadow = bool(nflag & _SHADOW_FLAG)
        if n_bits not in _VALID_BITS:
            raise CheckpointFieldError(f"layer {li}: invalid bit-width {n_bits}")
        if out_dim == 0 or in_dim == 0 or r == 0 or r > min(out_dim, in_dim):
            raise CheckpointFieldError(f"layer {li}: invalid dims {out_dim}x{in_dim} r={r}")
        if n_bits > 0 and not (np.isfinite(alpha) and alpha > 0):
            raise CheckpointFieldError(f"layer {li}: scale must be positive, got {alpha}")
        if n_bits == 0 and has_shadow:
            raise CheckpointFieldError(f"layer {li}: raw layer cannot carry a shadow")
        count = out_dim * r + r * in_dim
        na = out_dim * r
        layer = CheckpointLayer(out_dim, in_dim, r, n_bits, alpha)
        if n_bits == 0:
            raw = np.frombuffer(reader.take(count * 8, f"layer {li} weights"), dtype="<f8")
            layer.full_a = raw[:na].reshape(out_dim, r).copy()
            layer.full_b = raw[na:].reshape(r, in_dim).copy()
        else:
            nbytes = math.ceil(count * n_bits / 8)
            codes = unpack_codes(reader.take(nbytes, f"layer {li} codes"), count, n_bits)
            layer.codes_a = codes[:na].reshape(out_dim, r)
            layer.codes_b = codes[na:].reshape(r, in_dim)
            if has_shadow:
                raw = np.frombuffer(reader.take(count * 8, f"layer {li} shadow"), dtype="<f8")
                layer.full_a = raw[:na].reshape(out_dim, r).copy()
                layer.full_b = raw[na:].reshape(r, in_dim).copy()
        layers.append(layer)
    reader.done()
    return Checkpoint(version=version, layers=layers)


def _arch(i: int, n: int, activations, offsets) -> tuple[str, tuple[int, ...]]:
    act = activations[i] if activations else ("relu" if i < n - 1 else "identity")
    off = tuple(offsets[i]) if offsets else ()
    return act, off


def checkpoint_to_network(ckpt: Checkpoint, activations=None, offsets=None) -> Network:
    """Rebuild a full-precision Network from raw records (or shadows)."""
    layers = []
    n = len(ckpt.layers)
    for i, cl in enumerate(ckpt.layers):
        if cl.full_a is None:
            raise ConfigError(f"layer {i} holds no full-precision weights")
        act, off = _arch(i, n, activations, offsets)
        layers.append(FactoredLayer(a=cl.full_a, b=cl.full_b, activation=act,
                                    context_offsets=off))
    return Network(layers)


def checkpoint_to_quantized(ckpt: Checkpoint, activations=None, offsets=None) -> QuantizedNetwork:
    """Rebuild a QuantizedNetwork (with shadow when stored) from packed records."""
    qlayers = []
    shadow_layers = []
    n = len(ckpt.layers)
    for i, cl in enumerate(ckpt.layers):
        if cl.n_bits == 0:
            raise ConfigError(f"layer {i} is stored at full precision")
        act, off = _arch(i, n, activations, offsets)
        qlayers.append(
            QuantizedLayer(codes_a=cl.codes_a, codes_b=cl.codes_b,
                           table=build_table(cl.n_bits, cl.alpha),
                           activation=act, context_offsets=off)
        )
        if cl.has_shadow:
            shadow_layers.append(FactoredLayer(a=cl.full_a, b=cl.full_b, activation=act,
                                               context_offsets=off))
    shadow = Network(shadow_layers) if len(shadow_layers) == len(ckpt.layers) else None
    return QuantizedNetwork(qlayers=qlayers, shadow=shadow)
