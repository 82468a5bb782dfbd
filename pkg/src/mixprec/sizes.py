"""Model size accounting and compression ratios.

Full-precision storage counts 4 bytes (32-bit) per parameter. Quantized
storage follows the checkpoint format byte-for-byte: a 10-byte global header
plus, per layer, 21 bytes of overhead (three u32 dims, one bit-width byte,
one f64 scale) and the packed codes rounded up to a whole byte. Megabytes
are decimal (1 MB = 10^6 bytes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import Network
from .quant import QuantizedNetwork

BYTES_PER_FP32 = 4
GLOBAL_HEADER_BYTES = 10  # magic 4 + version 2 + layer count 4
LAYER_OVERHEAD_BYTES = 21  # dims 3*4 + bit-width 1 + scale 8


def full_precision_bytes(param_count: int) -> int:
    return int(param_count) * BYTES_PER_FP32


def packed_codes_bytes(param_count: int, n_bits: int) -> int:
    return math.ceil(int(param_count) * int(n_bits) / 8)


def quantized_layer_bytes(param_count: int, n_bits: int) -> int:
    return LAYER_OVERHEAD_BYTES + packed_codes_bytes(param_count, n_bits)


def model_size_bytes(model) -> int:
    """Bytes of a Network (32-bit accounting), QuantizedNetwork (packed
    format arithmetic, shadow excluded), or Checkpoint (actual file bytes)."""
    if isinstance(model, Network):
        return full_precision_bytes(model.param_count())
    if isinstance(model, QuantizedNetwork):
        return GLOBAL_HEADER_BYTES + sum(
            quantized_layer_bytes(ql.param_count(), ql.table.n_bits) for ql in model.qlayers
        )
    byte_size = getattr(model, "byte_size", None)
    if callable(byte_size):
        return int(byte_size())
    raise ConfigError(f"cannot size object of type {type(model).__name__}")


def megabytes(num_bytes: int) -> float:
    return num_bytes / 1e6


def compression_ratio(baseline_bytes: float, compressed_bytes: float) -> float:
    """baseline / compressed; callers report it rounded to one decimal."""
    if baseline_bytes <= 0 or compressed_bytes <= 0:
        raise ConfigError("sizes must be positive to form a ratio")
    return baseline_bytes / compressed_bytes


@dataclass
class SizeReport:
    """Per-layer bit/byte breakdown plus compression accounting."""

    layer_bits: list[int]
    layer_params: list[int]
    layer_bytes: list[int]
    total_bytes: int
    full_precision_bytes: int
    compression_ratio: float
    weighted_avg_bits: float
    unweighted_avg_bits: float

    @staticmethod
    def from_quantized(qnet: QuantizedNetwork, baseline_param_count: int | None = None) -> "SizeReport":
        bits = qnet.bits()
        params = [ql.param_count() for ql in qnet.qlayers]
        per_layer = [quantized_layer_bytes(p, b) for p, b in zip(params, bits)]
        total = GLOBAL_HEADER_BYTES + sum(per_layer)
        fp = full_precision_bytes(
            baseline_param_count if baseline_param_count is not None else sum(params)
        )
        return SizeReport(
            layer_bits=bits,
            layer_params=params,
            layer_bytes=per_layer,
            total_bytes=total,
            full_precision_bytes=fp,
            compression_ratio=compression_ratio(fp, total),
            weighted_avg_bits=sum(b * p for b, p in zip(bits, params)) / sum(params),
            unweighted_avg_bits=sum(bits) / len(bits),
        )
