"""Merge-aware conditional asymmetric uniform quantization.

A merged component is split into units (whole tensor or first-axis channels).
A unit is quantized only when merging did not widen it: its dynamic range must
not exceed the mean dynamic range of the corresponding units of the source
components. Quantized units store b-bit codes plus (scale, zero_point);
rejected units stay full precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

FULL_PRECISION_BITS = 32  # storage bit-width of an unquantized float value


class Granularity(Enum):
    PER_TENSOR = "per-tensor"
    PER_CHANNEL = "per-channel"


@dataclass(frozen=True)
class QuantPolicy:
    granularity: Granularity = Granularity.PER_CHANNEL
    bit_width: int = 8

    def __post_init__(self):
        if not 2 <= self.bit_width <= 16:
            raise ValueError(f"bit_width must be in [2, 16], got {self.bit_width}")


@dataclass(frozen=True)
class QuantizedUnit:
    """b-bit codes on the grid scale * (code - zero_point).

    A constant unit (zero dynamic range) degenerates: scale carries the 0.0
    sentinel, zero_point is 0 and const_value holds the single stored value.
    """

    codes: np.ndarray  # uint16, values in [0, 2^b - 1]
    scale: float
    zero_point: int
    bit_width: int
    unit_extent: int
    const_value: float | None = None

    @property
    def is_constant(self) -> bool:
        return self.const_value is not None


def _round_half_away(x: np.ndarray | float):
    """Round half away from zero (deterministic across platforms)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def dynamic_range(values: np.ndarray) -> float:
    """max - min of a flat unit; 0 for a constant unit."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("dynamic_range of empty unit")
    return float(values.max() - values.min())


def should_quantize(merged_unit: np.ndarray, source_units: list[np.ndarray]) -> bool:
    """Merged unit's dynamic range <= mean dynamic range of its source units."""
    if not source_units:
        raise ValueError("no source units")
    mean_source = sum(dynamic_range(u) for u in source_units) / len(source_units)
    return dynamic_range(merged_unit) <= mean_source


def quantize_unit(values: np.ndarray, bit_width: int) -> QuantizedUnit:
    """Project every value to the nearest point of the asymmetric uniform grid."""
    flat = np.asarray(values, dtype=np.float32).ravel()
    if flat.size == 0:
        raise ValueError("cannot quantize an empty unit")
    if not np.all(np.isfinite(flat)):
        raise ValueError("non-finite value in quantization unit")
    if not 2 <= bit_width <= 16:
        raise ValueError(f"bit_width must be in [2, 16], got {bit_width}")
    lo = float(flat.min())
    hi = float(flat.max())
    q_max = (1 << bit_width) - 1
    if hi == lo:
        return QuantizedUnit(
            codes=np.zeros(flat.size, dtype=np.uint16),
            scale=0.0,
            zero_point=0,
            bit_width=bit_width,
            unit_extent=flat.size,
            const_value=lo,
        )
    scale = np.float32((hi - lo) / q_max)
    # z lies in [0, q_max] whenever the unit's range straddles zero; for a
    # one-sided range the grid must shift past the code range to cover the
    # data, so z is kept unclamped (it is stored as i32, codes are clamped)
    zero_point = int(_round_half_away(-lo / float(scale)))
    codes = _round_half_away(flat.astype(np.float64) / float(scale) + zero_point)
    codes = np.clip(codes, 0, q_max).astype(np.uint16)
    return QuantizedUnit(
        codes=codes,
        scale=float(scale),
        zero_point=zero_point,
        bit_width=bit_width,
        unit_extent=flat.size,
    )


def dequantize(unit: QuantizedUnit) -> np.ndarray:
    """Grid values scale * (code - zero_point) as float32."""
    if unit.is_constant:
        return np.full(unit.unit_extent, np.float32(unit.const_value), dtype=np.float32)
    return (
        np.float32(unit.scale) * (unit.codes.astype(np.float32) - np.float32(unit.zero_point))
    ).astype(np.float32)


@dataclass(frozen=True)
class CompressedModule:
    """Per-unit storage of one merged component: quantized or full precision."""

    shape: tuple[int, ...]
    granularity: Granularity
    units: tuple["QuantizedUnit | np.ndarray", ...]  # ndarray = full-precision unit

    def __post_init__(self):
        if not self.units:
            raise ValueError("module with no units")

    @property
    def num_units(self) -> int:
        return len(self.units)

    @property
    def num_quantized(self) -> int:
        return sum(isinstance(u, QuantizedUnit) for u in self.units)

    def unit_flags(self) -> list[bool]:
        """True per unit iff stored quantized."""
        return [isinstance(u, QuantizedUnit) for u in self.units]

    def decode(self) -> np.ndarray:
        parts = [
            dequantize(u) if isinstance(u, QuantizedUnit) else u.ravel() for u in self.units
        ]
        return np.concatenate(parts).reshape(self.shape)


def split_units(arr: np.ndarray, granularity: Granularity) -> list[np.ndarray]:
    """Flat views of the quantization units of a tensor.

    PER_CHANNEL slices along the first axis; PER_TENSOR yields one unit.
    Rank-1 tensors have no channel axis and always form a single unit.
    """
    if granularity is Granularity.PER_TENSOR or arr.ndim < 2:
        return [arr.ravel()]
    return [arr[i].ravel() for i in range(arr.shape[0])]


def conditional_compress(
    merged: np.ndarray,
    sources: list[np.ndarray],
    policy: QuantPolicy | None,
) -> CompressedModule:
    """Quantize exactly the units whose dynamic range did not grow past the
    source average; store the rest full precision. policy=None disables
    quantization entirely."""
    if not sources:
        raise ValueError("conditional_compress needs at least one source component")
    for src in sources:
        if src.shape != merged.shape:
            raise ValueError(f"source shape {src.shape} != merged shape {merged.shape}")
    granularity = policy.granularity if policy is not None else Granularity.PER_TENSOR
    merged_units = split_units(merged, granularity)
    source_units = [split_units(src, granularity) for src in sources]
    units: list[QuantizedUnit | np.ndarray] = []
    for u, merged_unit in enumerate(merged_units):
        if policy is not None and should_quantize(merged_unit, [s[u] for s in source_units]):
            units.append(quantize_unit(merged_unit, policy.bit_width))
        else:
            units.append(np.array(merged_unit, dtype=np.float32))
    return CompressedModule(shape=merged.shape, granularity=granularity, units=tuple(units))
