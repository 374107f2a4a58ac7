"""
Bit-accurate simulation of deployment number formats: symmetric int8,
groupwise int4 and FP8-E4M3, with round trips, error reports and a compact
file format.

Scales are kept in float64 in memory. The file format stores them as f32,
so a tensor reloaded from disk dequantizes to within f32 scale rounding of
the in-memory result.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from .config import QuantSpec
from .errors import CorruptTensorError, FormatError, InvalidArgumentError, TruncatedPayloadError
from .tensor import FeatureMap

logger = logging.getLogger(__name__)

FP8_E4M3_MAX = 448.0

_INT_RANGES = {
    "int8-symmetric": (-127, 127),
    "int4-group": (-8, 7),
}


def _fp8_e4m3_table() -> np.ndarray:
    values = np.empty(256, dtype=np.float64)
    for code in range(256):
        exponent = (code >> 3) & 0xF
        mantissa = code & 0x7
        if exponent == 0xF and mantissa == 0x7:
            value = math.nan
        elif exponent == 0:
            value = math.ldexp(mantissa, -9)
        else:
            value = math.ldexp(1.0 + mantissa / 8.0, exponent - 7)
        values[code] = -value if code & 0x80 else value
    values.setflags(write=False)
    return values


FP8_E4M3_VALUES = _fp8_e4m3_table()
# Codes 0x00..0x7E, ascending
_FP8_POSITIVE = FP8_E4M3_VALUES[:0x7F]
FP8_NAN_CODES = (0x7F, 0xFF)


def encode_fp8_e4m3(values: np.ndarray) -> np.ndarray:
    """
    Round finite values to FP8-E4M3 bit patterns.

    Round-to-nearest-even on the 3-bit mantissa (subnormals below 2^-6),
    saturating at +/-448. The sign bit follows the input, so -0.0 maps to 0x80.
    """
    v = np.asarray(values, dtype=np.float64)
    magnitude = np.abs(v)
    _, exponent = np.frexp(magnitude)
    exponent = np.maximum(exponent - 1, -6)
    step = np.ldexp(1.0, exponent - 3)
    rounded = np.minimum(np.rint(magnitude / step) * step, FP8_E4M3_MAX)
    codes = np.searchsorted(_FP8_POSITIVE, rounded).astype(np.uint8)
    return codes | (np.signbit(v).astype(np.uint8) << 7)


def decode_fp8_e4m3(codes: np.ndarray) -> np.ndarray:
    return FP8_E4M3_VALUES[np.asarray(codes, dtype=np.uint8)]


def _as_array(t: Union[FeatureMap, np.ndarray]) -> np.ndarray:
    array = t.data if isinstance(t, FeatureMap) else np.asarray(t, dtype=np.float64)
    array = np.asarray(array, dtype=np.float64)
    if array.ndim < 1 or array.size == 0:
        raise InvalidArgumentError(f"Cannot quantize an array of shape {array.shape}")
    if not np.isfinite(array).all():
        raise InvalidArgumentError("Quantizer input must be finite (no NaN or infinity)")
    return array


def _units(x: np.ndarray, spec: QuantSpec) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray], bool]:
    """
    View x as (*unit_shape, unit_len) with NaN padding for a ragged final group.

    Returns the view, a function broadcasting per-unit values back to
    x.shape, and whether the final group is ragged.
    """
    if spec.granularity == "per-tensor":
        return x.reshape(1, -1), lambda s: np.broadcast_to(s[0], x.shape), False

    if spec.granularity == "per-channel":
        axis = _channel_axis(spec, x.ndim)
        units = np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        return units, lambda s: np.broadcast_to(s.reshape(shape), x.shape), False

    group = spec.group_size
    length = x.shape[-1]
    groups = -(-length // group)
    padded = np.full(x.shape[:-1] + (groups * group,), np.nan)
    padded[..., :length] = x
    units = padded.reshape(x.shape[:-1] + (groups, group))
    return units, lambda s: np.repeat(s, group, axis=-1)[..., :length], length % group != 0


def _channel_axis(spec: QuantSpec, ndim: int) -> int:
    if not -ndim <= spec.channel_axis < ndim:
        raise InvalidArgumentError(f"channel_axis {spec.channel_axis} is out of range for rank {ndim}")
    return spec.channel_axis % ndim


def _unit_scales(units: np.ndarray, spec: QuantSpec) -> np.ndarray:
    low = np.nanmin(units, axis=-1)
    high = np.nanmax(units, axis=-1)
    amax = np.maximum(np.abs(low), np.abs(high))

    if spec.format == "int8-symmetric":
        return amax / 127.0
    if spec.format == "int4-group":
        # Use the negative end (-8 codes) when it also covers the positive side
        # to within half a step, else the positive end (7 codes).
        from_negative = -low / 8.0 + 0.0
        from_positive = high / 7.0
        return np.where(high <= 7.5 * from_negative, from_negative, from_positive)
    if spec.fp8_scaling == "amax":
        return amax / FP8_E4M3_MAX
    return np.ones_like(amax)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Codes (int8 values, or uint8 FP8 bit patterns) plus one scale per unit"""

    spec: QuantSpec
    shape: Tuple[int, ...]
    codes: np.ndarray
    scales: np.ndarray
    ragged_final_group: bool = False

    def validate(self) -> None:
        """Raise CorruptTensorError when codes or scales are outside the format"""
        if self.codes.shape != tuple(self.shape):
            raise CorruptTensorError(f"Codes have shape {self.codes.shape}, expected {tuple(self.shape)}")
        units, _, _ = _units(np.zeros(self.shape), self.spec)
        if self.scales.shape != units.shape[:-1]:
            raise CorruptTensorError(f"Scales have shape {self.scales.shape}, expected {units.shape[:-1]}")
        if self.spec.format == "fp8-e4m3":
            if np.isin(self.codes, FP8_NAN_CODES).any():
                raise CorruptTensorError("FP8 payload holds NaN bit patterns")
        else:
            low, high = _INT_RANGES[self.spec.format]
            if self.codes.size and (self.codes.min() < low or self.codes.max() > high):
                raise CorruptTensorError(f"{self.spec.format} codes fall outside [{low}, {high}]")
        if not np.isfinite(self.scales).all() or (self.scales < 0).any():
            raise CorruptTensorError("Scales must be finite and non-negative")

    def element_scales(self) -> np.ndarray:
        """Each element's unit scale, shaped like the original tensor"""
        _, expand, _ = _units(np.zeros(self.shape), self.spec)
        return np.array(expand(self.scales))


def quantize(t: Union[FeatureMap, np.ndarray], spec: QuantSpec) -> QuantizedTensor:
    """
    Quantize a tensor under a QuantSpec.

    int8-symmetric uses scale max|x|/127 per unit and codes clamped to
    [-127, 127]. int4-group uses codes in [-8, 7] with the unit scale picked
    from whichever end of the range (min/8 or max/7) covers the unit. FP8-E4M3
    rounds x / scale to the nearest representable value, saturating at 448;
    its scale is 1 unless fp8_scaling is "amax". A unit of zeros gets scale 0
    and zero codes.

    Args:
        t: FeatureMap or array of any rank >= 1
        spec: Format and granularity

    Returns:
        QuantizedTensor: codes, per-unit scales and the original shape
    """
    x = _as_array(t)
    units, expand, ragged = _units(x, spec)
    scales = _unit_scales(units, spec)
    element_scale = np.asarray(expand(scales))
    nonzero = element_scale > 0
    scaled = np.where(nonzero, x / np.where(nonzero, element_scale, 1.0), 0.0)

    if spec.format == "fp8-e4m3":
        codes = encode_fp8_e4m3(scaled)
    else:
        low, high = _INT_RANGES[spec.format]
        codes = np.clip(np.rint(scaled), low, high).astype(np.int8)

    if ragged:
        logger.debug("Final group along the last axis is ragged (%d of %d)", x.shape[-1] % spec.group_size, spec.group_size)
    return QuantizedTensor(spec, tuple(x.shape), codes, scales, ragged)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """codes x scale per unit, in the original shape"""
    q.validate()
    if q.spec.format == "fp8-e4m3":
        values = decode_fp8_e4m3(q.codes)
    else:
        values = q.codes.astype(np.float64)
    return values * q.element_scales()


class QuantErrorReport(BaseModel):
    format: str
    granularity: str
    group_size: Optional[int] = None
    elements: int
    units: int
    max_abs_err: float
    rmse: float
    mean_abs_err: float
    scale_min: float
    scale_max: float
    scale_mean: float
    zero_units: int
    clamped: int
    ragged_final_group: bool


def quant_error_report(t: Union[FeatureMap, np.ndarray], spec: QuantSpec) -> QuantErrorReport:
    """Measure quantize -> dequantize against the input"""
    x = _as_array(t)
    q = quantize(x, spec)
    error = np.abs(dequantize(q) - x)

    element_scale = q.element_scales()
    nonzero = element_scale > 0
    scaled = np.abs(np.where(nonzero, x / np.where(nonzero, element_scale, 1.0), 0.0))
    if spec.format == "fp8-e4m3":
        clamped = int((scaled > FP8_E4M3_MAX).sum())
    else:
        low, high = _INT_RANGES[spec.format]
        rounded = np.rint(np.where(x < 0, -scaled, scaled))
        clamped = int(((rounded < low) | (rounded > high)).sum())

    scales = q.scales.reshape(-1)
    return QuantErrorReport(
        format=spec.format,
        granularity=spec.granularity,
        group_size=spec.group_size,
        elements=int(x.size),
        units=int(scales.size),
        max_abs_err=float(error.max()),
        rmse=float(np.sqrt(np.mean(error * error))),
        mean_abs_err=float(error.mean()),
        scale_min=float(scales.min()),
        scale_max=float(scales.max()),
        scale_mean=float(scales.mean()),
        zero_units=int((scales == 0).sum()),
        clamped=clamped,
        ragged_final_group=q.ragged_final_group,
    )


def _pack_int4(codes: np.ndarray) -> bytes:
    nibbles = (codes.reshape(-1).astype(np.int16) & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).tobytes()


def _unpack_int4(buffer: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(buffer, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.uint8)
    nibbles[0::2] = packed & 0xF
    nibbles[1::2] = packed >> 4
    signed = nibbles[:count].astype(np.int8)
    return np.where(signed > 7, signed - 16, signed).astype(np.int8)


def _code_bytes(spec: QuantSpec, count: int) -> int:
    return (count + 1) // 2 if spec.format == "int4-group" else count


def encode_quantized(q: QuantizedTensor) -> bytes:
    """
    u32 little-endian header length, JSON header, codes, f32 scales.

    int4 packs two codes per byte, low nibble first; int8 and FP8 use one
    byte per code.
    """
    header = json.dumps(
        {
            "format": q.spec.format,
            "granularity": q.spec.granularity,
            "shape": list(q.shape),
            "group_size": q.spec.group_size,
            "channel_axis": q.spec.channel_axis,
            "fp8_scaling": q.spec.fp8_scaling,
            "scales_shape": list(q.scales.shape),
            "ragged_final_group": q.ragged_final_group,
        },
        sort_keys=True,
    ).encode("utf-8")
    if q.spec.format == "int4-group":
        codes = _pack_int4(q.codes)
    else:
        codes = np.ascontiguousarray(q.codes).tobytes()
    scales = np.ascontiguousarray(q.scales, dtype="<f4").tobytes()
    return struct.pack("<I", len(header)) + header + codes + scales


def decode_quantized(buffer: bytes) -> QuantizedTensor:
    """Parse encode_quantized output; code ranges are checked by validate()"""
    if len(buffer) < 4:
        raise TruncatedPayloadError(4, len(buffer))
    (header_length,) = struct.unpack("<I", buffer[:4])
    if len(buffer) < 4 + header_length:
        raise TruncatedPayloadError(4 + header_length, len(buffer))
    try:
        header = json.loads(buffer[4:4 + header_length].decode("utf-8"))
        spec = QuantSpec(
            format=header["format"],
            granularity=header["granularity"],
            group_size=header["group_size"],
            channel_axis=header["channel_axis"],
            fp8_scaling=header["fp8_scaling"],
        )
        shape = tuple(int(dim) for dim in header["shape"])
        scales_shape = tuple(int(dim) for dim in header["scales_shape"])
        ragged = bool(header["ragged_final_group"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as e:
        raise FormatError(f"Malformed quantized tensor header: {e}") from e

    count = int(np.prod(shape, dtype=np.int64))
    code_bytes = _code_bytes(spec, count)
    scale_bytes = int(np.prod(scales_shape, dtype=np.int64)) * 4
    start = 4 + header_length
    expected = code_bytes + scale_bytes
    actual = len(buffer) - start
    if actual < expected:
        raise TruncatedPayloadError(expected, actual)
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes after quantized tensor payload")

    raw_codes = buffer[start:start + code_bytes]
    if spec.format == "int4-group":
        codes = _unpack_int4(raw_codes, count)
    elif spec.format == "fp8-e4m3":
        codes = np.frombuffer(raw_codes, dtype=np.uint8).copy()
    else:
        codes = np.frombuffer(raw_codes, dtype=np.int8).copy()
    scales = np.frombuffer(buffer, dtype="<f4", offset=start + code_bytes).astype(np.float64).reshape(scales_shape)

    q = QuantizedTensor(spec, shape, codes.reshape(shape), scales, ragged)
    q.validate()
    return q


def write_quantized(path: Union[str, Path], q: QuantizedTensor) -> None:
    Path(path).write_bytes(encode_quantized(q))


def read_quantized(path: Union[str, Path]) -> QuantizedTensor:
    try:
        buffer = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    return decode_quantized(buffer)
