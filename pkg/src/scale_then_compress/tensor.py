"""
Dense tensor substrate for the scale-then-compress pipeline.
Feature maps and images are rank-3 (row, column, channel) numpy arrays.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError


def frozen_array(data, ndim: int, kind: str) -> np.ndarray:
    """Copy `data` into a read-only float64 array of rank `ndim`, rejecting empty or non-finite input"""
    array = np.array(data, dtype=np.float64, copy=True)
    if array.ndim != ndim:
        raise InvalidArgumentError(f"{kind} needs {ndim} dimensions, got shape {array.shape}")
    if any(dim < 1 for dim in array.shape):
        raise InvalidArgumentError(f"{kind} dimensions must be positive, got shape {array.shape}")
    if not np.isfinite(array).all():
        raise InvalidArgumentError(f"{kind} values must be finite")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Immutable height x width x channels grid of finite features"""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", frozen_array(self.data, 3, "FeatureMap"))

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int, values: Sequence[float]) -> "FeatureMap":
        """Build a map from row-major (row, column, channel) values"""
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != height * width * channels:
            raise InvalidArgumentError(
                f"Expected {height * width * channels} values for shape "
                f"({height}, {width}, {channels}), got {flat.size}"
            )
        return cls(flat.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable image with 1 or 3 channels and intensities in [0, 1]"""

    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim == 2:
            raw = raw[:, :, np.newaxis]
        array = frozen_array(raw, 3, "Image")
        if array.shape[2] not in (1, 3):
            raise InvalidArgumentError(f"Image needs 1 or 3 channels, got {array.shape[2]}")
        if array.min() < 0.0 or array.max() > 1.0:
            raise InvalidArgumentError("Image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", array)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _check_target(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"Target size must be positive, got {out_h}x{out_w}")


def _resize_axis(array: np.ndarray, size: int, axis: int) -> np.ndarray:
    """Half-pixel (align-corners-false) linear resampling along one axis"""
    length = array.shape[axis]
    if length == size:
        return array
    coords = (np.arange(size, dtype=np.float64) + 0.5) * (length / size) - 0.5
    coords = np.clip(coords, 0.0, length - 1)
    lower = np.floor(coords).astype(np.int64)
    upper = np.minimum(lower + 1, length - 1)
    weight_shape = [1] * array.ndim
    weight_shape[axis] = size
    weight = (coords - lower).reshape(weight_shape)
    a = np.take(array, lower, axis=axis)
    b = np.take(array, upper, axis=axis)
    return a + (b - a) * weight


def bilinear_resize(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the first two axes of an (H, W, C) array bilinearly"""
    _check_target(out_h, out_w)
    return _resize_axis(_resize_axis(array, out_h, 0), out_w, 1)


def interpolate_bilinear(src: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """
    Resample a feature map to out_h x out_w.

    Each output value is a convex combination of the four nearest source
    samples under align-corners-false sampling; the identity size returns an
    exact copy.

    Args:
        src: Feature map to resample
        out_h: Target rows
        out_w: Target columns

    Returns:
        FeatureMap: Resampled map with src.channels channels
    """
    return FeatureMap(bilinear_resize(src.data, out_h, out_w))


def resize_image(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear image resize, clipped back into [0, 1]"""
    resized = bilinear_resize(img.data, out_h, out_w)
    return Image(np.clip(resized, 0.0, 1.0))


def block_average(src: FeatureMap, bh: int, bw: int) -> FeatureMap:
    """Replace every bh x bw block by its arithmetic mean"""
    if bh < 1 or bw < 1 or src.height % bh or src.width % bw:
        raise InvalidArgumentError(
            f"Block {bh}x{bw} does not divide map {src.height}x{src.width}"
        )
    blocks = src.data.reshape(src.height // bh, bh, src.width // bw, bw, src.channels)
    return FeatureMap(blocks.mean(axis=(1, 3)))


def upsample_nearest(src: FeatureMap, fh: int, fw: int) -> FeatureMap:
    """Repeat every cell fh times down and fw times across"""
    if fh < 1 or fw < 1:
        raise InvalidArgumentError(f"Upsampling factors must be positive, got {fh}x{fw}")
    return FeatureMap(np.repeat(np.repeat(src.data, fh, axis=0), fw, axis=1))


def concat_channels(maps: Sequence[FeatureMap]) -> FeatureMap:
    """Stack maps of equal spatial size along the channel axis, in list order"""
    if not maps:
        raise InvalidArgumentError("concat_channels needs at least one map")
    height, width = maps[0].height, maps[0].width
    for index, fmap in enumerate(maps):
        if (fmap.height, fmap.width) != (height, width):
            raise InvalidArgumentError(
                f"Map {index} is {fmap.height}x{fmap.width}, expected {height}x{width}"
            )
    if len(maps) == 1:
        return maps[0]
    return FeatureMap(np.concatenate([fmap.data for fmap in maps], axis=2))


def slice_channels(src: FeatureMap, start: int, stop: int) -> FeatureMap:
    """Channels [start, stop) of a map"""
    if not 0 <= start < stop <= src.channels:
        raise InvalidArgumentError(
            f"Channel slice [{start}, {stop}) is outside 0..{src.channels}"
        )
    return FeatureMap(src.data[:, :, start:stop])
