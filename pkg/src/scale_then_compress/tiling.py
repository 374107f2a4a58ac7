"""
Dynamic-S2 tiling: per-scale resize geometry, tile splitting, feature stitching
and multi-scale merging.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import S2Config
from .encoders import TileEncoder, encode_batch
from .errors import InvalidArgumentError
from .tensor import FeatureMap, Image, concat_channels, interpolate_bilinear, resize_image

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScalePlan:
    """Resize target and tile grid for one scale"""

    scale_factor: int
    resized_height: int
    resized_width: int
    grid_rows: int
    grid_cols: int

    @property
    def num_tiles(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class TilePlan:
    """Geometry decision for one image: one ScalePlan per configured scale, smallest first"""

    image_height: int
    image_width: int
    config: S2Config
    scales: Tuple[ScalePlan, ...]

    @property
    def largest(self) -> ScalePlan:
        return self.scales[-1]

    @property
    def encoder_tiles(self) -> int:
        """Encoder passes across all scales"""
        return sum(scale.num_tiles for scale in self.scales)

    @property
    def merged_size(self) -> Tuple[int, int]:
        """Spatial size of the merged multi-scale feature map"""
        side = self.config.feature_side
        return self.largest.grid_rows * side, self.largest.grid_cols * side

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_height": self.image_height,
            "image_width": self.image_width,
            "tile_side": self.config.tile_side,
            "feature_side": self.config.feature_side,
            "scales": [
                {
                    "scale_factor": scale.scale_factor,
                    "resized_height": scale.resized_height,
                    "resized_width": scale.resized_width,
                    "grid_rows": scale.grid_rows,
                    "grid_cols": scale.grid_cols,
                    "tiles": scale.num_tiles,
                }
                for scale in self.scales
            ],
            "encoder_tiles": self.encoder_tiles,
            "merged_height": self.merged_size[0],
            "merged_width": self.merged_size[1],
        }


@lru_cache(maxsize=64)
def _feasible_grids(min_tiles: int, max_tiles: int) -> Tuple[Tuple[int, int], ...]:
    return tuple(
        (rows, cols)
        for rows in range(1, max_tiles + 1)
        for cols in range(1, max_tiles // rows + 1)
        if rows * cols >= min_tiles
    )


def _aspect_key(rows: int, cols: int, image_h: int, image_w: int) -> Tuple[Fraction, int, int]:
    # |ln(c/r) - ln(w/h)| is ordered like max(q, 1/q) with q = c*h / (r*w);
    # exact rationals keep ties (and transposition) exact.
    ratio = Fraction(cols * image_h, rows * image_w)
    return max(ratio, 1 / ratio), rows * cols, rows


def plan_tiles(image_h: int, image_w: int, cfg: S2Config) -> TilePlan:
    """
    Choose per-scale resize targets and tile grids.

    Non-largest scales are square grids whose side is their scale factor. The
    largest scale takes the feasible grid (min <= rows*cols <= max) closest to
    the image aspect ratio in log space, preferring fewer tiles and then fewer
    rows on ties.

    Args:
        image_h: Image height in pixels
        image_w: Image width in pixels
        cfg: Tiling configuration

    Returns:
        TilePlan: Geometry for every scale
    """
    if image_h < 1 or image_w < 1:
        raise InvalidArgumentError(f"Image size must be positive, got {image_h}x{image_w}")

    side = cfg.tile_side
    scales = [
        ScalePlan(factor, factor * side, factor * side, factor, factor)
        for factor in cfg.scale_factors[:-1]
    ]
    rows, cols = min(
        _feasible_grids(cfg.min_tiles_largest_scale, cfg.max_tiles_largest_scale),
        key=lambda grid: _aspect_key(grid[0], grid[1], image_h, image_w),
    )
    scales.append(ScalePlan(cfg.scale_factors[-1], rows * side, cols * side, rows, cols))
    return TilePlan(image_h, image_w, cfg, tuple(scales))


def split_tiles(img: Image, plan: TilePlan, scale_index: int) -> List[Image]:
    """
    Resize an image to one scale of the plan and cut it into tiles.

    Args:
        img: Source image
        plan: Plan produced for this image's size
        scale_index: Index into plan.scales

    Returns:
        List[Image]: grid_rows x grid_cols tiles in row-major order
    """
    if not 0 <= scale_index < len(plan.scales):
        raise InvalidArgumentError(
            f"Scale index {scale_index} is outside 0..{len(plan.scales) - 1}"
        )
    scale = plan.scales[scale_index]
    side = plan.config.tile_side
    resized = resize_image(img, scale.resized_height, scale.resized_width).data
    return [
        Image(resized[row * side:(row + 1) * side, col * side:(col + 1) * side])
        for row in range(scale.grid_rows)
        for col in range(scale.grid_cols)
    ]


def stitch_features(tiles: Sequence[FeatureMap], grid_rows: int, grid_cols: int) -> FeatureMap:
    """
    Place per-tile feature maps back on their grid.

    Tile (i, j) lands in output rows [i*f, (i+1)*f) and columns [j*f, (j+1)*f).

    Args:
        tiles: Feature maps in row-major tile order, all of one shape
        grid_rows: Tile rows
        grid_cols: Tile columns

    Returns:
        FeatureMap: (grid_rows*f) x (grid_cols*f) x C map
    """
    if grid_rows < 1 or grid_cols < 1 or len(tiles) != grid_rows * grid_cols:
        raise InvalidArgumentError(
            f"Expected {grid_rows}x{grid_cols} tiles, got {len(tiles)}"
        )
    shape = tiles[0].shape
    for index, tile in enumerate(tiles):
        if tile.shape != shape:
            raise InvalidArgumentError(f"Tile {index} has shape {tile.shape}, expected {shape}")
    fh, fw, channels = shape
    stacked = np.stack([tile.data for tile in tiles]).reshape(grid_rows, grid_cols, fh, fw, channels)
    return FeatureMap(stacked.transpose(0, 2, 1, 3, 4).reshape(grid_rows * fh, grid_cols * fw, channels))


def encode_scale(img: Image, plan: TilePlan, scale_index: int, enc: TileEncoder,
                 workers: Optional[int] = None) -> FeatureMap:
    """Split, encode and stitch one scale of the plan"""
    tiles = split_tiles(img, plan, scale_index)
    scale = plan.scales[scale_index]
    features = encode_batch(enc, tiles, workers=workers, desc=f"Encoding scale x{scale.scale_factor}")
    expected = (plan.config.feature_side, plan.config.feature_side, enc.channels)
    for feature in features:
        if feature.shape != expected:
            raise InvalidArgumentError(f"Encoder produced {feature.shape}, expected {expected}")
    return stitch_features(features, scale.grid_rows, scale.grid_cols)


def multiscale_features(img: Image, enc: TileEncoder, cfg: S2Config,
                        workers: Optional[int] = None) -> FeatureMap:
    """
    Multi-scale feature extraction with Dynamic-S2 geometry.

    Every scale is tiled, encoded and stitched, interpolated to the largest
    scale's stitched size, and concatenated along channels, smallest scale first.

    Args:
        img: Input image
        enc: Tile encoder matching cfg.tile_side and cfg.feature_side
        cfg: Tiling configuration
        workers: Encoding threads (defaults to settings)

    Returns:
        FeatureMap: merged map with len(scale_factors) * enc.channels channels
    """
    plan = plan_tiles(img.height, img.width, cfg)
    out_h, out_w = plan.merged_size
    per_scale = []
    for index, scale in enumerate(plan.scales):
        stitched = encode_scale(img, plan, index, enc, workers=workers)
        logger.debug(
            "Scale x%d: %dx%d tiles -> %dx%d features",
            scale.scale_factor, scale.grid_rows, scale.grid_cols, stitched.height, stitched.width,
        )
        per_scale.append(interpolate_bilinear(stitched, out_h, out_w))
    return concat_channels(per_scale)
