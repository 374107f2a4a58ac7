"""
Visual token compression: spatial-to-channel (STC) reshape for image tokens,
temporal group averaging for video tokens, and the token accounting that goes
with them.
"""

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .tensor import FeatureMap, bilinear_resize, frozen_array
from .tiling import TilePlan, stitch_features

Provenance = Literal["image", "video-frame"]


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """rows x cols grid of tokens, each a channels-wide vector"""

    data: np.ndarray
    provenance: Provenance = "image"
    k_applied: int = 1
    interpolated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", frozen_array(self.data, 3, "TokenGrid"))

    @classmethod
    def from_feature_map(cls, fmap: FeatureMap, provenance: Provenance = "image") -> "TokenGrid":
        return cls(fmap.data, provenance=provenance)

    def to_feature_map(self) -> FeatureMap:
        return FeatureMap(self.data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def metadata(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "channels": self.channels,
            "frames": 1,
            "k_applied": self.k_applied,
            "interpolated": self.interpolated,
        }


@dataclass(frozen=True, eq=False)
class VideoTokenTensor:
    """F frames of identically shaped token grids, stored as (F, rows, cols, channels)"""

    data: np.ndarray
    k_applied: int = 1
    interpolated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", frozen_array(self.data, 4, "VideoTokenTensor"))

    @classmethod
    def from_frames(cls, frames: Sequence[TokenGrid]) -> "VideoTokenTensor":
        if not frames:
            raise InvalidArgumentError("A video needs at least one frame")
        shape = frames[0].data.shape
        for index, frame in enumerate(frames):
            if frame.data.shape != shape:
                raise InvalidArgumentError(f"Frame {index} has shape {frame.data.shape}, expected {shape}")
        return cls(
            np.stack([frame.data for frame in frames]),
            k_applied=frames[0].k_applied,
            interpolated=frames[0].interpolated,
        )

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def num_tokens(self) -> int:
        return self.frames * self.rows * self.cols

    def frame(self, index: int) -> TokenGrid:
        return TokenGrid(
            self.data[index],
            provenance="video-frame",
            k_applied=self.k_applied,
            interpolated=self.interpolated,
        )

    def metadata(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "channels": self.channels,
            "frames": self.frames,
            "k_applied": self.k_applied,
            "interpolated": self.interpolated,
        }


def _check_block(k: int) -> None:
    if k < 1:
        raise InvalidArgumentError(f"STC block side must be at least 1, got {k}")


def stc_reshape(g: TokenGrid, k: int) -> TokenGrid:
    """
    Fold every k x k block of tokens into the channel dimension.

    Output cell (i, j) holds input cell (i*k + a, j*k + b) in channel block
    a*k + b. When k does not divide a side, the grid is first bilinearly
    interpolated up to the next multiple of k and the result is marked
    `interpolated`.

    Args:
        g: Token grid
        k: Block side

    Returns:
        TokenGrid: (rows/k) x (cols/k) grid with k*k*channels channels
    """
    _check_block(k)
    if k == 1:
        return g
    data = g.data
    interpolated = g.interpolated
    if g.rows % k or g.cols % k:
        rows = math.ceil(g.rows / k) * k
        cols = math.ceil(g.cols / k) * k
        data = bilinear_resize(data, rows, cols)
        interpolated = True
    rows, cols, channels = data.shape
    folded = (
        data.reshape(rows // k, k, cols // k, k, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows // k, cols // k, k * k * channels)
    )
    return TokenGrid(folded, provenance=g.provenance, k_applied=g.k_applied * k, interpolated=interpolated)


def stc_inverse(g: TokenGrid, k: int) -> TokenGrid:
    """Unfold the channel blocks of a divisible STC reshape back into k x k spatial blocks"""
    _check_block(k)
    if g.channels % (k * k):
        raise InvalidArgumentError(f"{g.channels} channels are not divisible by k^2 = {k * k}")
    if k == 1:
        return g
    channels = g.channels // (k * k)
    unfolded = (
        g.data.reshape(g.rows, g.cols, k, k, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g.rows * k, g.cols * k, channels)
    )
    k_applied = g.k_applied // k if g.k_applied % k == 0 else 1
    return TokenGrid(unfolded, provenance=g.provenance, k_applied=k_applied, interpolated=g.interpolated)


def stc_video(v: VideoTokenTensor, k: int) -> VideoTokenTensor:
    """Apply stc_reshape to every frame"""
    return VideoTokenTensor.from_frames([stc_reshape(v.frame(index), k) for index in range(v.frames)])


def temporal_pool(v: VideoTokenTensor, ratio: int) -> VideoTokenTensor:
    """
    Average consecutive groups of `ratio` frames.

    The final group may be shorter; it is averaged over the frames it has.

    Args:
        v: Video tokens
        ratio: Frames per group

    Returns:
        VideoTokenTensor: ceil(F / ratio) frames
    """
    if ratio < 1:
        raise InvalidArgumentError(f"Temporal pooling ratio must be at least 1, got {ratio}")
    if ratio == 1:
        return v
    groups = [
        v.data[start:start + ratio].mean(axis=0)
        for start in range(0, v.frames, ratio)
    ]
    return replace(v, data=np.stack(groups))


def uniform_frame_indices(total_frames: int, count: int) -> List[int]:
    """
    Pick `count` frames spread uniformly over a clip, one from the centre of
    each equal-length segment. All frames are returned when count >= total.
    """
    if total_frames < 1 or count < 1:
        raise InvalidArgumentError(
            f"Frame sampling needs positive sizes, got total={total_frames} count={count}"
        )
    if count >= total_frames:
        return list(range(total_frames))
    return [int((2 * index + 1) * total_frames // (2 * count)) for index in range(count)]


def compress_per_tile(fmap: FeatureMap, grid_rows: int, grid_cols: int, k: int) -> TokenGrid:
    """
    STC-compress a merged multi-scale map tile region by tile region.

    Each (H/grid_rows) x (W/grid_cols) region is reshaped on its own and the
    results are restitched, so the token count is tokens-per-tile x tiles.
    """
    if grid_rows < 1 or grid_cols < 1 or fmap.height % grid_rows or fmap.width % grid_cols:
        raise InvalidArgumentError(
            f"Map {fmap.height}x{fmap.width} does not split into a {grid_rows}x{grid_cols} grid"
        )
    fh, fw = fmap.height // grid_rows, fmap.width // grid_cols
    compressed = [
        stc_reshape(TokenGrid(fmap.data[row * fh:(row + 1) * fh, col * fw:(col + 1) * fw]), k)
        for row in range(grid_rows)
        for col in range(grid_cols)
    ]
    stitched = stitch_features([grid.to_feature_map() for grid in compressed], grid_rows, grid_cols)
    return TokenGrid(stitched.data, k_applied=k, interpolated=compressed[0].interpolated)


@dataclass(frozen=True)
class TokenCount:
    """Token accounting for one tile plan and STC block"""

    tokens_per_tile: int
    tile_grid_side: int
    merged_tiles: int
    encoder_tiles: int
    total_tokens: int
    interpolated: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tiles": self.merged_tiles,
            "encoder_tiles": self.encoder_tiles,
            "tokens_per_tile": self.tokens_per_tile,
            "tile_grid_side": self.tile_grid_side,
            "total_tokens": self.total_tokens,
            "interpolated": self.interpolated,
        }


def tokens_per_tile(feature_side: int, k: int) -> int:
    """ceil(feature_side / k)^2, the per-tile token count after STC"""
    _check_block(k)
    if feature_side < 1:
        raise InvalidArgumentError(f"feature_side must be positive, got {feature_side}")
    return math.ceil(feature_side / k) ** 2


def count_tokens(plan: TilePlan, k: int, feature_side: Optional[int] = None) -> TokenCount:
    """
    Tokens per tile and in total for a plan compressed with block k.

    Scale merging shares the largest grid, so the total counts the merged
    map's tiles (the largest-scale grid), not every encoder pass.

    Args:
        plan: Tile plan
        k: STC block side
        feature_side: Feature cells per tile side (defaults to the plan's config)

    Returns:
        TokenCount: per-tile and total counts
    """
    side = plan.config.feature_side if feature_side is None else feature_side
    per_tile = tokens_per_tile(side, k)
    merged_tiles = plan.largest.num_tiles
    return TokenCount(
        tokens_per_tile=per_tile,
        tile_grid_side=math.ceil(side / k),
        merged_tiles=merged_tiles,
        encoder_tiles=plan.encoder_tiles,
        total_tokens=per_tile * merged_tiles,
        interpolated=k > 1 and side % k != 0,
    )
