"""
Pipeline module for the scale-then-compress toolkit.
Orchestrates tiling, encoding and token compression for images and videos.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from .compress import (
    TokenCount,
    TokenGrid,
    VideoTokenTensor,
    compress_per_tile,
    count_tokens,
    stc_video,
    temporal_pool,
    uniform_frame_indices,
)
from .config import PipelineConfig
from .cost_model import CostReport, pipeline_cost
from .encoders import build_encoder
from .tensor import FeatureMap, Image
from .tiling import TilePlan, multiscale_features, plan_tiles

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EncodedImage:
    plan: TilePlan
    features: FeatureMap
    tokens: TokenGrid
    counts: TokenCount

    def summary(self) -> Dict[str, Any]:
        return {
            **self.counts.to_dict(),
            "grid_rows": self.plan.largest.grid_rows,
            "grid_cols": self.plan.largest.grid_cols,
            "feature_shape": list(self.features.shape),
            "token_grid": self.tokens.metadata(),
        }


class ScaleThenCompressPipeline:
    """Scale up with Dynamic-S2 tiling, then compress the visual tokens"""

    def __init__(self, config: Optional[PipelineConfig] = None, workers: Optional[int] = None):
        self.config = config or PipelineConfig()
        self.encoder = build_encoder(self.config.encoder, self.config.s2)
        self.workers = workers
        logger.info(
            "Pipeline ready: scales %s, tile %dpx, STC block %d, temporal pool %d",
            self.config.s2.scale_factors,
            self.config.s2.tile_side,
            self.config.stc_block,
            self.config.temporal_pool_ratio,
        )

    def plan(self, height: int, width: int) -> TilePlan:
        return plan_tiles(height, width, self.config.s2)

    def encode_image(self, img: Image, k: Optional[int] = None) -> EncodedImage:
        """
        Tile, encode, merge and compress one image.

        Args:
            img: Input image
            k: STC block side (defaults to the configured one)

        Returns:
            EncodedImage: plan, merged features, compressed tokens and counts
        """
        k = self.config.stc_block if k is None else k

        start_time = time.time()
        plan = self.plan(img.height, img.width)
        logger.info(
            "Planned %dx%d image: %dx%d largest grid, %d encoder tiles in %.3fs",
            img.height, img.width, plan.largest.grid_rows, plan.largest.grid_cols,
            plan.encoder_tiles, time.time() - start_time,
        )

        start_time = time.time()
        features = multiscale_features(img, self.encoder, self.config.s2, workers=self.workers)
        logger.info(
            "Encoded %d tiles into a %dx%dx%d merged map in %.3fs",
            plan.encoder_tiles, *features.shape, time.time() - start_time,
        )

        start_time = time.time()
        tokens = compress_per_tile(features, plan.largest.grid_rows, plan.largest.grid_cols, k)
        counts = count_tokens(plan, k, feature_side=self.encoder.feature_side)
        logger.info(
            "Compressed to %d tokens (%d per tile) in %.3fs",
            tokens.num_tokens, counts.tokens_per_tile, time.time() - start_time,
        )
        return EncodedImage(plan, features, tokens, counts)

    def compress_video(
        self,
        frames: np.ndarray,
        sample_frames: Optional[int] = None,
        pool_ratio: Optional[int] = None,
        k: Optional[int] = 1,
    ) -> VideoTokenTensor:
        """
        Compress per-frame token grids of shape (F, rows, cols, channels).

        Frames are optionally subsampled uniformly, averaged in groups of
        `pool_ratio` and STC-reshaped with block k.
        """
        pool_ratio = self.config.temporal_pool_ratio if pool_ratio is None else pool_ratio
        video = VideoTokenTensor(frames)
        if sample_frames is not None:
            indices = uniform_frame_indices(video.frames, sample_frames)
            video = VideoTokenTensor(video.data[indices])
        start_time = time.time()
        pooled = temporal_pool(video, pool_ratio)
        compressed = stc_video(pooled, k) if k and k > 1 else pooled
        logger.info(
            "Video %d frames -> %d frames, %d tokens in %.3fs",
            video.frames, compressed.frames, compressed.num_tokens, time.time() - start_time,
        )
        return compressed

    def cost(self, height: int, width: int, k: Optional[int] = None, label: str = "") -> CostReport:
        """Analytic cost of one image of the given size under this configuration"""
        k = self.config.stc_block if k is None else k
        return pipeline_cost(self.plan(height, width), k, self.config.model, self.config.quant, label=label)
