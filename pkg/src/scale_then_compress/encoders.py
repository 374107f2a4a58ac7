"""
Tile encoders for the scale-then-compress pipeline.
Maps fixed-size image tiles to feature grids.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from tqdm.auto import tqdm

from .config import EncoderConfig, S2Config, settings
from .errors import InvalidArgumentError
from .tensor import FeatureMap, Image

logger = logging.getLogger(__name__)


@runtime_checkable
class TileEncoder(Protocol):
    """Deterministic map from a tile_side^2 image to a feature_side^2 x channels grid"""

    channels: int
    feature_side: int
    tile_side: int

    def encode(self, tile: Image) -> FeatureMap:
        ...


class ToyPatchEncoder:
    """
    Desk-scale stand-in for a ViT encoder.

    The tile is cut into feature_side x feature_side square patches. Channel 0
    is the mean intensity of each patch; the remaining channels are a fixed
    random projection of the flattened patch, seeded from `seed`.
    """

    def __init__(self, channels: int = 8, feature_side: int = 32, tile_side: int = 448, seed: int = 0):
        if channels < 1:
            raise InvalidArgumentError("ToyPatchEncoder needs at least one channel")
        if feature_side < 1 or tile_side % feature_side:
            raise InvalidArgumentError(
                f"tile_side {tile_side} must be a multiple of feature_side {feature_side}"
            )
        self.channels = channels
        self.feature_side = feature_side
        self.tile_side = tile_side
        self.seed = seed
        self.patch_side = tile_side // feature_side

        # One projection per supported input channel count
        self._projections = {}
        for in_channels in (1, 3):
            dim = self.patch_side * self.patch_side * in_channels
            rng = np.random.default_rng([seed, in_channels])
            self._projections[in_channels] = rng.standard_normal((dim, channels - 1)) / np.sqrt(dim)

        logger.debug(
            "Initialized ToyPatchEncoder: %d channels, %dx%d patches of %dpx",
            channels, feature_side, feature_side, self.patch_side,
        )

    @classmethod
    def from_config(cls, encoder: EncoderConfig, s2: S2Config) -> "ToyPatchEncoder":
        return cls(
            channels=encoder.channels,
            feature_side=s2.feature_side,
            tile_side=s2.tile_side,
            seed=encoder.seed,
        )

    def encode(self, tile: Image) -> FeatureMap:
        """
        Encode a single tile.

        Args:
            tile: tile_side x tile_side image

        Returns:
            FeatureMap: feature_side x feature_side x channels grid
        """
        if (tile.height, tile.width) != (self.tile_side, self.tile_side):
            raise InvalidArgumentError(
                f"Tile must be {self.tile_side}x{self.tile_side}, got {tile.height}x{tile.width}"
            )
        f, p = self.feature_side, self.patch_side
        patches = (
            tile.data.reshape(f, p, f, p, tile.channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(f, f, p * p * tile.channels)
        )
        anchor = patches.mean(axis=2, keepdims=True)
        if self.channels == 1:
            return FeatureMap(anchor)
        projected = patches @ self._projections[tile.channels]
        return FeatureMap(np.concatenate([anchor, projected], axis=2))


def build_encoder(encoder: EncoderConfig, s2: S2Config) -> TileEncoder:
    """Instantiate the encoder named by the configuration"""
    if encoder.kind == "toy-patch":
        return ToyPatchEncoder.from_config(encoder, s2)
    raise InvalidArgumentError(f"Unknown encoder kind: {encoder.kind}")


def encode_batch(
    encoder: TileEncoder,
    tiles: Sequence[Image],
    workers: Optional[int] = None,
    desc: str = "Encoding tiles",
) -> List[FeatureMap]:
    """
    Encode tiles, optionally on a thread pool.

    Results are returned in tile order whatever order the workers finish in.

    Args:
        encoder: Stateless tile encoder
        tiles: Tiles in row-major grid order
        workers: Thread count (defaults to settings)
        desc: Progress-bar label

    Returns:
        List[FeatureMap]: One feature map per tile
    """
    workers = workers or settings.encode_workers
    results: List[FeatureMap] = [None] * len(tiles)

    with tqdm(total=len(tiles), desc=desc, disable=not settings.show_progress) as pbar:
        if workers <= 1 or len(tiles) <= 1:
            for index, tile in enumerate(tiles):
                results[index] = encoder.encode(tile)
                pbar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(encoder.encode, tile): index for index, tile in enumerate(tiles)}
                for future, index in futures.items():
                    results[index] = future.result()
                    pbar.update(1)

    return results
