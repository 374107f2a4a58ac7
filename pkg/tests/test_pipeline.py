import numpy as np

from scale_then_compress.config import EncoderConfig, PipelineConfig, S2Config
from scale_then_compress.pipeline import ScaleThenCompressPipeline
from scale_then_compress.tensor import Image
from scale_then_compress.tiling import multiscale_features

CONFIG = PipelineConfig(
    s2=S2Config(tile_side=16, feature_side=4, scale_factors=[1, 2, 3]),
    encoder=EncoderConfig(channels=2),
)


def test_encode_image_uses_multiscale_features(rng):
    pipeline = ScaleThenCompressPipeline(CONFIG)
    img = Image(rng.uniform(size=(30, 40, 3)))
    encoded = pipeline.encode_image(img, k=2)
    expected = multiscale_features(img, pipeline.encoder, CONFIG.s2)
    assert np.array_equal(encoded.features.data, expected.data)

    rows, cols = encoded.plan.largest.grid_rows, encoded.plan.largest.grid_cols
    assert encoded.features.shape == (rows * 4, cols * 4, 3 * 2)
    assert encoded.tokens.num_tokens == encoded.counts.total_tokens == rows * cols * 4


def test_compress_video_defaults_to_temporal_pooling_only(rng):
    pipeline = ScaleThenCompressPipeline(CONFIG)
    pooled = pipeline.compress_video(rng.standard_normal((12, 6, 6, 2)), pool_ratio=3)
    assert pooled.data.shape == (4, 6, 6, 2)
    assert pooled.num_tokens == 4 * 36
