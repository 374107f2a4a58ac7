import math

import numpy as np
import pytest

from scale_then_compress.config import S2Config
from scale_then_compress.encoders import ToyPatchEncoder, encode_batch
from scale_then_compress.errors import InvalidArgumentError
from scale_then_compress.tensor import FeatureMap, Image, resize_image
from scale_then_compress.tiling import multiscale_features, plan_tiles, split_tiles, stitch_features


def brute_force_grid(image_h, image_w, min_tiles, max_tiles):
    target = math.log(image_w / image_h)
    candidates = [
        (abs(math.log(cols / rows) - target), rows * cols, rows, cols)
        for rows in range(1, max_tiles + 1)
        for cols in range(1, max_tiles + 1)
        if min_tiles <= rows * cols <= max_tiles
    ]
    # Distinct distances differ by far more than float noise for sizes <= 4096
    nearest = min(candidate[0] for candidate in candidates)
    tied = [candidate for candidate in candidates if candidate[0] <= nearest + 1e-11]
    _, _, rows, cols = min(tied, key=lambda candidate: (candidate[1], candidate[2]))
    return rows, cols


def small_config(**overrides):
    values = {"tile_side": 16, "feature_side": 4, "scale_factors": [1, 2]}
    values.update(overrides)
    return S2Config(**values)


def test_square_image_single_scale():
    plan = plan_tiles(448, 448, S2Config(scale_factors=[1]))
    assert len(plan.scales) == 1
    largest = plan.largest
    assert (largest.grid_rows, largest.grid_cols) == (1, 1)
    assert (largest.resized_height, largest.resized_width) == (448, 448)


def test_four_by_three_image_uses_three_by_four_grid():
    plan = plan_tiles(600, 800, S2Config())
    assert [(s.grid_rows, s.grid_cols) for s in plan.scales] == [(1, 1), (2, 2), (3, 4)]
    assert (plan.largest.resized_height, plan.largest.resized_width) == (1344, 1792)
    assert plan.encoder_tiles == 1 + 4 + 12
    assert plan.merged_size == (96, 128)


def test_extreme_strip_uses_one_by_twelve():
    plan = plan_tiles(100, 4000, S2Config())
    assert (plan.largest.grid_rows, plan.largest.grid_cols) == (1, 12)


def test_random_sizes_satisfy_plan_invariants(rng):
    cfg = S2Config()
    sizes = rng.integers(1, 4097, size=(10_000, 2))
    for image_h, image_w in sizes.tolist():
        plan = plan_tiles(image_h, image_w, cfg)
        for scale, factor in zip(plan.scales, cfg.scale_factors):
            assert scale.resized_height == scale.grid_rows * cfg.tile_side
            assert scale.resized_width == scale.grid_cols * cfg.tile_side
            if factor != cfg.scale_factors[-1]:
                assert scale.grid_rows == scale.grid_cols == factor
        largest = plan.largest
        assert cfg.min_tiles_largest_scale <= largest.num_tiles <= cfg.max_tiles_largest_scale

        transposed = plan_tiles(image_w, image_h, cfg).largest
        assert (transposed.grid_rows, transposed.grid_cols) == (largest.grid_cols, largest.grid_rows)


def test_plan_matches_brute_force_enumeration(rng):
    for image_h, image_w in rng.integers(1, 4097, size=(500, 2)).tolist():
        for min_tiles, max_tiles in ((1, 12), (1, 6), (4, 16)):
            cfg = S2Config(min_tiles_largest_scale=min_tiles, max_tiles_largest_scale=max_tiles)
            largest = plan_tiles(image_h, image_w, cfg).largest
            assert (largest.grid_rows, largest.grid_cols) == brute_force_grid(image_h, image_w, min_tiles, max_tiles)


def test_plan_to_dict_is_json_ready():
    data = plan_tiles(600, 800, S2Config()).to_dict()
    assert data["scales"][-1] == {
        "scale_factor": 3,
        "resized_height": 1344,
        "resized_width": 1792,
        "grid_rows": 3,
        "grid_cols": 4,
        "tiles": 12,
    }


def test_split_identity_and_partition(rng):
    cfg = small_config()
    img = Image(rng.uniform(size=(16, 16, 3)))
    plan = plan_tiles(16, 16, cfg)
    (tile,) = split_tiles(img, plan, 0)
    assert np.array_equal(tile.data, img.data)

    big = Image(rng.uniform(size=(32, 32, 3)))
    plan = plan_tiles(32, 32, small_config(scale_factors=[1, 2, 3]))
    tiles = split_tiles(big, plan, 1)
    assert len(tiles) == 4
    reassembled = stitch_features([FeatureMap(t.data) for t in tiles], 2, 2)
    resized = resize_image(big, 32, 32)
    assert np.array_equal(reassembled.data, resized.data)


def test_split_rejects_bad_scale_index():
    cfg = small_config()
    plan = plan_tiles(16, 16, cfg)
    with pytest.raises(InvalidArgumentError):
        split_tiles(Image(np.zeros((16, 16))), plan, 2)


def test_split_on_largest_scale_of_rectangular_plan(rng):
    cfg = S2Config(scale_factors=[1, 2, 3])
    plan = plan_tiles(600, 800, cfg)
    img = Image(rng.uniform(size=(600, 800, 3)))
    tiles = split_tiles(img, plan, 2)
    assert len(tiles) == 12
    assert all((t.height, t.width) == (448, 448) for t in tiles)


def test_stitch_places_tiles_row_major():
    tiles = [FeatureMap(np.full((2, 2, 1), float(value))) for value in range(4)]
    out = stitch_features(tiles, 2, 2).data[:, :, 0]
    assert np.array_equal(out, np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float))

    single = FeatureMap(np.arange(12.0).reshape(2, 2, 3))
    assert np.array_equal(stitch_features([single], 1, 1).data, single.data)

    with pytest.raises(InvalidArgumentError):
        stitch_features(tiles[:3], 2, 2)


def test_split_then_stitch_random_map_round_trips(rng):
    src = rng.standard_normal((64, 64, 3))
    blocks = [FeatureMap(src[i * 32:(i + 1) * 32, j * 32:(j + 1) * 32]) for i in range(2) for j in range(2)]
    assert np.array_equal(stitch_features(blocks, 2, 2).data, src)


def test_toy_encoder_anchor_channel_is_patch_mean(rng):
    encoder = ToyPatchEncoder(channels=4, feature_side=4, tile_side=16, seed=3)
    tile = Image(rng.uniform(size=(16, 16, 3)))
    out = encoder.encode(tile)
    assert out.shape == (4, 4, 4)
    expected = tile.data.reshape(4, 4, 4, 4, 3).mean(axis=(1, 3, 4))
    np.testing.assert_allclose(out.data[:, :, 0], expected, rtol=1e-12)
    assert np.array_equal(encoder.encode(tile).data, out.data)


def test_encode_batch_threads_preserve_tile_order(rng):
    encoder = ToyPatchEncoder(channels=3, feature_side=4, tile_side=16)
    tiles = [Image(rng.uniform(size=(16, 16))) for _ in range(9)]
    serial = encode_batch(encoder, tiles, workers=1)
    threaded = encode_batch(encoder, tiles, workers=4)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.data, b.data)


def test_multiscale_single_scale_is_encoder_output(rng):
    cfg = small_config(scale_factors=[1])
    encoder = ToyPatchEncoder(channels=3, feature_side=4, tile_side=16)
    img = Image(rng.uniform(size=(16, 16, 3)))
    assert np.array_equal(multiscale_features(img, encoder, cfg).data, encoder.encode(img).data)


def test_multiscale_constant_image_keeps_anchor_channels_equal():
    cfg = small_config()
    encoder = ToyPatchEncoder(channels=3, feature_side=4, tile_side=16)
    merged = multiscale_features(Image(np.full((20, 30, 3), 0.25)), encoder, cfg)
    assert merged.channels == 6
    np.testing.assert_allclose(merged.data[:, :, 0], 0.25, rtol=1e-12)
    np.testing.assert_allclose(merged.data[:, :, 3], 0.25, rtol=1e-12)


def test_multiscale_shape_follows_plan(rng):
    cfg = S2Config(tile_side=32, feature_side=4, scale_factors=[1, 2, 3])
    encoder = ToyPatchEncoder(channels=2, feature_side=4, tile_side=32)
    img = Image(rng.uniform(size=(60, 80, 3)))
    merged = multiscale_features(img, encoder, cfg)
    assert merged.shape == (3 * 4, 4 * 4, 3 * 2)
    again = multiscale_features(img, encoder, cfg, workers=3)
    assert np.array_equal(again.data, merged.data)


def test_split_then_stitch_round_trips_on_random_plans(rng):
    cfg = S2Config(tile_side=8, feature_side=2, scale_factors=[1, 2, 3])
    sizes = rng.integers(1, 4097, size=(10_000, 2))
    for index in rng.choice(len(sizes), size=200, replace=False).tolist():
        image_h, image_w = sizes[index].tolist()
        plan = plan_tiles(image_h, image_w, cfg)
        for scale_index, scale in enumerate(plan.scales):
            src = rng.uniform(size=(scale.resized_height, scale.resized_width, 3))
            tiles = split_tiles(Image(src), plan, scale_index)
            assert len(tiles) == scale.num_tiles
            stitched = stitch_features([FeatureMap(tile.data) for tile in tiles], scale.grid_rows, scale.grid_cols)
            assert np.array_equal(stitched.data, src)
