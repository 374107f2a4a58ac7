import json
import math

import numpy as np
import pytest

from scale_then_compress.errors import FormatError, InvalidArgumentError
from scale_then_compress.pruning import (
    SampleRecord,
    classify_delta,
    delta_score,
    keep_count,
    kmeans,
    parse_records,
    prune_cluster,
    prune_deltaloss,
    prune_random,
    top_k_ids,
)


def record(record_id, subset="A", small=(-1.0,), large=(-1.0,), features=None):
    return SampleRecord(
        id=record_id, subset=subset, logp_small=list(small), logp_large=list(large), features=features
    )


def synthetic_records(rng, count, subsets):
    records = []
    for index in range(count):
        length = int(rng.integers(1, 6))
        records.append(
            SampleRecord(
                id=f"r{index:05d}",
                subset=subsets[index % len(subsets)],
                logp_small=(-rng.exponential(1.0, size=length)).tolist(),
                logp_large=(-rng.exponential(1.0, size=length)).tolist(),
            )
        )
    return records


def oracle_top_k(records, ratio):
    """Full sort per subset by (-score, id), then K = floor(ratio * n + 0.5)"""
    kept = set()
    subsets = sorted({r.subset for r in records})
    for subset in subsets:
        members = [r for r in records if r.subset == subset]
        scored = sorted(members, key=lambda r: (-delta_score(r), r.id))
        k = math.floor(ratio * len(members) + 0.5 + 1e-9)
        kept.update(r.id for r in scored[:k])
    return kept


def test_delta_score_examples():
    assert delta_score(record("a", small=[-0.4, -2.0], large=[-0.4, -2.0])) == 0.0
    assert delta_score(record("b", small=[-2.0], large=[-1.0])) == 1.0
    assert delta_score(record("c", small=[-0.1, -0.3], large=[-1.0, -2.0])) == pytest.approx(-1.3, abs=1e-12)


def test_delta_score_antisymmetric_and_sum_variant():
    r = record("a", small=[-0.5, -1.5, -0.25], large=[-0.1, -0.2, -3.0])
    swapped = record("b", small=r.logp_large, large=r.logp_small)
    assert delta_score(swapped) == -delta_score(r)
    assert delta_score(r, "sum") == pytest.approx(-3.3 - -2.25)
    with pytest.raises(InvalidArgumentError):
        delta_score(r, "median")


def test_appending_each_lists_mean_keeps_score():
    r = record("a", small=[-1.0, -3.0], large=[-0.5, -1.5])
    extended = record("b", small=[-1.0, -3.0, -2.0], large=[-0.5, -1.5, -1.0])
    assert delta_score(extended) == pytest.approx(delta_score(r), abs=1e-12)


def test_record_validation():
    with pytest.raises(ValueError):
        record("a", small=[], large=[])
    with pytest.raises(ValueError):
        record("a", small=[-1.0], large=[-1.0, -2.0])
    with pytest.raises(ValueError):
        record("a", small=[0.5], large=[-1.0])


def test_classify_delta():
    assert classify_delta(1.0, 0.05) == "helpful"
    assert classify_delta(-1.0, 0.05) == "distracting"
    assert classify_delta(0.01, 0.05) == "uninformative"


def test_keep_count_rounds_half_up():
    assert keep_count(0.5, 5) == 3
    assert keep_count(0.3, 10_000) == 3000
    assert keep_count(0.1, 15) == 2
    assert keep_count(1.0, 7) == 7


def test_top_k_breaks_ties_by_id():
    assert top_k_ids(["c", "a", "b"], [1.0, 1.0, 1.0], 2) == ["a", "b"]


def test_ratio_one_keeps_everything(rng):
    records = synthetic_records(rng, 20, ["A", "B"])
    manifest = prune_deltaloss(records, 1.0)
    assert sorted(manifest.kept_ids()) == sorted(r.id for r in records)


def test_five_scores_ratio_point_four():
    records = [
        record(f"s{score}", small=[-3.0], large=[-3.0 + score]) for score in (0.0, 2.0, -1.0, 1.0, -2.0)
    ]
    manifest = prune_deltaloss(records, 0.4)
    assert manifest.kept["A"] == ["s2.0", "s1.0"]
    assert manifest.counts["A"].kept == 2


def test_per_subset_ratios(rng):
    records = synthetic_records(rng, 30, ["A", "B"])
    manifest = prune_deltaloss(records, {"A": 0.5, "B": 1.0})
    assert len(manifest.kept["A"]) == round(0.5 * 15 + 1e-9) == 8
    assert len(manifest.kept["B"]) == 15
    with pytest.raises(InvalidArgumentError):
        prune_deltaloss(records, {"A": 0.5, "B": 1.0, "C": 0.2})
    with pytest.raises(InvalidArgumentError):
        prune_deltaloss(records, {"A": 0.5})
    with pytest.raises(InvalidArgumentError):
        prune_deltaloss(records, 0.0)


def test_matches_full_sort_oracle_on_ten_thousand_records(rng):
    records = synthetic_records(rng, 10_000, ["s0", "s1", "s2", "s3", "s4"])
    for ratio in (0.1, 0.3, 0.5):
        manifest = prune_deltaloss(records, ratio)
        assert set(manifest.kept_ids()) == oracle_top_k(records, ratio)
        for subset, count in manifest.counts.items():
            assert count.kept == keep_count(ratio, count.total)


def test_selection_invariant_under_positive_affine_maps(rng):
    records = synthetic_records(rng, 200, ["A"])
    ids = [r.id for r in records]
    scores = [delta_score(r) for r in records]
    baseline = top_k_ids(ids, scores, 60)
    for _ in range(100):
        scale = float(rng.uniform(0.1, 10.0))
        shift = float(rng.uniform(-5.0, 5.0))
        assert top_k_ids(ids, [scale * s + shift for s in scores], 60) == baseline


def test_manifest_reports_labels_and_serializes(rng):
    records = synthetic_records(rng, 40, ["A", "B"])
    manifest = prune_deltaloss(records, 0.5)
    assert sum(manifest.labels["A"].values()) == 20
    summary = manifest.summary()
    assert summary["method"] == "deltaloss"
    assert "kept" not in summary
    lines = manifest.to_jsonl().splitlines()
    assert len(lines) == 20
    assert json.loads(lines[0]).keys() == {"id", "subset"}
    assert prune_deltaloss(records, 0.5).to_jsonl() == manifest.to_jsonl()


def test_duplicate_ids_rejected():
    with pytest.raises(InvalidArgumentError):
        prune_deltaloss([record("a"), record("a")], 1.0)


def test_kmeans_is_deterministic(rng):
    points = rng.standard_normal((50, 3))
    labels_a, centroids_a = kmeans(points, 4, seed=11)
    labels_b, centroids_b = kmeans(points, 4, seed=11)
    assert np.array_equal(labels_a, labels_b)
    assert np.array_equal(centroids_a, centroids_b)
    with pytest.raises(InvalidArgumentError):
        kmeans(points, 51, seed=0)


def blob_records(rng):
    left = rng.normal(loc=(-10.0, 0.0), scale=0.5, size=(10, 2))
    right = rng.normal(loc=(10.0, 0.0), scale=0.5, size=(10, 2))
    records = []
    for name, blob in (("L", left), ("R", right)):
        for index, point in enumerate(blob):
            records.append(record(f"{name}{index}", features=point.tolist()))
    return records


def test_cluster_prune_keeps_half_of_each_blob(rng):
    records = blob_records(rng)
    manifest = prune_cluster(records, k_clusters=2, ratios=0.5, seed=5)
    kept = manifest.kept_ids()
    assert len(kept) == 10
    assert sum(record_id.startswith("L") for record_id in kept) == 5
    assert sum(record_id.startswith("R") for record_id in kept) == 5


def test_cluster_prune_contracts(rng):
    records = blob_records(rng)
    assert len(prune_cluster(records, 1, 1.0, seed=0).kept_ids()) == 20
    with pytest.raises(InvalidArgumentError):
        prune_cluster(records, 2, 0.0, seed=0)
    with pytest.raises(InvalidArgumentError):
        prune_cluster([record("x"), record("y")], 1, 1.0, seed=0)


def test_cluster_prune_counts_follow_subset_rounding(rng):
    points = rng.standard_normal((23, 4))
    records = [record(f"p{i}", features=p.tolist()) for i, p in enumerate(points)]
    manifest = prune_cluster(records, 4, 0.3, seed=2)
    assert len(manifest.kept_ids()) == keep_count(0.3, 23)


def test_random_prune_is_seeded(rng):
    records = synthetic_records(rng, 10_000, ["A"])
    first = prune_random(records, 0.3, seed=7)
    second = prune_random(records, 0.3, seed=7)
    assert first.kept == second.kept
    assert len(first.kept["A"]) == 3000
    assert prune_random(records, 1.0, seed=1).kept["A"] == [r.id for r in records]


def test_parse_records_reports_locations():
    good = json.dumps({"id": "a", "subset": "A", "logp_small": [-1.0], "logp_large": [-0.5]})
    assert parse_records([good, ""])[0].id == "a"
    with pytest.raises(FormatError):
        parse_records(["{not json"])
    with pytest.raises(InvalidArgumentError, match="line|<input>:1"):
        parse_records([json.dumps({"id": "a", "subset": "A", "logp_small": [], "logp_large": []})])
