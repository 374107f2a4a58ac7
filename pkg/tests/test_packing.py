import numpy as np
import pytest

from scale_then_compress.errors import CorruptBatchError, FormatError, InvalidArgumentError, SampleTooLongError
from scale_then_compress.packing import (
    PackedBatch,
    PackedContext,
    Segment,
    SeqSample,
    SequencePacker,
    attention_mask,
    baseline_utilization,
    pack,
    pack_stream,
    parse_policy,
    parse_samples,
    samples_from_lengths,
    unpack,
    utilization,
)


def reference_first_fit(lengths, capacity):
    """Plain first-fit over unbounded bins; returns bins as tuples of sample indices"""
    bins, used = [], []
    for index, length in enumerate(lengths):
        for slot, fill in enumerate(used):
            if fill + length <= capacity:
                bins[slot].append(index)
                used[slot] += length
                break
        else:
            bins.append([index])
            used.append(length)
    return sorted(tuple(b) for b in bins)


def loop_mask(seg):
    n = len(seg)
    mask = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            mask[q, k] = seg[q] == seg[k] and k <= q
    return mask


def context_indices(batch):
    return sorted(tuple(int(s.sample_id[1:]) for s in context.segments) for context in batch.contexts)


def test_three_samples_share_one_context():
    batch = pack(samples_from_lengths([300, 500, 200]), 1024)
    assert len(batch.contexts) == 1
    context = batch.contexts[0]
    assert [(s.sample_id, s.offset, s.length) for s in context.segments] == [
        ("s0", 0, 300),
        ("s1", 300, 500),
        ("s2", 800, 200),
    ]
    assert utilization(batch) == 1000 / 1024
    assert baseline_utilization(batch) == 1000 / 3072


def test_full_capacity_sample_is_emitted_on_push():
    packer = SequencePacker(1024)
    emitted = packer.push(SeqSample.of_length("big", 1024))
    assert len(emitted) == 1
    assert emitted[0].used == 1024
    assert packer.flush() == []


def test_matches_reference_first_fit(rng):
    lengths = rng.integers(1, 513, size=1000).tolist()
    batch = pack(samples_from_lengths(lengths), 1024, "first-fit", max_open_contexts=None)
    assert context_indices(batch) == reference_first_fit(lengths, 1024)


def test_random_streams_conserve_samples_and_respect_capacity(rng):
    for _ in range(100):
        capacity = int(rng.integers(8, 65))
        lengths = rng.integers(1, capacity + 1, size=int(rng.integers(1, 40))).tolist()
        policy = ["first-fit", "ffd:4"][int(rng.integers(0, 2))]
        max_open = [None, 1, 3][int(rng.integers(0, 3))]
        samples = [SeqSample(f"s{i}", rng.integers(0, 50_000, size=n)) for i, n in enumerate(lengths)]
        batch = pack(samples, capacity, policy, max_open_contexts=max_open)

        restored = {sample.id: sample.payload for sample in unpack(batch)}
        assert sorted(restored) == sorted(sample.id for sample in samples)
        for sample in samples:
            assert np.array_equal(restored[sample.id], sample.payload)
        assert all(context.used <= capacity for context in batch.contexts)
        assert batch.tokens == sum(lengths)
        assert utilization(batch) >= baseline_utilization(batch)

        index = int(rng.integers(0, len(batch.contexts)))
        seg = batch.contexts[index].segment_ids
        assert np.array_equal(attention_mask(batch, index), loop_mask(seg))


def test_window_of_one_is_first_fit(rng):
    lengths = rng.integers(1, 200, size=300).tolist()
    plain = pack(samples_from_lengths(lengths), 256, "first-fit")
    windowed = pack(samples_from_lengths(lengths), 256, "ffd:1")
    assert plain.to_dict() == windowed.to_dict()


def test_ffd_places_longest_first():
    batch = pack(samples_from_lengths([2, 5, 3]), 10, "ffd:3")
    assert [s.sample_id for s in batch.contexts[0].segments] == ["s1", "s2", "s0"]
    assert utilization(batch) == 1.0


def test_max_open_contexts_emits_oldest():
    bounded = pack(samples_from_lengths([6, 6, 3]), 10, max_open_contexts=1)
    assert [[s.sample_id for s in c.segments] for c in bounded.contexts] == [["s0"], ["s1", "s2"]]

    unbounded = pack(samples_from_lengths([6, 6, 3]), 10, max_open_contexts=None)
    assert [[s.sample_id for s in c.segments] for c in unbounded.contexts] == [["s0", "s2"], ["s1"]]


def test_oversized_sample_raises_or_is_recorded():
    with pytest.raises(SampleTooLongError) as info:
        pack(samples_from_lengths([5, 20]), 10)
    assert (info.value.sample_id, info.value.length, info.value.capacity) == ("s1", 20, 10)

    errors = []
    batch = pack(samples_from_lengths([5, 20, 4]), 10, errors=errors)
    assert [e.sample_id for e in errors] == ["s1"]
    assert batch.num_samples == 2


def test_pack_stream_groups_contexts():
    batches = list(pack_stream(samples_from_lengths([4] * 7), 4, contexts_per_batch=3))
    assert [len(b.contexts) for b in batches] == [3, 3, 1]
    with pytest.raises(InvalidArgumentError):
        list(pack_stream([], 4, contexts_per_batch=0))


def test_attention_mask_examples():
    batch = pack(samples_from_lengths([2, 1]), 4)
    expected = np.array(
        [
            [True, False, False],
            [True, True, False],
            [False, False, True],
        ]
    )
    assert np.array_equal(attention_mask(batch, 0), expected)

    padded = attention_mask(batch, 0, padded=True)
    assert padded.shape == (4, 4)
    assert not padded[3].any() and not padded[:, 3].any()

    with pytest.raises(InvalidArgumentError):
        attention_mask(batch, 1)


def test_unpack_rejects_corrupt_tables():
    payload = np.arange(6, dtype=np.int64)
    overlap = PackedContext(8, (Segment("a", 0, 4), Segment("b", 2, 2)), payload)
    with pytest.raises(CorruptBatchError, match="overlaps"):
        unpack(PackedBatch(8, [overlap]))

    gap = PackedContext(8, (Segment("a", 0, 2), Segment("b", 3, 3)), payload)
    with pytest.raises(CorruptBatchError):
        unpack(PackedBatch(8, [gap]))

    over = PackedContext(4, (Segment("a", 0, 6),), payload)
    with pytest.raises(CorruptBatchError):
        unpack(PackedBatch(4, [over]))


def test_batch_rebuilds_from_table_and_payload(rng):
    samples = [SeqSample(f"s{i}", rng.integers(0, 100, size=n)) for i, n in enumerate([3, 7, 2, 5])]
    batch = pack(samples, 8)
    rebuilt = PackedBatch.from_parts(batch.to_dict(), batch.payload())
    assert rebuilt.to_dict() == batch.to_dict()
    with pytest.raises(CorruptBatchError):
        PackedBatch.from_parts(batch.to_dict(), batch.payload()[:-1])
    with pytest.raises(FormatError):
        PackedBatch.from_parts({"contexts": []}, batch.payload())


def test_parse_policy():
    assert str(parse_policy("ffd:16")) == "ffd:16"
    assert parse_policy("first-fit").window == 1
    for bad in ("ffd:0", "ffd:x", "best-fit"):
        with pytest.raises(InvalidArgumentError):
            parse_policy(bad)


def test_parse_samples():
    samples = parse_samples(['{"id": "a", "payload": [4, 5, 6]}', "", '{"id": "b", "length": 2}'])
    assert [s.length for s in samples] == [3, 2]
    assert samples[1].payload.tolist() == [0, 1]
    with pytest.raises(FormatError):
        parse_samples(['{"id": "a"}'])
    with pytest.raises(FormatError):
        parse_samples(['{"id": "a", "payload": [1.5]}'])
    with pytest.raises(InvalidArgumentError):
        parse_samples(['{"id": "a", "payload": [1], "length": 2}'])
    with pytest.raises(InvalidArgumentError):
        parse_samples(['{"id": "a", "length": 0}'])


def test_two_segment_mask_blocks_cross_attention():
    batch = pack(samples_from_lengths([2, 2]), 4)
    mask = attention_mask(batch, 0)
    assert not mask[2, 1] and not mask[3, 0]
    assert mask[3, 2] and mask[1, 0]
    assert not np.triu(mask, k=1).any()


def test_singleton_round_trip():
    sample = SeqSample("only", [7, 8, 9])
    (restored,) = unpack(pack([sample], 16))
    assert restored.id == "only"
    assert np.array_equal(restored.payload, sample.payload)
