"""
Sequence packing for the scale-then-compress toolkit.
Fuses variable-length token sequences into fixed-capacity contexts while
keeping a segment table, so a block-diagonal causal mask can forbid
attention across samples.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
from tqdm.auto import tqdm

from .config import PackingConfig, settings
from .errors import CorruptBatchError, FormatError, InvalidArgumentError, SampleTooLongError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SeqSample:
    """A token sequence with an opaque id; payload is a read-only int64 vector"""

    id: str
    payload: np.ndarray

    def __post_init__(self):
        payload = np.array(self.payload, dtype=np.int64, copy=True).reshape(-1)
        if payload.size < 1:
            raise InvalidArgumentError(f"Sample {self.id!r} is empty")
        payload.setflags(write=False)
        object.__setattr__(self, "payload", payload)

    @property
    def length(self) -> int:
        return int(self.payload.size)

    @classmethod
    def of_length(cls, sample_id: str, length: int) -> "SeqSample":
        """A sample whose payload is simply 0..length-1"""
        if length < 1:
            raise InvalidArgumentError(f"Sample {sample_id!r} needs a positive length, got {length}")
        return cls(sample_id, np.arange(length, dtype=np.int64))


@dataclass(frozen=True)
class Segment:
    sample_id: str
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class PackedContext:
    """One context: ordered segments over a concatenated payload of `used` tokens"""

    capacity: int
    segments: tuple
    payload: np.ndarray

    @property
    def used(self) -> int:
        return int(self.payload.size)

    @property
    def segment_ids(self) -> np.ndarray:
        """Per-token ordinal of the segment it belongs to"""
        lengths = [segment.length for segment in self.segments]
        return np.repeat(np.arange(len(lengths), dtype=np.int64), lengths)

    def validate(self) -> None:
        """Raise CorruptBatchError unless segments tile the payload contiguously within capacity"""
        if self.used > self.capacity:
            raise CorruptBatchError(f"Context holds {self.used} tokens, capacity is {self.capacity}")
        position = 0
        for index, segment in enumerate(self.segments):
            if segment.length < 1:
                raise CorruptBatchError(f"Segment {index} ({segment.sample_id!r}) has length {segment.length}")
            if segment.offset < position:
                raise CorruptBatchError(f"Segment {index} ({segment.sample_id!r}) overlaps its predecessor")
            if segment.offset != position:
                raise CorruptBatchError(f"Segment {index} ({segment.sample_id!r}) leaves a gap at {position}")
            if segment.offset + segment.length > self.used:
                raise CorruptBatchError(f"Segment {index} ({segment.sample_id!r}) runs past the payload")
            position += segment.length
        if position != self.used:
            raise CorruptBatchError(f"Segments cover {position} tokens, payload has {self.used}")


@dataclass(frozen=True)
class PackedBatch:
    capacity: int
    contexts: List[PackedContext] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return sum(context.used for context in self.contexts)

    @property
    def num_samples(self) -> int:
        return sum(len(context.segments) for context in self.contexts)

    def to_dict(self) -> Dict[str, Any]:
        """JSON segment table; payloads travel separately (see payload())"""
        return {
            "capacity": self.capacity,
            "contexts": [
                {
                    "used": context.used,
                    "segments": [
                        {"id": s.sample_id, "offset": s.offset, "length": s.length}
                        for s in context.segments
                    ],
                }
                for context in self.contexts
            ],
            "utilization": utilization(self),
            "baseline_utilization": baseline_utilization(self),
        }

    def payload(self) -> np.ndarray:
        """All context payloads concatenated in context order"""
        if not self.contexts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([context.payload for context in self.contexts])

    @classmethod
    def from_parts(cls, table: Dict[str, Any], payload: np.ndarray) -> "PackedBatch":
        """Rebuild a batch from its segment table and concatenated payload"""
        try:
            capacity = int(table["capacity"])
            entries = table["contexts"]
            contexts, start = [], 0
            for entry in entries:
                used = int(entry["used"])
                segments = tuple(
                    Segment(str(s["id"]), int(s["offset"]), int(s["length"])) for s in entry["segments"]
                )
                contexts.append(PackedContext(capacity, segments, payload[start:start + used]))
                start += used
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Malformed segment table: {e}") from e
        if start != payload.size:
            raise CorruptBatchError(f"Segment table covers {start} tokens, payload has {payload.size}")
        return cls(capacity, contexts)


@dataclass(frozen=True)
class PackPolicy:
    """first-fit, or first-fit-decreasing over windows of `window` samples"""

    kind: str
    window: int = 1

    def __str__(self) -> str:
        return "first-fit" if self.kind == "first-fit" else f"ffd:{self.window}"


def parse_policy(policy: Union[str, PackPolicy]) -> PackPolicy:
    if isinstance(policy, PackPolicy):
        return policy
    if policy == "first-fit":
        return PackPolicy("first-fit")
    if policy.startswith("ffd:"):
        try:
            window = int(policy[4:])
        except ValueError:
            window = 0
        if window >= 1:
            return PackPolicy("ffd", window)
    raise InvalidArgumentError(f"Unknown packing policy {policy!r}; use first-fit or ffd:W")


class _OpenContext:
    def __init__(self, ordinal: int):
        self.ordinal = ordinal
        self.samples: List[SeqSample] = []
        self.used = 0

    def close(self, capacity: int) -> PackedContext:
        segments, offset = [], 0
        for sample in self.samples:
            segments.append(Segment(sample.id, offset, sample.length))
            offset += sample.length
        payload = np.concatenate([sample.payload for sample in self.samples])
        payload.setflags(write=False)
        return PackedContext(capacity, tuple(segments), payload)


class SequencePacker:
    """
    Stateful on-the-fly packer; one instance per stream.

    Samples go into the earliest-opened context with room. With an ffd:W
    policy, samples are buffered W at a time and placed longest first. A
    context is emitted when it is full, when more than `max_open_contexts`
    are open (oldest first), or on flush(). Oversized samples raise
    SampleTooLongError, or are appended to `errors` when a list is given.
    """

    def __init__(
        self,
        capacity: int,
        policy: Union[str, PackPolicy] = "first-fit",
        max_open_contexts: Optional[int] = None,
        errors: Optional[List[SampleTooLongError]] = None,
    ):
        if capacity < 1:
            raise InvalidArgumentError(f"Context capacity must be positive, got {capacity}")
        if max_open_contexts is not None and max_open_contexts < 1:
            raise InvalidArgumentError(f"max_open_contexts must be positive, got {max_open_contexts}")
        self.capacity = capacity
        self.policy = parse_policy(policy)
        self.max_open_contexts = max_open_contexts
        self.errors = errors
        self._open: List[_OpenContext] = []
        self._buffer: List[SeqSample] = []
        self._next_ordinal = 0

    @classmethod
    def from_config(cls, cfg: PackingConfig, errors: Optional[List[SampleTooLongError]] = None) -> "SequencePacker":
        return cls(cfg.capacity, cfg.policy, cfg.max_open_contexts, errors)

    def push(self, sample: SeqSample) -> List[PackedContext]:
        """Add one sample; returns the contexts this push completed"""
        if sample.length > self.capacity:
            error = SampleTooLongError(sample.id, sample.length, self.capacity)
            if self.errors is None:
                raise error
            logger.warning("%s", error)
            self.errors.append(error)
            return []

        self._buffer.append(sample)
        if len(self._buffer) < self.policy.window:
            return []
        return self._drain()

    def flush(self) -> List[PackedContext]:
        """Place any buffered samples and emit every open context"""
        emitted = self._drain()
        emitted.extend(context.close(self.capacity) for context in self._open)
        self._open = []
        return emitted

    def _drain(self) -> List[PackedContext]:
        batch = self._buffer
        self._buffer = []
        if self.policy.kind == "ffd":
            # Stable sort: equal lengths keep arrival order
            batch = sorted(batch, key=lambda sample: -sample.length)
        emitted = []
        for sample in batch:
            emitted.extend(self._place(sample))
        return emitted

    def _place(self, sample: SeqSample) -> List[PackedContext]:
        target = next(
            (context for context in self._open if context.used + sample.length <= self.capacity),
            None,
        )
        emitted = []
        if target is None:
            target = _OpenContext(self._next_ordinal)
            self._next_ordinal += 1
            self._open.append(target)
            if self.max_open_contexts is not None and len(self._open) > self.max_open_contexts:
                emitted.append(self._open.pop(0).close(self.capacity))

        target.samples.append(sample)
        target.used += sample.length
        if target.used == self.capacity:
            self._open.remove(target)
            emitted.append(target.close(self.capacity))
        return emitted


def pack_stream(
    samples: Iterable[SeqSample],
    capacity: int,
    policy: Union[str, PackPolicy] = "first-fit",
    max_open_contexts: Optional[int] = None,
    errors: Optional[List[SampleTooLongError]] = None,
    contexts_per_batch: int = 1,
) -> Iterator[PackedBatch]:
    """
    Pack a sample stream, yielding batches of `contexts_per_batch` contexts
    as they complete (the last batch may be smaller).

    Args:
        samples: Sample stream
        capacity: Tokens per context
        policy: "first-fit" or "ffd:W"
        max_open_contexts: Bound on simultaneously open contexts (None: unbounded)
        errors: Collects oversized-sample errors instead of raising
        contexts_per_batch: Contexts per yielded batch

    Yields:
        PackedBatch: completed contexts in emission order
    """
    if contexts_per_batch < 1:
        raise InvalidArgumentError(f"contexts_per_batch must be positive, got {contexts_per_batch}")
    packer = SequencePacker(capacity, policy, max_open_contexts, errors)
    pending: List[PackedContext] = []

    for sample in tqdm(samples, desc="Packing samples", disable=not settings.show_progress):
        pending.extend(packer.push(sample))
        while len(pending) >= contexts_per_batch:
            yield PackedBatch(capacity, pending[:contexts_per_batch])
            pending = pending[contexts_per_batch:]

    pending.extend(packer.flush())
    while pending:
        yield PackedBatch(capacity, pending[:contexts_per_batch])
        pending = pending[contexts_per_batch:]


def pack(
    samples: Iterable[SeqSample],
    capacity: int,
    policy: Union[str, PackPolicy] = "first-fit",
    max_open_contexts: Optional[int] = None,
    errors: Optional[List[SampleTooLongError]] = None,
) -> PackedBatch:
    """Pack a whole stream into a single batch, contexts in emission order"""
    contexts = [
        context
        for batch in pack_stream(samples, capacity, policy, max_open_contexts, errors)
        for context in batch.contexts
    ]
    batch = PackedBatch(capacity, contexts)
    logger.info(
        "Packed %d samples into %d contexts (%s), utilization %.3f",
        batch.num_samples, len(contexts), parse_policy(policy), utilization(batch),
    )
    return batch


def unpack(b: PackedBatch) -> List[SeqSample]:
    """
    Recover every sample from a batch, context by context in offset order.

    Raises:
        CorruptBatchError: overlapping, gapped or out-of-bounds segments
    """
    samples = []
    for index, context in enumerate(b.contexts):
        if context.capacity != b.capacity:
            raise CorruptBatchError(f"Context {index} has capacity {context.capacity}, batch has {b.capacity}")
        try:
            context.validate()
        except CorruptBatchError as e:
            raise CorruptBatchError(f"Context {index}: {e}") from e
        for segment in context.segments:
            samples.append(SeqSample(segment.sample_id, context.payload[segment.offset:segment.offset + segment.length]))
    return samples


def attention_mask(b: PackedBatch, context_index: int, padded: bool = False) -> np.ndarray:
    """
    Block-diagonal causal mask of one context.

    Entry (q, k) is True iff tokens q and k share a segment and k <= q. The
    matrix covers the used tokens, or all `capacity` positions when `padded`
    (padding rows and columns are all False).
    """
    if not 0 <= context_index < len(b.contexts):
        raise InvalidArgumentError(f"Context index {context_index} is outside 0..{len(b.contexts) - 1}")
    context = b.contexts[context_index]
    seg = context.segment_ids
    mask = (seg[:, None] == seg[None, :]) & np.tri(seg.size, dtype=bool)
    if padded:
        full = np.zeros((b.capacity, b.capacity), dtype=bool)
        full[:seg.size, :seg.size] = mask
        return full
    return mask


def utilization(b: PackedBatch) -> float:
    """Packed tokens / (contexts x capacity)"""
    if not b.contexts:
        return 0.0
    return b.tokens / (len(b.contexts) * b.capacity)


def baseline_utilization(b: PackedBatch) -> float:
    """Utilization of the same samples with one sample per context"""
    if not b.contexts:
        return 0.0
    return b.tokens / (b.num_samples * b.capacity)


def parse_samples(lines: Iterable[str], source: str = "<input>") -> List[SeqSample]:
    """
    Parse JSON-lines samples: {"id": ..., "payload": [...]} or {"id": ..., "length": n}.
    A length-only sample gets the payload 0..n-1.
    """
    samples = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{source}:{number}: not valid JSON: {e}") from e
        if not isinstance(entry, dict) or "id" not in entry:
            raise FormatError(f"{source}:{number}: expected an object with an 'id'")
        sample_id = str(entry["id"])
        if "payload" in entry:
            payload = entry["payload"]
            if not isinstance(payload, list) or not all(isinstance(v, int) for v in payload):
                raise FormatError(f"{source}:{number}: payload must be a list of integers")
            if "length" in entry and entry["length"] != len(payload):
                raise InvalidArgumentError(f"{source}:{number}: length {entry['length']} != payload size {len(payload)}")
            samples.append(SeqSample(sample_id, payload))
        elif isinstance(entry.get("length"), int):
            samples.append(SeqSample.of_length(sample_id, entry["length"]))
        else:
            raise FormatError(f"{source}:{number}: sample needs a payload or an integer length")
    return samples


def read_samples(path: Union[str, Path]) -> List[SeqSample]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    return parse_samples(text.splitlines(), source=str(path))


def samples_from_lengths(lengths: Sequence[int], prefix: str = "s") -> List[SeqSample]:
    """Samples named prefix0, prefix1, ... with the given lengths"""
    return [SeqSample.of_length(f"{prefix}{index}", length) for index, length in enumerate(lengths)]
