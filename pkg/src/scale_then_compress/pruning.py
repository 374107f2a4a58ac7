"""
Dataset pruning for the scale-then-compress toolkit.
DeltaLoss scoring with per-subset top-K selection, plus k-means cluster
pruning and random pruning baselines.
"""

import json
import logging
import math
from collections import OrderedDict
from decimal import ROUND_FLOOR, ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from tqdm.auto import tqdm

from .config import settings
from .errors import FormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

Ratios = Union[float, Mapping[str, float]]
DeltaLabel = Literal["helpful", "distracting", "uninformative"]


class SampleRecord(BaseModel):
    """One training example with per-answer-token log-probs under a small and a large model"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    subset: str
    logp_small: List[float]
    logp_large: List[float]
    features: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_logprobs(self) -> "SampleRecord":
        if not self.logp_small or len(self.logp_small) != len(self.logp_large):
            raise ValueError("logp_small and logp_large must have equal, nonzero length")
        for value in (*self.logp_small, *self.logp_large):
            if not math.isfinite(value) or value > 0.0:
                raise ValueError("log-probabilities must be finite and <= 0")
        if self.features is not None and not all(math.isfinite(v) for v in self.features):
            raise ValueError("features must be finite")
        return self


class SubsetCount(BaseModel):
    total: int
    kept: int


class PruneManifest(BaseModel):
    """Kept ids per subset with the settings that produced them"""

    method: Literal["deltaloss", "cluster", "random"]
    kept: Dict[str, List[str]]
    keep_ratio: Dict[str, float]
    counts: Dict[str, SubsetCount]
    seed: Optional[int] = None
    k_values: Dict[str, int]
    aggregation: Optional[str] = None
    k_clusters: Optional[int] = None
    labels: Optional[Dict[str, Dict[str, int]]] = None

    def kept_ids(self) -> List[str]:
        return [record_id for ids in self.kept.values() for record_id in ids]

    def summary(self) -> Dict:
        """The JSON summary written next to the kept-id lines"""
        return self.model_dump(exclude={"kept"}, exclude_none=True)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"id": record_id, "subset": subset})
            for subset, ids in self.kept.items()
            for record_id in ids
        ]
        return "".join(line + "\n" for line in lines)


def keep_count(ratio: float, size: int) -> int:
    """round(ratio * size), half up, computed on the decimal form of ratio"""
    return int((Decimal(repr(ratio)) * size).to_integral_value(rounding=ROUND_HALF_UP))


def _check_ratio(subset: str, ratio: float) -> float:
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"Keep ratio for subset {subset!r} must be in (0, 1], got {ratio}")
    return float(ratio)


def _group_by_subset(records: Sequence[SampleRecord]) -> "OrderedDict[str, List[SampleRecord]]":
    groups: "OrderedDict[str, List[SampleRecord]]" = OrderedDict()
    seen = set()
    for record in records:
        if record.id in seen:
            raise InvalidArgumentError(f"Duplicate record id {record.id!r}")
        seen.add(record.id)
        groups.setdefault(record.subset, []).append(record)
    if not groups:
        raise InvalidArgumentError("No records to prune")
    return groups


def _resolve_ratios(subsets: Iterable[str], ratios: Ratios) -> Dict[str, float]:
    subsets = list(subsets)
    if isinstance(ratios, Mapping):
        unknown = sorted(set(ratios) - set(subsets))
        if unknown:
            raise InvalidArgumentError(f"Ratio given for unknown subset(s): {', '.join(unknown)}")
        missing = [subset for subset in subsets if subset not in ratios]
        if missing:
            raise InvalidArgumentError(f"No keep ratio for subset(s): {', '.join(missing)}")
        return {subset: _check_ratio(subset, ratios[subset]) for subset in subsets}
    return {subset: _check_ratio(subset, ratios) for subset in subsets}


def delta_score(r: SampleRecord, aggregation: str = "mean") -> float:
    """
    DeltaLoss score log(p_large / p_small) over the answer tokens.

    With `mean` aggregation (default) the per-token log-probs are averaged so
    answers of different lengths compare; `sum` uses the raw totals. Positive
    scores mark examples the large model solves and the small one does not.

    Args:
        r: Sample record
        aggregation: "mean" or "sum"

    Returns:
        float: aggregate(logp_large) - aggregate(logp_small)
    """
    if not r.logp_small or not r.logp_large:
        raise InvalidArgumentError(f"Record {r.id!r} has empty token log-prob lists")
    if len(r.logp_small) != len(r.logp_large):
        raise InvalidArgumentError(f"Record {r.id!r} has mismatched token log-prob lists")
    large = math.fsum(r.logp_large)
    small = math.fsum(r.logp_small)
    if aggregation == "sum":
        return large - small
    if aggregation == "mean":
        return large / len(r.logp_large) - small / len(r.logp_small)
    raise InvalidArgumentError(f"Unknown aggregation {aggregation!r}")


def classify_delta(score: float, tolerance: float) -> DeltaLabel:
    """Helpful (large solves, small fails), distracting (the reverse) or uninformative (near zero)"""
    if score > tolerance:
        return "helpful"
    if score < -tolerance:
        return "distracting"
    return "uninformative"


def top_k_ids(ids: Sequence[str], scores: Sequence[float], k: int) -> List[str]:
    """
    The k ids with the highest scores, ties broken by id; returned in input order.
    """
    ranked = sorted(range(len(ids)), key=lambda index: (-scores[index], ids[index]))
    chosen = set(ranked[:k])
    return [record_id for index, record_id in enumerate(ids) if index in chosen]


def prune_deltaloss(
    records: Sequence[SampleRecord],
    ratios: Ratios,
    aggregation: str = "mean",
    delta_tolerance: float = 0.05,
) -> PruneManifest:
    """
    Keep the top round(ratio * |D_i|) records of every subset by DeltaLoss score.

    Args:
        records: Records from all subsets
        ratios: One keep ratio for every subset, or a ratio per subset
        aggregation: Token aggregation for delta_score
        delta_tolerance: Band around zero reported as uninformative

    Returns:
        PruneManifest: union of per-subset selections
    """
    groups = _group_by_subset(records)
    keep_ratio = _resolve_ratios(groups, ratios)

    kept, counts, k_values, labels = {}, {}, {}, {}
    with tqdm(total=len(records), desc="Scoring records", disable=not settings.show_progress) as pbar:
        for subset, members in groups.items():
            scores = []
            tally = {"helpful": 0, "distracting": 0, "uninformative": 0}
            for record in members:
                score = delta_score(record, aggregation)
                scores.append(score)
                tally[classify_delta(score, delta_tolerance)] += 1
                pbar.update(1)

            k = keep_count(keep_ratio[subset], len(members))
            kept[subset] = top_k_ids([record.id for record in members], scores, k)
            counts[subset] = SubsetCount(total=len(members), kept=k)
            k_values[subset] = k
            labels[subset] = tally
            logger.info("Subset %s: kept %d of %d by DeltaLoss", subset, k, len(members))

    return PruneManifest(
        method="deltaloss",
        kept=kept,
        keep_ratio=keep_ratio,
        counts=counts,
        k_values=k_values,
        aggregation=aggregation,
        labels=labels,
    )


def _lloyd(points: np.ndarray, labels: np.ndarray, k: int, max_iterations: int,
           tolerance: float) -> Tuple[np.ndarray, np.ndarray, float]:
    squared_norms = (points * points).sum(axis=1)

    def assign(centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        distances = squared_norms[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
        return distances.argmin(axis=1), distances.min(axis=1)

    centroids = np.stack([points[labels == cluster].mean(axis=0) for cluster in range(k)])
    for iteration in range(max_iterations):
        labels, _ = assign(centroids)
        updated = centroids.copy()
        for cluster in range(k):
            members = points[labels == cluster]
            if len(members):
                updated[cluster] = members.mean(axis=0)
        shift = np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max()
        centroids = updated
        if shift <= tolerance:
            logger.debug("k-means converged after %d iterations", iteration + 1)
            break

    labels, nearest = assign(centroids)
    return labels, centroids, float(np.maximum(nearest, 0.0).sum())


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
    n_init: int = 5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lloyd's k-means with seeded random-partition initialization.

    Iteration stops once no centroid moves more than `tolerance` (Euclidean)
    or after `max_iterations`. An empty cluster keeps its previous centroid.
    The best of `n_init` seeded starts (lowest inertia, first on ties) wins.

    Args:
        points: (n, d) array
        k: Cluster count, 1 <= k <= n
        seed: RNG seed for the initial partitions
        max_iterations: Iteration cap per start
        tolerance: Centroid-shift convergence threshold
        n_init: Number of initial partitions tried

    Returns:
        Tuple[np.ndarray, np.ndarray]: labels (n,) and centroids (k, d)
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k_clusters must be between 1 and {n}, got {k}")
    if n_init < 1:
        raise InvalidArgumentError(f"n_init must be at least 1, got {n_init}")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        start = rng.permutation(np.arange(n) % k)
        labels, centroids, inertia = _lloyd(points, start, k, max_iterations, tolerance)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    return best[0], best[1]


def _largest_remainder(sizes: Sequence[int], ratio: float, total: int) -> List[int]:
    """Split `total` kept slots across clusters in proportion to their sizes"""
    exact = Decimal(repr(ratio))
    quotas = [exact * size for size in sizes]
    base = [int(quota.to_integral_value(rounding=ROUND_FLOOR)) for quota in quotas]
    leftover = total - sum(base)
    order = sorted(range(len(sizes)), key=lambda index: (-(quotas[index] - base[index]), index))
    for index in order[:leftover]:
        base[index] += 1
    return base


def prune_cluster(
    records: Sequence[SampleRecord],
    k_clusters: int,
    ratios: Ratios,
    seed: int,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
    n_init: int = 5,
) -> PruneManifest:
    """
    Cluster each subset's feature vectors with k-means and prune evenly per cluster.

    The subset keeps round(ratio * |D_i|) records, shared across clusters in
    proportion to cluster size; inside a cluster the records closest to the
    centroid are kept (ties by id).

    Args:
        records: Records carrying equal-length feature vectors
        k_clusters: Clusters per subset
        ratios: Keep ratio(s)
        seed: k-means initialization seed

    Returns:
        PruneManifest: per-subset selections
    """
    if k_clusters < 1:
        raise InvalidArgumentError(f"k_clusters must be positive, got {k_clusters}")
    groups = _group_by_subset(records)
    keep_ratio = _resolve_ratios(groups, ratios)

    dims = {len(record.features) for record in records if record.features is not None}
    if any(record.features is None for record in records):
        raise InvalidArgumentError("Cluster pruning needs a feature vector on every record")
    if len(dims) != 1 or 0 in dims:
        raise InvalidArgumentError("Feature vectors must be non-empty and share one dimension")

    kept, counts, k_values = {}, {}, {}
    for subset, members in groups.items():
        if k_clusters > len(members):
            raise InvalidArgumentError(
                f"k_clusters={k_clusters} exceeds the {len(members)} records of subset {subset!r}"
            )
        points = np.array([record.features for record in members], dtype=np.float64)
        labels, centroids = kmeans(points, k_clusters, seed, max_iterations, tolerance, n_init)

        total = keep_count(keep_ratio[subset], len(members))
        clusters = [np.flatnonzero(labels == cluster) for cluster in range(k_clusters)]
        quotas = _largest_remainder([len(indices) for indices in clusters], keep_ratio[subset], total)

        chosen = set()
        for cluster, (indices, quota) in enumerate(zip(clusters, quotas)):
            distance = ((points[indices] - centroids[cluster]) ** 2).sum(axis=1)
            ranked = sorted(range(len(indices)), key=lambda i: (distance[i], members[indices[i]].id))
            chosen.update(int(indices[i]) for i in ranked[:quota])

        kept[subset] = [record.id for index, record in enumerate(members) if index in chosen]
        counts[subset] = SubsetCount(total=len(members), kept=total)
        k_values[subset] = total
        logger.info("Subset %s: kept %d of %d across %d clusters", subset, total, len(members), k_clusters)

    return PruneManifest(
        method="cluster",
        kept=kept,
        keep_ratio=keep_ratio,
        counts=counts,
        seed=seed,
        k_values=k_values,
        k_clusters=k_clusters,
    )


def prune_random(records: Sequence[SampleRecord], ratios: Ratios, seed: int) -> PruneManifest:
    """Uniform sampling without replacement inside every subset, seeded"""
    groups = _group_by_subset(records)
    keep_ratio = _resolve_ratios(groups, ratios)
    rng = np.random.default_rng(seed)

    kept, counts, k_values = {}, {}, {}
    for subset, members in groups.items():
        k = keep_count(keep_ratio[subset], len(members))
        chosen = set(rng.choice(len(members), size=k, replace=False).tolist())
        kept[subset] = [record.id for index, record in enumerate(members) if index in chosen]
        counts[subset] = SubsetCount(total=len(members), kept=k)
        k_values[subset] = k

    return PruneManifest(
        method="random",
        kept=kept,
        keep_ratio=keep_ratio,
        counts=counts,
        seed=seed,
        k_values=k_values,
    )


def parse_records(lines: Iterable[str], source: str = "<input>") -> List[SampleRecord]:
    """Parse JSON-lines SampleRecords, skipping blank lines"""
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(SampleRecord.model_validate(json.loads(line)))
        except json.JSONDecodeError as e:
            raise FormatError(f"{source}:{number}: not valid JSON: {e}") from e
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in item['loc']) or 'record'}: {item['msg']}" for item in e.errors()
            )
            raise InvalidArgumentError(f"{source}:{number}: {problems}") from e
    return records


def read_records(path: str) -> List[SampleRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    return parse_records(text.splitlines(), source=str(path))
