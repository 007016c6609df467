"""Brute-force retrieval and evaluation metrics.

Candidates are ranked by ascending Euclidean distance to the composed query
feature (ties broken by image id); since composers emit unit-norm features
this is monotone-equivalent to cosine ranking.  Recall@K is computed over
the whole split corpus minus the reference image ("global" pool) or over
the query's own subset minus the reference (five candidates).  Reported
percentages carry two decimals with half-up rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .composers import ComposerParameters, compose, project_image
from .core import (
    DataError,
    FeatureStore,
    PairRecord,
    Query,
    RankingResult,
    Vocabulary,
)

GLOBAL_KS = (1, 5, 10, 50)
SUBSET_KS = (1, 2, 3)


@dataclass(frozen=True)
class CandidatePool:
    """Which images a query is ranked against.

    ``subset`` mode uses the query's own subset members minus the reference
    (five candidates); ``global`` mode uses the whole corpus, excluding the
    reference unless ``include_reference`` is set (a replication escape
    hatch).  The reference is never a candidate of its own query otherwise.
    """
    mode: str
    include_reference: bool = False

    def __post_init__(self):
        if self.mode not in ("global", "subset"):
            raise DataError(f"pool mode must be global or subset: {self.mode!r}")

    def candidate_ids(self, record: PairRecord,
                      corpus_ids: list[str] | None = None) -> list[str]:
        if self.mode == "subset":
            return [m for m in record.members if m != record.reference]
        if corpus_ids is None:
            raise DataError("global pool needs corpus ids")
        if self.include_reference:
            return list(corpus_ids)
        return [i for i in corpus_ids if i != record.reference]


def round_half_up(value: float, decimals: int = 2) -> float:
    """Decimal half-up rounding (so 45.875 -> 45.88, unlike bankers')."""
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def rank_candidates(query_feature: np.ndarray,
                    pool: list[tuple[str, np.ndarray]],
                    *, pair_id: int = -1, gold: str | None = None) -> RankingResult:
    """Order a candidate pool by ascending Euclidean distance to the query.

    Equidistant candidates are ordered by image id so results are
    deterministic.  When ``gold`` is given, its 1-based rank is recorded.
    """
    if not pool:
        raise DataError("empty candidate pool")
    query = np.asarray(query_feature, dtype=np.float64)
    ids = np.array([image_id for image_id, _ in pool])
    matrix = np.stack([np.asarray(vec, dtype=np.float64) for _, vec in pool])
    if matrix.shape[1] != query.shape[0]:
        raise DataError(f"pool dimension {matrix.shape[1]} != query {query.shape[0]}")
    deltas = matrix - query
    distances = np.einsum("ij,ij->i", deltas, deltas)
    order = np.lexsort((ids, distances))
    ranked = tuple(ids[order])
    gold_rank = None
    if gold is not None and gold in ids:
        gold_rank = ranked.index(gold) + 1
    return RankingResult(pair_id=pair_id, candidates=ranked, gold_rank=gold_rank)


def rank_pool_matrix(query: np.ndarray, ids: np.ndarray, matrix: np.ndarray,
                     exclude: str | None = None,
                     norms_sq: np.ndarray | None = None) -> list[str]:
    """Vectorized variant of :func:`rank_candidates` over a shared pool.

    Ranks by ``|m|^2 - 2 m.q`` (squared distance minus the query constant),
    so the pool matrix is never copied per query; pass precomputed squared
    norms when ranking many queries against one pool.
    """
    query = np.asarray(query, dtype=np.float64)
    if norms_sq is None:
        norms_sq = np.einsum("ij,ij->i", matrix, matrix)
    distances = norms_sq - 2.0 * (matrix @ query)
    order = np.lexsort((ids, distances))
    if exclude is None:
        return [str(image_id) for image_id in ids[order]]
    return [str(image_id) for image_id in ids[order] if image_id != exclude]


# ---------------------------------------------------------------------------
# Metrics over ranking results
# ---------------------------------------------------------------------------

def recall_at_k(results: list[RankingResult], k: int) -> float:
    """Percentage of queries whose gold target ranks within the top k.

    Results without a gold rank count as misses.
    """
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if not results:
        return 0.0
    hits = sum(1 for r in results if r.gold_rank is not None and r.gold_rank <= k)
    return 100.0 * hits / len(results)


def map_at_k(results: list[RankingResult], k: int) -> float:
    """Mean average precision at k for single-positive queries.

    With one true positive per query this is the mean of 1/gold_rank over
    queries with gold rank <= k (zero otherwise), so mAP@1 equals recall@1.
    """
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if not results:
        return 0.0
    total = sum(
        1.0 / r.gold_rank for r in results
        if r.gold_rank is not None and r.gold_rank <= k
    )
    return 100.0 * total / len(results)


def theoretical_random(pool_size: int, k: int) -> float:
    """Expected recall@k of a uniformly random ranking: 100 * k / pool size."""
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if k > pool_size:
        raise DataError(f"k {k} exceeds pool size {pool_size}")
    return 100.0 * k / pool_size


@dataclass(frozen=True)
class MetricReport:
    """Evaluation summary; values are exact percentages, rounding is applied
    only when rendering."""
    recall: dict[int, float]
    recall_subset: dict[int, float]
    mean_ap: dict[int, float]
    composite: float | None = None

    def to_payload(self) -> dict:
        """JSON-ready dict with two-decimal half-up values."""
        payload = {
            "recall": {str(k): round_half_up(v) for k, v in sorted(self.recall.items())},
            "recall_subset": {
                str(k): round_half_up(v) for k, v in sorted(self.recall_subset.items())
            },
            "map": {str(k): round_half_up(v) for k, v in sorted(self.mean_ap.items())},
        }
        payload["composite"] = (
            round_half_up(self.composite) if self.composite is not None else None
        )
        return payload

    def to_table(self) -> str:
        lines = []
        for label, values in (("Recall", self.recall),
                              ("Recall_Subset", self.recall_subset),
                              ("mAP", self.mean_ap)):
            for k, value in sorted(values.items()):
                lines.append((f"{label}@{k}", f"{round_half_up(value):.2f}"))
        if self.composite is not None:
            lines.append(("composite", f"{round_half_up(self.composite):.2f}"))
        width = max(len(name) for name, _ in lines) if lines else 0
        return "\n".join(f"{name.ljust(width)}  {value.rjust(6)}" for name, value in lines)


DEFAULT_COMPOSITE = (("recall", 5, 1.0), ("recall_subset", 1, 1.0))
FASHION_COMPOSITE = (("recall", 10, 1.0), ("recall", 50, 1.0))


def composite_score(report: MetricReport,
                    spec=DEFAULT_COMPOSITE) -> float:
    """Weighted mean over (metric, k, weight) entries of a report."""
    tables = {"recall": report.recall, "recall_subset": report.recall_subset,
              "map": report.mean_ap}
    total = weight_sum = 0.0
    for metric, k, weight in spec:
        if metric not in tables:
            raise DataError(f"unknown metric key {metric!r}")
        if k not in tables[metric]:
            raise DataError(f"{metric}@{k} not present in report")
        total += weight * tables[metric][k]
        weight_sum += weight
    if weight_sum == 0.0:
        raise DataError("composite weights sum to zero")
    return total / weight_sum


def build_report(global_results: list[RankingResult] | None,
                 subset_results: list[RankingResult] | None,
                 global_ks=GLOBAL_KS, subset_ks=SUBSET_KS) -> MetricReport:
    """Assemble a report from ranking results; composite is filled when both
    of its inputs are available."""
    recall = {k: recall_at_k(global_results, k) for k in global_ks} if global_results else {}
    mean_ap = {k: map_at_k(global_results, k) for k in global_ks} if global_results else {}
    recall_subset = (
        {k: recall_at_k(subset_results, k) for k in subset_ks} if subset_results else {}
    )
    report = MetricReport(recall=recall, recall_subset=recall_subset, mean_ap=mean_ap)
    if 5 in recall and 1 in recall_subset:
        report = MetricReport(recall, recall_subset, mean_ap,
                              composite=composite_score(report))
    return report


# ---------------------------------------------------------------------------
# Dataset-level evaluation harness
# ---------------------------------------------------------------------------

def build_queries(records: list[PairRecord], vocab: Vocabulary) -> list[Query]:
    """Tokenized queries for a batch of records (OOV fallback applied)."""
    return [
        Query(pair_id=record.pair_id, reference=record.reference,
              token_ids=tuple(vocab.encode(record.caption)))
        for record in records
    ]


def compose_queries(params: ComposerParameters, vocab: Vocabulary,
                    store: FeatureStore, records: list[PairRecord],
                    substitute_rng: np.random.Generator | None = None) -> np.ndarray:
    """Composed features for a batch of records.

    For the random_image_text kind the reference features are replaced with
    uniformly drawn corpus features (seeded by ``substitute_rng``).
    """
    queries = build_queries(records, vocab)
    refs = store.rows64([query.reference for query in queries])
    if params.config.kind == "random_image_text":
        rng = substitute_rng or np.random.default_rng(0)
        rows = rng.integers(0, len(store), size=len(queries))
        refs = store.matrix[rows].astype(np.float64)
    tokens = [list(query.token_ids) for query in queries]
    return compose(params, refs, tokens)


def evaluate_dataset(dataset_records: list[PairRecord], store: FeatureStore,
                     params: ComposerParameters, vocab: Vocabulary,
                     *, pool: str = "both", global_ks=GLOBAL_KS,
                     subset_ks=SUBSET_KS, include_reference: bool = False,
                     corpus_ids: list[str] | None = None,
                     substitute_seed: int = 0) -> MetricReport:
    """Full evaluation: compose every labeled query, rank candidate pools by
    Euclidean distance, and reduce to a metric report.

    ``corpus_ids`` defines the global pool (defaults to every image that
    appears in the records); the reference image is excluded from its own
    query's pool unless ``include_reference`` is set.
    """
    if pool not in ("global", "subset", "both"):
        raise DataError(f"pool must be global, subset, or both: {pool!r}")
    records = [record for record in dataset_records if record.has_gold]
    if not records:
        raise DataError("no labeled records to evaluate")
    composed = compose_queries(params, vocab, store, records,
                               substitute_rng=np.random.default_rng(substitute_seed))

    if corpus_ids is None:
        seen: dict[str, None] = {}
        for record in dataset_records:
            seen.setdefault(record.reference)
            if record.target_hard is not None:
                seen.setdefault(record.target_hard)
            for member in record.members:
                seen.setdefault(member)
        corpus_ids = list(seen)

    global_results: list[RankingResult] | None = None
    subset_results: list[RankingResult] | None = None

    ids = np.array(corpus_ids)
    matrix = project_image(params, store.rows64(corpus_ids))
    by_id = {image_id: row for row, image_id in enumerate(corpus_ids)}

    if pool in ("global", "both"):
        norms_sq = np.einsum("ij,ij->i", matrix, matrix)
        global_results = []
        for row, record in enumerate(records):
            exclude = None if include_reference else record.reference
            ranked = rank_pool_matrix(composed[row], ids, matrix, exclude=exclude,
                                      norms_sq=norms_sq)
            gold_rank = ranked.index(record.target_hard) + 1 \
                if record.target_hard in ranked else None
            global_results.append(RankingResult(record.pair_id, tuple(ranked), gold_rank))

    if pool in ("subset", "both"):
        subset_pool = CandidatePool("subset")
        subset_results = []
        for row, record in enumerate(records):
            members = subset_pool.candidate_ids(record)
            if all(m in by_id for m in members):
                candidates = matrix[[by_id[m] for m in members]]
            else:
                candidates = project_image(params, store.rows64(members))
            result = rank_candidates(
                composed[row], list(zip(members, candidates)),
                pair_id=record.pair_id, gold=record.target_hard,
            )
            subset_results.append(result)

    return build_report(global_results, subset_results, global_ks, subset_ks)
