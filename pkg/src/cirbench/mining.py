"""Greedy similarity-based subset mining.

A subset is built around a seed image: rank the remaining corpus by cosine
similarity to the seed, drop near-identical images, restrict to a short
candidate window, then greedily keep images whose similarity drops by more
than a minimum gap from the previously kept one.  Failing to fill the subset
rejects the seed entirely; rejection is a normal outcome, not an error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import DEGENERATE_NORM, DataError, FeatureStore, Subset


@dataclass(frozen=True)
class MinerConfig:
    near_duplicate_threshold: float = 0.94
    min_gap: float = 0.002
    candidate_window: int = 20
    subset_size: int = 6
    overlap_limit: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_gap < self.near_duplicate_threshold <= 1:
            raise DataError(
                f"require 0 < min_gap < near_duplicate_threshold <= 1, got "
                f"{self.min_gap} and {self.near_duplicate_threshold}"
            )
        if self.candidate_window < self.subset_size - 1:
            raise DataError("candidate window smaller than subset size - 1")
        if self.subset_size < 2:
            raise DataError("subset size must be at least 2")
        if self.overlap_limit < 0:
            raise DataError("overlap limit must be non-negative")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two feature vectors in float64, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a < DEGENERATE_NORM or norm_b < DEGENERATE_NORM:
        raise DataError("cosine similarity of a degenerate (near-zero) vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


class _SimilarityIndex:
    """Float64 matrix and norms computed once per store; shared across seeds
    so batch mining does not re-copy the matrix for every candidate seed."""

    def __init__(self, store: FeatureStore):
        self.ids = store.ids
        self.matrix = store.matrix.astype(np.float64)
        self.norms = np.linalg.norm(self.matrix, axis=1)
        self.degenerate = self.norms < DEGENERATE_NORM
        if self.degenerate.any():
            warnings.warn(
                f"{int(self.degenerate.sum())} degenerate feature vectors "
                f"will be skipped as candidates"
            )

    def ranked_for(self, seed_row: int) -> list[tuple[str, float]]:
        if self.degenerate[seed_row]:
            warnings.warn(f"seed {self.ids[seed_row]!r} has a degenerate feature vector")
            return []
        safe = np.where(self.degenerate, 1.0, self.norms)
        sims = self.matrix @ self.matrix[seed_row] / (safe * self.norms[seed_row])
        sims = np.clip(sims, -1.0, 1.0)
        ranked = [
            (self.ids[row], float(sims[row]))
            for row in range(len(self.ids))
            if row != seed_row and not self.degenerate[row]
        ]
        ranked.sort(key=lambda entry: (-entry[1], entry[0]))
        return ranked


def rank_by_similarity(seed: str, store: FeatureStore) -> list[tuple[str, float]]:
    """All other images sorted by descending cosine to the seed.

    Ties break by image id ascending so the ranking is deterministic.
    Degenerate candidate vectors are skipped with a warning; a degenerate
    seed yields an empty ranking (the seed cannot be mined).
    """
    return _SimilarityIndex(store).ranked_for(store.index_of(seed))


def select_members(ranked: list[tuple[str, float]],
                   cfg: MinerConfig) -> list[tuple[str, float]] | None:
    """Apply the dedup / window / gap rules to a descending similarity ranking.

    Returns the kept (id, similarity) entries in order, or None if the full
    complement of ``subset_size - 1`` additions cannot be made.  This consumes
    only the ranking, so any provider of (id, similarity) pairs can drive it.
    """
    window = [entry for entry in ranked if entry[1] < cfg.near_duplicate_threshold]
    window = window[: cfg.candidate_window]
    picked: list[tuple[str, float]] = []
    last_similarity = 1.0
    for image_id, similarity in window:
        if last_similarity - similarity > cfg.min_gap:
            picked.append((image_id, similarity))
            last_similarity = similarity
            if len(picked) == cfg.subset_size - 1:
                return picked
    return None


def mine_subset(seed: str, store: FeatureStore, cfg: MinerConfig,
                subset_id: int = 0) -> Subset | None:
    """Mine one subset around a seed; None means the seed is rejected."""
    picked = select_members(rank_by_similarity(seed, store), cfg)
    if picked is None:
        return None
    members = (seed,) + tuple(image_id for image_id, _ in picked)
    similarities = (1.0,) + tuple(similarity for _, similarity in picked)
    return Subset(id=subset_id, members=members, seed_similarities=similarities)


def mine_all(store: FeatureStore, cfg: MinerConfig, target_count: int) -> list[Subset]:
    """Mine subsets over seeds drawn without replacement in seeded order.

    A mined subset is accepted only if it shares at most ``overlap_limit``
    members with every previously accepted subset; acceptance is committed
    in seed order so the result is deterministic for a given store and
    config.  Stops at ``target_count`` accepted subsets or seed exhaustion.
    """
    if target_count < 0:
        raise DataError("target count must be non-negative")
    rng = np.random.default_rng(cfg.rng_seed)
    index = _SimilarityIndex(store)
    ids = store.ids
    order = rng.permutation(len(ids))
    accepted: list[Subset] = []
    member_sets: list[set[str]] = []
    for position in order:
        if len(accepted) >= target_count:
            break
        seed_row = int(position)
        picked = select_members(index.ranked_for(seed_row), cfg)
        if picked is None:
            continue
        members = (ids[seed_row],) + tuple(image_id for image_id, _ in picked)
        if any(len(set(members) & previous) > cfg.overlap_limit
               for previous in member_sets):
            continue
        accepted.append(Subset(
            id=len(accepted), members=members,
            seed_similarities=(1.0,) + tuple(sim for _, sim in picked),
        ))
        member_sets.append(set(members))
    return accepted
