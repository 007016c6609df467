"""Directed pair construction, split assignment, and dialogue-path extraction.

Each six-image subset yields nine directed reference-to-target pairs: a
closed six-cycle of consecutive modifications plus three extra branches out
of the seed, so the seed is the reference of four pairs in total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import SUBSET_SIZE, DataError, PairRecord, Subset

PairKind = Literal["loop", "branch"]

LOOP_RANKS = tuple((rank, (rank + 1) % SUBSET_SIZE) for rank in range(SUBSET_SIZE))
BRANCH_RANKS = ((0, 2), (0, 3), (0, 4))


@dataclass(frozen=True)
class DirectedPair:
    subset_id: int
    reference_rank: int
    target_rank: int
    kind: PairKind


def draw_pairs(subset: Subset) -> list[DirectedPair]:
    """The nine directed pairs drawn from one subset (six loop, three branch)."""
    if len(subset.members) != SUBSET_SIZE:
        raise DataError(f"subset {subset.id} does not have {SUBSET_SIZE} members")
    pairs = [
        DirectedPair(subset.id, ref, tgt, "loop") for ref, tgt in LOOP_RANKS
    ]
    pairs.extend(
        DirectedPair(subset.id, ref, tgt, "branch") for ref, tgt in BRANCH_RANKS
    )
    return pairs


# ---------------------------------------------------------------------------
# Split assignment
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitAssignment:
    by_subset: dict[int, str]
    ratios: tuple[float, float, float]
    rng_seed: int

    def subsets_in(self, split: str) -> list[int]:
        return sorted(sid for sid, name in self.by_subset.items() if name == split)


def _connected_components(subsets: list[Subset]) -> list[list[Subset]]:
    """Group subsets that share at least one member image."""
    parent = {subset.id: subset.id for subset in subsets}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict[str, int] = {}
    for subset in subsets:
        for member in subset.members:
            if member in owner:
                root_a, root_b = find(owner[member]), find(subset.id)
                if root_a != root_b:
                    parent[root_b] = root_a
            else:
                owner[member] = subset.id
    groups: dict[int, list[Subset]] = {}
    for subset in subsets:
        groups.setdefault(find(subset.id), []).append(subset)
    components = [sorted(group, key=lambda s: s.id) for group in groups.values()]
    components.sort(key=lambda group: group[0].id)
    return components


def assign_splits(subsets: list[Subset],
                  ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  rng_seed: int = 0) -> SplitAssignment:
    """Assign whole connected components of overlapping subsets to splits.

    Components are shuffled by the seed and placed greedily on whichever
    split has the largest remaining deficit against its ratio target, so two
    overlapping subsets can never land in different splits.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative values summing to 1: {ratios}")
    if not subsets:
        return SplitAssignment({}, tuple(ratios), rng_seed)
    components = _connected_components(subsets)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(components))
    total = len(subsets)
    targets = [ratio * total for ratio in ratios]
    counts = [0, 0, 0]
    by_subset: dict[int, str] = {}
    for position in order:
        component = components[int(position)]
        deficits = [targets[i] - counts[i] for i in range(3)]
        slot = max(range(3), key=lambda i: (deficits[i], -i))
        counts[slot] += len(component)
        for subset in component:
            by_subset[subset.id] = SPLIT_NAMES[slot]
    return SplitAssignment(by_subset, tuple(ratios), rng_seed)


# ---------------------------------------------------------------------------
# Dialogue paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DialoguePath:
    """A chain of consecutive modifications; ``closed`` means the last image
    also links back to the first."""
    images: tuple[str, ...]
    closed: bool

    def __len__(self) -> int:
        return len(self.images) - 1 + (1 if self.closed else 0)


def _is_loop_pair(record: PairRecord) -> bool:
    if record.reference_rank is None or record.target_rank is None:
        return False
    return record.target_rank == (record.reference_rank + 1) % SUBSET_SIZE


def _simple_cycles(adjacency: dict[str, list[str]]) -> list[tuple[str, ...]]:
    """All simple directed cycles, each rotated to start at its smallest node."""
    cycles: set[tuple[str, ...]] = set()
    nodes = sorted(adjacency)
    for start in nodes:
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for succ in adjacency.get(node, ()):
                if succ == start and len(path) > 1:
                    pivot = path.index(min(path))
                    cycles.add(tuple(path[pivot:] + path[:pivot]))
                elif succ > start and succ not in path:
                    stack.append((succ, path + [succ]))
    return sorted(cycles)


def _maximal_open_chains(adjacency: dict[str, list[str]],
                         predecessors: dict[str, list[str]]) -> list[tuple[str, ...]]:
    """Maximal simple chains: extendable by no edge at either end without
    repeating an image."""
    chains: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    for start in sorted(adjacency):
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            extended = False
            for succ in adjacency.get(node, ()):
                if succ not in path:
                    stack.append((succ, path + [succ]))
                    extended = True
            if not extended and len(path) > 1:
                # Drop chains that a longer walk would cover by starting earlier.
                head = path[0]
                if any(pred not in path for pred in predecessors.get(head, ())):
                    continue
                chain = tuple(path)
                if chain not in seen:
                    seen.add(chain)
                    chains.append(chain)
    return chains


def extract_dialogue_paths(records: list[PairRecord]
                           ) -> tuple[list[DialoguePath], dict[int, bool]]:
    """Dialogue chains over the consecutive-modification pairs.

    Builds the directed image graph from loop-kind pairs (branch pairs are
    alternative outcomes, not chain links), returns all maximal simple
    chains including full cycles, and flags each subset whose six loop pairs
    all survive as closed-loop.  Chains may cross subsets through shared
    images.
    """
    adjacency: dict[str, list[str]] = {}
    predecessors: dict[str, list[str]] = {}
    loop_edges_by_subset: dict[int, set[tuple[int, int]]] = {}
    subset_ids = set()
    for record in records:
        subset_ids.add(record.subset_id)
        if not _is_loop_pair(record) or record.target_hard is None:
            continue
        loop_edges_by_subset.setdefault(record.subset_id, set()).add(
            (record.reference_rank, record.target_rank)
        )
        ref, tgt = record.reference, record.target_hard
        if tgt not in adjacency.get(ref, ()):
            adjacency.setdefault(ref, []).append(tgt)
            predecessors.setdefault(tgt, []).append(ref)
        adjacency.setdefault(tgt, [])
        predecessors.setdefault(ref, [])
    for successors in adjacency.values():
        successors.sort()

    closed_loop = {
        subset_id: loop_edges_by_subset.get(subset_id, set()) == set(LOOP_RANKS)
        for subset_id in subset_ids
    }

    cycles = _simple_cycles(adjacency)
    paths = [DialoguePath(cycle, True) for cycle in cycles]
    cycle_cover = {frozenset(cycle) for cycle in cycles}
    for chain in _maximal_open_chains(adjacency, predecessors):
        if frozenset(chain) in cycle_cover:
            continue
        paths.append(DialoguePath(chain, False))
    paths.sort(key=lambda p: (-len(p), p.images))
    return paths, closed_loop
