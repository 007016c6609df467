"""Synthetic attribute-vector benchmark for end-to-end training tests.

Images are feature vectors with four one-hot attribute blocks (color,
shape, size, finish) plus a family context block shared by visually similar
images, so subset mining groups family members together.  The caption of a
pair deterministically describes which attribute values change from the
reference to the target, which makes the target identifiable within its
subset and the retrieval task learnable from features alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AuxAnnotation, DataError, FeatureStore, PairRecord, Subset
from .dataset import DatasetFile
from .mining import MinerConfig, mine_all
from .pairs import assign_splits, draw_pairs

ATTRIBUTE_GROUPS = (
    ("color", ("red", "blue", "green", "amber", "violet")),
    ("shape", ("cube", "ball", "cone", "ring", "slab")),
    ("size", ("tiny", "small", "medium", "large", "huge")),
    ("finish", ("matte", "glossy", "rough", "smooth", "shiny")),
)
ATTRIBUTE_DIMS = sum(len(values) for _, values in ATTRIBUTE_GROUPS)


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int = 500
    feature_dim: int = 32
    family_size: int = 12
    attribute_strength: float = 0.45
    context_strength: float = 0.25
    noise: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.feature_dim <= ATTRIBUTE_DIMS:
            raise DataError(
                f"feature_dim must exceed {ATTRIBUTE_DIMS} to leave context dims"
            )
        if self.family_size < 8:
            raise DataError("family_size below 8 leaves too few mining candidates")
        combos = 1
        for _, choices in ATTRIBUTE_GROUPS:
            combos *= len(choices)
        if self.num_images > combos:
            raise DataError(
                f"num_images {self.num_images} exceeds the {combos} distinct "
                f"attribute tuples"
            )


def _decode_tuple(code: int) -> tuple[int, ...]:
    values = []
    for _, choices in reversed(ATTRIBUTE_GROUPS):
        values.append(code % len(choices))
        code //= len(choices)
    return tuple(reversed(values))


def generate_corpus(cfg: SyntheticConfig) -> tuple[FeatureStore, dict[str, tuple[int, ...]]]:
    """A feature store of attribute vectors plus the attribute tuple per id.

    Attribute tuples are drawn without replacement, so a caption's edit
    applied to a reference matches exactly one image corpus-wide and the
    retrieval task has no ambiguous candidates.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    context_dims = cfg.feature_dim - ATTRIBUTE_DIMS
    combos = 1
    for _, choices in ATTRIBUTE_GROUPS:
        combos *= len(choices)
    codes = rng.choice(combos, size=cfg.num_images, replace=False)
    num_families = (cfg.num_images + cfg.family_size - 1) // cfg.family_size
    ids: list[str] = []
    attrs: dict[str, tuple[int, ...]] = {}
    matrix = np.zeros((cfg.num_images, cfg.feature_dim), dtype=np.float64)
    image = 0
    for family in range(num_families):
        context = rng.normal(size=context_dims)
        context *= cfg.context_strength / np.linalg.norm(context)
        for member in range(cfg.family_size):
            if image >= cfg.num_images:
                break
            image_id = f"syn-{family:03d}-{member:02d}"
            values = _decode_tuple(int(codes[image]))
            vec = np.zeros(cfg.feature_dim)
            offset = 0
            for value, (_, choices) in zip(values, ATTRIBUTE_GROUPS):
                vec[offset + value] = cfg.attribute_strength
                offset += len(choices)
            vec[ATTRIBUTE_DIMS:] = context
            vec += rng.normal(scale=cfg.noise, size=cfg.feature_dim)
            matrix[image] = vec
            ids.append(image_id)
            attrs[image_id] = values
            image += 1
    return FeatureStore(ids, matrix.astype(np.float32)), attrs


def edit_caption(reference_values: tuple[int, ...],
                 target_values: tuple[int, ...]) -> str:
    """Deterministic modifier sentence naming every changed attribute value."""
    edits = []
    for (group, choices), ref_v, tgt_v in zip(ATTRIBUTE_GROUPS, reference_values,
                                              target_values):
        if ref_v != tgt_v:
            edits.append(f"set the {group} to {choices[tgt_v]}")
    if not edits:
        return "keep everything exactly the same"
    return " and ".join(edits)


def _aux_for(reference_values, target_values, pair_id) -> AuxAnnotation:
    kept = [
        f"the {group} stays {choices[ref_v]}"
        for (group, choices), ref_v, tgt_v in zip(ATTRIBUTE_GROUPS, reference_values,
                                                  target_values)
        if ref_v == tgt_v
    ]
    q1 = "; ".join(kept) if kept else "[c] nothing is preserved"
    q2 = "[c] no incidental changes"
    q3 = "[cr0] Nothing worth mentioning"
    q4 = ("[cr1] Covered in brief annotation" if pair_id % 2 == 0
          else "[cr0] Nothing worth mentioning")
    return AuxAnnotation(q1, q2, q3, q4)


@dataclass
class SyntheticBenchmark:
    store: FeatureStore
    attrs: dict[str, tuple[int, ...]]
    subsets: list[Subset]
    datasets: dict[str, DatasetFile] = field(default_factory=dict)

    def records(self, split: str) -> list[PairRecord]:
        return list(self.datasets[split].records)


def build_benchmark(cfg: SyntheticConfig | None = None, *,
                    miner: MinerConfig | None = None, max_subsets: int = 90,
                    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                    split_seed: int = 0, with_aux: bool = True) -> SyntheticBenchmark:
    """Generate a corpus, mine subsets, draw the nine pairs each, and split
    by connected components into train/val/test dataset files.

    The default miner keeps subsets member-disjoint (overlap limit 0) so the
    component split lands whole subsets in train/val/test at the requested
    ratios instead of chaining everything into one component.
    """
    cfg = cfg or SyntheticConfig()
    miner = miner or MinerConfig(rng_seed=cfg.rng_seed, overlap_limit=0)
    store, attrs = generate_corpus(cfg)
    subsets = mine_all(store, miner, max_subsets)
    if not subsets:
        raise DataError("no subsets could be mined from the synthetic corpus")
    assignment = assign_splits(subsets, ratios, rng_seed=split_seed)
    records_by_split: dict[str, list[PairRecord]] = {"train": [], "val": [], "test": []}
    pair_id = 0
    for subset in subsets:
        split = assignment.by_subset[subset.id]
        for directed in draw_pairs(subset):
            reference = subset.members[directed.reference_rank]
            target = subset.members[directed.target_rank]
            caption = edit_caption(attrs[reference], attrs[target])
            records_by_split[split].append(PairRecord(
                pair_id=pair_id,
                reference=reference,
                caption=caption,
                subset_id=subset.id,
                members=subset.members,
                target_hard=target,
                target_soft={target: 1.0},
                reference_rank=directed.reference_rank,
                target_rank=directed.target_rank,
                aux=_aux_for(attrs[reference], attrs[target], pair_id) if with_aux else None,
            ))
            pair_id += 1
    datasets = {
        split: DatasetFile(split=split, records=tuple(records))
        for split, records in records_by_split.items()
    }
    return SyntheticBenchmark(store=store, attrs=attrs, subsets=subsets,
                              datasets=datasets)
