import numpy as np
import pytest

from cirbench.core import AuxAnnotation, FeatureStore, PairRecord, Subset
from cirbench.dataset import DatasetFile


@pytest.fixture
def small_store():
    rng = np.random.default_rng(42)
    ids = [f"img-{i:03d}" for i in range(30)]
    return FeatureStore(ids, rng.normal(size=(30, 8)).astype(np.float32))


def make_subset(subset_id=0, prefix="img"):
    members = tuple(f"{prefix}-{subset_id}-{i}" for i in range(6))
    sims = (1.0, 0.90, 0.88, 0.86, 0.84, 0.82)
    return Subset(id=subset_id, members=members, seed_similarities=sims)


def make_record(pair_id, subset, reference_rank, target_rank, caption="move it left",
                aux=None, soft=True):
    target = subset.members[target_rank]
    return PairRecord(
        pair_id=pair_id,
        reference=subset.members[reference_rank],
        caption=caption,
        subset_id=subset.id,
        members=subset.members,
        target_hard=target,
        target_soft={target: 1.0} if soft else None,
        reference_rank=reference_rank,
        target_rank=target_rank,
        aux=aux,
    )


def make_dataset(num_subsets=3, split="val", aux_every=0):
    records = []
    pair_id = 0
    for sid in range(num_subsets):
        subset = make_subset(sid)
        for ref, tgt in ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0),
                         (0, 2), (0, 3), (0, 4)):
            aux = None
            if aux_every and pair_id % aux_every == 0:
                aux = AuxAnnotation(
                    "the pose is kept", "[c] nothing else moved",
                    "[cr0] Nothing worth mentioning", "[cr1] Covered in brief annotation",
                )
            records.append(make_record(pair_id, subset, ref, tgt, aux=aux))
            pair_id += 1
    return DatasetFile(split=split, records=tuple(records))
