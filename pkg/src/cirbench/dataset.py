"""Reader/writer for the annotation-file schema plus dataset statistics.

A dataset file is a JSON array of pair objects:

    {"pairid": 12554,
     "reference": "dev-147-2-img0",
     "target_hard": "dev-846-2-img0",
     "target_soft": {"dev-846-2-img0": 1.0, "dev-743-3-img0": -1.0},
     "caption": "...",
     "caption_extend": {"0": "...", "1": "...", "2": "...", "3": "[cr0] ..."},
     "img_set": {"id": 106, "members": [... 6 ids ...],
                 "reference_rank": 0, "target_rank": 1}}

Gold keys (target_hard, target_soft, the two ranks) may be absent on
hidden-label splits; such records can still drive submission generation but
are excluded from local metric computation.  The reader also accepts an
object keyed by pairid, or JSON-lines with one record per line.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    AuxAnnotation,
    DataError,
    FormatError,
    PairRecord,
    tokenize,
    validate_pair_record,
)

KNOWN_KEYS = {
    "pairid", "reference", "target_hard", "target_soft",
    "caption", "caption_extend", "img_set",
}
KNOWN_IMG_SET_KEYS = {"id", "members", "reference_rank", "target_rank"}
REQUIRED_KEYS = ("pairid", "reference", "caption", "img_set")


@dataclass(frozen=True)
class DatasetFile:
    split: str
    records: tuple[PairRecord, ...]

    def __post_init__(self):
        pair_ids = [record.pair_id for record in self.records]
        if len(set(pair_ids)) != len(pair_ids):
            raise DataError(f"{self.split}: duplicate pair ids")

    def labeled(self) -> list[PairRecord]:
        return [record for record in self.records if record.has_gold]

    def image_ids(self) -> list[str]:
        """Distinct images across references, targets, and subset members,
        in first-appearance order."""
        seen: dict[str, None] = {}
        for record in self.records:
            seen.setdefault(record.reference)
            if record.target_hard is not None:
                seen.setdefault(record.target_hard)
            for member in record.members:
                seen.setdefault(member)
        return list(seen)


def _parse_record(obj: dict, index: int) -> PairRecord:
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise DataError(f"record {index}: missing required key {key!r}")
    img_set = obj["img_set"]
    if not isinstance(img_set, dict) or "members" not in img_set:
        raise DataError(f"record {index}: img_set.members missing")
    for key in obj:
        if key not in KNOWN_KEYS:
            warnings.warn(f"record {index}: unknown key {key!r} ignored")
    for key in img_set:
        if key not in KNOWN_IMG_SET_KEYS:
            warnings.warn(f"record {index}: unknown img_set key {key!r} ignored")

    aux = None
    extend = obj.get("caption_extend")
    if extend is not None:
        answers = []
        for slot in ("0", "1", "2", "3"):
            if slot not in extend:
                raise DataError(f"record {index}: caption_extend missing slot {slot!r}")
            answers.append(str(extend[slot]))
        aux = AuxAnnotation(*answers)

    target_soft = obj.get("target_soft")
    if target_soft is not None:
        target_soft = {image_id: float(score) for image_id, score in target_soft.items()}

    record = PairRecord(
        pair_id=int(obj["pairid"]),
        reference=str(obj["reference"]),
        caption=str(obj["caption"]),
        subset_id=int(img_set.get("id", -1)),
        members=tuple(str(member) for member in img_set["members"]),
        target_hard=obj.get("target_hard"),
        target_soft=target_soft,
        reference_rank=img_set.get("reference_rank"),
        target_rank=img_set.get("target_rank"),
        aux=aux,
    )
    try:
        validate_pair_record(record)
    except DataError as err:
        raise DataError(f"record {index}: {err}") from None
    return record


def _split_from_path(path: Path) -> str:
    name = path.name.lower()
    for split in ("train", "val", "test"):
        if split in name:
            return split
    return "train"


def read_dataset(path: str | Path, split: str | None = None) -> DatasetFile:
    """Parse a dataset file (JSON array, pairid-keyed object, or JSON lines)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError:
        document = [json.loads(line) for line in text.splitlines() if line.strip()]
    if isinstance(document, list):
        objects = document
    elif isinstance(document, dict) and "pairid" in document:
        objects = [document]
    elif isinstance(document, dict):
        objects = list(document.values())
    else:
        raise FormatError(f"{path}: expected a JSON array of records")
    records = tuple(_parse_record(obj, index) for index, obj in enumerate(objects))
    return DatasetFile(split=split or _split_from_path(path), records=records)


def record_to_object(record: PairRecord) -> dict:
    """A record as a schema object with canonical key order."""
    obj: dict = {"pairid": record.pair_id, "reference": record.reference}
    if record.target_hard is not None:
        obj["target_hard"] = record.target_hard
    if record.target_soft is not None:
        obj["target_soft"] = dict(record.target_soft)
    obj["caption"] = record.caption
    if record.aux is not None:
        obj["caption_extend"] = {
            str(slot): answer for slot, answer in enumerate(record.aux.answers())
        }
    img_set: dict = {"id": record.subset_id, "members": list(record.members)}
    if record.reference_rank is not None:
        img_set["reference_rank"] = record.reference_rank
        img_set["target_rank"] = record.target_rank
    obj["img_set"] = img_set
    return obj


def write_dataset(dataset: DatasetFile, path: str | Path) -> None:
    """Write records as a canonical JSON array (stable key order, 2-space
    indent) so that write -> read -> write is byte-identical."""
    objects = [record_to_object(record) for record in dataset.records]
    Path(path).write_text(
        json.dumps(objects, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitStats:
    split: str
    subsets: int
    pairs: int
    pairs_per_subset: float
    images: int


def dataset_stats(files: list[DatasetFile]) -> list[SplitStats]:
    """Per-split subset/pair/image counts plus a total row.

    Counts are permutation-invariant over records: distinct subset ids,
    record count, their ratio (0 for an empty split), and distinct images
    across references, targets, and members.
    """
    rows = []
    total_subsets: set[tuple[str, int]] = set()
    total_pairs = 0
    total_images: set[str] = set()
    for dataset in files:
        subset_ids = {record.subset_id for record in dataset.records}
        images = set(dataset.image_ids())
        pairs = len(dataset.records)
        rows.append(SplitStats(
            split=dataset.split,
            subsets=len(subset_ids),
            pairs=pairs,
            pairs_per_subset=pairs / len(subset_ids) if subset_ids else 0.0,
            images=len(images),
        ))
        total_subsets.update((dataset.split, sid) for sid in subset_ids)
        total_pairs += pairs
        total_images.update(images)
    if len(files) > 1:
        rows.append(SplitStats(
            split="total",
            subsets=len(total_subsets),
            pairs=total_pairs,
            pairs_per_subset=total_pairs / len(total_subsets) if total_subsets else 0.0,
            images=len(total_images),
        ))
    return rows


def format_stats_table(rows: list[SplitStats]) -> str:
    header = ("split", "subsets", "pairs", "pairs/subset", "images")
    cells = [header] + [
        (row.split, f"{row.subsets:,}", f"{row.pairs:,}",
         f"{row.pairs_per_subset:.2f}", f"{row.images:,}")
        for row in rows
    ]
    widths = [max(len(line[col]) for line in cells) for col in range(len(header))]
    lines = []
    for line in cells:
        lines.append("  ".join(cell.rjust(width) for cell, width in zip(line, widths)))
    return "\n".join(lines)


@dataclass(frozen=True)
class CaptionLengthStats:
    count: int
    mean: float
    median: float
    stddev: float


def caption_length_stats(files: list[DatasetFile]) -> CaptionLengthStats:
    """Token-count statistics over all captions, using the shared tokenizer.

    Standard deviation is the population value (ddof 0).
    """
    lengths = [len(tokenize(record.caption)) for dataset in files
               for record in dataset.records]
    if not lengths:
        return CaptionLengthStats(0, 0.0, 0.0, 0.0)
    arr = np.asarray(lengths, dtype=np.float64)
    return CaptionLengthStats(
        count=len(lengths),
        mean=float(arr.mean()),
        median=float(np.median(arr)),
        stddev=float(arr.std()),
    )
