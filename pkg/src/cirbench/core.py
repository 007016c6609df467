"""Shared domain types: image ids, feature storage, subsets, pair records.

Feature vectors are stored as float32 (matching typical feature dumps);
all similarity and distance arithmetic is done in float64.
"""

from __future__ import annotations

import struct
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"CFV1"
DEGENERATE_NORM = 1e-12
SUBSET_SIZE = 6

AUX_SENTINELS = ("[c]", "[cr0]", "[cr1]")


class CirbenchError(Exception):
    """Base class for toolkit errors."""


class DataError(CirbenchError):
    """Inconsistent or invalid data (exit code 2 at the CLI)."""


class FormatError(DataError):
    """Malformed file container (bad magic, truncated header, ...)."""


class NumericalError(CirbenchError):
    """Numerical failure such as a non-finite loss (exit code 3 at the CLI)."""


# ---------------------------------------------------------------------------
# Image ids and feature storage
# ---------------------------------------------------------------------------

def validate_image_id(image_id: str) -> str:
    """Check an image id token: non-empty, no whitespace or path separators."""
    if not isinstance(image_id, str) or not image_id:
        raise DataError(f"image id must be a non-empty string, got {image_id!r}")
    if any(ch.isspace() for ch in image_id) or "/" in image_id or "\\" in image_id:
        raise DataError(f"image id contains whitespace or path separator: {image_id!r}")
    return image_id


class FeatureStore:
    """Immutable ordered map from image id to a float32 feature vector.

    Safe for concurrent reads: the backing matrix is marked read-only after
    construction and ids never change.
    """

    def __init__(self, ids: list[str], matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {matrix.shape}")
        if len(ids) != matrix.shape[0]:
            raise DataError(
                f"id count {len(ids)} does not match vector count {matrix.shape[0]}"
            )
        if not np.isfinite(matrix).all():
            bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
            raise DataError(f"non-finite feature value in row {bad} ({ids[bad]!r})")
        for image_id in ids:
            validate_image_id(image_id)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids in feature store")
        self._ids = list(ids)
        self._index = {image_id: row for row, image_id in enumerate(ids)}
        self._matrix = matrix
        self._matrix.setflags(write=False)

    @property
    def dimension(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only (count, dimension) float32 matrix in id order."""
        return self._matrix

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def __iter__(self):
        return iter(self._ids)

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise DataError(f"unknown image id {image_id!r}") from None

    def get(self, image_id: str) -> np.ndarray:
        """Float32 feature row for one id."""
        return self._matrix[self.index_of(image_id)]

    def get64(self, image_id: str) -> np.ndarray:
        """Float64 copy of one feature row, for metric arithmetic."""
        return self._matrix[self.index_of(image_id)].astype(np.float64)

    def rows64(self, image_ids: list[str]) -> np.ndarray:
        """Float64 (len(image_ids), dimension) matrix in the requested order."""
        rows = [self.index_of(image_id) for image_id in image_ids]
        return self._matrix[rows].astype(np.float64)


def load_feature_store(path: str | Path, ids_path: str | Path | None = None) -> FeatureStore:
    """Load a binary feature file plus its id sidecar.

    The binary layout is: 4-byte magic, u32-le count, u32-le dimension,
    then count*dimension float32-le values row-major.  The sidecar is UTF-8
    text with one image id per line, line i naming row i.  Its default
    location is the feature path with ``.ids`` appended.
    """
    path = Path(path)
    ids_path = Path(ids_path) if ids_path is not None else Path(str(path) + ".ids")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    count, dimension = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * count * dimension
    if len(raw) != expected:
        raise DataError(
            f"{path}: header declares {count}x{dimension} values "
            f"({expected} bytes) but file has {len(raw)} bytes"
        )
    matrix = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, dimension)
    ids = ids_path.read_text(encoding="utf-8").splitlines()
    ids = [line.strip() for line in ids if line.strip()]
    if len(ids) != count:
        raise DataError(
            f"{ids_path}: {len(ids)} ids for {count} vectors in {path}"
        )
    if not np.isfinite(matrix).all():
        row = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
        raise DataError(f"{path}: non-finite value in row {row}")
    return FeatureStore(ids, matrix)


def write_feature_store(store: FeatureStore, path: str | Path,
                        ids_path: str | Path | None = None) -> None:
    """Write a store in the binary format read by :func:`load_feature_store`."""
    path = Path(path)
    ids_path = Path(ids_path) if ids_path is not None else Path(str(path) + ".ids")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(store), store.dimension))
        fh.write(store.matrix.astype("<f4").tobytes())
    ids_path.write_text("\n".join(store.ids) + "\n", encoding="utf-8")


def l2_normalize(vectors: np.ndarray, return_flag: bool = False):
    """Scale vectors (last axis) to unit Euclidean norm.

    Rows with norm below ``DEGENERATE_NORM`` are returned unchanged and
    flagged rather than rejected, so one corrupted image does not abort a
    batch job.  With ``return_flag`` the degenerate mask (or scalar bool for
    1-D input) is returned alongside the result.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    out = arr / safe
    out = np.where(degenerate, arr, out)
    if return_flag:
        flag = degenerate.squeeze(-1)
        if arr.ndim == 1:
            return out, bool(flag)
        return out, flag
    return out


# ---------------------------------------------------------------------------
# Caption tokenization and vocabulary
# ---------------------------------------------------------------------------

def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, strip edge punctuation."""
    tokens = []
    for raw in text.lower().split():
        stripped = _strip_punct(raw)
        if stripped:
            tokens.append(stripped)
    return tokens


OOV_TOKEN = "<oov>"
OOV_ID = 0


class Vocabulary:
    """Token-to-id table built from a caption corpus; id 0 is reserved for
    out-of-vocabulary tokens."""

    def __init__(self, token_to_id: dict[str, int]):
        if token_to_id.get(OOV_TOKEN) != OOV_ID:
            raise DataError("vocabulary must map the OOV token to id 0")
        self.token_to_id = dict(token_to_id)

    @classmethod
    def from_captions(cls, captions: list[str]) -> "Vocabulary":
        table = {OOV_TOKEN: OOV_ID}
        for caption in captions:
            for token in tokenize(caption):
                if token not in table:
                    table[token] = len(table)
        return cls(table)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, text: str) -> list[int]:
        """Token ids for a caption; an empty caption falls back to one OOV id."""
        ids = [self.token_to_id.get(token, OOV_ID) for token in tokenize(text)]
        return ids if ids else [OOV_ID]


# ---------------------------------------------------------------------------
# Subsets, annotations, pair records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Subset:
    """An ordered group of six mutually similar images; index 0 is the seed.

    ``seed_similarities[i]`` is the cosine of member i to the seed, so the
    first entry is 1 and the rest decrease strictly.
    """
    id: int
    members: tuple[str, ...]
    seed_similarities: tuple[float, ...]


def validate_subset(subset: Subset, *, near_duplicate_threshold: float = 0.94,
                    min_gap: float = 0.002) -> None:
    """Check the miner output contract; raises :class:`DataError` on violation."""
    if subset.id < 0:
        raise DataError(f"subset id must be non-negative, got {subset.id}")
    if len(subset.members) != SUBSET_SIZE:
        raise DataError(f"subset {subset.id} has {len(subset.members)} members")
    if len(set(subset.members)) != SUBSET_SIZE:
        raise DataError(f"subset {subset.id} has duplicate members")
    for member in subset.members:
        validate_image_id(member)
    sims = subset.seed_similarities
    if len(sims) != SUBSET_SIZE:
        raise DataError(f"subset {subset.id} has {len(sims)} similarities")
    if abs(sims[0] - 1.0) > 1e-6:
        raise DataError(f"subset {subset.id}: seed similarity {sims[0]} != 1")
    for i in range(1, SUBSET_SIZE):
        if not -1.0 <= sims[i] <= 1.0:
            raise DataError(f"subset {subset.id}: similarity {sims[i]} out of range")
        if sims[i] >= near_duplicate_threshold:
            raise DataError(
                f"subset {subset.id}: member {i} similarity {sims[i]} is a near-duplicate"
            )
        if i >= 2 and not sims[i - 1] - sims[i] > min_gap:
            raise DataError(
                f"subset {subset.id}: similarity gap {sims[i - 1] - sims[i]:.6f} "
                f"at position {i} not above {min_gap}"
            )


def aux_sentinel(answer: str) -> str | None:
    """The not-applicable marker prefix of an answer, or None if applicable."""
    for sentinel in AUX_SENTINELS:
        if answer.startswith(sentinel):
            return sentinel
    return None


@dataclass(frozen=True)
class AuxAnnotation:
    """Answers to the four clarifying questions collected per pair.

    A not-applicable answer begins with one of the markers in
    ``AUX_SENTINELS``; the marker is kept verbatim as part of the text.
    """
    q1: str
    q2: str
    q3: str
    q4: str

    def answers(self) -> tuple[str, str, str, str]:
        return (self.q1, self.q2, self.q3, self.q4)


@dataclass(frozen=True)
class PairRecord:
    """One annotated query: reference image, modifier caption, target image,
    plus the embedded subset membership it was drawn from.

    Gold fields (``target_hard``, ``target_soft``, the two ranks) may be None
    for hidden-label splits.
    """
    pair_id: int
    reference: str
    caption: str
    subset_id: int
    members: tuple[str, ...]
    target_hard: str | None = None
    target_soft: dict[str, float] | None = None
    reference_rank: int | None = None
    target_rank: int | None = None
    aux: AuxAnnotation | None = None

    @property
    def has_gold(self) -> bool:
        return self.target_hard is not None


ALLOWED_SOFT_SCORES = (1.0, 0.5, -1.0)


def validate_pair_record(record: PairRecord) -> None:
    """Check a record against its embedded subset membership."""
    if record.pair_id < 0:
        raise DataError(f"pair {record.pair_id}: negative pair id")
    validate_image_id(record.reference)
    if not record.caption:
        raise DataError(f"pair {record.pair_id}: empty caption")
    if len(record.members) != SUBSET_SIZE or len(set(record.members)) != SUBSET_SIZE:
        raise DataError(f"pair {record.pair_id}: malformed subset members")
    if record.reference not in record.members:
        raise DataError(f"pair {record.pair_id}: reference not in subset members")
    if record.target_hard is not None:
        validate_image_id(record.target_hard)
        if record.target_hard == record.reference:
            raise DataError(f"pair {record.pair_id}: reference equals target")
        if record.target_hard not in record.members:
            raise DataError(f"pair {record.pair_id}: target not in subset members")
    if record.target_soft:
        if record.target_hard is None:
            raise DataError(f"pair {record.pair_id}: soft targets without a hard target")
        if record.target_soft.get(record.target_hard) != 1.0:
            raise DataError(
                f"pair {record.pair_id}: soft targets must score the hard target 1.0"
            )
        for image_id, score in record.target_soft.items():
            validate_image_id(image_id)
            if score not in ALLOWED_SOFT_SCORES:
                raise DataError(
                    f"pair {record.pair_id}: soft score {score} for {image_id!r} "
                    f"not in {ALLOWED_SOFT_SCORES}"
                )
    ranks = (record.reference_rank, record.target_rank)
    if (ranks[0] is None) != (ranks[1] is None):
        raise DataError(f"pair {record.pair_id}: only one of the two ranks present")
    if ranks[0] is not None:
        for rank in ranks:
            if not 0 <= rank < SUBSET_SIZE:
                raise DataError(f"pair {record.pair_id}: rank {rank} out of range")
        if ranks[0] == ranks[1]:
            raise DataError(f"pair {record.pair_id}: reference and target rank equal")
        if record.members[ranks[0]] != record.reference:
            raise DataError(f"pair {record.pair_id}: reference rank mismatch")
        if record.target_hard is not None and record.members[ranks[1]] != record.target_hard:
            raise DataError(f"pair {record.pair_id}: target rank mismatch")


def validate_pair_against_subset(record: PairRecord, subset: Subset) -> None:
    """Check a record against a standalone mined subset."""
    validate_pair_record(record)
    if record.subset_id != subset.id:
        raise DataError(f"pair {record.pair_id}: subset id mismatch")
    if record.members != subset.members:
        raise DataError(f"pair {record.pair_id}: members differ from subset {subset.id}")


# ---------------------------------------------------------------------------
# Query and ranking records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Query:
    """A composed-retrieval query: reference image plus caption token ids."""
    pair_id: int
    reference: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.token_ids:
            object.__setattr__(self, "token_ids", (OOV_ID,))


@dataclass(frozen=True)
class RankingResult:
    """Ordered candidates (best first) with the gold target's 1-based rank.

    ``gold_rank`` is None when the gold target is absent from the pool.
    """
    pair_id: int
    candidates: tuple[str, ...]
    gold_rank: int | None = None

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise DataError(f"pair {self.pair_id}: duplicate candidates in ranking")
        if self.gold_rank is not None and not 1 <= self.gold_rank <= len(self.candidates):
            raise DataError(f"pair {self.pair_id}: gold rank {self.gold_rank} out of range")
