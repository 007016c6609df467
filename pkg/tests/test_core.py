import numpy as np
import pytest

from cirbench.core import (
    DataError,
    FeatureStore,
    FormatError,
    Query,
    RankingResult,
    Vocabulary,
    aux_sentinel,
    l2_normalize,
    load_feature_store,
    tokenize,
    validate_image_id,
    validate_pair_record,
    validate_subset,
    write_feature_store,
)

from conftest import make_record, make_subset


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_zero_vector_flagged_not_fatal(self):
        out, degenerate = l2_normalize(np.zeros(4), return_flag=True)
        assert degenerate is True
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_random_vectors_unit_norm(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(1000, 16))
        norms = np.linalg.norm(l2_normalize(vectors), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=32) * 100
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-6)

    def test_batch_flags_rows(self):
        batch = np.array([[1.0, 0.0], [0.0, 0.0]])
        out, flags = l2_normalize(batch, return_flag=True)
        assert flags.tolist() == [False, True]
        np.testing.assert_array_equal(out[1], [0.0, 0.0])


class TestImageIds:
    def test_valid(self):
        assert validate_image_id("dev-147-2-img0") == "dev-147-2-img0"

    @pytest.mark.parametrize("bad", ["", "has space", "a/b", "a\\b", "tab\tid"])
    def test_invalid(self, bad):
        with pytest.raises(DataError):
            validate_image_id(bad)


class TestFeatureStore:
    def test_header_echo(self, tmp_path):
        store = FeatureStore(["a", "b"], np.arange(6, dtype=np.float32).reshape(2, 3))
        path = tmp_path / "two.cfv"
        write_feature_store(store, path)
        loaded = load_feature_store(path)
        assert loaded.dimension == 3
        assert len(loaded) == 2

    def test_count_mismatch_is_error(self, tmp_path):
        store = FeatureStore([f"i{i}" for i in range(5)],
                             np.ones((5, 2), dtype=np.float32))
        path = tmp_path / "five.cfv"
        write_feature_store(store, path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(raw[:-8]))  # drop one row of payload
        with pytest.raises(DataError):
            load_feature_store(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cfv"
        path.write_bytes(b"NOPE" + bytes(8))
        (tmp_path / "bad.cfv.ids").write_text("")
        with pytest.raises(FormatError):
            load_feature_store(path)

    def test_non_finite_rejected(self):
        bad = np.ones((2, 2), dtype=np.float32)
        bad[1, 0] = np.nan
        with pytest.raises(DataError):
            FeatureStore(["a", "b"], bad)

    def test_roundtrip_bit_exact_100_random_stores(self, tmp_path):
        rng = np.random.default_rng(7)
        for trial in range(100):
            count = int(rng.integers(1, 12))
            dim = int(rng.integers(1, 9))
            ids = [f"t{trial}-{i}" for i in range(count)]
            matrix = rng.normal(size=(count, dim)).astype(np.float32)
            store = FeatureStore(ids, matrix)
            path = tmp_path / f"s{trial}.cfv"
            write_feature_store(store, path)
            loaded = load_feature_store(path)
            assert loaded.ids == ids
            np.testing.assert_array_equal(loaded.matrix, matrix)

    def test_iteration_order_stable(self):
        ids = [f"z{i}" for i in range(20)]
        store = FeatureStore(ids, np.ones((20, 2), dtype=np.float32))
        assert list(store) == ids
        assert list(store) == ids

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            FeatureStore(["a", "a"], np.ones((2, 2), dtype=np.float32))


class TestTokenizer:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Add a dog, then SMILE!") == ["add", "a", "dog", "then", "smile"]

    def test_unicode_whitespace(self):
        assert tokenize("one two\tthree") == ["one", "two", "three"]

    def test_inner_punctuation_kept(self):
        assert tokenize("right-hand side") == ["right-hand", "side"]

    def test_pure_punctuation_dropped(self):
        assert tokenize("... !!") == []


class TestVocabulary:
    def test_oov_fallback(self):
        vocab = Vocabulary.from_captions(["add a dog"])
        assert vocab.encode("") == [0]
        assert vocab.encode("zebra") == [0]

    def test_known_tokens_stable(self):
        vocab = Vocabulary.from_captions(["add a dog", "add a cat"])
        assert vocab.encode("add a cat") == [vocab.token_to_id[t]
                                             for t in ("add", "a", "cat")]

    def test_query_token_fallback(self):
        query = Query(pair_id=1, reference="img-1", token_ids=())
        assert query.token_ids == (0,)


class TestSentinels:
    @pytest.mark.parametrize("answer,expected", [
        ("[c] None existed", "[c]"),
        ("[cr0] Nothing worth mentioning", "[cr0]"),
        ("[cr1] Covered in brief annotation", "[cr1]"),
        ("View straight on.", None),
    ])
    def test_detection(self, answer, expected):
        assert aux_sentinel(answer) == expected


class TestSubsetValidation:
    def test_valid_subset_passes(self):
        validate_subset(make_subset())

    def test_near_duplicate_rejected(self):
        subset = make_subset()
        bad = subset.__class__(subset.id, subset.members,
                               (1.0, 0.95, 0.88, 0.86, 0.84, 0.82))
        with pytest.raises(DataError):
            validate_subset(bad)

    def test_tight_gap_rejected(self):
        subset = make_subset()
        bad = subset.__class__(subset.id, subset.members,
                               (1.0, 0.90, 0.8999, 0.86, 0.84, 0.82))
        with pytest.raises(DataError):
            validate_subset(bad)


class TestPairRecordValidation:
    def test_valid(self):
        validate_pair_record(make_record(0, make_subset(), 0, 1))

    def test_reference_equals_target(self):
        record = make_record(0, make_subset(), 0, 1)
        broken = record.__class__(**{**record.__dict__,
                                     "target_hard": record.reference,
                                     "target_soft": None,
                                     "target_rank": record.reference_rank})
        with pytest.raises(DataError):
            validate_pair_record(broken)

    def test_rank_mismatch(self):
        record = make_record(0, make_subset(), 0, 1)
        broken = record.__class__(**{**record.__dict__, "reference_rank": 2})
        with pytest.raises(DataError):
            validate_pair_record(broken)

    def test_soft_score_outside_enum(self):
        record = make_record(0, make_subset(), 0, 1)
        broken = record.__class__(**{**record.__dict__,
                                     "target_soft": {record.target_hard: 0.7}})
        with pytest.raises(DataError):
            validate_pair_record(broken)

    def test_soft_must_cover_hard_target(self):
        record = make_record(0, make_subset(), 0, 1)
        other = record.members[2]
        broken = record.__class__(**{**record.__dict__,
                                     "target_soft": {other: 1.0}})
        with pytest.raises(DataError):
            validate_pair_record(broken)

    def test_hidden_label_record_allowed(self):
        record = make_record(0, make_subset(), 0, 1)
        hidden = record.__class__(**{**record.__dict__, "target_hard": None,
                                     "target_soft": None, "reference_rank": None,
                                     "target_rank": None})
        validate_pair_record(hidden)
        assert not hidden.has_gold


class TestRankingResult:
    def test_duplicate_candidates_rejected(self):
        with pytest.raises(DataError):
            RankingResult(pair_id=0, candidates=("a", "a"), gold_rank=1)

    def test_gold_rank_bounds(self):
        with pytest.raises(DataError):
            RankingResult(pair_id=0, candidates=("a", "b"), gold_rank=3)
