import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opcse import (
    CorpusError,
    CorpusValidationError,
    MultimodalBatch,
    ObjectPhraseRecord,
    PhraseSpan,
    TextBatch,
    TextExample,
    filter_single_pair,
    load_corpus,
    load_text_corpus,
    make_batches,
    mark_truncated_phrases,
    write_corpus,
    write_text_corpus,
)
from opcse.corpus import FEATURE_DIM, num_batches

from conftest import make_record


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _record_json(record_id="r1", caption="a red cat .", spans=None, dim=FEATURE_DIM):
    spans = spans if spans is not None else [("red cat", 2, 9), ("cat", 6, 9)]
    rng = np.random.default_rng(42)
    return {
        "record_id": record_id,
        "caption": caption,
        "image_feature": rng.standard_normal(dim).tolist(),
        "objects": [
            {
                "feature": rng.standard_normal(dim).tolist(),
                "phrase": {"text": t, "char_start": s, "char_end": e},
            }
            for t, s, e in spans
        ],
        "schema_version": "v1",
    }


class TestPhraseSpan:
    def test_rejects_inverted_span(self):
        with pytest.raises(CorpusValidationError):
            PhraseSpan(text="x", char_start=5, char_end=5, object_index=0)

    def test_rejects_negative_offsets(self):
        with pytest.raises(CorpusValidationError):
            PhraseSpan(text="x", char_start=-1, char_end=2, object_index=0)


class TestRecordValidation:
    def test_valid_record_roundtrips_spans(self):
        record = make_record("r", "the cat sees a dog .", [("cat", 4), ("dog", 15)])
        for span in record.phrase_spans:
            assert record.caption[span.char_start : span.char_end] == span.text

    def test_span_text_mismatch_names_record_and_span(self):
        with pytest.raises(CorpusValidationError) as exc_info:
            ObjectPhraseRecord(
                record_id="bad-rec",
                caption="the cat .",
                image_feature=np.zeros(FEATURE_DIM),
                object_features=np.zeros((1, FEATURE_DIM)),
                phrase_spans=(
                    PhraseSpan(text="dog", char_start=4, char_end=7, object_index=0),
                ),
            )
        message = str(exc_info.value)
        assert "bad-rec" in message and "dog" in message

    def test_cardinality_mismatch(self):
        with pytest.raises(CorpusValidationError, match="cardinality mismatch"):
            ObjectPhraseRecord(
                record_id="r",
                caption="the cat .",
                image_feature=np.zeros(FEATURE_DIM),
                object_features=np.zeros((2, FEATURE_DIM)),
                phrase_spans=(
                    PhraseSpan(text="cat", char_start=4, char_end=7, object_index=0),
                ),
            )

    def test_wrong_feature_dim(self):
        with pytest.raises(CorpusValidationError):
            ObjectPhraseRecord(
                record_id="r",
                caption="the cat .",
                image_feature=np.zeros(100),
                object_features=np.zeros((1, FEATURE_DIM)),
                phrase_spans=(
                    PhraseSpan(text="cat", char_start=4, char_end=7, object_index=0),
                ),
            )

    def test_non_finite_feature(self):
        feature = np.zeros(FEATURE_DIM)
        feature[7] = np.nan
        with pytest.raises(CorpusValidationError):
            ObjectPhraseRecord(
                record_id="r",
                caption="the cat .",
                image_feature=feature,
                object_features=np.zeros((1, FEATURE_DIM)),
                phrase_spans=(
                    PhraseSpan(text="cat", char_start=4, char_end=7, object_index=0),
                ),
            )

    def test_features_frozen_after_construction(self):
        record = make_record("r", "the cat .", [("cat", 4)])
        with pytest.raises(ValueError):
            record.image_feature[0] = 1.0
        with pytest.raises(ValueError):
            record.object_features[0, 0] = 1.0


class TestLoadCorpus:
    def test_loads_in_file_order(self, tmp_path):
        lines = [json.dumps(_record_json(record_id=f"r{i}")) for i in range(3)]
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, lines)
        records = load_corpus(path)
        assert [r.record_id for r in records] == ["r0", "r1", "r2"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorpusError, match="not found"):
            load_corpus(tmp_path / "nope.jsonl")

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, [json.dumps(_record_json()), "{not json"])
        with pytest.raises(CorpusValidationError, match="line 2"):
            load_corpus(path)

    def test_span_mismatch_reports_line_and_record(self, tmp_path):
        bad = _record_json(record_id="r9", spans=[("dog", 2, 5), ("cat", 6, 9)])
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, [json.dumps(bad)])
        with pytest.raises(CorpusValidationError, match="line 1.*r9") as exc_info:
            load_corpus(path)
        assert "dog" in str(exc_info.value)

    def test_unknown_schema_version_rejected(self, tmp_path):
        obj = _record_json()
        obj["schema_version"] = "v999"
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, [json.dumps(obj)])
        with pytest.raises(CorpusValidationError, match="schema_version"):
            load_corpus(path)

    def test_duplicate_record_id_rejected(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, [json.dumps(_record_json()), json.dumps(_record_json())])
        with pytest.raises(CorpusValidationError, match="duplicate"):
            load_corpus(path)

    def test_wrong_dim_in_file(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_lines(path, [json.dumps(_record_json(dim=16))])
        with pytest.raises(CorpusValidationError, match="2048"):
            load_corpus(path)

    def test_roundtrip_is_field_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        records = [
            make_record("a", "a cat sees a dog .", [("cat", 2), ("dog", 13)], rng=rng),
            make_record("b", "one bird on a hill .", [("bird", 4), ("hill", 14)], rng=rng),
        ]
        path = tmp_path / "corpus.jsonl"
        write_corpus(records, path)
        loaded = load_corpus(path)
        assert len(loaded) == len(records)
        for original, copy in zip(records, loaded):
            assert original.record_id == copy.record_id
            assert original.caption == copy.caption
            assert np.array_equal(original.image_feature, copy.image_feature)
            assert np.array_equal(original.object_features, copy.object_features)
            assert original.phrase_spans == copy.phrase_spans


class TestTextCorpus:
    def test_roundtrip_skips_blank_lines(self, tmp_path):
        path = tmp_path / "text.txt"
        path.write_text("a cat .\n\nthe dog runs .\n", encoding="utf-8")
        examples = load_text_corpus(path)
        assert [e.text for e in examples] == ["a cat .", "the dog runs ."]
        write_text_corpus(examples, tmp_path / "copy.txt")
        assert load_text_corpus(tmp_path / "copy.txt") == examples

    def test_empty_text_rejected(self):
        with pytest.raises(CorpusValidationError):
            TextExample("")


def _records_with_pair_counts(counts):
    rng = np.random.default_rng(1)
    nouns = ["cat", "dog", "bird", "fox", "cow", "hen"]
    records = []
    for i, k in enumerate(counts):
        caption = " ".join(nouns[:k]) + " ."
        phrases = []
        cursor = 0
        for noun in nouns[:k]:
            phrases.append((noun, cursor))
            cursor += len(noun) + 1
        records.append(make_record(f"r{i}", caption, phrases, rng=rng))
    return records


class TestFilterSinglePair:
    def test_paper_exclusion_rule(self):
        records = _records_with_pair_counts([3, 1, 2])
        kept, stats = filter_single_pair(records)
        assert [r.num_pairs for r in kept] == [3, 2]
        assert stats.num_excluded_single_pair == 1
        assert stats.num_records == 2

    def test_all_single_pair(self):
        records = _records_with_pair_counts([1, 1, 1, 1])
        kept, stats = filter_single_pair(records)
        assert kept == []
        assert stats.num_excluded_single_pair == 4
        assert stats.mean_pairs_per_record == 0.0

    def test_mean_pairs(self):
        records = _records_with_pair_counts([4, 5])
        kept, stats = filter_single_pair(records)
        assert kept == records
        assert stats.mean_pairs_per_record == 4.5
        assert stats.mean_pairs_per_record_unfiltered == 4.5

    def test_idempotent(self):
        records = _records_with_pair_counts([3, 1, 2, 1, 5])
        kept, _ = filter_single_pair(records)
        kept_again, stats = filter_single_pair(kept)
        assert kept_again == kept
        assert stats.num_excluded_single_pair == 0

    def test_mean_after_filter_at_least_two(self):
        records = _records_with_pair_counts([1, 2, 6, 1, 3])
        kept, stats = filter_single_pair(records)
        assert stats.mean_pairs_per_record >= 2.0


class TestMarkTruncatedPhrases:
    def _record(self, num_phrases):
        return _records_with_pair_counts([num_phrases])[0]

    def test_paper_truncation_rule(self):
        record = self._record(2)
        mask = mark_truncated_phrases(record, [(2, 4), (30, 35)], max_tokens=32)
        assert mask == [True, False]

    def test_all_within_budget(self):
        record = self._record(3)
        assert mark_truncated_phrases(record, [(1, 3), (5, 9), (10, 12)], 32) == [True] * 3

    def test_boundary_span_ending_at_max_tokens(self):
        # End index is exclusive: a span ending AT index 32 uses positions
        # up to 31, all of which the 32-token encoder produced -> valid.
        # A span whose last token sits at index 32 reads a row the encoder
        # never produced -> invalid.
        record = self._record(2)
        assert mark_truncated_phrases(record, [(30, 32), (30, 33)], 32) == [True, False]

    def test_absent_span_is_invalid(self):
        record = self._record(2)
        assert mark_truncated_phrases(record, [None, (1, 2)], 32) == [False, True]

    def test_length_mismatch(self):
        record = self._record(2)
        with pytest.raises(ValueError, match="length"):
            mark_truncated_phrases(record, [(1, 2)], 32)

    def test_bad_budget(self):
        record = self._record(2)
        with pytest.raises(ValueError, match="max_tokens"):
            mark_truncated_phrases(record, [(1, 2), (2, 3)], 0)


class TestMakeBatches:
    def test_sizes_with_short_final_batch(self):
        texts = [TextExample(f"line {i} .") for i in range(130)]
        batches = list(make_batches(texts, 64, seed=0))
        assert [len(b) for b in batches] == [64, 64, 2]
        assert all(isinstance(b, TextBatch) for b in batches)

    def test_same_seed_identical(self):
        texts = [TextExample(f"line {i} .") for i in range(50)]
        a = [b.texts for b in make_batches(texts, 8, seed=3)]
        b = [b.texts for b in make_batches(texts, 8, seed=3)]
        assert a == b

    def test_different_seeds_differ(self):
        texts = [TextExample(f"line {i} .") for i in range(1000)]
        a = [t for batch in make_batches(texts, 64, seed=1) for t in batch.texts]
        b = [t for batch in make_batches(texts, 64, seed=2) for t in batch.texts]
        assert a != b

    def test_partition_property(self):
        texts = [TextExample(f"line {i} .") for i in range(137)]
        flat = [t for batch in make_batches(texts, 16, seed=9) for t in batch.texts]
        assert sorted(flat) == sorted(e.text for e in texts)

    def test_batch_size_below_two_rejected(self):
        with pytest.raises(ValueError, match="batch_size"):
            list(make_batches([TextExample("x")], 1, seed=0))

    def test_multimodal_batches_carry_pair_counts(self):
        records = _records_with_pair_counts([2, 3, 4, 2, 5])
        batches = list(make_batches(records, 2, seed=0))
        assert all(isinstance(b, MultimodalBatch) for b in batches)
        for batch in batches:
            assert batch.pair_counts == tuple(r.num_pairs for r in batch.records)

    @given(st.integers(min_value=0, max_value=60), st.integers(min_value=2, max_value=9))
    @settings(max_examples=25, deadline=None)
    def test_partition_property_hypothesis(self, n, batch_size):
        texts = [TextExample(f"t{i}") for i in range(n)]
        batches = list(make_batches(texts, batch_size, seed=11))
        flat = [t for batch in batches for t in batch.texts]
        assert sorted(flat) == sorted(e.text for e in texts)
        assert all(len(b) <= batch_size for b in batches)
        if n:
            assert len(batches) == num_batches(n, batch_size)
