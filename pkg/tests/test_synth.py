import numpy as np
import pytest

from opcse import (
    filter_single_pair,
    generate_multimodal,
    generate_sts,
    generate_text,
    load_corpus,
    write_corpus,
)
from opcse.synth import (
    STS_SCALE_MAX,
    SynthError,
    SynthSpec,
    concept_of,
    gold_score,
    object_code,
    surface_forms,
)


def _spec(**kwargs):
    defaults = dict(num_records=60, text_lines=40, sts_pairs=60, seed=9)
    defaults.update(kwargs)
    return SynthSpec(**defaults)


class TestSpecValidation:
    def test_empty_vocab(self):
        with pytest.raises(SynthError):
            _spec(vocab=())

    def test_distribution_must_sum_to_one(self):
        with pytest.raises(SynthError):
            _spec(pairs_per_record={2: 0.5, 3: 0.6})

    def test_keys_in_range(self):
        with pytest.raises(SynthError):
            _spec(pairs_per_record={0: 0.5, 2: 0.5})
        with pytest.raises(SynthError):
            _spec(pairs_per_record={7: 1.0})

    def test_feature_dim_pinned(self):
        with pytest.raises(SynthError):
            _spec(feature_dim=128)

    def test_json_roundtrip(self):
        spec = _spec(noise_scale=0.25)
        assert SynthSpec.from_json_dict(spec.to_json_dict()) == spec

    def test_unknown_keys_rejected(self):
        with pytest.raises(SynthError, match="unknown"):
            SynthSpec.from_json_dict({"num_recordz": 5})

    def test_colliding_surface_forms_rejected(self):
        with pytest.raises(SynthError, match="collide"):
            _spec(vocab=("cat", "cats"), forms_per_concept=2)

    def test_forms_share_one_code(self):
        spec = _spec()
        forms = surface_forms(spec, "cat")
        assert len(forms) == spec.forms_per_concept
        assert len(set(forms)) == len(forms)
        for form in forms:
            assert concept_of(spec, form) == "cat"
        with pytest.raises(KeyError):
            concept_of(spec, "zebra")


class TestGenerateMultimodal:
    def test_deterministic(self):
        a = generate_multimodal(_spec())
        b = generate_multimodal(_spec())
        assert len(a) == len(b) == 60
        for ra, rb in zip(a, b):
            assert ra.record_id == rb.record_id
            assert ra.caption == rb.caption
            assert np.array_equal(ra.object_features, rb.object_features)
            assert np.array_equal(ra.image_feature, rb.image_feature)
            assert ra.phrase_spans == rb.phrase_spans

    def test_every_record_passes_validation(self, tmp_path):
        records = generate_multimodal(_spec(num_records=40))
        path = tmp_path / "synth.jsonl"
        write_corpus(records, path)
        assert len(load_corpus(path)) == 40  # zero rejects

    def test_spans_are_exact_slices(self):
        for record in generate_multimodal(_spec(num_records=30)):
            for span in record.phrase_spans:
                assert record.caption[span.char_start : span.char_end] == span.text

    def test_all_single_pair_distribution_fully_excluded(self):
        records = generate_multimodal(_spec(pairs_per_record={1: 1.0}))
        kept, stats = filter_single_pair(records)
        assert kept == []
        assert stats.num_excluded_single_pair == len(records)

    def test_zero_noise_nearest_neighbor_100_percent(self):
        spec = _spec(noise_scale=0.0, num_records=40, long_prefix_prob=0.0)
        for record in generate_multimodal(spec):
            if record.num_pairs < 2:
                continue
            for span in record.phrase_spans:
                form = span.text.split()[-1]  # adjectives precede the content form
                code = object_code(spec, concept_of(spec, form))
                sims = record.object_features @ code
                assert int(np.argmax(sims)) == span.object_index
                assert np.allclose(
                    record.object_features[span.object_index], code, atol=1e-12
                )

    def test_mean_pairs_converges_to_distribution(self):
        spec = _spec(num_records=1000)
        records = generate_multimodal(spec)
        mean = np.mean([r.num_pairs for r in records])
        assert abs(mean - spec.mean_pairs) / spec.mean_pairs <= 0.05

    def test_long_prefix_produces_captions_beyond_budget(self):
        from opcse.encoders import tokenize_with_offsets

        spec = _spec(num_records=200, long_prefix_prob=0.3)
        lengths = [
            len(tokenize_with_offsets(r.caption)) + 1 for r in generate_multimodal(spec)
        ]
        assert max(lengths) > 32 and min(lengths) <= 32


class TestGenerateText:
    def test_count_and_determinism(self):
        a = generate_text(_spec())
        b = generate_text(_spec())
        assert a == b
        assert len(a) == 40
        assert all(e.text for e in a)


class TestGenerateSts:
    def test_identical_pair_gold_at_maximum(self):
        assert gold_score(["cat", "dog"], ["cat", "dog"]) == STS_SCALE_MAX
        dev, _ = generate_sts(_spec())
        identical = [e for e in dev if e.sentence_a == e.sentence_b]
        assert identical, "generator should emit some identical pairs"
        assert all(e.gold == STS_SCALE_MAX for e in identical)

    def test_disjoint_gold_at_minimum(self):
        assert gold_score(["cat"], ["dog"]) == 0.0
        dev, _ = generate_sts(_spec())
        assert min(e.gold for e in dev) == 0.0

    def test_gold_spans_at_least_five_distinct_values(self):
        dev, test = generate_sts(_spec(sts_pairs=200))
        assert len({e.gold for e in dev}) >= 5
        assert len({e.gold for e in test}) >= 5

    def test_dev_and_test_differ(self):
        dev, test = generate_sts(_spec())
        assert [e.sentence_a for e in dev] != [e.sentence_a for e in test]

    def test_deterministic(self):
        a_dev, a_test = generate_sts(_spec())
        b_dev, b_test = generate_sts(_spec())
        assert a_dev == b_dev and a_test == b_test
