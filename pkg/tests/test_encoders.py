import numpy as np
import pytest
import torch

from opcse import (
    EmbeddingModel,
    EncoderError,
    PhraseSpan,
    ProjectionHead,
    SpanAlignmentError,
    ToyEncoderConfig,
    ToyTextEncoder,
    align_spans,
    project,
    register_encoder,
    tokenize_with_offsets,
    toy_text_encoder,
)
from opcse.encoders import EncoderContractError, encoder_class

from oracles import minimal_covering_interval


@pytest.fixture()
def encoder():
    return ToyTextEncoder(ToyEncoderConfig(hidden_width=16, vocab_hash_size=256, dropout=0.1, seed=3))


class TestTokenizer:
    def test_a_cat(self, encoder):
        tokens = encoder.tokenize("a cat")
        assert [t.text for t in tokens] == ["", "a", "cat"]
        assert [(t.char_start, t.char_end) for t in tokens] == [(0, 0), (0, 1), (2, 5)]

    def test_punctuation_split(self):
        tokens = tokenize_with_offsets("a red-ish cat, fast!")
        assert [t.text for t in tokens] == ["a", "red", "-", "ish", "cat", ",", "fast", "!"]
        for t in tokens:
            assert "a red-ish cat, fast!"[t.char_start : t.char_end] == t.text

    def test_empty_text_rejected(self, encoder):
        for bad in ("", "   "):
            with pytest.raises(EncoderError):
                encoder.encode(bad, view_seed=1, max_tokens=8)


class TestEncodeDeterminism:
    def test_same_seed_bit_identical(self, encoder):
        a = encoder.encode("the cat sits on a mat .", 42, 32)
        b = encoder.encode("the cat sits on a mat .", 42, 32)
        assert torch.equal(a.token_embeddings, b.token_embeddings)

    def test_different_view_seeds_differ_100_trials(self, encoder):
        text = "a quick brown fox ."
        for trial in range(100):
            a = encoder.encode(text, 2 * trial + 1, 32)
            b = encoder.encode(text, 2 * trial + 2, 32)
            assert not torch.equal(a.token_embeddings, b.token_embeddings)

    def test_zero_dropout_collapses_views(self):
        enc = ToyTextEncoder(ToyEncoderConfig(hidden_width=16, dropout=0.0, seed=3))
        a = enc.encode("a cat .", 1, 32)
        b = enc.encode("a cat .", 2, 32)
        assert torch.equal(a.token_embeddings, b.token_embeddings)

    def test_eval_view_is_dropout_free(self, encoder):
        a = encoder.encode("a cat .", None, 32)
        b = encoder.encode("a cat .", None, 32)
        assert torch.equal(a.token_embeddings, b.token_embeddings)

    def test_batch_encode_matches_single(self, encoder):
        texts = ["a cat .", "dogs run fast .", "one bird"]
        batched = encoder.encode_batch(texts, 5, 32)
        for text, output in zip(texts, batched):
            single = encoder.encode(text, 5, 32)
            assert torch.equal(single.token_embeddings, output.token_embeddings)

    def test_identical_configs_identical_parameters(self):
        a = ToyTextEncoder(ToyEncoderConfig(hidden_width=16, seed=9))
        b = toy_text_encoder(ToyEncoderConfig(hidden_width=16, seed=9))
        for name, tensor in a.named_parameters().items():
            assert torch.equal(tensor, b.named_parameters()[name])

    def test_min_width_enforced(self):
        with pytest.raises(EncoderError, match="hidden_width"):
            ToyEncoderConfig(hidden_width=3)


class TestEncoderOutput:
    def test_sentence_embedding_is_row_zero(self, encoder):
        out = encoder.encode("a cat sits .", 1, 32)
        assert torch.equal(out.sentence_embedding, out.token_embeddings[0])

    def test_truncation_bounds_rows(self, encoder):
        text = " ".join(["word"] * 50)
        out = encoder.encode(text, 1, 8)
        assert out.num_tokens == 8
        assert len(out.token_offsets) == 8
        assert len(out.full_token_offsets) == 51  # start sentinel + 50 words

    def test_offsets_map_back_to_text(self, encoder):
        text = "the cat, fast and small ."
        out = encoder.encode(text, 1, 32)
        for start, end in out.token_offsets[1:]:
            assert 0 <= start < end <= len(text)


def _span(text, caption, object_index=0):
    start = caption.index(text)
    return PhraseSpan(
        text=text, char_start=start, char_end=start + len(text), object_index=object_index
    )


class TestAlignSpans:
    def test_exact_containment(self, encoder):
        caption = "a cat sits on the mat ."
        out = encoder.encode(caption, None, 32)
        # tokens: ["", a, cat, sits, on, the, mat, .] -> "sits on the" is tokens 3..5
        spans = [_span("sits on the", caption)]
        assert align_spans(out, spans) == [(3, 6)]

    def test_single_token(self, encoder):
        caption = "a cat sits ."
        out = encoder.encode(caption, None, 32)
        assert align_spans(out, [_span("cat", caption)]) == [(2, 3)]

    def test_mid_token_start_includes_whole_token(self, encoder):
        caption = "a blackbird sings ."
        out = encoder.encode(caption, None, 32)
        span = PhraseSpan(text="bird", char_start=7, char_end=11, object_index=0)
        assert caption[7:11] == "bird"
        assert align_spans(out, [span]) == [(2, 3)]  # the whole "blackbird" token

    def test_beyond_max_tokens_absent(self, encoder):
        caption = " ".join(["pad"] * 40) + " cat ."
        out = encoder.encode(caption, None, 8)
        assert align_spans(out, [_span("cat", caption)]) == [None]

    def test_straddling_the_cut_absent(self, encoder):
        caption = " ".join(["pad"] * 6) + " big cat ."
        # start sentinel + 6 pads -> "big" is token 7, "cat" token 8
        out = encoder.encode(caption, None, 8)
        assert align_spans(out, [_span("big cat", caption)]) == [None]

    def test_outside_text_raises(self, encoder):
        caption = "a cat ."
        out = encoder.encode(caption, None, 32)
        span = PhraseSpan(text="??", char_start=20, char_end=22, object_index=0)
        with pytest.raises(SpanAlignmentError):
            align_spans(out, [span])

    def test_matches_exhaustive_minimal_cover_oracle(self, encoder):
        rng = np.random.default_rng(7)
        words = ["cat", "dog", "runs", "fast", "a", "the", "green", "hill", "over"]
        for _ in range(200):
            caption = " ".join(rng.choice(words, size=rng.integers(3, 9))) + " ."
            out = encoder.encode(caption, None, 64)
            i = int(rng.integers(0, len(caption) - 1))
            j = int(rng.integers(i + 1, len(caption) + 1))
            piece = caption[i:j]
            if not piece.strip():
                continue
            span = PhraseSpan(text=piece, char_start=i, char_end=j, object_index=0)
            expected = minimal_covering_interval(out.full_token_offsets, i, j)
            if expected is None:
                with pytest.raises(SpanAlignmentError):
                    align_spans(out, [span])
            else:
                assert align_spans(out, [span]) == [expected]

    def test_minimality_shrinking_breaks_coverage(self, encoder):
        rng = np.random.default_rng(13)
        words = ["ox", "owl", "elk", "bee", "cod", "ram"]
        for _ in range(100):
            caption = " ".join(rng.choice(words, size=5)) + " ."
            out = encoder.encode(caption, None, 64)
            i = int(rng.integers(0, len(caption) - 2))
            j = int(rng.integers(i + 1, len(caption)))
            if not caption[i:j].strip():
                continue
            span = PhraseSpan(text=caption[i:j], char_start=i, char_end=j, object_index=0)
            try:
                (result,) = align_spans(out, [span])
            except SpanAlignmentError:
                continue
            a, b = result
            offsets = out.full_token_offsets

            def covers(lo, hi):
                return lo < hi and offsets[lo][0] <= i and offsets[hi - 1][1] >= j

            assert covers(a, b)
            assert not covers(a + 1, b)
            assert not covers(a, b - 1)


class TestProjectionHead:
    def test_zero_input_zero_bias_gives_zero(self):
        head = ProjectionHead(in_dim=8, out_dim=4, hidden_dim=6, seed=0)
        out = project(torch.zeros(8, dtype=torch.float64), head)
        assert torch.equal(out, torch.zeros(4, dtype=torch.float64))

    def test_identity_first_layer_reproduces_input(self):
        head = ProjectionHead(in_dim=5, out_dim=5, hidden_dim=5, seed=0)
        with torch.no_grad():
            head.w1.copy_(torch.eye(5, dtype=torch.float64))
            head.b1.zero_()
        x = torch.arange(5, dtype=torch.float64)
        assert torch.equal(head.first_affine(x), x)

    def test_width_mismatch(self):
        head = ProjectionHead(in_dim=8, out_dim=4)
        with pytest.raises(EncoderError, match="width"):
            head(torch.zeros(7, dtype=torch.float64))

    def test_output_is_finite_256_by_default(self):
        head = ProjectionHead(in_dim=32)
        out = head(torch.randn(5, 32, dtype=torch.float64))
        assert out.shape == (5, 256)
        assert torch.isfinite(out).all()

    def test_jvp_matches_central_differences(self):
        torch.manual_seed(0)
        head = ProjectionHead(in_dim=6, out_dim=4, hidden_dim=5, seed=1)
        x = torch.randn(6, dtype=torch.float64, requires_grad=True)
        direction = torch.randn(4, dtype=torch.float64)
        out = (head(x) * direction).sum()
        (grad_x,) = torch.autograd.grad(out, x)
        step = 1e-5
        for i in range(6):
            delta = torch.zeros(6, dtype=torch.float64)
            delta[i] = step
            with torch.no_grad():
                plus = (head(x + delta) * direction).sum()
                minus = (head(x - delta) * direction).sum()
            fd = float((plus - minus) / (2 * step))
            rel = abs(fd - float(grad_x[i])) / max(abs(fd), abs(float(grad_x[i])), 1e-6)
            assert rel <= 1e-4

    def test_parameter_gradients_match_finite_differences(self):
        head = ProjectionHead(in_dim=4, out_dim=3, hidden_dim=3, seed=2)
        x = torch.randn(4, dtype=torch.float64, generator=torch.Generator().manual_seed(5))

        def loss_value():
            return (head(x) ** 2).sum()

        loss = loss_value()
        grads = torch.autograd.grad(loss, list(head.named_parameters().values()))
        step = 1e-5
        for tensor, grad in zip(head.named_parameters().values(), grads):
            flat = tensor.detach().reshape(-1)
            for idx in range(0, flat.numel(), max(1, flat.numel() // 5)):
                with torch.no_grad():
                    original = float(flat[idx])
                    flat[idx] = original + step
                    plus = float(loss_value())
                    flat[idx] = original - step
                    minus = float(loss_value())
                    flat[idx] = original
                fd = (plus - minus) / (2 * step)
                an = float(grad.reshape(-1)[idx])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                assert rel <= 1e-4


class TestToyEncoderGradients:
    def test_gradient_matches_finite_differences(self, encoder):
        text = "a cat sits near the dog ."

        def loss_value():
            out = encoder.encode(text, 7, 32)
            return (out.token_embeddings ** 2).sum()

        loss = loss_value()
        params = encoder.named_parameters()
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        step = 1e-5
        rng = np.random.default_rng(0)
        for (name, tensor), grad in zip(params.items(), grads):
            flat = tensor.detach().reshape(-1)
            grad_flat = (
                torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            )
            for idx in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                idx = int(idx)
                with torch.no_grad():
                    original = float(flat[idx])
                    flat[idx] = original + step
                    plus = float(loss_value())
                    flat[idx] = original - step
                    minus = float(loss_value())
                    flat[idx] = original
                fd = (plus - minus) / (2 * step)
                an = float(grad_flat[idx])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                assert rel <= 1e-4, f"{name}[{idx}]: fd={fd} analytic={an}"


class TestRegistry:
    def test_toy_encoder_registered(self):
        assert encoder_class("toy") is ToyTextEncoder

    def test_unknown_kind(self):
        with pytest.raises(KeyError):
            encoder_class("bert-base")

    def test_adapter_without_offsets_rejected(self):
        class NoOffsets:
            provides_token_offsets = False

        with pytest.raises(EncoderContractError, match="offsets"):
            register_encoder("no-offsets", NoOffsets)

    def test_adapter_missing_methods_rejected(self):
        class Partial:
            provides_token_offsets = True

            def encode(self):
                pass

        with pytest.raises(EncoderContractError, match="missing"):
            register_encoder("partial", Partial)


class TestEmbeddingModel:
    def test_head_width_checked(self):
        enc = ToyTextEncoder(ToyEncoderConfig(hidden_width=16, seed=0))
        with pytest.raises(EncoderError):
            EmbeddingModel(enc, ProjectionHead(in_dim=8), ProjectionHead(in_dim=2048))

    def test_heads_are_distinct_parameter_sets(self, tiny_model):
        names = set(tiny_model.named_parameters())
        assert any(n.startswith("text_head.") for n in names)
        assert any(n.startswith("image_head.") for n in names)
        text_w1 = tiny_model.text_head.w1
        image_w1 = tiny_model.image_head.w1
        assert text_w1.shape != image_w1.shape

    def test_sentence_embeddings_shape(self, tiny_model):
        embeddings = tiny_model.sentence_embeddings(["a cat .", "a dog ."], 3, 32)
        assert embeddings.shape == (2, 16)
