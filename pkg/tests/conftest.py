import numpy as np
import pytest

from opcse import (
    EmbeddingModel,
    ObjectPhraseRecord,
    PhraseSpan,
    ToyEncoderConfig,
)
from opcse.corpus import FEATURE_DIM


def make_record(record_id, caption, phrases, rng=None, features=None):
    """Build a validated record from (text, char_start) phrase tuples."""
    rng = rng or np.random.default_rng(0)
    spans = []
    for k, (text, start) in enumerate(phrases):
        assert caption[start : start + len(text)] == text, "test bug: span mismatch"
        spans.append(
            PhraseSpan(text=text, char_start=start, char_end=start + len(text), object_index=k)
        )
    if features is None:
        features = rng.standard_normal((len(phrases), FEATURE_DIM))
    return ObjectPhraseRecord(
        record_id=record_id,
        caption=caption,
        image_feature=rng.standard_normal(FEATURE_DIM),
        object_features=features,
        phrase_spans=tuple(spans),
    )


@pytest.fixture()
def tiny_model():
    return EmbeddingModel.build_toy(
        ToyEncoderConfig(hidden_width=16, vocab_hash_size=512, dropout=0.1, seed=7),
        head_hidden_dim=8,
        seed=7,
    )


@pytest.fixture()
def tiny_model_no_dropout():
    return EmbeddingModel.build_toy(
        ToyEncoderConfig(hidden_width=16, vocab_hash_size=512, dropout=0.0, seed=7),
        head_hidden_dim=8,
        seed=7,
    )
