"""Phrase embeddings via average pooling over aligned token spans."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .corpus import ObjectPhraseRecord, TokenSpan
from .encoders import DTYPE, EncoderOutput, ProjectionHead, align_spans


class PoolingError(ValueError):
    pass


@dataclass
class PhraseEmbeddingSet:
    """Projected (phrase, object) embedding rows for one record.

    Rows with valid[k] False (phrases lost to truncation) hold zero phrase
    vectors and never appear as loss numerators, but their object vectors
    stay available as in-record negatives.
    """

    phrase_vectors: torch.Tensor  # [K, shared_dim]
    object_vectors: torch.Tensor  # [K, shared_dim]
    valid: tuple[bool, ...]

    def __post_init__(self) -> None:
        if self.phrase_vectors.shape != self.object_vectors.shape:
            raise PoolingError(
                f"phrase/object row mismatch: {tuple(self.phrase_vectors.shape)} vs "
                f"{tuple(self.object_vectors.shape)}"
            )
        if len(self.valid) != self.phrase_vectors.shape[0]:
            raise PoolingError("valid mask length must equal the number of pairs")

    @property
    def num_pairs(self) -> int:
        return self.phrase_vectors.shape[0]

    @property
    def num_valid(self) -> int:
        return sum(self.valid)

    @property
    def is_empty(self) -> bool:
        return self.num_valid == 0


def pool_phrase(output: EncoderOutput, token_span: TokenSpan) -> torch.Tensor:
    """Arithmetic mean of token embedding rows [start, end)."""
    start, end = token_span
    if not (0 <= start < end <= output.num_tokens):
        raise PoolingError(
            f"token span [{start}, {end}) out of range for {output.num_tokens} tokens"
        )
    return output.token_embeddings[start:end].mean(dim=0)


def build_phrase_set(
    record: ObjectPhraseRecord,
    output: EncoderOutput,
    heads: tuple[ProjectionHead, ProjectionHead],
    validity: Sequence[bool],
    token_spans: Optional[Sequence[Optional[TokenSpan]]] = None,
) -> PhraseEmbeddingSet:
    """Assemble the per-record embedding set for the object-phrase loss.

    `heads` is (text_head, image_head).  Every object feature is projected
    (the object exists whether or not its phrase survived truncation);
    phrase rows are pooled from the encoded caption only where valid.
    """
    text_head, image_head = heads
    if token_spans is None:
        token_spans = align_spans(output, record.phrase_spans)
    if len(validity) != record.num_pairs or len(token_spans) != record.num_pairs:
        raise PoolingError(
            f"record {record.record_id!r}: validity/token_spans must have one entry per pair"
        )
    object_vectors = image_head(torch.from_numpy(record.object_features.copy()))
    pooled_rows: list[torch.Tensor] = []
    pooled_indices: list[int] = []
    for k, (ok, span) in enumerate(zip(validity, token_spans)):
        if ok:
            if span is None:
                raise PoolingError(
                    f"record {record.record_id!r}: phrase {k} marked valid but has no token span"
                )
            pooled_rows.append(pool_phrase(output, span))
            pooled_indices.append(k)
    shared_dim = text_head.out_dim
    phrase_vectors = torch.zeros(record.num_pairs, shared_dim, dtype=DTYPE)
    if pooled_rows:
        projected = text_head(torch.stack(pooled_rows))
        index = torch.tensor(pooled_indices, dtype=torch.long)
        phrase_vectors = phrase_vectors.index_add(0, index, projected)
    return PhraseEmbeddingSet(
        phrase_vectors=phrase_vectors,
        object_vectors=object_vectors,
        valid=tuple(bool(v) for v in validity),
    )
