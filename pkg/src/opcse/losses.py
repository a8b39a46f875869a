"""The three contrastive objectives and their weighted combination.

All three losses are softmax-over-cosine-similarity cross entropies at a
temperature, computed with log-sum-exp stabilization:

- text: two dropout views of the same batch of sentences; each anchor's
  positive is its own second view, negatives are the other second views.
- image-caption: caption anchors against the batch's image features, the
  paired image being the positive.  Asymmetric (captions anchor, images
  do not).
- object-phrase: within one record only, each valid phrase against all K
  of that record's objects; other records never supply negatives.

Reductions are arithmetic means over contributing items so the weights stay
comparable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .pooling import PhraseEmbeddingSet
from .util import NonFiniteValueError

NORM_EPS = 1e-12


class LossError(ValueError):
    pass


class DegenerateEmbeddingError(LossError):
    """A zero-norm embedding reached a cosine similarity.

    This always indicates an encoder bug upstream, so it is surfaced rather
    than epsilon-smoothed away.
    """


@dataclass(frozen=True)
class LossConfig:
    """Temperatures and mixing weights.

    `tau` drives the text and object-phrase softmaxes, `tau_prime` the
    image-caption one (same default: only a single temperature is pinned by
    the reference setup).  `alpha` weights the image-caption term and `beta`
    the object-phrase term in the combined objective.
    """

    tau: float = 0.05
    tau_prime: float = 0.05
    alpha: float = 0.01
    beta: float = 0.005

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise LossError(f"tau must be > 0, got {self.tau}")
        if not self.tau_prime > 0:
            raise LossError(f"tau_prime must be > 0, got {self.tau_prime}")
        if self.alpha < 0 or self.beta < 0:
            raise LossError("alpha and beta must be non-negative")


@dataclass(frozen=True)
class LossCounts:
    text: int = 0
    img_cap: int = 0
    obj_phrase: int = 0


@dataclass(frozen=True)
class LossBreakdown:
    """One step's loss terms.  `combined` is exactly
    text + alpha * img_cap + beta * obj_phrase at float64 precision."""

    text_loss: float
    img_cap_loss: float
    obj_phrase_loss: float
    combined: float
    counts: LossCounts = field(default_factory=LossCounts)

    def to_json_dict(self) -> dict:
        return {
            "text_loss": self.text_loss,
            "img_cap_loss": self.img_cap_loss,
            "obj_phrase_loss": self.obj_phrase_loss,
            "combined": self.combined,
            "counts": {
                "text": self.counts.text,
                "img_cap": self.counts.img_cap,
                "obj_phrase": self.counts.obj_phrase,
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "LossBreakdown":
        counts = obj.get("counts", {})
        return cls(
            text_loss=obj["text_loss"],
            img_cap_loss=obj["img_cap_loss"],
            obj_phrase_loss=obj["obj_phrase_loss"],
            combined=obj["combined"],
            counts=LossCounts(
                text=counts.get("text", 0),
                img_cap=counts.get("img_cap", 0),
                obj_phrase=counts.get("obj_phrase", 0),
            ),
        )


def cosine_sim(u, v) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1] against rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise LossError(f"cosine_sim expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm vector")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def _check_matrix(x: torch.Tensor, name: str, min_rows: int = 2) -> torch.Tensor:
    if x.ndim != 2:
        raise LossError(f"{name} must be a 2-d matrix, got shape {tuple(x.shape)}")
    if x.shape[0] < min_rows:
        raise LossError(f"{name} needs at least {min_rows} rows, got {x.shape[0]}")
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteValueError(f"{name} contains non-finite values")
    return x.to(torch.float64)


def _normalize_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if bool((norms <= NORM_EPS).any()):
        raise DegenerateEmbeddingError(f"{name} contains a zero-norm row")
    return x / norms


def _info_nce_rows(logits: torch.Tensor, positive_logits: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(logits, dim=1) - positive_logits


def text_contrastive_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    tau: float,
    *,
    literal_denominator: bool = False,
) -> torch.Tensor:
    """Dropout-view contrastive loss over sentence embeddings.

    Row i of `anchors` and `positives` are two encoder views of the same
    sentence.  The denominator runs over the positive views of the whole
    batch.  `literal_denominator=True` switches to summing over the anchor
    views themselves (making the j = i term similarity exactly 1); exposed
    for ablation only, since it degenerates training.
    """
    anchors = _check_matrix(anchors, "anchors")
    positives = _check_matrix(positives, "positives")
    if anchors.shape != positives.shape:
        raise LossError("anchors and positives must have identical shape")
    if not tau > 0:
        raise LossError(f"tau must be > 0, got {tau}")
    a = _normalize_rows(anchors, "anchors")
    p = _normalize_rows(positives, "positives")
    positive_logits = (a * p).sum(dim=1) / tau
    if literal_denominator:
        logits = (a @ a.T) / tau
    else:
        logits = (a @ p.T) / tau
    return _info_nce_rows(logits, positive_logits).mean()


def image_caption_contrastive_loss(
    captions: torch.Tensor, images: torch.Tensor, tau_prime: float
) -> torch.Tensor:
    """Caption-anchored contrastive loss against in-batch image features.

    Both inputs are post-projection (shared space).  Only captions anchor;
    the image-anchored symmetric term is deliberately absent.
    """
    captions = _check_matrix(captions, "captions")
    images = _check_matrix(images, "images")
    if captions.shape != images.shape:
        raise LossError("captions and images must have identical shape")
    if not tau_prime > 0:
        raise LossError(f"tau_prime must be > 0, got {tau_prime}")
    c = _normalize_rows(captions, "captions")
    im = _normalize_rows(images, "images")
    logits = (c @ im.T) / tau_prime
    positive_logits = logits.diagonal()
    return _info_nce_rows(logits, positive_logits).mean()


def object_phrase_contrastive_loss(
    sets: Iterable[PhraseEmbeddingSet],
    tau: float,
    *,
    normalize_per_set: bool = True,
) -> tuple[torch.Tensor, int]:
    """Within-record contrastive loss between phrases and objects.

    For each admitted set (K >= 2 pairs, at least one valid phrase), every
    valid phrase k scores against all K objects of the *same* record, its
    own object being the positive.  Per-set sums are divided by the number
    of valid phrases (`normalize_per_set=False` keeps the raw sum), then
    averaged over admitted sets.

    Returns (loss, number of admitted sets); an empty admission list yields
    (0.0 constant, 0) so the term contributes exactly zero gradient.
    """
    if not tau > 0:
        raise LossError(f"tau must be > 0, got {tau}")
    set_losses: list[torch.Tensor] = []
    for s in sets:
        if s.num_pairs < 2 or s.is_empty:
            continue
        valid_idx = [k for k, ok in enumerate(s.valid) if ok]
        phrases = _check_matrix(s.phrase_vectors[valid_idx], "phrase_vectors", min_rows=1)
        objects = _check_matrix(s.object_vectors, "object_vectors", min_rows=2)
        p = _normalize_rows(phrases, "phrase_vectors")
        o = _normalize_rows(objects, "object_vectors")
        logits = (p @ o.T) / tau  # [V, K]
        positive_logits = logits[torch.arange(len(valid_idx)), torch.tensor(valid_idx)]
        per_phrase = _info_nce_rows(logits, positive_logits)
        set_loss = per_phrase.sum()
        if normalize_per_set:
            set_loss = set_loss / len(valid_idx)
        set_losses.append(set_loss)
    if not set_losses:
        return torch.zeros((), dtype=torch.float64), 0
    return torch.stack(set_losses).mean(), len(set_losses)


def combined_loss(
    parts: Sequence[float | torch.Tensor],
    config: LossConfig,
    counts: LossCounts = LossCounts(),
) -> LossBreakdown:
    """Weighted sum of the three terms, keeping the unweighted values."""
    if len(parts) != 3:
        raise LossError("parts must be (text, img_cap, obj_phrase)")
    text, img_cap, obj_phrase = (float(p) for p in parts)
    for name, value in (("text", text), ("img_cap", img_cap), ("obj_phrase", obj_phrase)):
        if not np.isfinite(value):
            raise NonFiniteValueError(f"non-finite {name} loss: {value}")
    return LossBreakdown(
        text_loss=text,
        img_cap_loss=img_cap,
        obj_phrase_loss=obj_phrase,
        combined=text + config.alpha * img_cap + config.beta * obj_phrase,
        counts=counts,
    )
