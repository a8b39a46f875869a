"""Text / image encoder contracts, the deterministic toy encoder, projection
heads, and character-to-token span alignment.

The image side is always *precomputed features* (2048-d vectors from a frozen
image encoder); at no point does this package run an image model.  The text
side is pluggable behind a small contract (see `register_encoder`); the
built-in `ToyTextEncoder` is a fully deterministic, trainable stand-in used
for desk-scale verification and the synthetic pipeline.  Full-scale
pretrained adapters plug in behind the same contract and must surface token
character offsets, which span pooling depends on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .corpus import FEATURE_DIM, PhraseSpan, TokenSpan
from .util import NonFiniteValueError, derive_seed, stable_text_digest

DTYPE = torch.float64
SHARED_DIM = 256
TEXT_HIDDEN_FULL_SCALE = 768  # width of the intended full-scale text backbone

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class EncoderError(ValueError):
    """Raised for contract violations at encode time (empty text, bad widths)."""


class SpanAlignmentError(EncoderError):
    """A phrase span cannot be mapped onto the tokenization at all."""


class EncoderContractError(TypeError):
    """An encoder class does not satisfy the registration contract."""


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int


def tokenize_with_offsets(text: str) -> list[Token]:
    """Split on whitespace, keeping punctuation as single-char tokens.

    Returns real tokens only; encoders prepend their own start sentinel.
    """
    return [Token(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass
class EncoderOutput:
    """Per-token embeddings for one encoded text view.

    Row 0 is the synthetic start slot whose output doubles as the sentence
    embedding.  `token_offsets` covers the kept (possibly truncated) tokens;
    `full_token_offsets` covers the entire tokenization so span alignment can
    tell "truncated away" apart from "does not exist".
    """

    token_embeddings: torch.Tensor  # [T, H]
    token_offsets: tuple[TokenSpan, ...]
    full_token_offsets: tuple[TokenSpan, ...]

    def __post_init__(self) -> None:
        if self.token_embeddings.ndim != 2 or self.token_embeddings.shape[0] < 1:
            raise EncoderError(
                f"token_embeddings must be [T >= 1, H], got {tuple(self.token_embeddings.shape)}"
            )
        if len(self.token_offsets) != self.token_embeddings.shape[0]:
            raise EncoderError("token_offsets length must match token_embeddings rows")
        if not bool(torch.isfinite(self.token_embeddings).all()):
            raise NonFiniteValueError("token_embeddings contain non-finite values")

    @property
    def sentence_embedding(self) -> torch.Tensor:
        return self.token_embeddings[0]

    @property
    def num_tokens(self) -> int:
        return self.token_embeddings.shape[0]


def align_char_spans(
    full_token_offsets: Sequence[TokenSpan],
    num_kept_tokens: int,
    spans: Sequence[PhraseSpan],
) -> list[Optional[TokenSpan]]:
    """Map character spans to minimal covering token intervals.

    For each span, returns the half-open token interval [a, b) such that
    token a starts at or before the span and token b-1 ends at or after it,
    with both endpoints as tight as possible.  Returns None for spans whose
    interval reaches past the kept (non-truncated) tokens.  Index 0 is the
    start sentinel and never participates.
    """
    results: list[Optional[TokenSpan]] = []
    n = len(full_token_offsets)
    for span in spans:
        cs, ce = span.char_start, span.char_end
        a = None
        for t in range(1, n):
            if full_token_offsets[t][0] <= cs:
                a = t
            else:
                break
        b_last = None
        for t in range(1, n):
            if full_token_offsets[t][1] >= ce:
                b_last = t
                break
        if a is None or b_last is None:
            raise SpanAlignmentError(
                f"span [{cs}, {ce}) {span.text!r} lies outside the tokenized text"
            )
        b = max(b_last + 1, a + 1)
        results.append(None if b > num_kept_tokens else (a, b))
    return results


def align_spans(
    output: EncoderOutput, spans: Sequence[PhraseSpan]
) -> list[Optional[TokenSpan]]:
    """Align phrase spans against an encoded view (None = truncated away)."""
    return align_char_spans(output.full_token_offsets, output.num_tokens, spans)


@dataclass(frozen=True)
class ToyEncoderConfig:
    """`anisotropy` adds a shared direction to every embedding at init,
    imitating the degenerate pre-training geometry of real text encoders;
    contrastive training is expected to flatten it out."""

    hidden_width: int = 48
    vocab_hash_size: int = 4096
    dropout: float = 0.1
    seed: int = 0
    init_scale: float = 1.0
    anisotropy: float = 0.0

    def __post_init__(self) -> None:
        if self.hidden_width < 4:
            raise EncoderError(f"hidden_width must be >= 4, got {self.hidden_width}")
        if self.vocab_hash_size < 2:
            raise EncoderError("vocab_hash_size must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.anisotropy < 0.0:
            raise EncoderError(f"anisotropy must be >= 0, got {self.anisotropy}")


class ToyTextEncoder:
    """Deterministic trainable text encoder for desk-scale runs.

    Pipeline: whitespace/punctuation tokenize with offsets -> hashed
    embedding lookup -> one context-mixing layer (every token sees the mean
    token embedding, so outputs are context dependent) -> seeded
    multiplicative dropout realizing the two-view positive-pair mechanism.
    Position 0 is a synthetic start token whose output is the sentence
    embedding.  Everything is a pure function of (text, view_seed,
    parameters, max_tokens).
    """

    kind = "toy"
    provides_token_offsets = True

    def __init__(self, config: ToyEncoderConfig) -> None:
        self.config = config
        h = config.hidden_width
        gen = torch.Generator().manual_seed(derive_seed(config.seed, "toy-init"))

        def draw(*shape: int, scale: float) -> torch.Tensor:
            t = torch.randn(*shape, generator=gen, dtype=DTYPE) * scale
            t.requires_grad_(True)
            return t

        self.token_table = draw(config.vocab_hash_size, h, scale=config.init_scale)
        self.start_vector = draw(h, scale=config.init_scale)
        self.w_self = draw(h, h, scale=h**-0.5)
        self.w_context = draw(h, h, scale=h**-0.5)
        self.bias = torch.zeros(h, dtype=DTYPE, requires_grad=True)
        if config.anisotropy > 0.0:
            common = torch.randn(h, generator=gen, dtype=DTYPE)
            common = common / torch.linalg.vector_norm(common)
            with torch.no_grad():
                self.token_table += config.anisotropy * config.init_scale * common
                self.start_vector += config.anisotropy * config.init_scale * common

    @property
    def hidden_width(self) -> int:
        return self.config.hidden_width

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {
            "token_table": self.token_table,
            "start_vector": self.start_vector,
            "w_self": self.w_self,
            "w_context": self.w_context,
            "bias": self.bias,
        }

    def get_config(self) -> dict:
        return {
            "hidden_width": self.config.hidden_width,
            "vocab_hash_size": self.config.vocab_hash_size,
            "dropout": self.config.dropout,
            "seed": self.config.seed,
            "init_scale": self.config.init_scale,
            "anisotropy": self.config.anisotropy,
        }

    @classmethod
    def from_config(cls, config: dict) -> "ToyTextEncoder":
        return cls(ToyEncoderConfig(**config))

    def token_id(self, token_text: str) -> int:
        return stable_text_digest(token_text) % self.config.vocab_hash_size

    def tokenize(self, text: str) -> list[Token]:
        """Full token sequence including the position-0 start sentinel."""
        real = tokenize_with_offsets(text)
        if not real:
            raise EncoderError("cannot encode empty or whitespace-only text")
        return [Token("", 0, 0)] + real

    def encode(self, text: str, view_seed: Optional[int], max_tokens: int) -> EncoderOutput:
        """Encode one text.  `view_seed=None` disables dropout (eval view)."""
        if max_tokens < 1:
            raise EncoderError(f"max_tokens must be >= 1, got {max_tokens}")
        tokens = self.tokenize(text)
        kept = tokens[:max_tokens]
        ids = torch.tensor([self.token_id(t.text) for t in kept[1:]], dtype=torch.long)
        embedded = torch.cat([self.start_vector.unsqueeze(0), self.token_table[ids]], dim=0)
        context = embedded.mean(dim=0)
        mixed = torch.tanh(embedded @ self.w_self.T + context @ self.w_context.T + self.bias)
        rate = self.config.dropout
        if view_seed is not None and rate > 0.0:
            gen = torch.Generator().manual_seed(
                derive_seed(view_seed, "toy-view", stable_text_digest(text))
            )
            keep = (torch.rand(mixed.shape, generator=gen, dtype=DTYPE) >= rate).to(DTYPE)
            mixed = mixed * keep / (1.0 - rate)
        return EncoderOutput(
            token_embeddings=mixed,
            token_offsets=tuple((t.char_start, t.char_end) for t in kept),
            full_token_offsets=tuple((t.char_start, t.char_end) for t in tokens),
        )

    def encode_batch(
        self, texts: Sequence[str], view_seed: Optional[int], max_tokens: int
    ) -> list[EncoderOutput]:
        # Kept as a per-text loop: outputs must be bit-identical to single
        # encode() calls regardless of batch composition.
        return [self.encode(t, view_seed, max_tokens) for t in texts]


def toy_text_encoder(config: ToyEncoderConfig) -> ToyTextEncoder:
    """Build the deterministic desk-scale text encoder."""
    return ToyTextEncoder(config)


class ProjectionHead:
    """Two-layer affine map with tanh between, into the shared space.

    Distinct instances project text (hidden width -> 256) and image features
    (2048 -> 256); both are trainable while the image features themselves
    stay frozen.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int = SHARED_DIM,
        hidden_dim: Optional[int] = None,
        seed: int = 0,
    ) -> None:
        if in_dim < 1 or out_dim < 1:
            raise EncoderError("projection dimensions must be positive")
        hidden_dim = out_dim if hidden_dim is None else hidden_dim
        if hidden_dim < 1:
            raise EncoderError("projection hidden_dim must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        gen = torch.Generator().manual_seed(derive_seed(seed, "projection-init", in_dim, out_dim))
        self.w1 = (torch.randn(hidden_dim, in_dim, generator=gen, dtype=DTYPE) * in_dim**-0.5)
        self.b1 = torch.zeros(hidden_dim, dtype=DTYPE)
        self.w2 = (torch.randn(out_dim, hidden_dim, generator=gen, dtype=DTYPE) * hidden_dim**-0.5)
        self.b2 = torch.zeros(out_dim, dtype=DTYPE)
        for t in (self.w1, self.b1, self.w2, self.b2):
            t.requires_grad_(True)

    def _check_width(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise EncoderError(
                f"projection width mismatch: input has {x.shape[-1]} dims, head expects {self.in_dim}"
            )
        return x.to(DTYPE)

    def first_affine(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-nonlinearity output of the first layer (identity-check hook)."""
        return self._check_width(x) @ self.w1.T + self.b1

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.first_affine(x)) @ self.w2.T + self.b2

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def get_config(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
        }


def project(vector: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """Project a feature vector (or a batch of rows) into the shared space."""
    return head(vector)


_ENCODER_REGISTRY: dict[str, type] = {}

_REQUIRED_METHODS = ("encode", "tokenize", "get_config", "from_config", "named_parameters")


def register_encoder(kind: str, encoder_cls: type) -> None:
    """Register a text encoder class behind the shared contract.

    Adapters must expose token character offsets; span pooling is meaningless
    without them, so registration rejects classes that do not declare
    `provides_token_offsets = True` or miss contract methods.
    """
    if not getattr(encoder_cls, "provides_token_offsets", False):
        raise EncoderContractError(
            f"{encoder_cls.__name__} does not surface token character offsets"
        )
    missing = [m for m in _REQUIRED_METHODS if not callable(getattr(encoder_cls, m, None))]
    if missing:
        raise EncoderContractError(
            f"{encoder_cls.__name__} is missing contract methods: {', '.join(missing)}"
        )
    _ENCODER_REGISTRY[kind] = encoder_cls


def encoder_class(kind: str) -> type:
    if kind not in _ENCODER_REGISTRY:
        raise KeyError(f"no encoder registered under kind {kind!r}")
    return _ENCODER_REGISTRY[kind]


register_encoder(ToyTextEncoder.kind, ToyTextEncoder)


class EmbeddingModel:
    """The trainable bundle: text encoder plus the two projection heads.

    Image-side raw features are constants (the image encoder is frozen);
    gradients reach only the text encoder and the two heads.
    """

    def __init__(
        self,
        text_encoder: ToyTextEncoder,
        text_head: ProjectionHead,
        image_head: ProjectionHead,
    ) -> None:
        if text_head.in_dim != text_encoder.hidden_width:
            raise EncoderError(
                f"text head expects {text_head.in_dim} dims but encoder emits "
                f"{text_encoder.hidden_width}"
            )
        if image_head.in_dim != FEATURE_DIM:
            raise EncoderError(f"image head must accept {FEATURE_DIM}-d features")
        if text_head.out_dim != image_head.out_dim:
            raise EncoderError("text and image heads must share the output space")
        self.text_encoder = text_encoder
        self.text_head = text_head
        self.image_head = image_head

    @classmethod
    def build_toy(
        cls,
        encoder_config: ToyEncoderConfig,
        head_hidden_dim: int = 64,
        shared_dim: int = SHARED_DIM,
        seed: int = 0,
    ) -> "EmbeddingModel":
        encoder = ToyTextEncoder(encoder_config)
        return cls(
            text_encoder=encoder,
            text_head=ProjectionHead(
                encoder.hidden_width, shared_dim, head_hidden_dim, seed=derive_seed(seed, "text-head")
            ),
            image_head=ProjectionHead(
                FEATURE_DIM, shared_dim, head_hidden_dim, seed=derive_seed(seed, "image-head")
            ),
        )

    def named_parameters(self) -> dict[str, torch.Tensor]:
        params: dict[str, torch.Tensor] = {}
        for name, tensor in self.text_encoder.named_parameters().items():
            params[f"encoder.{name}"] = tensor
        for name, tensor in self.text_head.named_parameters().items():
            params[f"text_head.{name}"] = tensor
        for name, tensor in self.image_head.named_parameters().items():
            params[f"image_head.{name}"] = tensor
        return params

    def parameters(self) -> list[torch.Tensor]:
        return list(self.named_parameters().values())

    def encode_texts(
        self, texts: Sequence[str], view_seed: Optional[int], max_tokens: int
    ) -> list[EncoderOutput]:
        return self.text_encoder.encode_batch(texts, view_seed, max_tokens)

    def sentence_embeddings(
        self, texts: Sequence[str], view_seed: Optional[int], max_tokens: int
    ) -> torch.Tensor:
        outputs = self.encode_texts(texts, view_seed, max_tokens)
        return torch.stack([o.sentence_embedding for o in outputs])
