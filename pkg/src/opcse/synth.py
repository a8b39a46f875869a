"""Deterministic synthetic corpora with planted object-phrase structure.

Each content *concept* owns a fixed random unit "code" in feature space and
several surface forms ("cat", "cats", "catlet", ...).  An object's feature
is its phrase's concept code plus isotropic noise; the image feature is the
mean of the record's concept codes plus noise.  Similarity gold is concept
overlap, independent of which surface forms were rendered, and sentences
bury the content in random filler runs.

A text-only learner sees unrelated hashed tokens for two forms of the same
concept, so it cannot recover the gold structure; the grounding objectives
can, because all forms of a concept share one visual code.  Improvements
from the cross-modal terms are therefore causally attributable to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import FEATURE_DIM, ObjectPhraseRecord, PhraseSpan, TextExample
from .evaluation import StsExample
from .util import derive_seed

STS_SCALE_MAX = 5.0

DEFAULT_VOCAB = (
    "cat", "dog", "bird", "horse", "sheep", "cow", "goat", "duck", "rabbit", "fox",
    "car", "truck", "bike", "boat", "train", "plane", "bus", "tractor", "sled", "wagon",
    "table", "chair", "lamp", "door", "window", "ladder", "bucket", "basket", "bottle", "plate",
    "tree", "flower", "rock", "river", "hill", "cloud", "field", "fence", "bridge", "path",
    "man", "woman", "child", "farmer", "runner", "painter", "dancer", "singer", "rider", "diver",
    "ball", "kite", "drum", "flag", "rope", "tent", "boot", "hat", "scarf", "glove",
    "apple", "bread", "cheese", "melon", "carrot", "onion", "pepper", "grape", "lemon", "plum",
    "house", "barn", "tower", "shed", "cabin", "store", "mill", "garden", "yard", "porch",
)

_FILLERS = (
    "the", "a", "one", "some", "that", "this", "its",
    "sees", "holds", "finds", "watches", "meets", "passes", "keeps",
    "near", "under", "beside", "behind", "with", "against", "past",
    "and", "while", "then", "also", "yet", "so",
    "slowly", "quietly", "often", "maybe", "soon", "almost", "again",
    "today", "outside", "somewhere", "together", "apart", "once",
)
_ADJECTIVES = ("small", "big", "old", "new", "bright", "dark", "quiet", "busy")
_LONG_PREFIX_UNIT = "on and on"
_FORM_SUFFIXES = ("", "s", "let", "ling", "kin", "ette")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for deterministic corpus generation."""

    num_records: int = 2000
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    pairs_per_record: dict[int, float] = field(
        default_factory=lambda: {1: 0.10, 2: 0.20, 3: 0.25, 4: 0.20, 5: 0.15, 6: 0.10}
    )
    feature_dim: int = FEATURE_DIM
    noise_scale: float = 0.1
    seed: int = 0
    text_lines: int = 5000
    sts_pairs: int = 200
    adjective_prob: float = 0.35
    long_prefix_prob: float = 0.05
    max_filler_run: int = 3
    forms_per_concept: int = 3
    sts_same_form_prob: float = 0.7
    # Full-image features can be noised separately from object features:
    # global image-caption pairs are the noisy signal, object crops the
    # clean one, which is the data situation this framework targets.
    image_noise_scale: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.vocab:
            raise SynthError("vocab must be non-empty")
        if self.feature_dim != FEATURE_DIM:
            raise SynthError(f"feature_dim must be {FEATURE_DIM} to satisfy the corpus schema")
        if self.noise_scale < 0:
            raise SynthError("noise_scale must be non-negative")
        if self.image_noise_scale is not None and self.image_noise_scale < 0:
            raise SynthError("image_noise_scale must be non-negative")
        if not self.pairs_per_record:
            raise SynthError("pairs_per_record distribution must be non-empty")
        for k, p in self.pairs_per_record.items():
            if not (1 <= int(k) <= 6):
                raise SynthError(f"pairs_per_record keys must lie in 1..6, got {k}")
            if p < 0:
                raise SynthError("pairs_per_record probabilities must be non-negative")
        total = float(sum(self.pairs_per_record.values()))
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise SynthError(f"pairs_per_record probabilities must sum to 1, got {total}")
        if len(set(self.vocab)) != len(self.vocab):
            raise SynthError("vocab contains duplicate words")
        if not 1 <= self.forms_per_concept <= len(_FORM_SUFFIXES):
            raise SynthError(
                f"forms_per_concept must lie in 1..{len(_FORM_SUFFIXES)}, got "
                f"{self.forms_per_concept}"
            )
        all_forms = [
            c + suffix for c in self.vocab for suffix in _FORM_SUFFIXES[: self.forms_per_concept]
        ]
        if len(set(all_forms)) != len(all_forms):
            raise SynthError("surface forms collide across concepts")
        reserved = set(_FILLERS) | set(_ADJECTIVES)
        clash = reserved & set(all_forms)
        if clash:
            raise SynthError(f"surface forms collide with filler words: {sorted(clash)}")

    @property
    def mean_pairs(self) -> float:
        return float(sum(int(k) * p for k, p in self.pairs_per_record.items()))

    def to_json_dict(self) -> dict:
        return {
            "num_records": self.num_records,
            "vocab": list(self.vocab),
            "pairs_per_record": {str(k): v for k, v in self.pairs_per_record.items()},
            "feature_dim": self.feature_dim,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "text_lines": self.text_lines,
            "sts_pairs": self.sts_pairs,
            "adjective_prob": self.adjective_prob,
            "long_prefix_prob": self.long_prefix_prob,
            "max_filler_run": self.max_filler_run,
            "forms_per_concept": self.forms_per_concept,
            "sts_same_form_prob": self.sts_same_form_prob,
            "image_noise_scale": self.image_noise_scale,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SynthSpec":
        kwargs = dict(obj)
        if "vocab" in kwargs:
            kwargs["vocab"] = tuple(kwargs["vocab"])
        if "pairs_per_record" in kwargs:
            kwargs["pairs_per_record"] = {
                int(k): float(v) for k, v in kwargs["pairs_per_record"].items()
            }
        unknown = set(kwargs) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise SynthError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**kwargs)


def object_code(spec: SynthSpec, concept: str) -> np.ndarray:
    """The planted unit feature vector owned by a content concept."""
    rng = np.random.default_rng(derive_seed(spec.seed, "object-code", concept))
    v = rng.standard_normal(spec.feature_dim)
    return v / np.linalg.norm(v)


def surface_forms(spec: SynthSpec, concept: str) -> tuple[str, ...]:
    """All surface renderings of a concept.  Every form shares the concept's
    visual code, which is what makes synonymy learnable from grounding."""
    return tuple(concept + suffix for suffix in _FORM_SUFFIXES[: spec.forms_per_concept])


def concept_of(spec: SynthSpec, form: str) -> str:
    """Reverse lookup from a surface form to its concept."""
    for concept in spec.vocab:
        if form in surface_forms(spec, concept):
            return concept
    raise KeyError(f"{form!r} is not a surface form of any concept")


def _pick_form(spec: SynthSpec, concept: str, rng: np.random.Generator) -> str:
    forms = surface_forms(spec, concept)
    return forms[int(rng.integers(0, len(forms)))]


def _pick_other_form(
    spec: SynthSpec, concept: str, rng: np.random.Generator, avoid: str
) -> str:
    options = [f for f in surface_forms(spec, concept) if f != avoid]
    if not options:
        return avoid
    return options[int(rng.integers(0, len(options)))]


def _noise(spec: SynthSpec, rng: np.random.Generator, scale: float) -> np.ndarray:
    # Expected L2 norm of the noise vector is ~scale (codes are unit norm).
    if scale == 0.0:
        return np.zeros(spec.feature_dim)
    return scale * rng.standard_normal(spec.feature_dim) / math.sqrt(spec.feature_dim)


def _sample_pair_count(spec: SynthSpec, rng: np.random.Generator) -> int:
    ks = sorted(int(k) for k in spec.pairs_per_record)
    ps = np.asarray([spec.pairs_per_record[k] for k in ks], dtype=np.float64)
    ps = ps / ps.sum()
    return int(rng.choice(ks, p=ps))


def _compose_caption(
    forms: Sequence[str], rng: np.random.Generator, spec: SynthSpec
) -> tuple[str, list[tuple[str, int, int]]]:
    """Render a sentence around the given content forms, with exact spans.

    Content is separated by random-length filler runs so that surface
    statistics (length, filler choice) vary independently of the planted
    concepts; similarity gold is attached to the concepts only.
    """
    words: list[str] = []
    phrase_slots: list[tuple[int, int]] = []  # word-index intervals per phrase
    if rng.random() < spec.long_prefix_prob:
        # Random-length preamble so some (not necessarily all) phrases land
        # beyond a 32-token budget and exercise the truncation path.
        words.extend("a day that goes".split())
        words.extend(_LONG_PREFIX_UNIT.split() * int(rng.integers(4, 12)))
        words.append(",")
    for form in forms:
        run = int(rng.integers(1, spec.max_filler_run + 1))
        words.extend(str(w) for w in rng.choice(_FILLERS, size=run))
        start = len(words)
        if rng.random() < spec.adjective_prob:
            words.append(str(rng.choice(_ADJECTIVES)))
        words.append(form)
        phrase_slots.append((start, len(words)))
    tail = int(rng.integers(0, spec.max_filler_run + 1))
    if tail:
        words.extend(str(w) for w in rng.choice(_FILLERS, size=tail))
    words.append(".")
    caption = " ".join(words)
    offsets = []
    cursor = 0
    for w in words:
        offsets.append((cursor, cursor + len(w)))
        cursor += len(w) + 1
    phrases = []
    for start, end in phrase_slots:
        cs = offsets[start][0]
        ce = offsets[end - 1][1]
        phrases.append((caption[cs:ce], cs, ce))
    return caption, phrases


def generate_multimodal(spec: SynthSpec) -> list[ObjectPhraseRecord]:
    """Generate records whose object features are noisy codes of their
    phrases' concepts."""
    records = []
    for i in range(spec.num_records):
        rng = np.random.default_rng(derive_seed(spec.seed, "record", i))
        k = _sample_pair_count(spec, rng)
        concepts = [
            spec.vocab[int(idx)] for idx in rng.choice(len(spec.vocab), size=k, replace=False)
        ]
        forms = [_pick_form(spec, c, rng) for c in concepts]
        caption, phrases = _compose_caption(forms, rng, spec)
        codes = np.stack([object_code(spec, c) for c in concepts])
        object_features = codes + np.stack(
            [_noise(spec, rng, spec.noise_scale) for _ in range(k)]
        )
        image_scale = (
            spec.noise_scale if spec.image_noise_scale is None else spec.image_noise_scale
        )
        image_feature = codes.mean(axis=0) + _noise(spec, rng, image_scale)
        spans = tuple(
            PhraseSpan(text=text, char_start=cs, char_end=ce, object_index=j)
            for j, (text, cs, ce) in enumerate(phrases)
        )
        records.append(
            ObjectPhraseRecord(
                record_id=f"synth-{i:06d}",
                caption=caption,
                image_feature=image_feature,
                object_features=object_features,
                phrase_spans=spans,
            )
        )
    return records


def generate_text(spec: SynthSpec) -> list[TextExample]:
    """Text-only sentences drawn from the same vocabulary distribution."""
    examples = []
    for i in range(spec.text_lines):
        rng = np.random.default_rng(derive_seed(spec.seed, "text", i))
        k = int(rng.integers(2, 6))
        concepts = [
            spec.vocab[int(idx)] for idx in rng.choice(len(spec.vocab), size=k, replace=False)
        ]
        forms = [_pick_form(spec, c, rng) for c in concepts]
        sentence, _ = _compose_caption(forms, rng, spec)
        examples.append(TextExample(sentence))
    return examples


def gold_score(concepts_a: Sequence[str], concepts_b: Sequence[str]) -> float:
    """Similarity gold: Jaccard overlap of concepts, scaled to [0, 5].

    Deliberately a function of concepts, not surface forms: two renderings
    of the same concepts score maximal however they are written.
    """
    a, b = set(concepts_a), set(concepts_b)
    if not a and not b:
        return STS_SCALE_MAX
    return STS_SCALE_MAX * len(a & b) / len(a | b)


def _sts_split(spec: SynthSpec, split: str, count: int) -> list[StsExample]:
    examples = []
    for j in range(count):
        rng = np.random.default_rng(derive_seed(spec.seed, "sts", split, j))
        k = int(rng.integers(2, 6))
        picks = rng.choice(len(spec.vocab), size=k, replace=False)
        concepts_a = [spec.vocab[int(idx)] for idx in picks]
        forms_a = [_pick_form(spec, c, rng) for c in concepts_a]
        sentence_a, _ = _compose_caption(forms_a, rng, spec)
        num_replace = int(rng.integers(0, k + 1))
        if num_replace == 0 and rng.random() < 0.3:
            examples.append(
                StsExample(sentence_a=sentence_a, sentence_b=sentence_a, gold=STS_SCALE_MAX)
            )
            continue
        # Kept concepts usually keep their surface form; sometimes they are
        # re-rendered as a different form of the same concept, which only an
        # embedding that learned form -> concept collapse can rank correctly.
        remaining = [i for i in range(len(spec.vocab)) if i not in set(int(p) for p in picks)]
        num_replace = min(num_replace, len(remaining))
        concepts_b = list(concepts_a)
        if num_replace:
            fresh = rng.choice(len(remaining), size=num_replace, replace=False)
            replace_at = rng.choice(k, size=num_replace, replace=False)
            for slot, f in zip(replace_at, fresh):
                concepts_b[int(slot)] = spec.vocab[remaining[int(f)]]
        forms_b = []
        for c in concepts_b:
            if c not in concepts_a:
                forms_b.append(_pick_form(spec, c, rng))
            elif rng.random() < spec.sts_same_form_prob:
                forms_b.append(forms_a[concepts_a.index(c)])
            else:
                forms_b.append(_pick_other_form(spec, c, rng, avoid=forms_a[concepts_a.index(c)]))
        sentence_b, _ = _compose_caption(forms_b, rng, spec)
        examples.append(
            StsExample(
                sentence_a=sentence_a,
                sentence_b=sentence_b,
                gold=gold_score(concepts_a, concepts_b),
            )
        )
    return examples


def generate_sts(spec: SynthSpec) -> tuple[list[StsExample], list[StsExample]]:
    """Dev and test similarity sets with overlap-planted gold scores."""
    return _sts_split(spec, "dev", spec.sts_pairs), _sts_split(spec, "test", spec.sts_pairs)
