"""Object-phrase corpus: record types, validation, filtering, and batching.

The multimodal corpus is a JSON Lines file, one image-caption record per
line.  Each record carries the caption (the longest one available for the
image, selected upstream), a precomputed 2048-d image feature, and K
object-phrase pairs: a 2048-d feature per detected object plus the exact
character span of the phrase naming it.  Feature extraction itself (the
detection / segmentation / image-encoder stack) happens outside this
package; here we only validate and consume its output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

FEATURE_DIM = 2048
SCHEMA_VERSION = "v1"

TokenSpan = tuple[int, int]


class CorpusError(ValueError):
    """Base class for corpus file and record problems."""


class CorpusValidationError(CorpusError):
    """A record violated an invariant.  Carries location info for reporting."""

    def __init__(
        self,
        message: str,
        *,
        line: Optional[int] = None,
        record_id: Optional[str] = None,
        field_name: Optional[str] = None,
    ) -> None:
        self.line = line
        self.record_id = record_id
        self.field_name = field_name
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id!r}")
        if field_name is not None:
            prefix.append(f"field {field_name!r}")
        super().__init__((": ".join([", ".join(prefix), message]) if prefix else message))


@dataclass(frozen=True)
class PhraseSpan:
    """A caption substring naming one detected object.

    ``char_start`` is inclusive, ``char_end`` exclusive, both character
    offsets into the owning record's caption.  ``object_index`` points at
    the matching row of the record's object feature array.
    """

    text: str
    char_start: int
    char_end: int
    object_index: int

    def __post_init__(self) -> None:
        if self.char_start < 0:
            raise CorpusValidationError(f"char_start must be >= 0, got {self.char_start}")
        if self.char_end <= self.char_start:
            raise CorpusValidationError(
                f"empty or inverted span [{self.char_start}, {self.char_end})"
            )
        if self.object_index < 0:
            raise CorpusValidationError(f"object_index must be >= 0, got {self.object_index}")


def _as_feature(values: object, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != FEATURE_DIM:
        raise CorpusValidationError(
            f"{what} must be a flat vector of {FEATURE_DIM} numbers, got shape {arr.shape}",
            field_name=what,
        )
    if not np.all(np.isfinite(arr)):
        raise CorpusValidationError(f"{what} contains non-finite values", field_name=what)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObjectPhraseRecord:
    """One image-caption pair decomposed into K aligned object-phrase pairs."""

    record_id: str
    caption: str
    image_feature: np.ndarray
    object_features: np.ndarray  # [K, FEATURE_DIM]
    phrase_spans: tuple[PhraseSpan, ...]

    def __post_init__(self) -> None:
        if not self.record_id:
            raise CorpusValidationError("record_id must be non-empty")
        if not self.caption:
            raise CorpusValidationError("caption must be non-empty", record_id=self.record_id)
        object.__setattr__(self, "image_feature", _as_feature(self.image_feature, "image_feature"))
        objs = np.asarray(self.object_features, dtype=np.float64)
        if objs.ndim != 2 or objs.shape[1] != FEATURE_DIM:
            raise CorpusValidationError(
                f"object_features must have shape [K, {FEATURE_DIM}], got {objs.shape}",
                record_id=self.record_id,
                field_name="object_features",
            )
        if not np.all(np.isfinite(objs)):
            raise CorpusValidationError(
                "object_features contain non-finite values",
                record_id=self.record_id,
                field_name="object_features",
            )
        objs.setflags(write=False)
        object.__setattr__(self, "object_features", objs)
        object.__setattr__(self, "phrase_spans", tuple(self.phrase_spans))
        if len(self.phrase_spans) != objs.shape[0]:
            raise CorpusValidationError(
                f"cardinality mismatch: {objs.shape[0]} object features vs "
                f"{len(self.phrase_spans)} phrase spans",
                record_id=self.record_id,
            )
        for k, span in enumerate(self.phrase_spans):
            if span.char_end > len(self.caption):
                raise CorpusValidationError(
                    f"span {k} [{span.char_start}, {span.char_end}) exceeds caption "
                    f"length {len(self.caption)}",
                    record_id=self.record_id,
                    field_name=f"phrase_spans[{k}]",
                )
            actual = self.caption[span.char_start : span.char_end]
            if actual != span.text:
                raise CorpusValidationError(
                    f"span {k} text mismatch: caption slice {actual!r} != phrase {span.text!r}",
                    record_id=self.record_id,
                    field_name=f"phrase_spans[{k}]",
                )
            if span.object_index >= objs.shape[0]:
                raise CorpusValidationError(
                    f"span {k} object_index {span.object_index} out of range "
                    f"(record has {objs.shape[0]} objects)",
                    record_id=self.record_id,
                    field_name=f"phrase_spans[{k}]",
                )

    @property
    def num_pairs(self) -> int:
        return len(self.phrase_spans)

    def to_json_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "caption": self.caption,
            "image_feature": self.image_feature.tolist(),
            "objects": [
                {
                    "feature": self.object_features[span.object_index].tolist(),
                    "phrase": {
                        "text": span.text,
                        "char_start": span.char_start,
                        "char_end": span.char_end,
                    },
                }
                for span in self.phrase_spans
            ],
            "schema_version": SCHEMA_VERSION,
        }


@dataclass(frozen=True)
class TextExample:
    """One sentence from the text-only corpus."""

    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusValidationError("text must be non-empty")


@dataclass(frozen=True)
class CorpusStats:
    """Summary emitted by filtering and by the `validate` CLI command.

    ``mean_pairs_per_record`` is computed over the kept records (0.0 when
    nothing is kept); ``mean_pairs_per_record_unfiltered`` is the pre-filter
    average, reported alongside because the two are easy to conflate when
    quoting a pairs-per-image figure.
    """

    num_records: int
    num_excluded_single_pair: int
    mean_pairs_per_record: float
    num_truncation_affected_phrases: Optional[int] = None
    mean_pairs_per_record_unfiltered: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "num_records": self.num_records,
            "num_excluded_single_pair": self.num_excluded_single_pair,
            "mean_pairs_per_record": self.mean_pairs_per_record,
            "num_truncation_affected_phrases": self.num_truncation_affected_phrases,
            "mean_pairs_per_record_unfiltered": self.mean_pairs_per_record_unfiltered,
        }


def _record_from_json_dict(obj: dict, line: int) -> ObjectPhraseRecord:
    if not isinstance(obj, dict):
        raise CorpusValidationError("record is not a JSON object", line=line)
    for key in ("record_id", "caption", "image_feature", "objects", "schema_version"):
        if key not in obj:
            raise CorpusValidationError(f"missing key {key!r}", line=line, field_name=key)
    record_id = obj["record_id"]
    objects = obj["objects"]
    if not isinstance(objects, list):
        raise CorpusValidationError(
            "objects must be a list", line=line, record_id=str(record_id), field_name="objects"
        )
    features = []
    spans = []
    for k, entry in enumerate(objects):
        if not isinstance(entry, dict) or "feature" not in entry or "phrase" not in entry:
            raise CorpusValidationError(
                f"objects[{k}] must have 'feature' and 'phrase'",
                line=line,
                record_id=str(record_id),
                field_name=f"objects[{k}]",
            )
        phrase = entry["phrase"]
        try:
            spans.append(
                PhraseSpan(
                    text=phrase["text"],
                    char_start=phrase["char_start"],
                    char_end=phrase["char_end"],
                    object_index=k,
                )
            )
        except (KeyError, TypeError) as exc:
            raise CorpusValidationError(
                f"objects[{k}].phrase malformed: {exc}",
                line=line,
                record_id=str(record_id),
                field_name=f"objects[{k}].phrase",
            ) from exc
        except CorpusValidationError as exc:
            raise CorpusValidationError(
                str(exc), line=line, record_id=str(record_id), field_name=f"objects[{k}].phrase"
            ) from exc
        features.append(entry["feature"])
    feature_matrix = (
        np.asarray(features, dtype=np.float64)
        if features
        else np.zeros((0, FEATURE_DIM), dtype=np.float64)
    )
    try:
        return ObjectPhraseRecord(
            record_id=record_id,
            caption=obj["caption"],
            image_feature=np.asarray(obj["image_feature"], dtype=np.float64),
            object_features=feature_matrix,
            phrase_spans=tuple(spans),
        )
    except CorpusValidationError as exc:
        raise CorpusValidationError(
            str(exc), line=line, record_id=str(record_id), field_name=exc.field_name
        ) from exc
    except (TypeError, ValueError) as exc:
        raise CorpusValidationError(str(exc), line=line, record_id=str(record_id)) from exc


def load_corpus(
    path: Union[str, Path], schema_version: str = SCHEMA_VERSION
) -> list[ObjectPhraseRecord]:
    """Load and validate a JSONL object-phrase corpus.

    Raises CorpusValidationError naming the offending line (and record / field
    where known) for the first record that fails any invariant.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    records: list[ObjectPhraseRecord] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusValidationError(f"malformed JSON: {exc}", line=line_no) from exc
            declared = obj.get("schema_version") if isinstance(obj, dict) else None
            if declared != schema_version:
                raise CorpusValidationError(
                    f"unknown schema_version {declared!r}, expected {schema_version!r}",
                    line=line_no,
                    field_name="schema_version",
                )
            record = _record_from_json_dict(obj, line_no)
            if record.record_id in seen_ids:
                raise CorpusValidationError(
                    "duplicate record_id", line=line_no, record_id=record.record_id
                )
            seen_ids.add(record.record_id)
            records.append(record)
    return records


def write_corpus(records: Sequence[ObjectPhraseRecord], path: Union[str, Path]) -> None:
    """Write records as JSONL in the schema `load_corpus` reads back."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_json_dict(), ensure_ascii=False))
            f.write("\n")


def load_text_corpus(path: Union[str, Path]) -> list[TextExample]:
    """Load a one-sentence-per-line UTF-8 text corpus.  Blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"text corpus file not found: {path}")
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                examples.append(TextExample(line))
    return examples


def write_text_corpus(examples: Sequence[TextExample], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for example in examples:
            f.write(example.text)
            f.write("\n")


def filter_single_pair(
    records: Sequence[ObjectPhraseRecord],
) -> tuple[list[ObjectPhraseRecord], CorpusStats]:
    """Drop records with fewer than two object-phrase pairs.

    A record with a single pair has no within-record negatives, so it cannot
    contribute to the object-phrase objective.  Excluded records remain valid
    inputs for the sentence-image objective; callers keep the original list
    for that purpose.
    """
    kept = [r for r in records if r.num_pairs >= 2]
    excluded = len(records) - len(kept)
    mean_kept = float(np.mean([r.num_pairs for r in kept])) if kept else 0.0
    mean_all = float(np.mean([r.num_pairs for r in records])) if records else 0.0
    stats = CorpusStats(
        num_records=len(kept),
        num_excluded_single_pair=excluded,
        mean_pairs_per_record=mean_kept,
        mean_pairs_per_record_unfiltered=mean_all,
    )
    return kept, stats


def mark_truncated_phrases(
    record: ObjectPhraseRecord,
    token_spans: Sequence[Optional[TokenSpan]],
    max_tokens: int,
) -> list[bool]:
    """Flag which phrases survive encoder truncation at `max_tokens`.

    ``token_spans[k]`` is the half-open token interval for phrase k (or None
    when alignment already found it unreachable).  A phrase is valid only if
    every one of its token positions is < max_tokens, i.e. span end <=
    max_tokens; a phrase whose last token sits at index max_tokens or later
    would pool rows the truncated encoder never produced.  Invalid phrases
    are dropped from the object-phrase loss numerators, but their objects
    stay in the candidate set for the record's other phrases.
    """
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    if len(token_spans) != len(record.phrase_spans):
        raise ValueError(
            f"token span list length {len(token_spans)} != number of phrases "
            f"{len(record.phrase_spans)} for record {record.record_id!r}"
        )
    mask = []
    for span in token_spans:
        if span is None:
            mask.append(False)
            continue
        start, end = span
        if start < 0 or end <= start:
            raise ValueError(f"invalid token span {span!r}")
        mask.append(end <= max_tokens)
    return mask


@dataclass(frozen=True)
class TextBatch:
    texts: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.texts)


@dataclass(frozen=True)
class MultimodalBatch:
    records: tuple[ObjectPhraseRecord, ...]
    pair_counts: tuple[int, ...] = field(default=())
    # Validity masks depend on the encoder's tokenization; the trainer fills
    # them in per step via encoders.align_spans + mark_truncated_phrases.

    def __post_init__(self) -> None:
        if not self.pair_counts:
            object.__setattr__(self, "pair_counts", tuple(r.num_pairs for r in self.records))

    def __len__(self) -> int:
        return len(self.records)


Batch = Union[TextBatch, MultimodalBatch]


def make_batches(
    items: Sequence[Union[ObjectPhraseRecord, TextExample, str]],
    batch_size: int,
    seed: int,
) -> Iterator[Batch]:
    """Yield one epoch of deterministically shuffled batches.

    The permutation is fixed by `seed`; the final short batch is emitted.
    Multimodal inputs yield MultimodalBatch (with per-record pair counts),
    text inputs yield TextBatch.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for in-batch negatives, got {batch_size}")
    if not items:
        return
    order = np.random.default_rng(seed).permutation(len(items))
    multimodal = isinstance(items[0], ObjectPhraseRecord)
    for lo in range(0, len(items), batch_size):
        chunk = [items[int(i)] for i in order[lo : lo + batch_size]]
        if multimodal:
            yield MultimodalBatch(records=tuple(chunk))
        else:
            yield TextBatch(texts=tuple(x.text if isinstance(x, TextExample) else x for x in chunk))


def num_batches(num_items: int, batch_size: int) -> int:
    return math.ceil(num_items / batch_size)
