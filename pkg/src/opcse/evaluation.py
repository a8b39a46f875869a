"""Spearman-scored semantic similarity evaluation and report rendering."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .losses import cosine_sim


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class StsExample:
    sentence_a: str
    sentence_b: str
    gold: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.gold):
            raise EvaluationError(f"gold score must be finite, got {self.gold}")


@dataclass(frozen=True)
class EvalReport:
    """Per-task Spearman x100 scores plus their arithmetic mean."""

    per_task: dict[str, float]
    average: float

    def to_json_dict(self) -> dict:
        return {"per_task": dict(self.per_task), "average": self.average}


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties get the mean rank of their block."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise EvaluationError(
            f"sequences must have equal length, got shapes {xs.shape} and {ys.shape}"
        )
    if len(xs) < 2:
        raise EvaluationError("need at least 2 observations")
    rx = _fractional_ranks(xs)
    ry = _fractional_ranks(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx2 = float((dx * dx).sum())
    sy2 = float((dy * dy).sum())
    if sx2 == 0.0 or sy2 == 0.0:
        raise EvaluationError("correlation undefined for a constant sequence")
    # sqrt of the product (not product of sqrts) keeps identical and fully
    # reversed rankings at exactly +/-1.
    return float(np.clip(float((dx * dy).sum()) / math.sqrt(sx2 * sy2), -1.0, 1.0))


def evaluate_task(model, examples: Sequence[StsExample], max_tokens: int = 32) -> float:
    """Spearman between cosine similarity of sentence embeddings and gold.

    Embeddings come from the deterministic (dropout-off) encoder view.
    """
    if len(examples) < 2:
        raise EvaluationError("need at least 2 examples")
    a = model.sentence_embeddings([e.sentence_a for e in examples], None, max_tokens)
    b = model.sentence_embeddings([e.sentence_b for e in examples], None, max_tokens)
    a = a.detach().numpy()
    b = b.detach().numpy()
    predictions = [cosine_sim(a[i], b[i]) for i in range(len(examples))]
    return spearman(predictions, [e.gold for e in examples])


def _round_one_decimal(value: float) -> str:
    return str(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def emit_report(per_task: Mapping[str, float]) -> tuple[EvalReport, str]:
    """Build the report and its fixed-width rendering.

    The average is taken over unrounded scores; rounding (half up, one
    decimal) happens only at rendering time.
    """
    if not per_task:
        raise EvaluationError("no task scores to report")
    scores = dict(per_task)
    average = float(np.mean(list(scores.values())))
    report = EvalReport(per_task=scores, average=average)
    names = list(scores) + ["avg."]
    cells = [_round_one_decimal(scores[n]) for n in scores] + [_round_one_decimal(average)]
    widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
    header = "  ".join(n.rjust(w) for n, w in zip(names, widths))
    row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return report, header + "\n" + row


def load_sts_tsv(path: Union[str, Path]) -> list[StsExample]:
    """Read a task file: TSV with header sentence_a / sentence_b / gold."""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"task file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise EvaluationError(f"{path}: empty task file") from None
        if header != ["sentence_a", "sentence_b", "gold"]:
            raise EvaluationError(
                f"{path}: expected header sentence_a/sentence_b/gold, got {header}"
            )
        examples = []
        for line_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise EvaluationError(f"{path}:{line_no}: expected 3 columns, got {len(row)}")
            try:
                gold = float(row[2])
            except ValueError as exc:
                raise EvaluationError(f"{path}:{line_no}: bad gold score {row[2]!r}") from exc
            examples.append(StsExample(sentence_a=row[0], sentence_b=row[1], gold=gold))
    return examples


def write_sts_tsv(examples: Sequence[StsExample], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["sentence_a", "sentence_b", "gold"])
        for e in examples:
            writer.writerow([e.sentence_a, e.sentence_b, repr(e.gold)])


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
