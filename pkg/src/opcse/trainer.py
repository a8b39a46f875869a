"""Training loop: batch mixing, optimization, dev evaluation, checkpoints.

Every source of randomness (shuffles, dropout views, init) is a named
substream of the single config seed and a pure function of the step index,
so training is stateless-resumable: restoring parameters and optimizer
buffers at step S reproduces steps S+1.. bit for bit.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from . import __version__ as _package_version
from .corpus import (
    MultimodalBatch,
    ObjectPhraseRecord,
    TextBatch,
    TextExample,
    make_batches,
    mark_truncated_phrases,
    num_batches,
)
from .encoders import EmbeddingModel, ProjectionHead, align_spans, encoder_class
from .evaluation import StsExample, evaluate_task
from .losses import (
    LossBreakdown,
    LossConfig,
    LossCounts,
    combined_loss,
    image_caption_contrastive_loss,
    object_phrase_contrastive_loss,
    text_contrastive_loss,
)
from .pooling import build_phrase_set
from .util import NonFiniteValueError, atomic_write_bytes, derive_seed, sha256_bytes

CHECKPOINT_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp, keeps archives deterministic

MIXING_MODES = ("alternate", "proportional", "multimodal_only")
OPTIMIZERS = ("sgd", "adam")
TEXT_DENOMINATORS = ("positives", "anchors")
OBJ_PHRASE_REDUCTIONS = ("mean_valid", "sum")


class TrainerError(ValueError):
    pass


class EmptyCorpusError(TrainerError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; aborts with the offending batch ids."""

    def __init__(self, step: int, source: str, batch_ids: Sequence[str], values: dict):
        self.step = step
        self.source = source
        self.batch_ids = list(batch_ids)
        self.values = values
        super().__init__(
            f"non-finite loss at step {step} ({source} batch): {values}; "
            f"batch ids: {', '.join(self.batch_ids) or '<none>'}"
        )


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Run hyperparameters.  `learning_rate` has no default on purpose:
    reproduction runs must state it explicitly."""

    max_steps: int
    learning_rate: float
    batch_size: int = 64
    max_tokens: int = 32
    eval_every: int = 125
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    mixing: str = "alternate"
    optimizer: str = "sgd"
    momentum: float = 0.9
    project_text_text: bool = False
    text_denominator: str = "positives"
    obj_phrase_reduction: str = "mean_valid"
    grad_clip: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_steps < 0:
            raise TrainerError("max_steps must be >= 0")
        if not self.learning_rate > 0:
            raise TrainerError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise TrainerError("batch_size must be >= 2")
        if self.eval_every < 1:
            raise TrainerError("eval_every must be >= 1")
        if self.max_tokens < 1:
            raise TrainerError("max_tokens must be >= 1")
        if self.mixing not in MIXING_MODES:
            raise TrainerError(f"mixing must be one of {MIXING_MODES}, got {self.mixing!r}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainerError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.text_denominator not in TEXT_DENOMINATORS:
            raise TrainerError(f"text_denominator must be one of {TEXT_DENOMINATORS}")
        if self.obj_phrase_reduction not in OBJ_PHRASE_REDUCTIONS:
            raise TrainerError(f"obj_phrase_reduction must be one of {OBJ_PHRASE_REDUCTIONS}")

    def assumption_flags(self) -> dict:
        """The interpretation knobs a reproduction needs to know about."""
        return {
            "mixing": self.mixing,
            "tau_prime_equals_tau": self.loss.tau_prime == self.loss.tau,
            "text_denominator": self.text_denominator,
            "obj_phrase_reduction": self.obj_phrase_reduction,
            "project_text_text": self.project_text_text,
            "optimizer": self.optimizer,
        }


@dataclass
class TrainState:
    step: int = 0
    best_dev_score: Optional[float] = None
    best_checkpoint_path: Optional[str] = None
    rng_state: dict = field(default_factory=dict)
    loss_history: list[LossBreakdown] = field(default_factory=list)
    dev_history: list[tuple[int, float]] = field(default_factory=list)


def evaluate_dev(model: EmbeddingModel, dev_set: Sequence[StsExample], max_tokens: int = 32) -> float:
    """Dev Spearman with dropout off (single deterministic view)."""
    return evaluate_task(model, dev_set, max_tokens=max_tokens)


def _make_optimizer(model: EmbeddingModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = model.parameters()
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.learning_rate)


class Trainer:
    """Owns the model parameters for the duration of a run."""

    def __init__(
        self,
        model: EmbeddingModel,
        config: TrainConfig,
        text_corpus: Sequence[TextExample],
        multimodal_corpus: Sequence[ObjectPhraseRecord],
        dev_set: Optional[Sequence[StsExample]] = None,
        checkpoint_dir: Optional[Union[str, Path]] = None,
        log_sink: Optional[Callable[[int, LossBreakdown], None]] = None,
        optimizer: Optional[torch.optim.Optimizer] = None,
        start_step: int = 0,
    ) -> None:
        if config.mixing in ("alternate", "proportional") and not text_corpus:
            raise EmptyCorpusError("text corpus is empty but the mixing strategy needs it")
        if not multimodal_corpus:
            raise EmptyCorpusError("multimodal corpus is empty")
        self.model = model
        self.config = config
        self.text_corpus = list(text_corpus)
        self.multimodal_corpus = list(multimodal_corpus)
        self.dev_set = list(dev_set) if dev_set is not None else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.log_sink = log_sink
        self.optimizer = optimizer if optimizer is not None else _make_optimizer(model, config)
        self.state = TrainState(
            step=start_step,
            rng_state={"seed": config.seed, "next_step": start_step + 1},
        )
        self._epoch_cache: dict[str, tuple[int, list]] = {}

    # -- deterministic batch schedule -------------------------------------

    def _text_fraction(self) -> float:
        if self.config.mixing == "alternate":
            return 0.5
        if self.config.mixing == "multimodal_only":
            return 0.0
        total = len(self.text_corpus) + len(self.multimodal_corpus)
        return len(self.text_corpus) / total

    def _text_count(self, step: int) -> int:
        # Bresenham-style interleave, phase-shifted so text comes first:
        # f = 0.5 yields text on odd steps, multimodal on even ones.
        return math.floor((step + 1) * self._text_fraction())

    def _source_for_step(self, step: int) -> str:
        return "text" if self._text_count(step) > self._text_count(step - 1) else "multimodal"

    def _source_index(self, step: int) -> int:
        """1-based count of same-source steps up to and including `step`."""
        text_count = self._text_count(step)
        return text_count if self._source_for_step(step) == "text" else step - text_count

    def _batch_for_step(self, step: int):
        source = self._source_for_step(step)
        corpus = self.text_corpus if source == "text" else self.multimodal_corpus
        per_epoch = num_batches(len(corpus), self.config.batch_size)
        n = self._source_index(step) - 1
        epoch, index = divmod(n, per_epoch)
        cached = self._epoch_cache.get(source)
        if cached is None or cached[0] != epoch:
            seed = derive_seed(self.config.seed, "shuffle", source, epoch)
            batches = list(make_batches(corpus, self.config.batch_size, seed))
            self._epoch_cache[source] = (epoch, batches)
        return source, self._epoch_cache[source][1][index]

    # -- one optimization step ---------------------------------------------

    def _views_for_step(self, step: int) -> tuple[int, int]:
        return (
            derive_seed(self.config.seed, "dropout-view", step, 1),
            derive_seed(self.config.seed, "dropout-view", step, 2),
        )

    def _text_term(self, texts: Sequence[str], step: int) -> torch.Tensor:
        view1, view2 = self._views_for_step(step)
        cfg = self.config
        anchors = self.model.sentence_embeddings(texts, view1, cfg.max_tokens)
        positives = self.model.sentence_embeddings(texts, view2, cfg.max_tokens)
        if cfg.project_text_text:
            anchors = self.model.text_head(anchors)
            positives = self.model.text_head(positives)
        return text_contrastive_loss(
            anchors,
            positives,
            cfg.loss.tau,
            literal_denominator=(cfg.text_denominator == "anchors"),
        )

    def _multimodal_terms(
        self, batch: MultimodalBatch, step: int
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, LossCounts]:
        cfg = self.config
        records = batch.records
        captions = [r.caption for r in records]
        view1, view2 = self._views_for_step(step)
        outputs1 = self.model.encode_texts(captions, view1, cfg.max_tokens)
        outputs2 = self.model.encode_texts(captions, view2, cfg.max_tokens)
        anchors = torch.stack([o.sentence_embedding for o in outputs1])
        positives = torch.stack([o.sentence_embedding for o in outputs2])
        if cfg.project_text_text:
            text_anchors = self.model.text_head(anchors)
            text_positives = self.model.text_head(positives)
        else:
            text_anchors, text_positives = anchors, positives
        text_term = text_contrastive_loss(
            text_anchors,
            text_positives,
            cfg.loss.tau,
            literal_denominator=(cfg.text_denominator == "anchors"),
        )
        caption_proj = self.model.text_head(anchors)
        image_feats = torch.from_numpy(np.stack([r.image_feature for r in records]))
        image_proj = self.model.image_head(image_feats)
        img_term = image_caption_contrastive_loss(caption_proj, image_proj, cfg.loss.tau_prime)
        heads = (self.model.text_head, self.model.image_head)
        sets = []
        for record, output in zip(records, outputs1):
            if record.num_pairs < 2:
                continue
            spans = align_spans(output, record.phrase_spans)
            validity = mark_truncated_phrases(record, spans, cfg.max_tokens)
            if not any(validity):
                continue
            sets.append(build_phrase_set(record, output, heads, validity, spans))
        obj_term, obj_count = object_phrase_contrastive_loss(
            sets,
            cfg.loss.tau,
            normalize_per_set=(cfg.obj_phrase_reduction == "mean_valid"),
        )
        counts = LossCounts(text=len(records), img_cap=len(records), obj_phrase=obj_count)
        return text_term, img_term, obj_term, counts

    def _step(self, step: int) -> LossBreakdown:
        cfg = self.config
        source, batch = self._batch_for_step(step)
        zero = torch.zeros((), dtype=torch.float64)
        if len(batch) < 2:
            # A final batch of one sentence has no in-batch negatives; skip
            # the update but keep the step in the log for determinism.
            breakdown = combined_loss((0.0, 0.0, 0.0), cfg.loss, LossCounts())
            return breakdown
        if isinstance(batch, TextBatch):
            batch_ids = list(batch.texts[:4])
        else:
            batch_ids = [r.record_id for r in batch.records[:8]]
        try:
            if isinstance(batch, TextBatch):
                text_term = self._text_term(batch.texts, step)
                img_term, obj_term = zero, zero
                counts = LossCounts(text=len(batch), img_cap=0, obj_phrase=0)
            else:
                text_term, img_term, obj_term, counts = self._multimodal_terms(batch, step)
        except NonFiniteValueError as exc:
            raise NonFiniteLossError(step, source, batch_ids, {"detail": str(exc)}) from exc
        parts = (
            float(text_term.detach()),
            float(img_term.detach()),
            float(obj_term.detach()),
        )
        if not all(np.isfinite(parts)):
            raise NonFiniteLossError(
                step,
                source,
                batch_ids,
                {"text": parts[0], "img_cap": parts[1], "obj_phrase": parts[2]},
            )
        total = text_term + cfg.loss.alpha * img_term + cfg.loss.beta * obj_term
        self.optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        return combined_loss(parts, cfg.loss, counts)

    # -- the loop -----------------------------------------------------------

    def run(self) -> TrainState:
        cfg = self.config
        while self.state.step < cfg.max_steps:
            step = self.state.step + 1
            breakdown = self._step(step)
            self.state.step = step
            self.state.rng_state = {"seed": cfg.seed, "next_step": step + 1}
            self.state.loss_history.append(breakdown)
            if self.log_sink is not None:
                self.log_sink(step, breakdown)
            if step % cfg.eval_every == 0 and self.dev_set is not None:
                score = evaluate_dev(self.model, self.dev_set, cfg.max_tokens)
                self.state.dev_history.append((step, score))
                if self.state.best_dev_score is None or score > self.state.best_dev_score:
                    self.state.best_dev_score = score
                    if self.checkpoint_dir is not None:
                        path = self.checkpoint_dir / "checkpoint_best.zip"
                        self.save_checkpoint(path)
                        self.state.best_checkpoint_path = str(path)
        return self.state

    def save_checkpoint(self, path: Union[str, Path]) -> None:
        save_checkpoint(
            path,
            self.model,
            optimizer=self.optimizer,
            config=self.config,
            step=self.state.step,
            best_dev_score=self.state.best_dev_score,
        )

    @classmethod
    def resume(
        cls,
        checkpoint_path: Union[str, Path],
        text_corpus: Sequence[TextExample],
        multimodal_corpus: Sequence[ObjectPhraseRecord],
        dev_set: Optional[Sequence[StsExample]] = None,
        checkpoint_dir: Optional[Union[str, Path]] = None,
        log_sink: Optional[Callable[[int, LossBreakdown], None]] = None,
        config_override: Optional[TrainConfig] = None,
    ) -> "Trainer":
        model, optimizer, manifest = restore_checkpoint(checkpoint_path)
        if config_override is not None:
            config = config_override
        else:
            if manifest.get("train_config") is None:
                raise CheckpointError("checkpoint has no train config; pass config_override")
            config = train_config_from_json_dict(manifest["train_config"])
        if optimizer is None:
            optimizer = _make_optimizer(model, config)
        trainer = cls(
            model,
            config,
            text_corpus,
            multimodal_corpus,
            dev_set=dev_set,
            checkpoint_dir=checkpoint_dir,
            log_sink=log_sink,
            optimizer=optimizer,
            start_step=int(manifest["step"]),
        )
        best = manifest.get("best_dev_score")
        trainer.state.best_dev_score = best
        return trainer


def train(
    text_corpus: Sequence[TextExample],
    multimodal_corpus: Sequence[ObjectPhraseRecord],
    model: EmbeddingModel,
    config: TrainConfig,
    dev_set: Optional[Sequence[StsExample]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    log_sink: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> TrainState:
    """Run a full training loop and return the final state."""
    trainer = Trainer(
        model,
        config,
        text_corpus,
        multimodal_corpus,
        dev_set=dev_set,
        checkpoint_dir=checkpoint_dir,
        log_sink=log_sink,
    )
    return trainer.run()


# -- train config (de)serialization ----------------------------------------


def train_config_to_json_dict(config: TrainConfig) -> dict:
    return {
        "max_steps": config.max_steps,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "max_tokens": config.max_tokens,
        "eval_every": config.eval_every,
        "seed": config.seed,
        "tau": config.loss.tau,
        "tau_prime": config.loss.tau_prime,
        "alpha": config.loss.alpha,
        "beta": config.loss.beta,
        "mixing": config.mixing,
        "optimizer": config.optimizer,
        "momentum": config.momentum,
        "project_text_text": config.project_text_text,
        "text_denominator": config.text_denominator,
        "obj_phrase_reduction": config.obj_phrase_reduction,
        "grad_clip": config.grad_clip,
    }


def train_config_from_json_dict(obj: dict) -> TrainConfig:
    obj = dict(obj)
    loss = LossConfig(
        tau=obj.pop("tau", 0.05),
        tau_prime=obj.pop("tau_prime", 0.05),
        alpha=obj.pop("alpha", 0.01),
        beta=obj.pop("beta", 0.005),
    )
    known = set(TrainConfig.__dataclass_fields__) - {"loss"}
    unknown = set(obj) - known
    if unknown:
        raise TrainerError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(loss=loss, **obj)


# -- checkpoint archive ------------------------------------------------------


def _array_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _optimizer_arrays(
    optimizer: torch.optim.Optimizer, param_names: list[str]
) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, dict] = {}
    sd = optimizer.state_dict()
    for idx, state in sd["state"].items():
        name = param_names[int(idx)]
        for key, value in state.items():
            entry = f"opt/{name}/{key}"
            if isinstance(value, torch.Tensor):
                arrays[entry] = value.detach().cpu().numpy()
                meta[entry] = {"kind": "tensor"}
            else:
                arrays[entry] = np.asarray(value)
                meta[entry] = {"kind": "scalar"}
    return arrays, meta


def save_checkpoint(
    path: Union[str, Path],
    model: EmbeddingModel,
    optimizer: Optional[torch.optim.Optimizer] = None,
    config: Optional[TrainConfig] = None,
    step: int = 0,
    best_dev_score: Optional[float] = None,
) -> None:
    """Write a self-describing, integrity-checked archive (atomically)."""
    named = model.named_parameters()
    arrays: dict[str, np.ndarray] = {
        f"param/{name}": tensor.detach().cpu().numpy() for name, tensor in named.items()
    }
    array_meta: dict[str, dict] = {name: {"kind": "tensor"} for name in arrays}
    if optimizer is not None:
        opt_arrays, opt_meta = _optimizer_arrays(optimizer, list(named))
        arrays.update(opt_arrays)
        array_meta.update(opt_meta)
    payloads = {name: _array_bytes(arr) for name, arr in arrays.items()}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "package_version": _package_version,
        "encoder_kind": model.text_encoder.kind,
        "encoder_config": model.text_encoder.get_config(),
        "text_head": model.text_head.get_config(),
        "image_head": model.image_head.get_config(),
        "step": step,
        "best_dev_score": best_dev_score,
        "train_config": train_config_to_json_dict(config) if config is not None else None,
        "arrays": {
            name: {"sha256": sha256_bytes(data), **array_meta[name]}
            for name, data in payloads.items()
        },
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(payloads):
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, payloads[name])
    atomic_write_bytes(path, buf.getvalue())


def _read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays: dict[str, np.ndarray] = {}
            for name, info in manifest.get("arrays", {}).items():
                data = zf.read(f"arrays/{name}.npy")
                if sha256_bytes(data) != info["sha256"]:
                    raise CheckpointError(f"integrity check failed for array {name!r}")
                arrays[name] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, EOFError) as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r}"
        )
    return manifest, arrays


def restore_checkpoint(
    path: Union[str, Path],
    expected_encoder_kind: Optional[str] = None,
) -> tuple[EmbeddingModel, Optional[torch.optim.Optimizer], dict]:
    """Rebuild the model (and optimizer, when present) from an archive.

    All payloads are read and verified before any object is constructed, so
    a corrupt archive never yields partial state.
    """
    manifest, arrays = _read_checkpoint(path)
    kind = manifest["encoder_kind"]
    if expected_encoder_kind is not None and kind != expected_encoder_kind:
        raise CheckpointError(
            f"checkpoint encoder kind {kind!r} does not match expected {expected_encoder_kind!r}"
        )
    try:
        enc_cls = encoder_class(kind)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint needs unregistered encoder kind {kind!r}") from exc
    encoder = enc_cls.from_config(manifest["encoder_config"])
    text_head = ProjectionHead(**manifest["text_head"])
    image_head = ProjectionHead(**manifest["image_head"])
    model = EmbeddingModel(encoder, text_head, image_head)
    named = model.named_parameters()
    missing = [n for n in named if f"param/{n}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameter arrays: {missing}")
    with torch.no_grad():
        for name, tensor in named.items():
            value = torch.from_numpy(arrays[f"param/{name}"].copy())
            if tuple(value.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"parameter {name!r} shape mismatch: checkpoint {tuple(value.shape)} "
                    f"vs model {tuple(tensor.shape)}"
                )
            tensor.copy_(value)
    optimizer = None
    if manifest.get("train_config") is not None:
        config = train_config_from_json_dict(manifest["train_config"])
        optimizer = _make_optimizer(model, config)
        param_names = list(named)
        state: dict[int, dict] = {}
        for entry, arr in arrays.items():
            if not entry.startswith("opt/"):
                continue
            _, name, key = entry.split("/", 2)
            idx = param_names.index(name)
            info = manifest["arrays"][entry]
            if info.get("kind") == "scalar":
                state.setdefault(idx, {})[key] = arr.item()
            else:
                state.setdefault(idx, {})[key] = torch.from_numpy(arr.copy())
        if state:
            sd = optimizer.state_dict()
            optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
    return model, optimizer, manifest
