"""Command line entry point: validate / synth / train / eval / sweep-beta.

Exit codes: 0 success, 2 corpus or task validation failure, 3 runtime or
numeric failure, 4 bad arguments.  Every failure prints a single
machine-parsable line `error:<CLASS>: <detail>` to stderr.  Outputs are
written to temp paths and renamed into place only on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .corpus import (
    SCHEMA_VERSION,
    CorpusError,
    CorpusStats,
    filter_single_pair,
    load_corpus,
    load_text_corpus,
    mark_truncated_phrases,
    write_corpus,
    write_text_corpus,
)
from .encoders import (
    EmbeddingModel,
    EncoderError,
    ToyEncoderConfig,
    align_char_spans,
    tokenize_with_offsets,
)
from .evaluation import (
    EvaluationError,
    emit_report,
    evaluate_task,
    load_sts_tsv,
    report_to_json,
    write_sts_tsv,
)
from .losses import DegenerateEmbeddingError, LossError
from .synth import SynthError, SynthSpec, generate_multimodal, generate_sts, generate_text
from .trainer import (
    CheckpointError,
    NonFiniteLossError,
    Trainer,
    TrainerError,
    restore_checkpoint,
    train_config_from_json_dict,
)
from .util import NonFiniteValueError, atomic_write_text, derive_seed, sha256_file

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_BAD_ARGS = 4


class CliError(Exception):
    def __init__(self, error_class: str, exit_code: int, detail: str) -> None:
        self.error_class = error_class
        self.exit_code = exit_code
        self.detail = detail
        super().__init__(detail)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 4 instead of argparse's default 2
        print(f"error:BAD_ARGS: {message}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_ARGS)


# every config-file key, its type, and its default (None = required/derived)
CONFIG_KEYS: dict[str, tuple[type, object]] = {
    "max_steps": (int, None),
    "learning_rate": (float, None),
    "batch_size": (int, 64),
    "max_tokens": (int, 32),
    "eval_every": (int, 125),
    "seed": (int, 0),
    "tau": (float, 0.05),
    "tau_prime": (float, 0.05),
    "alpha": (float, 0.01),
    "beta": (float, 0.005),
    "mixing": (str, "alternate"),
    "optimizer": (str, "sgd"),
    "momentum": (float, 0.9),
    "project_text_text": (bool, False),
    "text_denominator": (str, "positives"),
    "obj_phrase_reduction": (str, "mean_valid"),
    "grad_clip": (float, None),
    "encoder_hidden_width": (int, 48),
    "encoder_vocab_hash_size": (int, 4096),
    "encoder_dropout": (float, 0.1),
    "encoder_init_scale": (float, 1.0),
    "encoder_anisotropy": (float, 0.0),
    "head_hidden_dim": (int, 64),
    "text_corpus": (str, None),
    "multimodal_corpus": (str, None),
    "sts_dev": (str, None),
}

_TRAIN_CONFIG_KEYS = (
    "max_steps", "learning_rate", "batch_size", "max_tokens", "eval_every", "seed",
    "tau", "tau_prime", "alpha", "beta", "mixing", "optimizer", "momentum",
    "project_text_text", "text_denominator", "obj_phrase_reduction", "grad_clip",
)


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"config file not found: {p}")
    try:
        with open(p, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"cannot parse config file {p}: {exc}")
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"unknown config keys: {sorted(unknown)}")
    return raw


def _merge_config(file_config: dict, args: argparse.Namespace) -> dict:
    merged: dict = {}
    for key, (cast, default) in CONFIG_KEYS.items():
        value = file_config.get(key, default)
        override = getattr(args, key, None)
        if override is not None:
            value = override
        if value is not None and not isinstance(value, cast):
            try:
                value = cast(value)
            except (TypeError, ValueError):
                raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"bad value for {key}: {value!r}")
        merged[key] = value
    for key in ("max_steps", "learning_rate", "multimodal_corpus", "text_corpus"):
        if merged.get(key) is None:
            raise CliError(
                "BAD_ARGS", EXIT_BAD_ARGS, f"{key} must be set in the config file or by flag"
            )
    return merged


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    for key, (cast, _default) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if cast is bool:
            parser.add_argument(
                flag, dest=key, default=None, type=lambda v: v.lower() in ("1", "true", "yes"),
                metavar="BOOL", help=f"override config key {key}",
            )
        else:
            parser.add_argument(
                flag, dest=key, default=None, type=cast, help=f"override config key {key}"
            )


def _build_model(cfg: dict) -> EmbeddingModel:
    encoder_config = ToyEncoderConfig(
        hidden_width=cfg["encoder_hidden_width"],
        vocab_hash_size=cfg["encoder_vocab_hash_size"],
        dropout=cfg["encoder_dropout"],
        seed=derive_seed(cfg["seed"], "encoder-init"),
        init_scale=cfg["encoder_init_scale"],
        anisotropy=cfg["encoder_anisotropy"],
    )
    return EmbeddingModel.build_toy(
        encoder_config, head_hidden_dim=cfg["head_hidden_dim"], seed=cfg["seed"]
    )


def _train_config(cfg: dict):
    try:
        return train_config_from_json_dict({k: cfg[k] for k in _TRAIN_CONFIG_KEYS})
    except (TrainerError, LossError) as exc:
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, str(exc))


def _atomic_json(path: Path, obj: object) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------


def _cmd_validate(args: argparse.Namespace) -> int:
    records = load_corpus(args.corpus, schema_version=args.schema_version)
    _kept, stats = filter_single_pair(records)
    truncation_affected: Optional[int] = None
    if args.max_tokens is not None:
        truncation_affected = 0
        for record in records:
            offsets = [(0, 0)] + [
                (t.char_start, t.char_end) for t in tokenize_with_offsets(record.caption)
            ]
            kept_tokens = min(len(offsets), args.max_tokens)
            spans = align_char_spans(offsets, kept_tokens, record.phrase_spans)
            mask = mark_truncated_phrases(record, spans, args.max_tokens)
            truncation_affected += sum(1 for ok in mask if not ok)
    stats = CorpusStats(
        num_records=stats.num_records,
        num_excluded_single_pair=stats.num_excluded_single_pair,
        mean_pairs_per_record=stats.mean_pairs_per_record,
        num_truncation_affected_phrases=truncation_affected,
        mean_pairs_per_record_unfiltered=stats.mean_pairs_per_record_unfiltered,
    )
    print(json.dumps(stats.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"spec file not found: {spec_path}")
        with open(spec_path, "r", encoding="utf-8") as f:
            spec = SynthSpec.from_json_dict(json.load(f))
    else:
        spec = SynthSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_multimodal(spec)
    texts = generate_text(spec)
    dev, test = generate_sts(spec)

    tmp_suffix = f".tmp-{os.getpid()}"
    outputs = {
        "corpus.jsonl": lambda p: write_corpus(records, p),
        "text_corpus.txt": lambda p: write_text_corpus(texts, p),
        "sts_dev.tsv": lambda p: write_sts_tsv(dev, p),
        "sts_test.tsv": lambda p: write_sts_tsv(test, p),
    }
    for name, writer in outputs.items():
        tmp = out / (name + tmp_suffix)
        writer(tmp)
        os.replace(tmp, out / name)
    summary = {
        "spec": spec.to_json_dict(),
        "num_records": len(records),
        "num_text_lines": len(texts),
        "num_sts_dev": len(dev),
        "num_sts_test": len(test),
    }
    _atomic_json(out / "synth_summary.json", summary)
    print(json.dumps(summary["spec"], sort_keys=True))
    return EXIT_OK


def _run_train(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    text_corpus = load_text_corpus(cfg["text_corpus"])
    multimodal_corpus = load_corpus(cfg["multimodal_corpus"])
    dev_set = load_sts_tsv(cfg["sts_dev"]) if cfg.get("sts_dev") else None
    config = _train_config(cfg)
    model = _build_model(cfg)

    manifest = {
        "config": cfg,
        "corpus_hashes": {
            "text_corpus": sha256_file(cfg["text_corpus"]),
            "multimodal_corpus": sha256_file(cfg["multimodal_corpus"]),
            **({"sts_dev": sha256_file(cfg["sts_dev"])} if cfg.get("sts_dev") else {}),
        },
        "seed": cfg["seed"],
        "code_version": __version__,
        "assumption_flags": config.assumption_flags(),
    }
    _atomic_json(out / "manifest.json", manifest)

    log_path = out / "train_log.jsonl"
    tmp_log = out / f"train_log.jsonl.tmp-{os.getpid()}"
    with open(tmp_log, "w", encoding="utf-8") as log_file:

        def sink(step, breakdown):
            line = {"step": step, **breakdown.to_json_dict()}
            log_file.write(json.dumps(line, sort_keys=True))
            log_file.write("\n")

        trainer = Trainer(
            model,
            config,
            text_corpus,
            multimodal_corpus,
            dev_set=dev_set,
            checkpoint_dir=out,
            log_sink=sink,
        )
        state = trainer.run()
    os.replace(tmp_log, log_path)

    result = {
        "final_step": state.step,
        "best_dev_score": state.best_dev_score,
        "best_checkpoint_path": state.best_checkpoint_path,
        "final_combined_loss": state.loss_history[-1].combined if state.loss_history else None,
        "dev_history": state.dev_history,
    }
    _atomic_json(out / "result.json", result)
    return result


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _merge_config(_load_config_file(args.config), args)
    result = _run_train(cfg, Path(args.out))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    model, _optimizer, _manifest = restore_checkpoint(args.checkpoint)
    tasks_dir = Path(args.tasks)
    if not tasks_dir.is_dir():
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"tasks directory not found: {tasks_dir}")
    task_files = sorted(tasks_dir.glob("*.tsv"))
    if not task_files:
        raise CliError("VALIDATION", EXIT_VALIDATION, f"no .tsv task files in {tasks_dir}")
    per_task = {}
    for task_file in task_files:
        examples = load_sts_tsv(task_file)
        per_task[task_file.stem] = 100.0 * evaluate_task(
            model, examples, max_tokens=args.max_tokens
        )
    report, rendered = emit_report(per_task)
    print(rendered)
    if args.out is not None:
        atomic_write_text(args.out, report_to_json(report) + "\n")
    return EXIT_OK


def _cmd_sweep_beta(args: argparse.Namespace) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, f"cannot parse --values {args.values!r}")
    if not values:
        raise CliError("BAD_ARGS", EXIT_BAD_ARGS, "--values must list at least one beta")
    base_cfg = _merge_config(_load_config_file(args.config), args)
    out = Path(args.out)
    rows = []
    for beta in values:
        cfg = dict(base_cfg)
        cfg["beta"] = beta
        run_dir = out / f"beta_{beta:g}"
        result = _run_train(cfg, run_dir)
        rows.append((beta, result["best_dev_score"], result["final_combined_loss"]))
    header = f"{'beta':>10}  {'dev_spearman':>14}  {'final_loss':>12}"
    print(header)
    for beta, score, loss in rows:
        score_s = "n/a" if score is None else f"{score:.6f}"
        loss_s = "n/a" if loss is None else f"{loss:.6f}"
        print(f"{beta:>10g}  {score_s:>14}  {loss_s:>12}")
    _atomic_json(
        out / "sweep_summary.json",
        [{"beta": b, "best_dev_score": s, "final_combined_loss": l} for b, s, l in rows],
    )
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="opcse", description=__doc__)
    parser.add_argument("--version", action="version", version=f"opcse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_validate = sub.add_parser("validate", help="validate a corpus file and print its stats")
    p_validate.add_argument("corpus", help="path to the JSONL object-phrase corpus")
    p_validate.add_argument("--schema-version", default=SCHEMA_VERSION)
    p_validate.add_argument(
        "--max-tokens", type=int, default=None,
        help="also count phrases lost to truncation at this token budget",
    )
    p_validate.set_defaults(func=_cmd_validate)

    p_synth = sub.add_parser("synth", help="generate synthetic corpora")
    p_synth.add_argument("--spec", default=None, help="JSON file of SynthSpec overrides")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_train = sub.add_parser("train", help="run training from a config file")
    p_train.add_argument("--config", default=None, help="TOML config (flat keys)")
    p_train.add_argument("--out", required=True, help="output directory")
    _add_override_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on task TSVs")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--tasks", required=True, help="directory of <task>.tsv files")
    p_eval.add_argument("--max-tokens", type=int, default=32)
    p_eval.add_argument("--out", default=None, help="also write the report as JSON here")
    p_eval.set_defaults(func=_cmd_eval)

    p_sweep = sub.add_parser("sweep-beta", help="sequential runs over beta values")
    p_sweep.add_argument("--values", required=True, help="comma-separated beta values")
    p_sweep.add_argument("--config", default=None, help="TOML config (flat keys)")
    p_sweep.add_argument("--out", required=True, help="output directory")
    _add_override_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep_beta)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error:{exc.error_class}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except (CorpusError, SynthError, EvaluationError, TrainerError) as exc:
        print(f"error:VALIDATION: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        NonFiniteLossError,
        CheckpointError,
        DegenerateEmbeddingError,
        NonFiniteValueError,
        LossError,
        EncoderError,
    ) as exc:
        print(f"error:RUNTIME: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
