"""End-to-end experiment steps shared by the CLI and the HTTP service."""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from copyforge.autodiff import finite_diff_check
from copyforge.config import CopyMode, DataConfig, ModelConfig, RunConfig
from copyforge.decode import generate_file
from copyforge.exceptions import ConfigError, ContractError
from copyforge.logger import logger
from copyforge.losses import sequence_loss
from copyforge.metrics import evaluate_generations
from copyforge.models import EncodedExample, GradCheckReport, SweepRow
from copyforge.network import init_params, teacher_forced_steps
from copyforge.trainer import TrainResult, evaluate, load_trained, train
from copyforge.utils import write_report
from copyforge.vocab import (
    Vocabulary,
    build_vocab,
    copy_candidate_ratio,
    encode_example,
    load_jsonl,
    read_pairs,
    tokenize,
    vocab_coverage,
)

Pair = Tuple[str, str]

REPORT_COLUMNS = [
    "run",
    "mode",
    "vocab_size",
    "rg_precision",
    "rg_count",
    "cs_precision",
    "cs_recall",
    "co",
    "copy_bucket_precision",
    "copy_bucket_share",
    "gen_bucket_precision",
    "gen_bucket_share",
    "rouge1_f",
    "rouge2_f",
    "rougeL_f",
    "copy_precision",
    "nn1",
    "nn2",
    "nn3",
    "nn4",
    "avg_p_copy",
    "val_loss",
]


def pair_tokens(pairs: Iterable[Pair]) -> Iterable[List[str]]:
    for src, tgt in pairs:
        yield tokenize(src)
        yield tokenize(tgt)


def build_corpus_vocab(pairs: Sequence[Pair], data: DataConfig) -> Vocabulary:
    """Shared source/target vocabulary from the training pairs."""
    return build_vocab(pair_tokens(pairs), data.max_vocab, data.min_freq)


def encode_pairs(pairs: Iterable[Pair], vocab: Vocabulary, model: ModelConfig) -> List[EncodedExample]:
    return [encode_example(src, tgt, vocab, model.max_src_len, model.max_tgt_len) for src, tgt in pairs]


def train_from_config(
    run_config: RunConfig, resume: bool = False, threads: Optional[int] = None
) -> Tuple[TrainResult, Vocabulary, RunConfig]:
    """Build the vocabulary, encode the corpora and train; returns the resolved config."""
    data = run_config.data
    if not data.train_path:
        raise ConfigError("train_path is required for training", key="train_path")
    train_pairs = list(read_pairs(data.train_path))
    vocab = build_corpus_vocab(train_pairs, data)
    resolved = run_config.with_overrides({"vocab_size": str(vocab.size)})
    logger.info(
        f"Training {resolved.train.mode.value} on {len(train_pairs)} pairs, "
        f"vocab {vocab.size}, output {resolved.train.checkpoint_dir}"
    )
    model = resolved.model
    train_set = encode_pairs(train_pairs, vocab, model)
    valid_set: List[EncodedExample] = []
    if data.valid_path:
        valid_set = list(load_jsonl(data.valid_path, vocab, model.max_src_len, model.max_tgt_len))
    logger.info(f"Copy-candidate share of training targets: {copy_candidate_ratio(train_set):.1%}")
    result = train(resolved, train_set, valid_set, vocab, resume=resume, threads=threads)
    if valid_set:
        report = evaluate(result.params, valid_set, resolved.model, resolved.train.mode, resolved.train.loss_weights)
        write_report([report], Path(resolved.train.checkpoint_dir) / "eval.csv")
    return result, vocab, resolved


def generate_from_run(
    run_dir: Path,
    jsonl_in: Path,
    jsonl_out: Path,
    decode_overrides: Optional[Dict[str, str]] = None,
    which: str = "best",
    threads: Optional[int] = None,
) -> int:
    params, vocab, run_config = load_trained(run_dir, which)
    if decode_overrides:
        run_config = run_config.with_overrides(decode_overrides)
    count = generate_file(params, vocab, jsonl_in, jsonl_out, run_config.model, run_config.decode, threads)
    run_config.write(Path(jsonl_out).parent)
    return count


def grad_check_toy(
    seed: int, mode: CopyMode, eps: float = 1e-5, tol: float = 1e-4, max_coords: int = 200
) -> GradCheckReport:
    """Finite-difference check of the full training loss on a 3-token toy pair.

    The target holds an OOV copy-candidate, an in-vocabulary copy-candidate and
    a generated word, so every switch branch is exercised.
    """
    vocab = Vocabulary(["alpha", "beta", "gamma"])
    example = encode_example("alpha zeta beta", "zeta beta gamma", vocab)
    config = ModelConfig(
        emb_dim=4,
        hidden_dim=4,
        enc_layers=1,
        enc_heads=1,
        enc_ff_dim=4,
        dec_layers=1,
        vocab_size=vocab.size,
        max_src_len=8,
        max_tgt_len=8,
        seed=seed,
    )
    params = init_params(config)

    def loss_fn(tape: Any, leaves: Any) -> Any:
        steps = teacher_forced_steps(example, leaves, config)
        return sequence_loss(steps, example, mode).total_tensor

    report = finite_diff_check(loss_fn, params.tensors, eps=eps, tol=tol, seed=seed, max_coords=max_coords)
    logger.info(
        f"grad-check {mode.value}: max rel error {report.max_rel_error:.2e} "
        f"over {report.n_checked} coords ({'pass' if report.passed else 'FAIL'})"
    )
    return report


def nn_non_decreasing(rows: Sequence[SweepRow]) -> bool:
    """Whether every NN column is non-decreasing as vocabulary size grows."""
    ordered = sorted(rows, key=lambda r: r.vocab_size)
    for column in ("nn1", "nn2", "nn3", "nn4"):
        values = [getattr(r, column) for r in ordered]
        if any(b < a for a, b in zip(values, values[1:])):
            return False
    return True


def vocab_sweep(
    run_config: RunConfig, sizes: Sequence[int], out_dir: Path, threads: Optional[int] = None
) -> List[SweepRow]:
    """Train and evaluate one force_copy_unk model per vocabulary size."""
    if run_config.train.mode is not CopyMode.FORCE_COPY_UNK:
        raise ContractError("vocab-sweep runs the force_copy_unk objective", reason="mode")
    test_path = run_config.data.test_path or run_config.data.valid_path
    if not test_path:
        raise ConfigError("vocab-sweep needs test_path or valid_path", key="test_path")
    test_targets = [tokenize(tgt) for _, tgt in read_pairs(test_path)]

    rows: List[SweepRow] = []
    for size in sorted(set(sizes)):
        run_dir = Path(out_dir) / f"vocab_{size}"
        cfg = run_config.with_overrides({"max_vocab": str(size), "checkpoint_dir": str(run_dir)})
        _, vocab, resolved = train_from_config(cfg, threads=threads)
        assert resolved.data.train_path is not None
        type_coverage, _ = vocab_coverage(vocab, pair_tokens(read_pairs(resolved.data.train_path)))
        _, oov_rate = vocab_coverage(vocab, test_targets)
        gen_path = run_dir / "generations.jsonl"
        generate_from_run(run_dir, Path(test_path), gen_path, threads=threads)
        metrics = evaluate_generations(gen_path, run_dir / "metrics.csv")
        rows.append(
            SweepRow(
                vocab_size=vocab.size,
                type_coverage=type_coverage,
                oov_rate=oov_rate,
                rouge1_f=metrics.rouge1_f,
                rouge2_f=metrics.rouge2_f,
                rougeL_f=metrics.rougeL_f,
                nn1=metrics.nn1,
                nn2=metrics.nn2,
                nn3=metrics.nn3,
                nn4=metrics.nn4,
                avg_p_copy=metrics.avg_p_copy,
            )
        )
    write_report(rows, Path(out_dir) / "sweep.csv")
    logger.info(f"vocab-sweep NN trend non-decreasing: {nn_non_decreasing(rows)}")
    return rows


def _first_row(path: Path) -> Dict[str, Any]:
    data = json.loads(path.read_text(encoding="utf-8"))
    return dict(data[0]) if isinstance(data, list) and data else {}


def consolidate_runs(runs_dir: Path, output: Path) -> List[Dict[str, Any]]:
    """One report row per run directory holding any metrics artifacts."""
    rows: List[Dict[str, Any]] = []
    for run in sorted(p for p in Path(runs_dir).iterdir() if p.is_dir()):
        found = [run / name for name in ("run.json", "metrics.json", "d2t.json", "eval.json") if (run / name).exists()]
        if not any(p.name != "run.json" for p in found):
            continue
        row: Dict[str, Any] = {"run": run.name}
        if (run / "run.json").exists():
            resolved = json.loads((run / "run.json").read_text(encoding="utf-8"))
            row["mode"] = resolved["train"]["mode"]
            row["vocab_size"] = resolved["model"]["vocab_size"]
        if (run / "metrics.json").exists():
            row.update(_first_row(run / "metrics.json"))
        if (run / "d2t.json").exists():
            row.update(_first_row(run / "d2t.json"))
        if (run / "eval.json").exists():
            row["val_loss"] = _first_row(run / "eval.json").get("loss_total")
        rows.append(row)
    write_report(rows, output, fieldnames=REPORT_COLUMNS)
    return rows
