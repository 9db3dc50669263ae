"""Teacher-forced training loop, validation and run persistence."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from copyforge.autodiff import Tape, backward
from copyforge.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from copyforge.config import CopyMode, ModelConfig, RunConfig, TrainConfig, load_run_config, settings
from copyforge.exceptions import CheckpointFormatError, ContractError, NonFiniteLossError, NumericError
from copyforge.logger import logger
from copyforge.losses import sequence_loss
from copyforge.models import EncodedExample, EvalReport, HistoryRow, LossBreakdown
from copyforge.network import ModelParameters, init_params, teacher_forced_steps
from copyforge.optim import OptimState, adamw_step, clip_gradients
from copyforge.utils import ordered_map
from copyforge.vocab import Vocabulary, collate

HISTORY_COLUMNS = list(HistoryRow.model_fields)

Weights3 = Tuple[float, float, float]


@dataclass
class TrainResult:
    params: ModelParameters
    history: List[HistoryRow] = field(default_factory=list)
    best_val: Optional[float] = None
    steps: int = 0
    stopped_early: bool = False


@dataclass
class _ExampleGrad:
    breakdown: LossBreakdown
    grads: Dict[str, np.ndarray]
    p_gens: List[float]


def example_gradients(
    params: ModelParameters,
    example: EncodedExample,
    model_config: ModelConfig,
    mode: CopyMode,
    loss_weights: Weights3 = (1.0, 1.0, 1.0),
    dropout_seed: Optional[Sequence[int]] = None,
) -> _ExampleGrad:
    """Forward + backward for one example on its own tape."""
    tape = Tape()
    weights = params.on_tape(tape, requires_grad=True)
    rng = np.random.default_rng(list(dropout_seed)) if dropout_seed is not None and model_config.dropout > 0 else None
    steps = teacher_forced_steps(example, weights, model_config, rng)
    breakdown = sequence_loss(steps, example, mode, loss_weights)
    backward(tape, breakdown.total_tensor)
    grads = {
        name: tape.grads.get(leaf.node_id, np.zeros_like(leaf.values))
        for name, leaf in weights.items()
    }
    return _ExampleGrad(breakdown, grads, [s.p_gen_value for s in steps])


def batch_gradients(
    params: ModelParameters,
    batch: Sequence[EncodedExample],
    model_config: ModelConfig,
    mode: CopyMode,
    loss_weights: Weights3 = (1.0, 1.0, 1.0),
    step: int = 0,
    seed: int = 0,
    threads: int = 1,
) -> Tuple[Dict[str, float], Dict[str, np.ndarray], float]:
    """Batch-mean loss components, gradients and average p_copy.

    Examples may run on worker threads; sums are taken in batch order.
    """
    jobs = list(enumerate(batch))
    results = ordered_map(
        lambda job: example_gradients(
            params, job[1], model_config, mode, loss_weights, dropout_seed=(seed, step, job[0])
        ),
        jobs,
        threads,
    )
    n = len(results)
    grads = {name: np.zeros_like(params[name]) for name in params.names()}
    components = {"loss_total": 0.0, "loss_vocab": 0.0, "loss_attn": 0.0, "loss_pgen": 0.0}
    p_gens: List[float] = []
    for res in results:
        for name in grads:
            grads[name] += res.grads[name]
        for key, value in res.breakdown.components().items():
            components[key] += value
        p_gens.extend(res.p_gens)
    for name in grads:
        grads[name] /= n
    components = {key: value / n for key, value in components.items()}
    return components, grads, 1.0 - float(np.mean(p_gens))


def evaluate(
    params: ModelParameters,
    dataset: Sequence[EncodedExample],
    model_config: ModelConfig,
    mode: CopyMode,
    loss_weights: Weights3 = (1.0, 1.0, 1.0),
) -> EvalReport:
    """Mean loss components over examples; p_gen averaged over every timestep."""
    totals = np.zeros(4)
    p_gens: List[float] = []
    for example in dataset:
        tape = Tape(grad_enabled=False)
        steps = teacher_forced_steps(example, params.on_tape(tape), model_config)
        breakdown = sequence_loss(steps, example, mode, loss_weights)
        totals += [breakdown.total, breakdown.loss_vocab, breakdown.loss_attn, breakdown.loss_pgen]
        p_gens.extend(s.p_gen_value for s in steps)
    n = max(len(dataset), 1)
    avg_p_gen = float(np.mean(p_gens)) if p_gens else 0.0
    return EvalReport(
        n_examples=len(dataset),
        n_steps=len(p_gens),
        loss_total=float(totals[0] / n),
        loss_vocab=float(totals[1] / n),
        loss_attn=float(totals[2] / n),
        loss_pgen=float(totals[3] / n),
        avg_p_gen=avg_p_gen,
        avg_p_copy=1.0 - avg_p_gen if p_gens else 0.0,
    )


class HistoryLog:
    """Training CSV, written row by row."""

    def __init__(self, path: Path, keep_until: int = 0) -> None:
        self.path = path
        kept: List[Dict[str, str]] = []
        if keep_until > 0 and path.exists():
            with open(path, encoding="utf-8", newline="") as handle:
                kept = [row for row in csv.DictReader(handle) if int(row["step"]) <= keep_until]
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(kept)

    def append(self, row: HistoryRow) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
            writer.writerow({k: "" if v is None else v for k, v in row.model_dump().items()})


def read_history(path: Path) -> List[HistoryRow]:
    with open(path, encoding="utf-8", newline="") as handle:
        return [
            HistoryRow(**{k: (None if v == "" else v) for k, v in row.items()})
            for row in csv.DictReader(handle)
        ]


def _schedule(n_examples: int, tc: TrainConfig) -> Iterator[Tuple[int, np.ndarray]]:
    """(step, example indices) for every batch of the run, ending at ``max_steps``."""
    step = 0
    for epoch in range(tc.epochs):
        order = np.random.default_rng([tc.seed, epoch]).permutation(n_examples)
        for offset in range(0, n_examples, tc.batch_size):
            step += 1
            if tc.max_steps is not None and step > tc.max_steps:
                return
            yield step, order[offset : offset + tc.batch_size]


def total_steps(n_examples: int, tc: TrainConfig) -> int:
    steps = tc.epochs * math.ceil(n_examples / tc.batch_size)
    return steps if tc.max_steps is None else min(steps, tc.max_steps)


def train(
    run_config: RunConfig,
    train_set: Sequence[EncodedExample],
    valid_set: Sequence[EncodedExample] = (),
    vocab: Optional[Vocabulary] = None,
    resume: bool = False,
    threads: Optional[int] = None,
) -> TrainResult:
    """
    Train from scratch (or resume from ``last.ckpt``) under ``run_config``.

    The checkpoint directory receives ``run.cfg``/``run.json``, ``vocab.txt``,
    ``train.csv`` and ``last.ckpt`` after every evaluation. Evaluations run
    every ``eval_every`` steps and at the final step, so ``last.ckpt`` always
    holds the parameters training ended with. ``best.ckpt`` is written on
    validation improvement, or at every evaluation when there is no
    validation set.
    """
    model_config, tc = run_config.model, run_config.train
    if not train_set:
        raise ContractError("Training set is empty", reason="empty train set")
    if vocab is not None and vocab.size != model_config.vocab_size:
        raise ContractError(
            f"Vocabulary has {vocab.size} entries but vocab_size={model_config.vocab_size}",
            reason="vocab size",
        )
    workers = threads if threads is not None else settings.THREADS
    out_dir = Path(tc.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = run_config.checkpoint_digest()

    params = init_params(model_config)
    optim = OptimState.zeros(params)
    start_step = 0
    best_val: Optional[float] = None
    bad_evals = 0
    last_path = out_dir / "last.ckpt"
    if resume and last_path.exists():
        ck = load_checkpoint(last_path, expected_digest=digest)
        if ck.optim is None:
            raise CheckpointFormatError("Resume checkpoint has no optimizer state", path=str(last_path), reason="optim")
        params, optim, start_step = ck.params, ck.optim, ck.optim.step
        best = float(ck.extra.get("trainer.best_val", np.array(np.nan)))
        best_val = None if math.isnan(best) else best
        bad_evals = int(ck.extra.get("trainer.bad_evals", np.array(0.0)))
        logger.info(f"Resuming from {last_path} at step {start_step}")

    run_config.write(out_dir)
    if vocab is not None:
        vocab.save(out_dir / "vocab.txt")
    log = HistoryLog(out_dir / "train.csv", keep_until=start_step)
    result = TrainResult(params=params, best_val=best_val, steps=start_step)
    final_step = total_steps(len(train_set), tc)
    previous: Dict[str, float] = {}

    for step, indices in _schedule(len(train_set), tc):
        if step <= start_step:
            continue
        batch = collate([train_set[int(i)] for i in indices])
        try:
            components, grads, avg_p_copy = batch_gradients(
                params, batch, model_config, tc.mode, tc.loss_weights, step, tc.seed, workers
            )
        except NumericError as e:
            logger.error(f"Non-finite value at step {step}: {e.message} (previous step {previous})")
            raise NonFiniteLossError(
                f"Non-finite loss at step {step}: {e.message}", batch_id=step, components=previous
            )
        if not all(math.isfinite(v) for v in components.values()):
            logger.error(f"Non-finite loss at step {step}: {components}")
            raise NonFiniteLossError(f"Non-finite loss at step {step}", batch_id=step, components=components)
        previous = components

        grads, _ = clip_gradients(grads, tc.grad_clip_norm)
        adamw_step(params, grads, optim, tc.lr, tc.adam_betas, tc.adam_eps, tc.weight_decay)
        row = HistoryRow(step=step, **components)

        is_eval = step % tc.eval_every == 0 or step == final_step
        if is_eval:
            val_loss: Optional[float] = None
            if valid_set:
                report = evaluate(params, valid_set, model_config, tc.mode, tc.loss_weights)
                val_loss = report.loss_total
                row = row.model_copy(update={"val_loss": val_loss, "avg_p_copy": report.avg_p_copy})
            else:
                row = row.model_copy(update={"avg_p_copy": avg_p_copy})
            logger.info(
                f"step {step}: loss={components['loss_total']:.4f} "
                f"(vocab={components['loss_vocab']:.4f} attn={components['loss_attn']:.4f} "
                f"pgen={components['loss_pgen']:.4f}) val={val_loss} p_copy={row.avg_p_copy:.3f}"
            )
            if val_loss is None:
                save_checkpoint(params, None, digest, out_dir / "best.ckpt")
            elif best_val is None or val_loss < best_val:
                best_val = val_loss
                bad_evals = 0
                save_checkpoint(params, None, digest, out_dir / "best.ckpt")
                logger.info(f"New best validation loss {val_loss:.4f}, saved best.ckpt")
            else:
                bad_evals += 1
            extra = {
                "trainer.best_val": np.array(np.nan if best_val is None else best_val),
                "trainer.bad_evals": np.array(float(bad_evals)),
            }
            save_checkpoint(params, optim, digest, last_path, extra)

        log.append(row)
        result.history.append(row)
        result.steps = step
        result.best_val = best_val
        if is_eval and bad_evals >= tc.patience:
            logger.warning(f"Validation loss plateaued for {bad_evals} evaluations, stopping at step {step}")
            result.stopped_early = True
            break

    return result


def load_trained(directory: Path, which: str = "best") -> Tuple[ModelParameters, Vocabulary, RunConfig]:
    """Load params, vocabulary and resolved config from a training directory."""
    directory = Path(directory)
    run_config = load_run_config(directory / "run.cfg")
    path = directory / f"{which}.ckpt"
    if not path.exists():
        path = directory / "last.ckpt"
    ck: Checkpoint = load_checkpoint(path, expected_digest=run_config.checkpoint_digest())
    vocab = Vocabulary.load(directory / "vocab.txt")
    return ck.params, vocab, run_config
