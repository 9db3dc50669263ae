"""Mixture NLL and the decomposed supervised copy objective."""

from typing import List, Literal, Sequence, Tuple

import numpy as np

from copyforge.autodiff import Tensor, add_n, apply_unary, scatter_sum, sub, take
from copyforge.config import CopyMode
from copyforge.exceptions import ContractError, SlotIndexError
from copyforge.models import EncodedExample, LossBreakdown
from copyforge.network import StepOutput

Branch = Literal["copy", "generate"]


def _neg_log(x: Tensor) -> Tensor:
    return apply_unary("neg", apply_unary("log", x))


def mixture_nll(step: StepOutput, tgt_ext_id: int) -> Tensor:
    size = step.p_final.shape[0]
    if not 0 <= tgt_ext_id < size:
        raise SlotIndexError("Target id outside the extended vocabulary", index=tgt_ext_id, size=size)
    return _neg_log(take(step.p_final, tgt_ext_id))


def loss_vocab(step: StepOutput, tgt_id: int) -> Tensor:
    """NLL of the base-vocabulary target (UNK for OOV targets)."""
    return _neg_log(take(step.p_vocab, tgt_id))


def loss_attn(step: StepOutput, example: EncodedExample, t: int) -> Tensor:
    """NLL of the attention mass on source positions holding the target token."""
    if not example.is_copy_candidate(t):
        return step.alpha_t.tape.constant(0.0)
    target = example.tgt_tokens[t]
    mask = example.mask
    slots = [1 if tok == target and mask[i] else 0 for i, tok in enumerate(example.src_tokens)]
    return _neg_log(take(scatter_sum(step.alpha_t, slots, 2), 1))


def switch_branch(example: EncodedExample, t: int, mode: CopyMode) -> Branch:
    if mode is CopyMode.FORCE_COPY:
        return "copy" if example.is_copy_candidate(t) else "generate"
    if mode is CopyMode.FORCE_COPY_UNK:
        copy = example.is_copy_candidate(t) and not example.is_in_vocab(t)
        return "copy" if copy else "generate"
    raise ContractError("The mixture objective has no switch supervision", reason="mode")


def loss_pgen(step: StepOutput, example: EncodedExample, t: int, mode: CopyMode) -> Tensor:
    p_gen = take(step.p_gen, 0)
    if switch_branch(example, t, mode) == "copy":
        return _neg_log(sub(p_gen.tape.constant(1.0), p_gen))
    return _neg_log(p_gen)


def sequence_loss(
    steps: Sequence[StepOutput],
    example: EncodedExample,
    mode: CopyMode,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """Mean over timesteps of the per-step objective for ``mode``.

    In mixture mode ``per_step`` carries the step NLL in its first slot and the
    reported components stay zero.
    """
    if len(steps) != example.n_steps:
        raise ContractError(
            f"Got {len(steps)} steps for a target of {example.n_steps} positions",
            reason="length mismatch",
        )
    if not steps:
        raise ContractError("Empty target", reason="length mismatch")

    terms: List[Tensor] = []
    per_step: List[Tuple[float, float, float]] = []
    for t, step in enumerate(steps):
        if mode is CopyMode.MIXTURE:
            nll = mixture_nll(step, example.tgt_ext_ids[t + 1])
            terms.append(nll)
            per_step.append((nll.item(), 0.0, 0.0))
            continue
        parts = (
            loss_vocab(step, example.tgt_ids[t + 1]),
            loss_attn(step, example, t),
            loss_pgen(step, example, t, mode),
        )
        terms.append(add_n([apply_unary("scale", part, c=w) for part, w in zip(parts, weights)]))
        per_step.append((parts[0].item(), parts[1].item(), parts[2].item()))

    n = len(steps)
    total = apply_unary("scale", add_n(terms), c=1.0 / n)
    means = np.asarray(per_step).mean(axis=0)
    supervised = mode is not CopyMode.MIXTURE
    return LossBreakdown(
        loss_vocab=float(means[0]) if supervised else 0.0,
        loss_attn=float(means[1]) if supervised else 0.0,
        loss_pgen=float(means[2]) if supervised else 0.0,
        total=total.item(),
        per_step=per_step,
        total_tensor=total,
    )
