"""Beam search over the extended vocabulary with n-gram repeat blocking."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from copyforge.autodiff import LOG_FLOOR, Tape
from copyforge.config import DecodeConfig, ModelConfig, settings
from copyforge.logger import logger
from copyforge.models import EncodedExample, GenerationRecord
from copyforge.network import ModelParameters, decoder_step, encode, initial_state
from copyforge.utils import ordered_map
from copyforge.vocab import BOS, EOS, UNK, Vocabulary, decode_ids, encode_example, read_pairs

# (state, previous ext id) -> (p_final, p_gen, next state)
StepFn = Callable[[Any, int], Tuple[np.ndarray, float, Any]]


@dataclass
class Hypothesis:
    ext_ids: List[int]
    log_prob: float
    state: Any
    p_copy_trace: List[float] = field(default_factory=list)

    def score(self, length_norm: bool) -> float:
        if length_norm and self.ext_ids:
            return self.log_prob / len(self.ext_ids)
        return self.log_prob


@dataclass
class SearchResult:
    ext_ids: List[int]  # without the closing EOS
    log_prob: float
    score: float
    p_copy_trace: List[float]
    finished: bool

    @property
    def avg_p_copy(self) -> float:
        return float(np.mean(self.p_copy_trace)) if self.p_copy_trace else 0.0


def repeats_ngram(ids: Sequence[int], candidate: int, n: int) -> bool:
    """True when appending ``candidate`` completes an n-gram already in ``ids``."""
    if n <= 0 or len(ids) + 1 < n:
        return False
    seq = list(ids) + [candidate]
    tail = tuple(seq[-n:])
    return any(tuple(seq[i : i + n]) == tail for i in range(len(seq) - n))


def _ranked_candidates(
    hyp: Hypothesis, beam_index: int, log_p: np.ndarray, k: int, block_ngram: int
) -> List[Tuple[float, int, int]]:
    """Best ``k`` unblocked extensions of one hypothesis as (score, ext id, beam)."""
    ids = np.arange(log_p.shape[0])
    order = np.lexsort((ids, -log_p))
    picked: List[Tuple[float, int, int]] = []
    for w in order:
        w = int(w)
        if repeats_ngram(hyp.ext_ids, w, block_ngram):
            continue
        picked.append((hyp.log_prob + float(log_p[w]), w, beam_index))
        if len(picked) == k:
            break
    return picked


def _beam(step_fn: StepFn, start_state: Any, config: DecodeConfig, bos_id: int, eos_id: int) -> SearchResult:
    """One beam pass.

    Candidates are ranked by cumulative log-probability, ties going to the
    smaller extended id and then the earlier beam. Extensions reaching EOS
    within the top ``beam_size`` move to the finished pool; the best
    ``beam_size`` other extensions stay live.
    """
    k = config.beam_size
    beams = [Hypothesis(ext_ids=[], log_prob=0.0, state=start_state)]
    finished: List[Hypothesis] = []

    for _ in range(config.max_len):
        pool: List[Tuple[float, int, int]] = []
        stepped = []
        for b, hyp in enumerate(beams):
            prev = hyp.ext_ids[-1] if hyp.ext_ids else bos_id
            p_final, p_gen, next_state = step_fn(hyp.state, prev)
            log_p = np.log(np.maximum(p_final, LOG_FLOOR))
            stepped.append((next_state, 1.0 - p_gen))
            ranked = _ranked_candidates(hyp, b, log_p, k + 1, config.block_ngram)
            if not ranked:
                logger.warning(f"Every extension of beam {b} is n-gram blocked")
            pool.extend(ranked)
        if not pool:
            finished.extend(beams)
            beams = []
            break

        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        live: List[Hypothesis] = []
        for rank, (log_prob, w, b) in enumerate(pool):
            parent = beams[b]
            next_state, p_copy = stepped[b]
            child = Hypothesis(
                ext_ids=parent.ext_ids + [w],
                log_prob=log_prob,
                state=next_state,
                p_copy_trace=parent.p_copy_trace + [p_copy],
            )
            if w == eos_id:
                if rank < k:
                    finished.append(child)
            elif len(live) < k:
                live.append(child)
            if len(live) == k:
                break
        beams = live
        if not beams:
            break
        # scores only fall as tokens append, so a full finished pool can be final
        if not config.length_norm and len(finished) >= k:
            worst_finished = min(h.log_prob for h in finished)
            if max(h.log_prob for h in beams) <= worst_finished:
                break

    candidates = finished if finished else beams
    best = max(
        enumerate(candidates),
        key=lambda item: (item[1].score(config.length_norm), -item[0]),
    )[1]
    closed = bool(best.ext_ids) and best.ext_ids[-1] == eos_id
    return SearchResult(
        ext_ids=best.ext_ids[:-1] if closed else list(best.ext_ids),
        log_prob=best.log_prob,
        score=best.score(config.length_norm),
        p_copy_trace=list(best.p_copy_trace),
        finished=closed,
    )


def search(
    step_fn: StepFn,
    start_state: Any,
    config: DecodeConfig,
    bos_id: int = BOS,
    eos_id: int = EOS,
) -> SearchResult:
    """Beam search over any model exposed as a ``step_fn``.

    A greedy pass runs alongside wider beams and wins when it scores higher:
    pruning can drop the greedy prefix, and the returned score never falls
    below the greedy score.
    """
    result = _beam(step_fn, start_state, config, bos_id, eos_id)
    if config.beam_size == 1:
        return result
    greedy = _beam(step_fn, start_state, config.model_copy(update={"beam_size": 1}), bos_id, eos_id)
    if greedy.score > result.score:
        logger.debug(f"Greedy hypothesis beat beam {config.beam_size}: {greedy.score:.4f} > {result.score:.4f}")
        return greedy
    return result


def model_step_fn(
    params: ModelParameters, example: EncodedExample, model_config: ModelConfig
) -> Tuple[StepFn, Any]:
    """Bind the network to one example; returns (step_fn, start_state)."""
    tape = Tape(grad_enabled=False)
    weights = params.on_tape(tape)
    encoder_out = encode(example.src_ids, weights, model_config, example.mask)

    def step_fn(state: Any, prev_ext_id: int) -> Tuple[np.ndarray, float, Any]:
        # generated OOVs have no embedding row and are fed back as UNK
        prev = prev_ext_id if prev_ext_id < model_config.vocab_size else UNK
        out, next_state = decoder_step(prev, state, encoder_out, weights, example, model_config)
        return out.p_final.values, out.p_gen_value, next_state

    return step_fn, initial_state(tape, model_config)


def beam_search(
    params: ModelParameters,
    example: EncodedExample,
    model_config: ModelConfig,
    config: DecodeConfig,
) -> SearchResult:
    step_fn, start = model_step_fn(params, example, model_config)
    return search(step_fn, start, config)


def generate_one(
    params: ModelParameters,
    vocab: Vocabulary,
    src: str,
    tgt: str,
    model_config: ModelConfig,
    config: DecodeConfig,
) -> GenerationRecord:
    example = encode_example(src, tgt, vocab, model_config.max_src_len, model_config.max_tgt_len)
    result = beam_search(params, example, model_config, config)
    hyp = " ".join(decode_ids(result.ext_ids, vocab, example.oov_list))
    return GenerationRecord(
        src=src,
        tgt=tgt,
        hyp=hyp,
        avg_p_copy=min(1.0, max(0.0, result.avg_p_copy)),
        p_copy_trace=result.p_copy_trace,
    )


def generate_file(
    params: ModelParameters,
    vocab: Vocabulary,
    jsonl_in: Union[str, Path],
    jsonl_out: Union[str, Path],
    model_config: ModelConfig,
    config: DecodeConfig,
    threads: Optional[int] = None,
) -> int:
    """Decode every line of ``jsonl_in``; output lines follow input order."""
    pairs = list(read_pairs(jsonl_in))
    workers = threads if threads is not None else settings.THREADS
    records = ordered_map(
        lambda pair: generate_one(params, vocab, pair[0], pair[1], model_config, config),
        pairs,
        workers,
    )
    out = Path(jsonl_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
    logger.info(f"Wrote {len(records)} generations to {out}")
    return len(records)
