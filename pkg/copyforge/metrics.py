"""Abstractive evaluation: ROUGE, Copy Precision, novel n-grams, DLD."""

from collections import Counter
from pathlib import Path
from typing import Hashable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from copyforge.logger import logger
from copyforge.models import BucketPrecision, MetricsReport
from copyforge.utils import read_jsonl, write_report
from copyforge.vocab import tokenize

PRF = Tuple[float, float, float]
MAX_NOVEL_N = 4


def ngram_counts(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap: int, hyp_count: int, ref_count: int) -> PRF:
    precision = overlap / hyp_count if hyp_count else 0.0
    recall = overlap / ref_count if ref_count else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def rouge_n(hyp: Sequence[str], ref: Sequence[str], n: int) -> PRF:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    hyp_grams = ngram_counts(hyp, n)
    ref_grams = ngram_counts(ref, n)
    overlap = sum((hyp_grams & ref_grams).values())
    return _prf(overlap, sum(hyp_grams.values()), sum(ref_grams.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> PRF:
    """Whole-sequence LCS; no sentence splitting."""
    return _prf(lcs_length(hyp, ref), len(hyp), len(ref))


def copy_precision(src: Sequence[str], ref: Sequence[str], hyp: Sequence[str]) -> float:
    """Share of hypothesis occurrences drawn from the source that are also in the reference."""
    src_types, ref_types = set(src), set(ref)
    candidates = [tok for tok in hyp if tok in src_types]
    if not candidates:
        return 0.0
    return sum(1 for tok in candidates if tok in ref_types) / len(candidates)


def novel_ngram_pct(src: Sequence[str], summary: Sequence[str], n: int) -> float:
    if len(summary) < n:
        return 0.0
    src_grams = set(ngram_counts(src, n))
    grams = [tuple(summary[i : i + n]) for i in range(len(summary) - n + 1)]
    return 100.0 * sum(1 for g in grams if g not in src_grams) / len(grams)


def dld_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Damerau-Levenshtein distance, optimal string alignment variant."""
    rows, cols = len(a) + 1, len(b) + 1
    d = np.zeros((rows, cols), dtype=np.int64)
    d[:, 0] = np.arange(rows)
    d[0, :] = np.arange(cols)
    for i in range(1, rows):
        for j in range(1, cols):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                best = min(best, d[i - 2, j - 2] + 1)
            d[i, j] = best
    return int(d[-1, -1])


def dld_similarity(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    return 100.0 * (1.0 - dld_distance(a, b) / max(len(a), len(b), 1))


def bucket_precision_by_pcopy(
    traces: Sequence[float], correctness: Sequence[bool], threshold: float = 0.5
) -> BucketPrecision:
    """Precision of tokens emitted with p_copy above / p_gen above ``threshold``.

    Shares are percentages of all scored tokens; an empty bucket has no precision.
    """
    if len(traces) != len(correctness):
        raise ValueError("traces and correctness flags must align")
    copy_flags = [ok for p, ok in zip(traces, correctness) if p > threshold]
    gen_flags = [ok for p, ok in zip(traces, correctness) if 1.0 - p > threshold]
    total = len(traces)

    def precision(flags: List[bool]) -> Optional[float]:
        return sum(flags) / len(flags) if flags else None

    return BucketPrecision(
        copy_precision=precision(copy_flags),
        copy_share=100.0 * len(copy_flags) / total if total else 0.0,
        gen_precision=precision(gen_flags),
        gen_share=100.0 * len(gen_flags) / total if total else 0.0,
        n_tokens=total,
    )


def novel_ngram_report(pairs: Iterable[Tuple[Sequence[str], Sequence[str]]]) -> List[float]:
    """Per-summary NN-1..4 percentages averaged over (src, summary) pairs."""
    rows = [[novel_ngram_pct(src, summary, n) for n in range(1, MAX_NOVEL_N + 1)] for src, summary in pairs]
    if not rows:
        return [0.0] * MAX_NOVEL_N
    return [float(v) for v in np.mean(np.asarray(rows), axis=0)]


def evaluate_generations(
    path: Union[str, Path], report_csv: Optional[Union[str, Path]] = None
) -> MetricsReport:
    """Corpus averages over a generation JSONL; ROUGE, CP and NN on a 0-100 scale."""
    rows = read_jsonl(path)
    scores = []
    nn_pairs = []
    gold_pairs = []
    p_copies = []
    for row in rows:
        src, ref, hyp = tokenize(row["src"]), tokenize(row["tgt"]), tokenize(row["hyp"])
        scores.append(
            [
                rouge_n(hyp, ref, 1)[2],
                rouge_n(hyp, ref, 2)[2],
                rouge_l(hyp, ref)[2],
                copy_precision(src, ref, hyp),
            ]
        )
        nn_pairs.append((src, hyp))
        gold_pairs.append((src, ref))
        p_copies.append(float(row.get("avg_p_copy", 0.0)))

    means = 100.0 * np.mean(np.asarray(scores), axis=0) if scores else np.zeros(4)
    nn = novel_ngram_report(nn_pairs)
    gold_nn = novel_ngram_report(gold_pairs)
    report = MetricsReport(
        n=len(rows),
        rouge1_f=float(means[0]),
        rouge2_f=float(means[1]),
        rougeL_f=float(means[2]),
        copy_precision=float(means[3]),
        nn1=nn[0],
        nn2=nn[1],
        nn3=nn[2],
        nn4=nn[3],
        avg_p_copy=float(np.mean(p_copies)) if p_copies else 0.0,
        gold_nn1=gold_nn[0],
        gold_nn2=gold_nn[1],
        gold_nn3=gold_nn[2],
        gold_nn4=gold_nn[3],
    )
    logger.info(f"Evaluated {report.n} generations from {path}: R1={report.rouge1_f:.2f} RL={report.rougeL_f:.2f}")
    if report_csv is not None:
        write_report([report], report_csv)
    return report
