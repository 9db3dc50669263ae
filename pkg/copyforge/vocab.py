"""Tokenization, vocabulary construction and extended-vocabulary encoding."""

import json
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from copyforge.exceptions import ContractError, CorpusParseError, SlotIndexError
from copyforge.models import EncodedExample

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

# numbers (incl. scores like 142-139, decimals) stay whole unless glued to letters
_TOKEN_RE = re.compile(
    r"\d+(?:[.,:\-]\d+)*(?![^\s.,!?;:()\"'])"
    r"|[.,!?;:()\"']"
    r"|[^\s.,!?;:()\"']+"
)


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Immutable token <-> id map; specials occupy ids 0..3."""

    def __init__(self, tokens: Sequence[str] = ()) -> None:
        id_to_token = list(SPECIALS) + list(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ContractError("Vocabulary tokens must be unique", reason="duplicate")
        self._id_to_token: Tuple[str, ...] = tuple(id_to_token)
        self._token_to_id: Dict[str, int] = token_to_id

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    @property
    def id_to_token(self) -> Tuple[str, ...]:
        return self._id_to_token

    def lookup(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def __contains__(self, token: object) -> bool:
        return isinstance(token, str) and token not in SPECIALS and token in self._token_to_id

    def __len__(self) -> int:
        return self.size

    def save(self, path: Union[str, Path]) -> None:
        """One token per line; line number + 4 is the id."""
        lines = self._id_to_token[len(SPECIALS):]
        Path(path).write_text("".join(f"{tok}\n" for tok in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int, min_freq: int = 1) -> Vocabulary:
    if max_size < len(SPECIALS) + 1:
        raise ContractError(f"max_size={max_size} leaves no room for tokens", reason="max_size")
    counts: Counter = Counter()
    for tokens in corpus:
        counts.update(tokens)
    ranked = sorted(
        ((tok, n) for tok, n in counts.items() if n >= min_freq and tok not in SPECIALS),
        key=lambda item: (-item[1], item[0]),
    )
    keep = max_size - len(SPECIALS)
    return Vocabulary([tok for tok, _ in ranked[:keep]])


def encode_example(
    src: str,
    tgt: str,
    vocab: Vocabulary,
    max_src_len: Optional[int] = None,
    max_tgt_len: Optional[int] = None,
) -> EncodedExample:
    src_tokens = tokenize(src)[:max_src_len]
    tgt_tokens = tokenize(tgt)[:max_tgt_len]

    oov_list: List[str] = []
    oov_index: Dict[str, int] = {}
    src_ids: List[int] = []
    src_ext_ids: List[int] = []
    for tok in src_tokens:
        base = vocab.lookup(tok)
        src_ids.append(base)
        if tok in vocab:
            src_ext_ids.append(base)
            continue
        if tok not in oov_index:
            oov_index[tok] = len(oov_list)
            oov_list.append(tok)
        src_ext_ids.append(vocab.size + oov_index[tok])

    src_types = set(src_tokens)
    tgt_ids = [BOS]
    tgt_ext_ids = [BOS]
    copy_candidate: List[bool] = []
    in_vocab: List[bool] = []
    for tok in tgt_tokens:
        known = tok in vocab
        base = vocab.lookup(tok)
        tgt_ids.append(base)
        if known:
            tgt_ext_ids.append(base)
        else:
            tgt_ext_ids.append(vocab.size + oov_index[tok] if tok in oov_index else UNK)
        copy_candidate.append(tok in src_types)
        in_vocab.append(known)
    tgt_ids.append(EOS)
    tgt_ext_ids.append(EOS)

    return EncodedExample(
        src_text=src,
        tgt_text=tgt,
        src_tokens=src_tokens,
        src_ids=src_ids,
        src_ext_ids=src_ext_ids,
        tgt_tokens=tgt_tokens,
        tgt_ids=tgt_ids,
        tgt_ext_ids=tgt_ext_ids,
        oov_list=oov_list,
        copy_candidate=copy_candidate,
        in_vocab=in_vocab,
        vocab_size=vocab.size,
    )


def decode_ids(ext_ids: Iterable[int], vocab: Vocabulary, oov_list: Sequence[str]) -> List[str]:
    limit = vocab.size + len(oov_list)
    tokens: List[str] = []
    for token_id in ext_ids:
        token_id = int(token_id)
        if not 0 <= token_id < limit:
            raise SlotIndexError("Extended id out of range", index=token_id, size=limit)
        if token_id == EOS:
            break
        if token_id in (BOS, PAD):
            continue
        if token_id < vocab.size:
            tokens.append(vocab.token(token_id))
        else:
            tokens.append(oov_list[token_id - vocab.size])
    return tokens


def read_pairs(path: Union[str, Path]) -> Iterator[Tuple[str, str]]:
    """Lazily yield (src, tgt) strings from a JSONL corpus."""
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusParseError(f"Invalid JSON: {e.msg}", path=str(path), line_number=number)
            if not isinstance(obj, dict) or not isinstance(obj.get("src"), str) or not isinstance(obj.get("tgt"), str):
                raise CorpusParseError(
                    "Expected an object with string fields 'src' and 'tgt'",
                    path=str(path),
                    line_number=number,
                )
            yield obj["src"], obj["tgt"]


def load_jsonl(
    path: Union[str, Path],
    vocab: Vocabulary,
    max_src_len: Optional[int] = None,
    max_tgt_len: Optional[int] = None,
) -> Iterator[EncodedExample]:
    for src, tgt in read_pairs(path):
        yield encode_example(src, tgt, vocab, max_src_len, max_tgt_len)


def collate(examples: Sequence[EncodedExample], pad_id: int = PAD) -> List[EncodedExample]:
    """Pad every source in the batch to the batch maximum with ``pad_id`` + mask."""
    if not examples:
        return []
    width = max(len(ex.src_ids) for ex in examples)
    batch = []
    for ex in examples:
        pad = width - len(ex.src_ids)
        batch.append(
            ex.model_copy(
                update={
                    "src_tokens": ex.src_tokens + [SPECIALS[pad_id]] * pad,
                    "src_ids": ex.src_ids + [pad_id] * pad,
                    "src_ext_ids": ex.src_ext_ids + [pad_id] * pad,
                    "src_mask": ex.mask + [False] * pad,
                }
            )
        )
    return batch


def vocab_coverage(vocab: Vocabulary, corpus: Iterable[Sequence[str]]) -> Tuple[float, float]:
    """(% of corpus types kept by the vocabulary, % of corpus tokens that are OOV)."""
    types = set()
    total = 0
    oov = 0
    for tokens in corpus:
        types.update(tokens)
        total += len(tokens)
        oov += sum(1 for tok in tokens if tok not in vocab)
    type_coverage = 100.0 * sum(1 for tok in types if tok in vocab) / len(types) if types else 0.0
    oov_rate = 100.0 * oov / total if total else 0.0
    return type_coverage, oov_rate


def copy_candidate_ratio(examples: Iterable[EncodedExample]) -> float:
    candidates = 0
    total = 0
    for ex in examples:
        candidates += sum(ex.copy_candidate)
        total += len(ex.copy_candidate)
    return candidates / total if total else 0.0
