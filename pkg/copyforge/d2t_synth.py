"""Synthetic box-score data-to-text task and its rule-based relation extractor.

Games hold two teams and four players. Gold summaries are built from fixed
templates that name one entity per sentence and place its numbers within
``WINDOW`` tokens after the name, so the extractor recovers every gold
relation. A fraction of entity names is drawn fresh for a single game; such a
name occurs at most ``RARE_NAME_MENTIONS`` times in a corpus, so a vocabulary
built with ``min_freq=RARE_NAME_MIN_FREQ`` leaves every one of them OOV.
"""

import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, TypeVar, Union

import numpy as np

from copyforge.exceptions import ContractError, CorpusParseError
from copyforge.metrics import bucket_precision_by_pcopy, dld_similarity
from copyforge.models import D2TReport, GameInstance, GenerationRecord, Record, RType
from copyforge.vocab import tokenize

WINDOW = 8
UNMATCHED = "UNMATCHED"
RTYPE_ORDER = sorted(rt.value for rt in RType)

Relation = Tuple[str, str, int]
T = TypeVar("T")

_SYLLABLES = (
    "ka", "lo", "mi", "zu", "ren", "ta", "vo", "shi", "bra", "del",
    "gor", "nu", "pel", "qua", "rix", "so", "tem", "ul", "ven", "yor",
)

TEAM_TYPES = (RType.WINS, RType.LOSSES, RType.POINTS)
PLAYER_TYPES = (RType.POINTS, RType.REBOUNDS, RType.ASSISTS)

# one linearized record per type plus at most one summary sentence
RARE_NAME_MENTIONS = max(len(TEAM_TYPES), len(PLAYER_TYPES)) + 1
RARE_NAME_MIN_FREQ = RARE_NAME_MENTIONS + 1

_TEAM_RANGES = {RType.WINS: (0, 60), RType.LOSSES: (0, 60), RType.POINTS: (80, 150)}
_PLAYER_RANGES = {RType.POINTS: (0, 45), RType.REBOUNDS: (0, 20), RType.ASSISTS: (0, 15)}

_TEAM_TEMPLATES = (
    "the {name} ( {WINS} - {LOSSES} ) scored {POINTS} points .",
    "the {name} moved to {WINS} - {LOSSES} on the season .",
)
_PLAYER_TEMPLATES = (
    "{name} had {POINTS} points , {REBOUNDS} rebounds and {ASSISTS} assists .",
    "{name} scored {POINTS} points .",
    "{name} added {ASSISTS} assists and {REBOUNDS} rebounds .",
)


def _fresh_name(rng: np.random.Generator, used: Set[str], parts: int, syllables: int) -> str:
    while True:
        name = "-".join(
            "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=syllables))
            for _ in range(parts)
        )
        if name not in used:
            used.add(name)
            return name


def _pick_names(
    rng: np.random.Generator, pool: Sequence[str], used: Set[str], count: int, oov_fraction: float
) -> List[str]:
    """``count`` distinct names; each is a one-off rare name with probability ``oov_fraction``."""
    common = [pool[int(i)] for i in rng.permutation(len(pool))[:count]]
    return [
        _fresh_name(rng, used, parts=2, syllables=3) if rng.random() < oov_fraction else name
        for name in common
    ]


def linearize(records: Sequence[Record]) -> str:
    """``entity TYPE value`` per record, records separated by ``|``."""
    return " | ".join(f"{r.entity} {r.rtype.value} {r.value}" for r in records)


def _render(template: str, name: str, values: Dict[RType, int]) -> str:
    return template.format(name=name, **{rt.value: v for rt, v in values.items()})


def generate_dataset(
    seed: int,
    n_games: int,
    name_pool_size: int = 40,
    oov_name_fraction: float = 0.1,
) -> List[GameInstance]:
    if not 0.0 <= oov_name_fraction <= 1.0:
        raise ContractError(f"oov_name_fraction={oov_name_fraction} outside [0, 1]", reason="oov fraction")
    if name_pool_size < 6:
        raise ContractError("name_pool_size must cover two teams and four players", reason="name pool")
    rng = np.random.default_rng(seed)
    used: Set[str] = set()
    team_pool = [_fresh_name(rng, used, parts=1, syllables=2) for _ in range(name_pool_size)]
    player_pool = [_fresh_name(rng, used, parts=2, syllables=2) for _ in range(name_pool_size)]

    games: List[GameInstance] = []
    for _ in range(n_games):
        teams = _pick_names(rng, team_pool, used, 2, oov_name_fraction)
        players = _pick_names(rng, player_pool, used, 4, oov_name_fraction)
        records: List[Record] = []
        entity_values: List[Tuple[str, bool, Dict[RType, int]]] = []
        for name in teams:
            values = {rt: int(rng.integers(lo, hi + 1)) for rt, (lo, hi) in _TEAM_RANGES.items()}
            records += [Record(entity=name, rtype=rt, value=values[rt]) for rt in TEAM_TYPES]
            entity_values.append((name, True, values))
        for name in players:
            values = {rt: int(rng.integers(lo, hi + 1)) for rt, (lo, hi) in _PLAYER_RANGES.items()}
            records += [Record(entity=name, rtype=rt, value=values[rt]) for rt in PLAYER_TYPES]
            entity_values.append((name, False, values))

        n_sentences = int(rng.integers(3, 6))
        sentences = []
        for idx in rng.permutation(len(entity_values))[:n_sentences]:
            name, is_team, values = entity_values[int(idx)]
            templates = _TEAM_TEMPLATES if is_team else _PLAYER_TEMPLATES
            sentences.append(_render(templates[int(rng.integers(0, len(templates)))], name, values))
        games.append(GameInstance(records=records, summary=" ".join(sentences), linearized_src=linearize(records)))
    return games


def _extract(tokens: Sequence[str], records: Sequence[Record]) -> List[Tuple[int, Relation]]:
    """(position of the number, relation) for every entity/number pairing."""
    values: Dict[str, List[Record]] = {}
    for r in records:
        values.setdefault(r.entity.lower(), []).append(r)
    found: List[Tuple[int, Relation]] = []
    for i, tok in enumerate(tokens):
        if tok not in values:
            continue
        for j in range(i + 1, min(i + 1 + WINDOW, len(tokens))):
            if tokens[j] in values:
                break
            if not tokens[j].isdigit():
                continue
            number = int(tokens[j])
            matches = sorted(r.rtype.value for r in values[tok] if r.value == number)
            found.append((j, (tok, matches[0] if matches else UNMATCHED, number)))
    return found


def extract_relations(text: Union[str, Sequence[str]], records: Sequence[Record]) -> List[Relation]:
    if not records:
        raise ContractError("extract_relations needs at least one record", reason="records")
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    return [rel for _, rel in _extract(tokens, records)]


def _record_set(records: Sequence[Record]) -> Set[Relation]:
    return {(r.entity.lower(), r.rtype.value, r.value) for r in records}


def rg_metrics(hyp_relations: Sequence[Relation], records: Sequence[Record]) -> Tuple[float, int]:
    """(precision %, number of unique correct relations)."""
    if not hyp_relations:
        return 0.0, 0
    known = _record_set(records)
    correct = [rel for rel in hyp_relations if rel in known]
    return 100.0 * len(correct) / len(hyp_relations), len(set(correct))


def _dedupe(relations: Iterable[Relation]) -> List[Relation]:
    seen: Set[Relation] = set()
    ordered = []
    for rel in relations:
        if rel not in seen:
            seen.add(rel)
            ordered.append(rel)
    return ordered


def cs_co_metrics(
    hyp_relations: Sequence[Relation], gold_relations: Sequence[Relation]
) -> Tuple[float, float, float]:
    hyp_set, gold_set = set(hyp_relations), set(gold_relations)
    shared = len(hyp_set & gold_set)
    precision = 100.0 * shared / len(hyp_set) if hyp_set else 0.0
    recall = 100.0 * shared / len(gold_set) if gold_set else 0.0
    return precision, recall, dld_similarity(_dedupe(hyp_relations), _dedupe(gold_relations))


def numeric_correctness(hyp_tokens: Sequence[str], records: Sequence[Record]) -> List[Tuple[int, bool]]:
    """(token position, relation correct) for every numeric token of a generated text."""
    known = _record_set(records)
    attached = {pos: rel in known for pos, rel in _extract(hyp_tokens, records)}
    return [(i, attached.get(i, False)) for i, tok in enumerate(hyp_tokens) if tok.isdigit()]


def d2t_evaluate(generations: Sequence[GenerationRecord], games: Sequence[GameInstance]) -> D2TReport:
    """RG/CS/CO averaged over instances plus precision buckets by copy probability."""
    if len(generations) != len(games):
        raise ContractError(
            f"{len(generations)} generations for {len(games)} games", reason="length mismatch"
        )
    rows = []
    traces: List[float] = []
    flags: List[bool] = []
    for gen, game in zip(generations, games):
        hyp_tokens = tokenize(gen.hyp)
        hyp_rel = extract_relations(hyp_tokens, game.records)
        gold_rel = extract_relations(game.summary, game.records)
        rows.append([*rg_metrics(hyp_rel, game.records), *cs_co_metrics(hyp_rel, gold_rel)])
        for pos, ok in numeric_correctness(hyp_tokens, game.records):
            if pos < len(gen.p_copy_trace):
                traces.append(gen.p_copy_trace[pos])
                flags.append(ok)
    means = np.mean(np.asarray(rows, dtype=np.float64), axis=0) if rows else np.zeros(5)
    return D2TReport(
        n=len(rows),
        rg_precision=float(means[0]),
        rg_count=float(means[1]),
        cs_precision=float(means[2]),
        cs_recall=float(means[3]),
        co=float(means[4]),
        buckets=bucket_precision_by_pcopy(traces, flags),
    )


def split_dataset(items: Sequence[T], seed: int) -> Tuple[List[T], List[T], List[T]]:
    """Seeded 80/10/10 split."""
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(0.8 * len(items)))
    n_valid = int(round(0.1 * len(items)))
    picked = [items[int(i)] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_valid], picked[n_train + n_valid :]


def games_to_pairs(games: Iterable[GameInstance]) -> List[Tuple[str, str]]:
    return [(game.linearized_src, game.summary) for game in games]


def write_games_jsonl(games: Iterable[GameInstance], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for game in games:
            obj = {
                "records": [r.model_dump(by_alias=True, mode="json") for r in game.records],
                "summary": game.summary,
            }
            handle.write(json.dumps(obj) + "\n")


def read_games_jsonl(path: Union[str, Path]) -> List[GameInstance]:
    games = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records = [Record.model_validate(r) for r in obj["records"]]
                summary = obj["summary"]
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusParseError(f"Invalid game record: {e}", path=str(path), line_number=number)
            games.append(GameInstance(records=records, summary=summary, linearized_src=linearize(records)))
    return games


def write_pairs_jsonl(pairs: Iterable[Tuple[str, str]], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for src, tgt in pairs:
            handle.write(json.dumps({"src": src, "tgt": tgt}) + "\n")


# Summarization profile: articles state facts, summaries restate them with
# content words that never occur in articles while copying names and numbers.
_FACTS = (
    ("{e} reported revenue of {n} million in the last quarter .", "{e} earned {n} million ."),
    ("analysts said {e} hired {n} new workers this year .", "{e} added {n} jobs ."),
    ("shares of {e} rose {n} percent on monday .", "{e} stock gained {n} percent ."),
    ("{e} opened {n} stores across the region .", "{e} launched {n} shops ."),
    ("{e} cut prices by {n} percent for members .", "{e} lowered costs {n} percent ."),
)
_FILLERS = (
    "the market was calm during the session .",
    "officials did not comment on the report .",
    "the sector has seen steady growth .",
    "investors will watch the next results closely .",
)


def generate_summarization_corpus(
    seed: int,
    n_docs: int,
    oov_fraction: float = 0.2,
    name_pool_size: int = 40,
) -> List[Tuple[str, str]]:
    """(article, summary) pairs for the summarization profile."""
    if not 0.0 <= oov_fraction <= 1.0:
        raise ContractError(f"oov_fraction={oov_fraction} outside [0, 1]", reason="oov fraction")
    rng = np.random.default_rng(seed)
    used: Set[str] = set()
    pool = [_fresh_name(rng, used, parts=2, syllables=2) for _ in range(max(name_pool_size, 3))]
    docs = []
    for _ in range(n_docs):
        names = _pick_names(rng, pool, used, 3, oov_fraction)
        facts = [_FACTS[int(i)] for i in rng.permutation(len(_FACTS))[:3]]
        stated = []
        for (article_t, summary_t), name in zip(facts, names):
            number = str(int(rng.integers(2, 200)))
            stated.append((article_t.format(e=name, n=number), summary_t.format(e=name, n=number)))
        fillers = [_FILLERS[int(i)] for i in rng.permutation(len(_FILLERS))[:2]]
        article_parts = [s for s, _ in stated] + fillers
        article = " ".join(article_parts[int(i)] for i in rng.permutation(len(article_parts)))
        kept = sorted(rng.permutation(len(stated))[:2])
        summary = " ".join(stated[int(i)][1] for i in kept)
        docs.append((article, summary))
    return docs


def load_generations(path: Union[str, Path]) -> List[GenerationRecord]:
    records: List[GenerationRecord] = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(GenerationRecord.model_validate_json(line))
            except ValueError as e:
                raise CorpusParseError(f"Invalid generation line: {e}", path=str(path), line_number=number)
    return records
