"""Utility functions shared by the training, decoding and reporting pipelines."""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar, Union

from pydantic import BaseModel

from copyforge.logger import logger

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Apply ``fn`` to every item, fanning out over a thread pool.

    Results come back in input order regardless of completion order, so
    callers aggregating them sequentially stay deterministic.

    Args:
        fn: Function applied to each item
        items: Inputs
        workers: Maximum number of threads; 1 runs inline
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _as_dict(row: Union[BaseModel, Dict[str, Any]]) -> Dict[str, Any]:
    return row.model_dump(mode="json") if isinstance(row, BaseModel) else dict(row)


def write_report(
    rows: Iterable[Union[BaseModel, Dict[str, Any]]],
    csv_path: Union[str, Path],
    fieldnames: Optional[Sequence[str]] = None,
) -> Path:
    """
    Write rows as CSV plus a JSON twin next to it (same stem, ``.json``).

    Nested values (dicts, lists) are JSON-encoded in the CSV cell.
    """
    data = [_as_dict(row) for row in rows]
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(fieldnames) if fieldnames else (list(data[0]) if data else [])

    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in data:
            writer.writerow(
                {k: json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v for k, v in row.items()}
            )
    path.with_suffix(".json").write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Report written to {path} ({len(data)} rows)")
    return path


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
