"""
JSON-lines helpers

All artifacts (reviews, quadruplets, splits, ranked lists) are JSON-lines.
Keys are sorted on write so reruns produce byte-identical files.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Tuple, Union

import orjson

PathLike = Union[str, Path]

_DUMP_OPTS = orjson.OPT_SORT_KEYS | orjson.OPT_APPEND_NEWLINE


def dumps_line(record: Dict[str, Any]) -> bytes:
    return orjson.dumps(record, option=_DUMP_OPTS)


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> int:
    """Write records one per line, returns the number written"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "wb") as f:
        for record in records:
            f.write(dumps_line(record))
            count += 1
    return count


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, bytes]]:
    """Yield (1-based line number, raw line) for every non-blank line"""
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            if raw.strip():
                yield line_no, raw


def read_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    for _, raw in iter_jsonl(path):
        yield orjson.loads(raw)


def write_json(path: PathLike, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))


def read_json(path: PathLike) -> Any:
    return orjson.loads(Path(path).read_bytes())
