"""
Review Corpus
Ingests JSON-lines review datasets, computes dataset statistics and builds
the leave-one-out (SR/TR) and 8:1:1 (EG/RG) splits.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Tuple, Union

import numpy as np
import orjson
import structlog

from ..exceptions import CorpusError, NoTrainableUsersError, ReviewFormatError
from ..utils.jsonl import iter_jsonl, write_jsonl

logger = structlog.get_logger()

REQUIRED_FIELDS = ("user", "item", "text", "ts")

SEQ_SPLITS = ("seq_train", "seq_val", "seq_test")
EXPL_SPLITS = ("expl_train", "expl_val", "expl_test")


@dataclass(frozen=True)
class Interaction:
    """One (user, item, review) record at a position of the user's history"""

    user_id: str
    item_id: str
    review_text: str
    order_index: int
    ts: int
    empty_review: bool = False

    def to_record(self) -> Dict[str, Any]:
        return {"user": self.user_id, "item": self.item_id, "text": self.review_text, "ts": self.ts}

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.user_id, self.item_id, self.order_index)


@dataclass(frozen=True)
class ReviewSet:
    """Immutable interaction collection with per-user and per-item indexes"""

    interactions: Tuple[Interaction, ...]
    user_index: Mapping[str, Tuple[str, ...]]
    item_index: Mapping[str, Tuple[str, ...]]

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "ReviewSet":
        ordered = tuple(sorted(interactions, key=lambda it: (it.user_id, it.order_index)))
        by_user: Dict[str, List[str]] = defaultdict(list)
        by_item: Dict[str, List[str]] = defaultdict(list)
        for it in ordered:
            by_user[it.user_id].append(it.item_id)
            by_item[it.item_id].append(it.user_id)
        return cls(
            interactions=ordered,
            user_index={u: tuple(items) for u, items in by_user.items()},
            item_index={i: tuple(users) for i, users in by_item.items()},
        )

    def __len__(self) -> int:
        return len(self.interactions)

    @property
    def users(self) -> List[str]:
        return sorted(self.user_index)

    @property
    def items(self) -> List[str]:
        return sorted(self.item_index)

    def history(self, user_id: str) -> List[Interaction]:
        return [it for it in self.interactions if it.user_id == user_id]

    def by_user(self) -> Dict[str, List[Interaction]]:
        grouped: Dict[str, List[Interaction]] = defaultdict(list)
        for it in self.interactions:
            grouped[it.user_id].append(it)
        return dict(grouped)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_reviews: int
    avg_reviews_per_user: float
    density_percent: float

    def display(self) -> Dict[str, Any]:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "reviews": self.n_reviews,
            "avg": round(self.avg_reviews_per_user, 1),
            "density_percent": round(self.density_percent, 4),
        }


@dataclass
class SplitSet:
    seq_train: Dict[str, List[str]] = field(default_factory=dict)
    seq_val: Dict[str, str] = field(default_factory=dict)
    seq_test: Dict[str, str] = field(default_factory=dict)
    expl_train: List[Interaction] = field(default_factory=list)
    expl_val: List[Interaction] = field(default_factory=list)
    expl_test: List[Interaction] = field(default_factory=list)
    excluded_users: List[str] = field(default_factory=list)

    @property
    def users(self) -> List[str]:
        return sorted(self.seq_test)

    def full_sequence(self, user_id: str) -> List[str]:
        return self.seq_train[user_id] + [self.seq_val[user_id], self.seq_test[user_id]]


def _parse_record(raw: bytes, path: str, line_no: int) -> Dict[str, Any]:
    try:
        record = orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise ReviewFormatError(path, line_no, f"invalid JSON ({e})")
    if not isinstance(record, dict):
        raise ReviewFormatError(path, line_no, "record is not an object")
    missing = [name for name in REQUIRED_FIELDS if name not in record]
    if missing:
        raise ReviewFormatError(path, line_no, f"missing fields {missing}")
    for name in ("user", "item", "text"):
        if not isinstance(record[name], str):
            raise ReviewFormatError(path, line_no, f"field {name!r} must be a string")
    if isinstance(record["ts"], bool) or not isinstance(record["ts"], int):
        raise ReviewFormatError(path, line_no, "field 'ts' must be an integer")
    if not record["user"] or not record["item"]:
        raise ReviewFormatError(path, line_no, "empty user or item id")
    return record


def load_reviews(path: Union[str, Path], lenient: bool = False) -> ReviewSet:
    """
    Load a JSON-lines review file

    Args:
        path: one {"user", "item", "text", "ts"} record per line
        lenient: skip malformed lines instead of aborting

    Returns:
        ReviewSet with order_index assigned by ascending ts, ties by line order

    Raises:
        CorpusError: file missing
        ReviewFormatError: malformed line (unless lenient)
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"reviews file not found: {path}", code="MISSING_FILE")

    rows: List[Tuple[int, Dict[str, Any]]] = []
    skipped = 0
    for line_no, raw in iter_jsonl(path):
        try:
            rows.append((line_no, _parse_record(raw, str(path), line_no)))
        except ReviewFormatError as e:
            if not lenient:
                raise
            skipped += 1
            logger.warning("Skipping malformed line", path=str(path), line=line_no, reason=str(e))

    triples = Counter((r["user"], r["item"], r["ts"]) for _, r in rows)
    duplicates = {t: n for t, n in triples.items() if n > 1}
    for (user, item, ts), n in sorted(duplicates.items()):
        logger.warning("Duplicate interaction kept", user=user, item=item, ts=ts, copies=n)

    per_user: Dict[str, List[Tuple[int, int, Dict[str, Any]]]] = defaultdict(list)
    for line_no, record in rows:
        per_user[record["user"]].append((record["ts"], line_no, record))

    interactions = []
    for user, entries in per_user.items():
        # stable: equal timestamps keep file order
        entries.sort(key=lambda e: (e[0], e[1]))
        for order_index, (ts, _, record) in enumerate(entries):
            text = record["text"]
            interactions.append(
                Interaction(
                    user_id=user,
                    item_id=record["item"],
                    review_text=text,
                    order_index=order_index,
                    ts=ts,
                    empty_review=not text.strip(),
                )
            )

    rs = ReviewSet.from_interactions(interactions)
    logger.info(
        "Reviews loaded",
        path=str(path),
        interactions=len(rs),
        users=len(rs.user_index),
        items=len(rs.item_index),
        duplicates=len(duplicates),
        skipped=skipped,
    )
    return rs


def dump_reviews(rs: ReviewSet, path: Union[str, Path]) -> int:
    """Write the canonical record format; load_reviews of the result equals rs"""
    records = sorted(rs.interactions, key=lambda it: (it.user_id, it.order_index))
    return write_jsonl(path, (it.to_record() for it in records))


def stats_from_counts(n_users: int, n_items: int, n_reviews: int) -> DatasetStats:
    if n_users <= 0 or n_items <= 0:
        raise CorpusError("statistics need at least one user and one item", code="EMPTY")
    return DatasetStats(
        n_users=n_users,
        n_items=n_items,
        n_reviews=n_reviews,
        avg_reviews_per_user=n_reviews / n_users,
        density_percent=100.0 * n_reviews / (n_users * n_items),
    )


def compute_stats(rs: ReviewSet) -> DatasetStats:
    if len(rs) == 0:
        raise CorpusError("cannot compute statistics of an empty ReviewSet", code="EMPTY")
    return stats_from_counts(len(rs.user_index), len(rs.item_index), len(rs))


def split_leave_one_out(rs: ReviewSet, min_len: int = 3) -> SplitSet:
    """
    Leave-one-out split: last item is the test label, second-to-last validation

    Users with fewer than min_len interactions are excluded and reported.
    """
    if min_len < 3:
        raise CorpusError(f"min_len must be >= 3, got {min_len}", code="BAD_MIN_LEN")

    splits = SplitSet()
    for user in sorted(rs.user_index):
        sequence = list(rs.user_index[user])
        if len(sequence) < min_len:
            splits.excluded_users.append(user)
            continue
        splits.seq_train[user] = sequence[:-2]
        splits.seq_val[user] = sequence[-2]
        splits.seq_test[user] = sequence[-1]

    if splits.excluded_users:
        logger.info("Users excluded by min_len", min_len=min_len, excluded=len(splits.excluded_users))
    if not splits.seq_test:
        raise NoTrainableUsersError(f"no trainable users (all {len(rs.user_index)} below min_len={min_len})")

    logger.info("Leave-one-out split complete", users=len(splits.seq_test))
    return splits


def explanation_sizes(n: int) -> Tuple[int, int, int]:
    """8:1:1 sizes: validation and test get floor(n/10) each, train the rest"""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def split_explanation(rs: ReviewSet, seed: int) -> Tuple[List[Interaction], List[Interaction], List[Interaction]]:
    """Seeded uniform 8:1:1 partition of interactions for EG and RG"""
    if len(rs) == 0:
        raise CorpusError("cannot split an empty ReviewSet", code="EMPTY")
    n_train, n_val, _ = explanation_sizes(len(rs))
    order = np.random.default_rng(seed).permutation(len(rs))
    shuffled = [rs.interactions[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return train, val, test


def build_splits(rs: ReviewSet, min_len: int = 3, seed: int = 0) -> SplitSet:
    splits = split_leave_one_out(rs, min_len)
    splits.expl_train, splits.expl_val, splits.expl_test = split_explanation(rs, seed)
    logger.info(
        "Explanation split complete",
        train=len(splits.expl_train),
        val=len(splits.expl_val),
        test=len(splits.expl_test),
    )
    return splits


def _split_records(rs: ReviewSet, splits: SplitSet) -> Iterable[Dict[str, Any]]:
    for user, interactions in sorted(rs.by_user().items()):
        if user not in splits.seq_test:
            continue
        last = len(interactions) - 1
        for it in interactions:
            if it.order_index == last:
                name = "seq_test"
            elif it.order_index == last - 1:
                name = "seq_val"
            else:
                name = "seq_train"
            yield {**it.to_record(), "split": name}
    for name in EXPL_SPLITS:
        for it in getattr(splits, name):
            yield {**it.to_record(), "split": name}


def write_splits(rs: ReviewSet, splits: SplitSet, path: Union[str, Path]) -> int:
    count = write_jsonl(path, _split_records(rs, splits))
    logger.info("Splits written", path=str(path), records=count)
    return count


def load_splits(path: Union[str, Path]) -> Tuple[ReviewSet, SplitSet]:
    """Read splits written by write_splits back into a ReviewSet and SplitSet"""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"splits file not found: {path}", code="MISSING_FILE")

    seq_rows: Dict[str, List[Tuple[int, Dict[str, Any]]]] = defaultdict(list)
    expl_rows: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
    for line_no, raw in iter_jsonl(path):
        record = orjson.loads(raw)
        name = record.get("split")
        if name in SEQ_SPLITS:
            seq_rows[record["user"]].append((line_no, record))
        elif name in EXPL_SPLITS:
            expl_rows[name].append(record)
        else:
            raise ReviewFormatError(str(path), line_no, f"unknown split {name!r}")

    # every interaction appears once in the explanation family
    all_records = [r for name in EXPL_SPLITS for r in expl_rows[name]]
    per_user: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
    for record in all_records:
        per_user[record["user"]].append(record)

    lookup: Dict[Tuple[str, str, int, str], List[Interaction]] = defaultdict(list)
    built = []
    for user, records in per_user.items():
        records = sorted(records, key=lambda r: r["ts"])
        # ties resolved by the seq family's file order when available
        seq_order = {(r["item"], r["ts"], r["text"]): n for n, (_, r) in enumerate(seq_rows.get(user, []))}
        records.sort(key=lambda r: (r["ts"], seq_order.get((r["item"], r["ts"], r["text"]), 0)))
        for order_index, record in enumerate(records):
            it = Interaction(
                user_id=user,
                item_id=record["item"],
                review_text=record["text"],
                order_index=order_index,
                ts=record["ts"],
                empty_review=not record["text"].strip(),
            )
            built.append(it)
            lookup[(user, record["item"], record["ts"], record["text"])].append(it)

    rs = ReviewSet.from_interactions(built)
    splits = SplitSet()
    for user, rows in seq_rows.items():
        for _, record in rows:
            name = record["split"]
            if name == "seq_train":
                splits.seq_train.setdefault(user, []).append(record["item"])
            elif name == "seq_val":
                splits.seq_val[user] = record["item"]
            else:
                splits.seq_test[user] = record["item"]
        splits.seq_train.setdefault(user, [])
    splits.excluded_users = sorted(set(rs.user_index) - set(splits.seq_test))

    taken: Dict[Tuple[str, str, int, str], int] = defaultdict(int)
    for name in EXPL_SPLITS:
        target = getattr(splits, name)
        for record in expl_rows[name]:
            key = (record["user"], record["item"], record["ts"], record["text"])
            candidates = lookup[key]
            target.append(candidates[taken[key] % len(candidates)])
            taken[key] += 1

    return rs, splits
