"""
Training Samples
Task-tagged (input, target) pairs for the four tasks, the pools they are
drawn from, ratio-driven mixing into batches, and the fixed evaluation
candidate sets for top-N recommendation.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import structlog

from ..exceptions import TrainingError
from ..utils.jsonl import read_jsonl, write_jsonl
from .corpus import Interaction, SplitSet
from .distiller import Quadruplet
from .textcodec import EntityMap, Task, TokenSequence, Vocab, encode_rendered, encode_target, render_task_input

logger = structlog.get_logger()

# sampling groups, in ratio order EG:RG:SR:TR
GROUPS = ("eg", "rg", "sr", "tr")


@dataclass(frozen=True)
class TrainingSample:
    task: Task
    input: TokenSequence
    target: Tuple[int, ...]
    user_id: str
    item_ids: Tuple[str, ...] = ()


def sample_segment(n: int, rng: np.random.Generator) -> Tuple[int, int]:
    """
    Uniform draw over contiguous segments [j..k] with 0 <= j < k < n

    Pairs are ranked by k then j, so the r-th pair has k = the largest value
    with k(k-1)/2 <= r.
    """
    if n < 2:
        raise TrainingError(f"history of length {n} has no segment", code="HISTORY_TOO_SHORT")
    r = int(rng.integers(n * (n - 1) // 2))
    k = (1 + math.isqrt(1 + 8 * r)) // 2
    while k * (k - 1) // 2 > r:
        k -= 1
    while (k + 1) * k // 2 <= r:
        k += 1
    return r - k * (k - 1) // 2, k


def draw_negatives(universe: Sequence[str], interacted: Set[str], n: int, rng: np.random.Generator) -> List[str]:
    """n items drawn uniformly without replacement from universe minus interacted"""
    pool = sorted(set(universe) - interacted)
    if len(pool) < n:
        raise TrainingError(f"only {len(pool)} non-interacted items, {n} negatives needed",
                            code="INSUFFICIENT_UNIVERSE")
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks]


def candidate_list(positive: str, negatives: Sequence[str], rng: np.random.Generator) -> List[str]:
    items = list(negatives) + [positive]
    return [items[i] for i in rng.permutation(len(items))]


class SampleBuilder:
    """Renders and encodes samples against one vocabulary and entity map"""

    def __init__(self, vocab: Vocab, entities: EntityMap, max_history: int = 20):
        self.vocab = vocab
        self.entities = entities
        self.max_history = max_history

    def _sample(self, task: Task, target_text: str, user: str, items: Sequence[str] = (), **fields) -> TrainingSample:
        rendered = render_task_input(task, self.entities, user=user, max_history=self.max_history, **fields)
        return TrainingSample(
            task=task,
            input=encode_rendered(rendered, self.vocab),
            target=tuple(encode_target(target_text, self.vocab)),
            user_id=user,
            item_ids=tuple(items),
        )

    def sequential(self, user: str, history: Sequence[str], target: str) -> TrainingSample:
        return self._sample(Task.SR, self.entities.item_surface(target), user,
                            items=tuple(history) + (target,), history=history)

    def make_sr_sample(self, user: str, history: Sequence[str], rng: np.random.Generator) -> TrainingSample:
        """Random contiguous segment: all but its last item in, the last item out"""
        j, k = sample_segment(len(history), rng)
        return self.sequential(user, history[j:k], history[k])

    def topn(self, user: str, candidates: Sequence[str], positive: str) -> TrainingSample:
        return self._sample(Task.TR, self.entities.item_surface(positive), user,
                            items=tuple(candidates), candidates=candidates)

    def make_tr_sample(self, user: str, positive: str, universe: Sequence[str], interacted: Set[str],
                       rng: np.random.Generator, n_negatives: int = 99) -> TrainingSample:
        negatives = draw_negatives(universe, interacted | {positive}, n_negatives, rng)
        return self.topn(user, candidate_list(positive, negatives, rng), positive)

    def make_rationale_samples(self, q: Quadruplet, use_preference: bool = True,
                               use_attribute: bool = True) -> List[TrainingSample]:
        samples = []
        if use_preference:
            samples.append(self._sample(Task.RG_PREF, q.preference, q.user_id, items=(q.item_id,)))
        if use_attribute:
            samples.append(self._sample(Task.RG_ATTR, q.attribute, q.user_id, items=(q.item_id,), item=q.item_id))
        return samples

    def make_eg_sample(self, it: Interaction) -> Optional[TrainingSample]:
        """None when the review is empty"""
        if not it.review_text.strip():
            return None
        return self._sample(Task.EG, it.review_text, it.user_id, items=(it.item_id,), item=it.item_id)


@dataclass
class SamplePool:
    """
    Entries of one sampling group

    Draws walk the entries in a fresh random order on every pass; `make`
    turns an entry into a sample (identity for static pools, a fresh build
    for generative ones).
    """

    name: str
    entries: List = field(default_factory=list)
    make: Optional[Callable[[object, np.random.Generator], object]] = None
    _order: List[int] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def draw(self, rng: np.random.Generator):
        if not self.entries:
            raise TrainingError(f"sample pool {self.name!r} is empty", code="EMPTY_POOL")
        if not self._order:
            self._order = list(rng.permutation(len(self.entries)))[::-1]
        entry = self.entries[self._order.pop()]
        return self.make(entry, rng) if self.make is not None else entry


def static_pool(name: str, samples: Sequence) -> SamplePool:
    return SamplePool(name=name, entries=list(samples))


def sample_epoch(pools: Mapping[str, SamplePool], ratios: Sequence[int], steps: int, batch_size: int,
                 rng: np.random.Generator) -> Iterator[List]:
    """
    Yield `steps` mixed-task batches

    The group of every sample is drawn from the categorical distribution
    proportional to ratios (EG:RG:SR:TR); groups missing from `pools` are
    left out and the remaining ratios renormalised.
    """
    names = [g for g in GROUPS if g in pools]
    if not names:
        raise TrainingError("no sample pools", code="EMPTY_POOL")
    weights = np.array([ratios[GROUPS.index(g)] for g in names], dtype=np.float64)
    for name in names:
        if len(pools[name]) == 0:
            raise TrainingError(f"sample pool {name!r} is empty but its ratio is positive", code="EMPTY_POOL")
    probs = weights / weights.sum()
    for _ in range(steps):
        picks = rng.choice(len(names), size=batch_size, p=probs)
        yield [pools[names[p]].draw(rng) for p in picks]


def held_out_pairs(splits: SplitSet) -> Set[Tuple[str, str]]:
    """(user, item) pairs of every sequential validation and test interaction"""
    return {(u, splits.seq_val[u]) for u in splits.users} | {(u, splits.seq_test[u]) for u in splits.users}


def build_training_pools(builder: SampleBuilder, splits: SplitSet, quads: Sequence[Quadruplet],
                         universe: Sequence[str], n_negatives: int, use_preference: bool = True,
                         use_attribute: bool = True) -> Dict[str, SamplePool]:
    """
    Training pools from the training side of each split only

    SR and TR pools rebuild samples on every draw (fresh segment, fresh
    negatives); EG and RG pools are fixed. The explanation split is drawn
    over all interactions, so EG and RG entries whose (user, item) pair is a
    sequential validation or test interaction are dropped.
    """
    universe = sorted(universe)
    interacted = {u: set(splits.full_sequence(u)) for u in splits.users}
    held_out = held_out_pairs(splits)

    expl_train = [it for it in splits.expl_train if (it.user_id, it.item_id) not in held_out]
    eg = [s for s in (builder.make_eg_sample(it) for it in expl_train) if s is not None]
    pools = {"eg": static_pool("eg", eg)}

    if use_preference or use_attribute:
        train_pairs = {(it.user_id, it.item_id) for it in expl_train}
        rg = []
        for q in quads:
            if (q.user_id, q.item_id) in train_pairs:
                rg.extend(builder.make_rationale_samples(q, use_preference, use_attribute))
        pools["rg"] = static_pool("rg", rg)

    sr_users = [u for u in splits.users if len(splits.seq_train[u]) >= 2]
    pools["sr"] = SamplePool(
        name="sr",
        entries=sr_users,
        make=lambda user, rng: builder.make_sr_sample(user, splits.seq_train[user], rng),
    )
    tr_entries = [(u, item) for u in splits.users for item in splits.seq_train[u]]
    pools["tr"] = SamplePool(
        name="tr",
        entries=tr_entries,
        make=lambda entry, rng: builder.make_tr_sample(entry[0], entry[1], universe, interacted[entry[0]], rng,
                                                       n_negatives),
    )
    logger.info("Training pools built", held_out_dropped=len(splits.expl_train) - len(expl_train),
                **{name: len(pool) for name, pool in pools.items()})
    return pools


CandidateSets = Dict[str, Dict[str, List[str]]]


def build_eval_candidates(splits: SplitSet, universe: Sequence[str], n_negatives: int, seed: int) -> CandidateSets:
    """Fixed positive-plus-negatives candidate lists per user for val and test"""
    rng = np.random.default_rng(seed)
    universe = sorted(universe)
    candidates: CandidateSets = {}
    for user in splits.users:
        interacted = set(splits.full_sequence(user))
        candidates[user] = {}
        for split, positive in (("val", splits.seq_val[user]), ("test", splits.seq_test[user])):
            negatives = draw_negatives(universe, interacted, n_negatives, rng)
            candidates[user][split] = candidate_list(positive, negatives, rng)
    return candidates


def write_candidates(candidates: CandidateSets, path: Union[str, Path]) -> int:
    records = (
        {"user": user, "split": split, "items": items}
        for user in sorted(candidates)
        for split, items in sorted(candidates[user].items())
    )
    return write_jsonl(path, records)


def load_candidates(path: Union[str, Path]) -> CandidateSets:
    candidates: CandidateSets = {}
    for record in read_jsonl(path):
        candidates.setdefault(record["user"], {})[record["split"]] = list(record["items"])
    return candidates


def build_eval_samples(builder: SampleBuilder, splits: SplitSet, quads: Sequence[Quadruplet],
                       candidates: CandidateSets, split: str = "val", use_preference: bool = True,
                       use_attribute: bool = True) -> Dict[str, List[TrainingSample]]:
    """
    Held-out samples per group for loss evaluation

    SR: history up to the label; TR: the fixed candidate list; EG/RG: the
    matching explanation partition.
    """
    if split not in ("val", "test"):
        raise TrainingError(f"unknown evaluation split {split!r}", code="BAD_SPLIT")
    interactions = splits.expl_val if split == "val" else splits.expl_test
    pairs = {(it.user_id, it.item_id) for it in interactions}

    groups: Dict[str, List[TrainingSample]] = {"eg": [], "rg": [], "sr": [], "tr": []}
    groups["eg"] = [s for s in (builder.make_eg_sample(it) for it in interactions) if s is not None]
    if use_preference or use_attribute:
        for q in quads:
            if (q.user_id, q.item_id) in pairs:
                groups["rg"].extend(builder.make_rationale_samples(q, use_preference, use_attribute))
    else:
        del groups["rg"]
    for user in splits.users:
        if split == "val":
            history, label = splits.seq_train[user], splits.seq_val[user]
        else:
            history, label = splits.seq_train[user] + [splits.seq_val[user]], splits.seq_test[user]
        if history:
            groups["sr"].append(builder.sequential(user, history, label))
        if user in candidates and split in candidates[user]:
            groups["tr"].append(builder.topn(user, candidates[user][split], label))
    return groups
