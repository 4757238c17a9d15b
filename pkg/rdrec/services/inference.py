"""
Inference
Beam-search generation, trie-constrained decoding over item surface forms,
and ranked-list production for sequential and top-N recommendation.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch
from tqdm import tqdm

from ..config import BeamConfig
from ..exceptions import InferenceError
from ..utils.jsonl import read_jsonl, write_jsonl
from .corpus import SplitSet
from .model import Batch, RDRecModel, score_sequences
from .samples import CandidateSets, candidate_list, draw_negatives
from .textcodec import (
    EOS,
    PAD,
    EntityMap,
    Task,
    TokenSequence,
    Vocab,
    decode,
    encode,
    encode_rendered,
    render_task_input,
)

logger = structlog.get_logger()

AllowedFn = Callable[[Tuple[int, ...]], Sequence[int]]


@dataclass
class _TrieNode:
    children: Dict[int, "_TrieNode"] = field(default_factory=dict)
    item_id: Optional[str] = None


class PrefixTrie:
    """
    Trie over EOS-terminated token sequences of allowed items

    The EOS terminator keeps every item on its own root-to-leaf path even
    when one surface form is a prefix of another (item_1 / item_12).
    """

    def __init__(self):
        self.root = _TrieNode()
        self.size = 0
        self.depth = 0

    def add(self, token_ids: Sequence[int], item_id: str) -> None:
        path = list(token_ids) + [EOS]
        node = self.root
        for token in path:
            node = node.children.setdefault(token, _TrieNode())
        if node.item_id is not None:
            raise InferenceError(f"items {node.item_id!r} and {item_id!r} share a token sequence", code="TRIE_CLASH")
        node.item_id = item_id
        self.size += 1
        self.depth = max(self.depth, len(path))

    @classmethod
    def for_items(cls, items: Sequence[str], entities: EntityMap, vocab: Vocab) -> "PrefixTrie":
        trie = cls()
        for item_id in items:
            trie.add(item_token_ids(item_id, entities, vocab), item_id)
        return trie

    def _walk(self, prefix: Sequence[int]) -> Optional[_TrieNode]:
        node = self.root
        for token in prefix:
            node = node.children.get(token)
            if node is None:
                return None
        return node

    def next_tokens(self, prefix: Sequence[int]) -> List[int]:
        node = self._walk(prefix)
        return sorted(node.children) if node is not None else []

    def item_at(self, path: Sequence[int]) -> Optional[str]:
        node = self._walk(path)
        return node.item_id if node is not None else None

    def __len__(self) -> int:
        return self.size


def item_token_ids(item_id: str, entities: EntityMap, vocab: Vocab) -> List[int]:
    return list(encode(entities.item_surface(item_id), vocab).ids)


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    score: float
    complete: bool


@dataclass
class BeamResult:
    hypotheses: List[Hypothesis]

    @property
    def incomplete(self) -> bool:
        return bool(self.hypotheses) and not self.hypotheses[0].complete

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _final_score(hyp: Hypothesis, length_penalty: float) -> float:
    if length_penalty > 0:
        return hyp.score / (len(hyp.tokens) ** length_penalty)
    return hyp.score


@torch.no_grad()
def beam_search(model: RDRecModel, seq: TokenSequence, task: Task, cfg: BeamConfig,
                allowed: Optional[AllowedFn] = None, max_len: Optional[int] = None) -> BeamResult:
    """
    Beam search over the decoder

    At every step the `width` best extensions over all live beams are kept;
    extensions ending in EOS move to the completed set. Scores are summed
    token log-probabilities, divided by length**length_penalty only when the
    penalty is non-zero. `allowed` restricts the tokens considered at each
    prefix without renormalising.

    Returns:
        up to `width` hypotheses, best first; when nothing completes the best
        partial sequences are returned with complete=False
    """
    if cfg.beam_width < 1:
        raise InferenceError("beam width must be >= 1", code="BAD_WIDTH")
    width = cfg.beam_width
    max_len = max_len or cfg.max_len
    model.eval()

    batch = Batch.build([seq], [task.index], [[EOS]])
    memory, memory_valid = model.encode(batch)

    beams: List[Hypothesis] = [Hypothesis((), 0.0, False)]
    completed: List[Hypothesis] = []
    for _ in range(max_len):
        if not beams:
            break
        n = len(beams)
        decoder_input = torch.tensor([[PAD] + list(b.tokens) for b in beams], dtype=torch.long)
        logits = model.decode(memory.expand(n, -1, -1), memory_valid.expand(n, -1), decoder_input)
        log_probs = torch.log_softmax(logits[:, -1, :].double(), dim=-1)
        log_probs[:, PAD] = float("-inf")
        if allowed is not None:
            mask = torch.ones_like(log_probs, dtype=torch.bool)
            for row, beam in enumerate(beams):
                tokens = list(allowed(beam.tokens))
                if tokens:
                    mask[row, tokens] = False
            log_probs = log_probs.masked_fill(mask, float("-inf"))

        totals = torch.tensor([b.score for b in beams], dtype=torch.float64).unsqueeze(1) + log_probs
        flat = totals.flatten()
        # stable descending sort: ties keep (beam order, token id) order
        order = torch.sort(flat, descending=True, stable=True).indices[:width]
        vocab_size = log_probs.size(1)

        next_beams: List[Hypothesis] = []
        for index in order.tolist():
            score = float(flat[index])
            if score == float("-inf"):
                break
            beam, token = divmod(index, vocab_size)
            tokens = beams[beam].tokens + (token,)
            if token == EOS:
                completed.append(Hypothesis(tokens, score, True))
            else:
                next_beams.append(Hypothesis(tokens, score, False))
        beams = next_beams

        if cfg.length_penalty == 0 and len(completed) >= width and beams:
            # log-probs only decrease, so no live beam can overtake the kept set
            kth = sorted((h.score for h in completed), reverse=True)[width - 1]
            if beams[0].score < kth:
                break

    pool = completed if completed else beams
    ranked = sorted(pool, key=lambda h: (-_final_score(h, cfg.length_penalty), h.tokens))[:width]
    if not completed:
        logger.warning("No hypothesis completed within max_len", max_len=max_len, task=task.value)
    return BeamResult(hypotheses=ranked)


@dataclass(frozen=True)
class RankedList:
    items: Tuple[str, ...]
    scores: Tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise InferenceError("items and scores differ in length", code="BAD_RANKING")
        if len(set(self.items)) != len(self.items):
            raise InferenceError("ranked list has duplicate items", code="BAD_RANKING")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise InferenceError("ranked list scores must be non-increasing", code="BAD_RANKING")

    def __len__(self) -> int:
        return len(self.items)

    def rank_of(self, item_id: str) -> Optional[int]:
        """1-based rank, None when absent"""
        try:
            return self.items.index(item_id) + 1
        except ValueError:
            return None

    def top(self, k: int) -> "RankedList":
        return RankedList(self.items[:k], self.scores[:k])

    def to_record(self, user: str) -> Dict[str, object]:
        return {"user": user, "items": list(self.items), "scores": list(self.scores)}


def constrained_beam_search(model: RDRecModel, seq: TokenSequence, task: Task, cfg: BeamConfig,
                            trie: PrefixTrie) -> RankedList:
    """Beam search restricted to trie continuations, mapped back to item ids"""
    if len(trie) == 0:
        raise InferenceError("constraint trie is empty", code="EMPTY_UNIVERSE")
    result = beam_search(model, seq, task, cfg, allowed=trie.next_tokens, max_len=trie.depth)
    items, scores = [], []
    for hyp in result.hypotheses:
        item_id = trie.item_at(hyp.tokens) if hyp.complete else None
        if item_id is None:
            raise InferenceError(f"decoded path {hyp.tokens} is not an allowed item", code="CONSTRAINT_VIOLATION")
        items.append(item_id)
        scores.append(_final_score(hyp, cfg.length_penalty))
    return RankedList(tuple(items), tuple(scores))


class Recommender:
    """Inference front end over one trained model, vocabulary and entity map"""

    def __init__(self, model: RDRecModel, vocab: Vocab, entities: EntityMap, cfg: BeamConfig,
                 max_history: int = 20):
        self.model = model.eval()
        self.vocab = vocab
        self.entities = entities
        self.cfg = cfg
        self.max_history = max_history
        self._tries: Dict[Tuple[str, ...], PrefixTrie] = {}

    def trie(self, items: Sequence[str]) -> PrefixTrie:
        key = tuple(sorted(items))
        if key not in self._tries:
            self._tries[key] = PrefixTrie.for_items(key, self.entities, self.vocab)
        return self._tries[key]

    def sequential_input(self, user: str, history: Sequence[str]) -> TokenSequence:
        rendered = render_task_input(Task.SR, self.entities, user=user, history=history, max_history=self.max_history)
        return encode_rendered(rendered, self.vocab)

    def topn_input(self, user: str, candidates: Sequence[str]) -> TokenSequence:
        return encode_rendered(render_task_input(Task.TR, self.entities, user=user, candidates=candidates), self.vocab)

    def recommend_sequential(self, user: str, history: Sequence[str], universe: Sequence[str]) -> RankedList:
        if not history:
            raise InferenceError(f"user {user} has an empty history", code="EMPTY_HISTORY")
        if not universe:
            raise InferenceError("item universe is empty", code="EMPTY_UNIVERSE")
        return constrained_beam_search(self.model, self.sequential_input(user, history), Task.SR, self.cfg,
                                       self.trie(universe))

    def recommend_topn(self, user: str, candidates: Sequence[str], expected: int = 100,
                       strict: bool = False) -> RankedList:
        if len(candidates) != expected:
            if strict:
                raise InferenceError(f"user {user} has {len(candidates)} candidates, expected {expected}",
                                     code="CANDIDATE_COUNT")
            logger.warning("Unexpected candidate count", user=user, candidates=len(candidates), expected=expected)
        return constrained_beam_search(self.model, self.topn_input(user, candidates), Task.TR, self.cfg,
                                       self.trie(candidates))

    def score_items(self, seq: TokenSequence, task: Task, items: Sequence[str]) -> Dict[str, float]:
        """Forced-decoding log-probability of each item's EOS-terminated tokens"""
        targets = [item_token_ids(i, self.entities, self.vocab) + [EOS] for i in items]
        batch = Batch.build([seq] * len(items), [task.index] * len(items), targets)
        scores = score_sequences(self.model, batch)
        return {item: float(s) for item, s in zip(items, scores.tolist())}

    def generate_text(self, task: Task, user: Optional[str] = None, item: Optional[str] = None) -> str:
        """Unconstrained beam search decoded to text (EG and RG tasks)"""
        rendered = render_task_input(task, self.entities, user=user, item=item)
        result = beam_search(self.model, encode_rendered(rendered, self.vocab), task, self.cfg)
        return decode(result.best.tokens, self.vocab)


def recommend_sequential(recommender: Recommender, user: str, history: Sequence[str],
                         universe: Sequence[str]) -> RankedList:
    return recommender.recommend_sequential(user, history, universe)


def recommend_topn(recommender: Recommender, user: str, candidates: Sequence[str], expected: int = 100,
                   strict: bool = False) -> RankedList:
    return recommender.recommend_topn(user, candidates, expected, strict)


def recommend_all(recommender: Recommender, splits: SplitSet, task: Task, universe: Sequence[str],
                  candidates: Optional[CandidateSets] = None, split: str = "test",
                  sr_candidates: Optional[int] = None, n_negatives: int = 99, strict: bool = False,
                  seed: int = 0, progress: bool = False) -> Dict[str, RankedList]:
    """
    Ranked lists for every evaluated user

    SR ranks the full universe unless sr_candidates asks for that many
    sampled negatives plus the positive; TR ranks the fixed candidate sets.
    """
    rng = np.random.default_rng(seed)
    rankings: Dict[str, RankedList] = {}
    for user in tqdm(splits.users, desc=f"recommend {task.value}", disable=not progress):
        if split == "test":
            history, label = splits.seq_train[user] + [splits.seq_val[user]], splits.seq_test[user]
        else:
            history, label = splits.seq_train[user], splits.seq_val[user]
        if task is Task.SR:
            pool = universe
            if sr_candidates is not None:
                negatives = draw_negatives(universe, set(splits.full_sequence(user)), sr_candidates, rng)
                pool = candidate_list(label, negatives, rng)
            if not history:
                logger.warning("User skipped, empty history", user=user)
                continue
            rankings[user] = recommender.recommend_sequential(user, history, pool)
        elif task is Task.TR:
            if candidates is None or user not in candidates:
                raise InferenceError(f"no candidate set for user {user}", code="MISSING_CANDIDATES")
            rankings[user] = recommender.recommend_topn(user, candidates[user][split], n_negatives + 1, strict)
        else:
            raise InferenceError(f"task {task.value} does not produce rankings", code="BAD_TASK")
    logger.info("Rankings complete", task=task.value, split=split, users=len(rankings))
    return rankings


def write_rankings(rankings: Dict[str, RankedList], path: Union[str, Path], k: Optional[int] = None) -> int:
    return write_jsonl(path, ((rankings[u].top(k) if k else rankings[u]).to_record(u) for u in sorted(rankings)))


def load_rankings(path: Union[str, Path]) -> Dict[str, RankedList]:
    path = Path(path)
    if not path.exists():
        raise InferenceError(f"rankings file not found: {path}", code="MISSING_FILE")
    return {r["user"]: RankedList(tuple(r["items"]), tuple(float(s) for s in r["scores"])) for r in read_jsonl(path)}
