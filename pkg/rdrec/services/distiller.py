"""
Rationale Distiller
Stage one: render the distillation prompt for every review, query the large-LM
backend, and parse each response into a (user, item, preference, attribute)
quadruplet.
"""

import re
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import structlog
from tqdm import tqdm

from ..config import BackendConfig
from ..exceptions import DistillError
from ..utils.jsonl import read_jsonl, write_jsonl
from .corpus import Interaction, ReviewSet
from .llm_backend import LLMBackend, ResponseCache, make_backend

logger = structlog.get_logger()

PROMPT_TEMPLATE = (
    "A user bought an item and said '{review}'. "
    "Use two sentences to explain the user's preference and the item's attributes, respectively."
)

PREFERENCE_PREFIX = re.compile(r"^the user prefers\b", re.IGNORECASE)
ATTRIBUTE_PREFIX = re.compile(r"^the item(?:'|’)s attributes\b", re.IGNORECASE)

# '.', '!' or '?' followed by whitespace or end of text
_SENTENCE_END = re.compile(r"(?<=[.!?])(?:\s+|$)")
_TERMINAL = (".", "!", "?")


class RationaleFlag(str, Enum):
    SHORT_REVIEW = "SHORT_REVIEW"
    PARSE_FALLBACK = "PARSE_FALLBACK"


@dataclass(frozen=True)
class DistillPrompt:
    text: str
    review: str


@dataclass(frozen=True)
class Rationale:
    preference: str
    attribute: str
    flags: FrozenSet[RationaleFlag] = frozenset()


@dataclass(frozen=True)
class Quadruplet:
    user_id: str
    item_id: str
    rationale: Rationale

    @property
    def preference(self) -> str:
        return self.rationale.preference

    @property
    def attribute(self) -> str:
        return self.rationale.attribute

    def to_record(self) -> Dict[str, object]:
        return {
            "user": self.user_id,
            "item": self.item_id,
            "preference": self.rationale.preference,
            "attribute": self.rationale.attribute,
            "flags": sorted(flag.value for flag in self.rationale.flags),
        }

    @classmethod
    def from_record(cls, record: Dict[str, object]) -> "Quadruplet":
        return cls(
            user_id=str(record["user"]),
            item_id=str(record["item"]),
            rationale=Rationale(
                preference=str(record["preference"]),
                attribute=str(record["attribute"]),
                flags=frozenset(RationaleFlag(flag) for flag in record.get("flags", [])),
            ),
        )


@dataclass
class DistillSummary:
    total: int = 0
    ok: int = 0
    skipped: Dict[str, int] = field(default_factory=dict)
    fallback: int = 0
    short_review: int = 0
    failed: int = 0
    cache_hits: int = 0
    backend_calls: int = 0
    failure_threshold: float = 0.5

    @property
    def skipped_total(self) -> int:
        return sum(self.skipped.values())

    @property
    def failure_ratio(self) -> float:
        return self.failed / self.total if self.total else 0.0

    @property
    def exit_code(self) -> int:
        return 1 if self.failure_ratio > self.failure_threshold else 0

    def as_dict(self) -> Dict[str, object]:
        return {
            "total": self.total,
            "ok": self.ok,
            "skipped": self.skipped_total,
            "skipped_by_code": dict(sorted(self.skipped.items())),
            "fallback": self.fallback,
            "short_review": self.short_review,
            "failed": self.failed,
            "failure_ratio": round(self.failure_ratio, 4),
            "cache_hits": self.cache_hits,
            "backend_calls": self.backend_calls,
        }


@dataclass
class DistillResult:
    quadruplets: List[Quadruplet]
    summary: DistillSummary


def build_prompt(review_text: str) -> DistillPrompt:
    """Render the distillation template with the review substituted verbatim"""
    if not review_text.strip():
        raise DistillError("review is empty", code="EMPTY_REVIEW")
    # str.replace keeps braces inside the review untouched
    return DistillPrompt(text=PROMPT_TEMPLATE.replace("{review}", review_text), review=review_text)


def split_sentences(text: str) -> List[str]:
    """Split on terminal punctuation followed by whitespace or end of text"""
    parts = [part.strip() for part in _SENTENCE_END.split(text.strip())]
    return [part for part in parts if part and any(ch.isalnum() for ch in part)]


def _terminate(sentence: str) -> str:
    return sentence if sentence.endswith(_TERMINAL) else sentence + "."


def parse_rationale(response_text: str, review_len_tokens: int, short_review_tokens: int = 5) -> Rationale:
    """
    Parse an LLM response into preference and attribute sentences

    Primary rule: the first sentence starting with "The user prefers" is the
    preference, the first starting with "The item's attributes" the attribute.
    Otherwise the first two sentences are used and PARSE_FALLBACK is flagged.

    Raises:
        DistillError(UNPARSEABLE): fewer than two sentences
    """
    sentences = split_sentences(response_text or "")
    if len(sentences) < 2:
        raise DistillError(f"expected two sentences, found {len(sentences)}", code="UNPARSEABLE")

    flags = set()
    if review_len_tokens <= short_review_tokens:
        flags.add(RationaleFlag.SHORT_REVIEW)

    preference = next((s for s in sentences if PREFERENCE_PREFIX.match(s)), None)
    attribute = next((s for s in sentences if ATTRIBUTE_PREFIX.match(s)), None)
    if preference is None or attribute is None:
        preference, attribute = sentences[0], sentences[1]
        flags.add(RationaleFlag.PARSE_FALLBACK)

    return Rationale(preference=_terminate(preference), attribute=_terminate(attribute), flags=frozenset(flags))


class Distiller:
    """
    Batch distillation over a ReviewSet

    Up to max_concurrency requests are in flight; the cache is consulted before
    every backend call, and the quadruplet sink is guarded by a lock.
    """

    def __init__(self, cfg: BackendConfig, backend: Optional[LLMBackend] = None,
                 cache: Optional[ResponseCache] = None):
        self.cfg = cfg
        self.backend = backend if backend is not None else make_backend(cfg)
        if cache is None and cfg.use_cache:
            cache = ResponseCache(cfg.cache_dir)
        self.cache = cache
        self._sink: Dict[int, Quadruplet] = {}
        self._sink_lock = threading.Lock()
        self._summary_lock = threading.Lock()

    def _respond(self, prompt: DistillPrompt) -> str:
        if self.cache is not None:
            cached = self.cache.get(prompt.text)
            if cached is not None:
                return cached
        text = self.backend.complete(prompt.text)
        if self.cache is not None:
            self.cache.put(prompt.text, text)
        return text

    def _process(self, index: int, it: Interaction, summary: DistillSummary) -> None:
        try:
            prompt = build_prompt(it.review_text)
            response = self._respond(prompt)
            rationale = parse_rationale(response, len(it.review_text.split()), self.cfg.short_review_tokens)
        except DistillError as e:
            with self._summary_lock:
                summary.skipped[e.code] = summary.skipped.get(e.code, 0) + 1
                if e.code == "BACKEND_FAILED":
                    summary.failed += 1
            logger.warning("Interaction skipped", user=it.user_id, item=it.item_id, code=e.code, reason=str(e))
            return
        except Exception as e:
            # unexpected backend errors count as failures, the run continues
            with self._summary_lock:
                summary.skipped["BACKEND_FAILED"] = summary.skipped.get("BACKEND_FAILED", 0) + 1
                summary.failed += 1
            logger.error("Interaction failed", user=it.user_id, item=it.item_id, error=str(e))
            return

        with self._sink_lock:
            self._sink[index] = Quadruplet(it.user_id, it.item_id, rationale)
        with self._summary_lock:
            summary.ok += 1
            if RationaleFlag.PARSE_FALLBACK in rationale.flags:
                summary.fallback += 1
            if RationaleFlag.SHORT_REVIEW in rationale.flags:
                summary.short_review += 1

    def run(self, interactions: Iterable[Interaction], progress: bool = False) -> DistillResult:
        interactions = list(interactions)
        summary = DistillSummary(total=len(interactions), failure_threshold=self.cfg.failure_threshold)
        self._sink = {}
        calls_before = getattr(self.backend, "calls", 0)
        hits_before = self.cache.hits if self.cache is not None else 0

        with ThreadPoolExecutor(max_workers=self.cfg.max_concurrency) as executor:
            futures = [executor.submit(self._process, index, it, summary) for index, it in enumerate(interactions)]
            for future in tqdm(as_completed(futures), total=len(futures), desc="distill", disable=not progress):
                future.result()

        summary.backend_calls = getattr(self.backend, "calls", 0) - calls_before
        summary.cache_hits = (self.cache.hits if self.cache is not None else 0) - hits_before
        # input order, independent of completion order
        quadruplets = [self._sink[index] for index in sorted(self._sink)]
        logger.info("Distillation complete", **summary.as_dict())
        return DistillResult(quadruplets=quadruplets, summary=summary)


def distill(rs: ReviewSet, cfg: BackendConfig, backend: Optional[LLMBackend] = None,
            cache: Optional[ResponseCache] = None, progress: bool = False) -> DistillResult:
    """One quadruplet per successfully parsed interaction, plus a run summary"""
    return Distiller(cfg, backend=backend, cache=cache).run(rs.interactions, progress=progress)


def write_quadruplets(path: Union[str, Path], quadruplets: Iterable[Quadruplet]) -> int:
    return write_jsonl(path, (q.to_record() for q in quadruplets))


def load_quadruplets(path: Union[str, Path]) -> List[Quadruplet]:
    return [Quadruplet.from_record(record) for record in read_jsonl(path)]


def quadruplet_index(quadruplets: Iterable[Quadruplet]) -> Dict[Tuple[str, str], List[Quadruplet]]:
    index: Dict[Tuple[str, str], List[Quadruplet]] = {}
    for q in quadruplets:
        index.setdefault((q.user_id, q.item_id), []).append(q)
    return index
