"""
Text Codec
Word-piece tokenization, vocabulary construction, entity surface forms and
whole-word index construction for model inputs.

Tokens:
    A whitespace word is cut into pieces: letter runs, single digits, "_"
    and single punctuation marks. The first piece of a word carries the
    boundary marker "▁"; words that start with a digit or "_" get a bare
    "▁" token first, so digits always stay single shared tokens and entity
    numbers compose ("user_12" -> ▁user _ 1 2).
"""

import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import structlog

from ..exceptions import CodecError
from ..utils.jsonl import read_json, write_json

logger = structlog.get_logger()

WORD_MARK = "▁"

PAD_TOKEN = "<pad>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
PAD, EOS, UNK = 0, 1, 2

DIGITS = tuple(str(d) for d in range(10))
RESERVED = (PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, WORD_MARK, "_") + DIGITS

_PIECE = re.compile(r"\d|_|[^\W\d_]+|[^\w\s]")
_WORD = re.compile(r"\S+")

Span = Tuple[int, int]


class Task(str, Enum):
    """Task tags; each owns one prompt block in the model"""

    SR = "sr"
    TR = "tr"
    EG = "eg"
    RG_PREF = "rg_pref"
    RG_ATTR = "rg_attr"

    @property
    def index(self) -> int:
        return _TASK_ORDER.index(self)

    @classmethod
    def parse(cls, value: Union[str, "Task"]) -> "Task":
        try:
            return cls(value)
        except ValueError:
            raise CodecError(f"unknown task tag {value!r}", code="UNKNOWN_TASK")


_TASK_ORDER = (Task.SR, Task.TR, Task.EG, Task.RG_PREF, Task.RG_ATTR)

# fixed wording of the discrete templates
TEMPLATE_TEXTS = (
    "user_0 has purchased items item_0 ; predict the next item for the user",
    "which item should be recommended to user_0 among item_0",
    "generate an explanation for user_0 about item_0",
    "Generate user_0's preference",
    "Generate item_0's attribute",
)


@dataclass(frozen=True)
class Vocab:
    tokens: Tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[:len(RESERVED)]) != RESERVED:
            raise CodecError("vocabulary does not start with the reserved tokens", code="BAD_VOCAB")
        if len(set(self.tokens)) != len(self.tokens):
            raise CodecError("vocabulary has duplicate tokens", code="BAD_VOCAB")
        object.__setattr__(self, "_index", {token: i for i, token in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise CodecError(f"token id {token_id} outside vocabulary of {len(self.tokens)}", code="BAD_ID")
        return self.tokens[token_id]


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    whole_word: Tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.whole_word):
            raise CodecError("ids and whole_word lengths differ", code="LENGTH_MISMATCH")
        if any(w < 0 for w in self.whole_word):
            raise CodecError("whole-word indices must be non-negative", code="NEGATIVE_INDEX")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def plain(cls, ids: Sequence[int]) -> "TokenSequence":
        return cls(ids=tuple(ids), whole_word=(0,) * len(ids))


def pieces(word: str) -> List[str]:
    """Cut one whitespace word into pieces (no markers)"""
    return _PIECE.findall(word)


def _word_tokens(word: str, start: int) -> List[Tuple[str, Span]]:
    """Marked tokens of a word with the character span of each one"""
    tokens: List[Tuple[str, Span]] = []
    for n, match in enumerate(_PIECE.finditer(word)):
        piece = match.group().lower()
        span = (start + match.start(), start + match.end())
        if n == 0:
            if piece == "_" or piece.isdecimal():
                tokens.append((WORD_MARK, (span[0], span[0])))
                tokens.append((piece, span))
            else:
                tokens.append((WORD_MARK + piece, span))
        else:
            tokens.append((piece, span))
    return tokens


def tokenize(text: str) -> List[str]:
    return [token for token, _ in tokenize_with_offsets(text)]


def tokenize_with_offsets(text: str) -> List[Tuple[str, Span]]:
    tokens: List[Tuple[str, Span]] = []
    for match in _WORD.finditer(text):
        tokens.extend(_word_tokens(match.group(), match.start()))
    return tokens


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace"""
    return " ".join(text.lower().split())


def build_vocab(corpus_texts: Iterable[str], cap: int, always_include: Iterable[str] = TEMPLATE_TEXTS) -> Vocab:
    """
    Build a frequency-ordered vocabulary

    Reserved tokens come first, then the tokens of always_include (template
    wording) in first-seen order, then the corpus tokens by descending count
    with ties in lexicographic order, until cap.
    """
    if cap < 16:
        raise CodecError(f"vocabulary cap must be >= 16, got {cap}", code="BAD_CAP")

    tokens: List[str] = list(RESERVED)
    seen = set(tokens)
    for text in always_include:
        for token in tokenize(text):
            if token not in seen and len(tokens) < cap:
                tokens.append(token)
                seen.add(token)

    counts: Counter = Counter()
    for text in corpus_texts:
        counts.update(tokenize(text))
    ranked = sorted((t for t in counts if t not in seen), key=lambda t: (-counts[t], t))
    tokens.extend(ranked[:max(cap - len(tokens), 0)])

    vocab = Vocab(tuple(tokens))
    logger.info("Vocabulary built", size=len(vocab), cap=cap, distinct_corpus_tokens=len(counts))
    return vocab


def save_vocab(vocab: Vocab, path: Union[str, Path]) -> None:
    """One token per line; line number is the id"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{token}\n" for token in vocab.tokens), encoding="utf-8")


def load_vocab(path: Union[str, Path]) -> Vocab:
    path = Path(path)
    if not path.exists():
        raise CodecError(f"vocabulary file not found: {path}", code="MISSING_FILE")
    return Vocab(tuple(path.read_text(encoding="utf-8").splitlines()))


def encode_with_offsets(text: str, vocab: Vocab) -> Tuple[List[int], List[Span]]:
    tokens = tokenize_with_offsets(text)
    return [vocab.id_of(token) for token, _ in tokens], [span for _, span in tokens]


def encode(text: str, vocab: Vocab) -> TokenSequence:
    ids, _ = encode_with_offsets(text, vocab)
    return TokenSequence.plain(ids)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Inverse of encode up to normalization; stops at EOS, skips PAD"""
    out: List[str] = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id == EOS:
            break
        if token_id == PAD:
            continue
        token = vocab.token_of(token_id)
        if token == UNK_TOKEN:
            out.append(" " + UNK_TOKEN)
        elif token.startswith(WORD_MARK):
            out.append(" " + token[len(WORD_MARK):])
        else:
            out.append(token)
    return "".join(out).strip()


def whole_word_index(tokens: Union[int, Sequence], spans: Sequence[Span]) -> List[int]:
    """
    Whole-word indices for a token sequence

    Positions inside the k-th span (0-based start, exclusive end) get k,
    counting from 1; all other positions get 0.
    """
    n = tokens if isinstance(tokens, int) else len(tokens)
    index = [0] * n
    previous_end = 0
    for k, (start, end) in enumerate(spans, start=1):
        if not 0 <= start < end <= n:
            raise CodecError(f"span {(start, end)} out of bounds for {n} tokens", code="BAD_SPAN")
        if start < previous_end:
            raise CodecError(f"span {(start, end)} overlaps or precedes the previous span", code="OVERLAPPING_SPANS")
        for position in range(start, end):
            index[position] = k
        previous_end = end
    return index


class EntityMap:
    """
    Opaque user/item ids to 1-based surface numbers

    Numbers follow sorted id order and are rendered as user_{n} / item_{n}.
    """

    def __init__(self, users: Iterable[str], items: Iterable[str]):
        self.users: Dict[str, int] = {u: n for n, u in enumerate(sorted(set(users)), start=1)}
        self.items: Dict[str, int] = {i: n for n, i in enumerate(sorted(set(items)), start=1)}
        self._item_by_number = {n: i for i, n in self.items.items()}

    def user_surface(self, user_id: str) -> str:
        if user_id not in self.users:
            raise CodecError(f"unknown user {user_id!r}", code="UNKNOWN_ENTITY")
        return f"user_{self.users[user_id]}"

    def item_surface(self, item_id: str) -> str:
        if item_id not in self.items:
            raise CodecError(f"unknown item {item_id!r}", code="UNKNOWN_ENTITY")
        return f"item_{self.items[item_id]}"

    def item_from_number(self, number: int) -> str:
        return self._item_by_number[number]

    def to_record(self) -> Dict[str, Dict[str, int]]:
        return {"users": self.users, "items": self.items}

    @classmethod
    def from_record(cls, record: Mapping[str, Mapping[str, int]]) -> "EntityMap":
        entities = cls(record["users"], record["items"])
        if entities.users != dict(record["users"]) or entities.items != dict(record["items"]):
            raise CodecError("entity map numbering is not in sorted-id order", code="BAD_ENTITY_MAP")
        return entities


def save_entities(entities: EntityMap, path: Union[str, Path]) -> None:
    write_json(path, entities.to_record())


def load_entities(path: Union[str, Path]) -> EntityMap:
    path = Path(path)
    if not path.exists():
        raise CodecError(f"entity map not found: {path}", code="MISSING_FILE")
    return EntityMap.from_record(read_json(path))


@dataclass(frozen=True)
class RenderedInput:
    text: str
    spans: Tuple[Span, ...]
    task: Task


class _TextBuilder:
    def __init__(self):
        self.parts: List[str] = []
        self.length = 0
        self.spans: List[Span] = []

    def text(self, value: str) -> "_TextBuilder":
        if self.parts:
            self.parts.append(" ")
            self.length += 1
        self.parts.append(value)
        self.length += len(value)
        return self

    def entity(self, surface: str, suffix: str = "") -> "_TextBuilder":
        self.text(surface + suffix)
        start = self.length - len(surface) - len(suffix)
        self.spans.append((start, start + len(surface)))
        return self

    def build(self, task: Task) -> RenderedInput:
        return RenderedInput(text="".join(self.parts), spans=tuple(self.spans), task=task)


def render_task_input(
    task: Union[Task, str],
    entities: EntityMap,
    user: Optional[str] = None,
    item: Optional[str] = None,
    history: Optional[Sequence[str]] = None,
    candidates: Optional[Sequence[str]] = None,
    max_history: Optional[int] = None,
) -> RenderedInput:
    """
    Render the discrete template of a task with a span per entity mention

    SR lists the history in order (the most recent max_history items), TR
    lists the candidate set.
    """
    task = Task.parse(task)
    b = _TextBuilder()

    if task is Task.SR:
        if not history:
            raise CodecError("sequential input needs a non-empty history", code="EMPTY_HISTORY")
        if max_history is not None:
            history = list(history)[-max_history:]
        b.entity(entities.user_surface(user)).text("has purchased items")
        for item_id in history:
            b.entity(entities.item_surface(item_id))
        b.text("; predict the next item for the user")
    elif task is Task.TR:
        if not candidates:
            raise CodecError("top-n input needs candidates", code="EMPTY_CANDIDATES")
        b.text("which item should be recommended to").entity(entities.user_surface(user)).text("among")
        for item_id in candidates:
            b.entity(entities.item_surface(item_id))
    elif task is Task.EG:
        b.text("generate an explanation for").entity(entities.user_surface(user))
        b.text("about").entity(entities.item_surface(item))
    elif task is Task.RG_PREF:
        b.text("Generate").entity(entities.user_surface(user), "'s").text("preference")
    else:
        b.text("Generate").entity(entities.item_surface(item), "'s").text("attribute")
    return b.build(task)


def encode_rendered(rendered: RenderedInput, vocab: Vocab) -> TokenSequence:
    """Encode a rendered template and fill whole-word indices from its mention spans"""
    ids, offsets = encode_with_offsets(rendered.text, vocab)
    token_spans: List[Span] = []
    for char_start, char_end in rendered.spans:
        inside = [n for n, (s, e) in enumerate(offsets) if s >= char_start and e <= char_end and e > s]
        if not inside or inside[-1] - inside[0] + 1 != len(inside):
            raise CodecError(f"mention at chars {(char_start, char_end)} does not map to contiguous tokens",
                             code="BAD_SPAN")
        token_spans.append((inside[0], inside[-1] + 1))
    return TokenSequence(ids=tuple(ids), whole_word=tuple(whole_word_index(len(ids), token_spans)))


def encode_target(text: str, vocab: Vocab) -> List[int]:
    """Target ids terminated by EOS"""
    return list(encode(text, vocab).ids) + [EOS]
