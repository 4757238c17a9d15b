"""
Synthetic review corpus

Seeded generator for an offline, laptop-sized dataset: items belong to
genres, every user follows one genre and walks its items in a fixed cyclic
order, and reviews are templated from genre vocabulary. The next-item pattern
is therefore learnable, which is what the end-to-end checks rely on.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import structlog

from ..utils.jsonl import write_jsonl

logger = structlog.get_logger()

GENRES: Dict[str, Dict[str, List[str]]] = {
    "puzzle": {
        "nouns": ["puzzle", "brain teaser", "jigsaw"],
        "attributes": ["challenging", "clever", "colorful", "tricky", "satisfying"],
    },
    "strategy": {
        "nouns": ["board game", "card game", "strategy game"],
        "attributes": ["strategic", "deep", "competitive", "tactical", "replayable"],
    },
    "outdoor": {
        "nouns": ["tent", "backpack", "water bottle"],
        "attributes": ["durable", "lightweight", "waterproof", "sturdy", "compact"],
    },
    "beauty": {
        "nouns": ["lotion", "lipstick", "face cream"],
        "attributes": ["soft", "fragrant", "gentle", "smooth", "hydrating"],
    },
    "kitchen": {
        "nouns": ["mug", "skillet", "knife set"],
        "attributes": ["sharp", "sleek", "heavy", "reliable", "elegant"],
    },
}

OPENERS = ["i really like this", "great", "my kids enjoy this", "we bought this", "pretty good"]


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 30
    n_items: int = 25
    min_history: int = 4
    max_history: int = 5
    seed: int = 0


def generate_records(spec: SyntheticSpec = SyntheticSpec()) -> List[Dict[str, object]]:
    """Build reviews records ({"user", "item", "text", "ts"}) for a SyntheticSpec"""
    rng = np.random.default_rng(spec.seed)
    genre_names = list(GENRES)

    # round-robin genre assignment keeps the genres balanced
    items_by_genre: Dict[str, List[str]] = {g: [] for g in genre_names}
    item_genre: Dict[str, str] = {}
    for idx in range(spec.n_items):
        genre = genre_names[idx % len(genre_names)]
        item_id = f"I{idx + 1:04d}"
        items_by_genre[genre].append(item_id)
        item_genre[item_id] = genre

    records = []
    for u in range(spec.n_users):
        user_id = f"U{u + 1:04d}"
        genre = genre_names[u % len(genre_names)]
        pool = items_by_genre[genre]
        length = int(rng.integers(spec.min_history, spec.max_history + 1))
        length = min(length, len(pool))
        start = int(rng.integers(len(pool)))
        sequence = [pool[(start + step) % len(pool)] for step in range(length)]

        vocab = GENRES[genre]
        for position, item_id in enumerate(sequence):
            item_number = int(item_id[1:])
            noun = vocab["nouns"][item_number % len(vocab["nouns"])]
            first = vocab["attributes"][item_number % len(vocab["attributes"])]
            second = vocab["attributes"][int(rng.integers(len(vocab["attributes"])))]
            opener = OPENERS[int(rng.integers(len(OPENERS)))]
            text = f"{opener} {noun}. it is {first} and {second}."
            records.append(
                {
                    "user": user_id,
                    "item": item_id,
                    "text": text,
                    "ts": 1_600_000_000 + u * 1_000 + position * 86_400,
                }
            )
    return records


def write_synthetic_corpus(path: Union[str, Path], spec: SyntheticSpec = SyntheticSpec()) -> int:
    records = generate_records(spec)
    count = write_jsonl(path, records)
    logger.info("Synthetic corpus written", path=str(path), records=count, users=spec.n_users, items=spec.n_items)
    return count
