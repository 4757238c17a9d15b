"""
Shared fixtures: mock reviews, the bundled synthetic corpus, a tiny model
configuration and a prepared run directory.
"""

import pytest

from rdrec.config import ModelConfig, build_config
from rdrec.services.corpus import build_splits, load_reviews
from rdrec.services.samples import build_eval_candidates
from rdrec.services.synthetic import SyntheticSpec, write_synthetic_corpus
from rdrec.services.textcodec import EntityMap, build_vocab
from rdrec.utils.jsonl import write_jsonl
from rdrec.utils.logging import setup_logging

setup_logging("WARNING", "console")


def create_mock_reviews():
    """Three users with short, timestamped review histories"""
    return [
        {"user": "alice", "item": "b", "text": "sturdy and light, my kids love it", "ts": 20},
        {"user": "alice", "item": "a", "text": "great colour", "ts": 10},
        {"user": "alice", "item": "c", "text": "the zipper broke after a week", "ts": 30},
        {"user": "alice", "item": "d", "text": "fits everything I need", "ts": 40},
        {"user": "bob", "item": "a", "text": "cheap but works", "ts": 5},
        {"user": "bob", "item": "c", "text": "", "ts": 6},
        {"user": "bob", "item": "e", "text": "would buy again", "ts": 7},
        {"user": "carol", "item": "e", "text": "too small for me", "ts": 1},
        {"user": "carol", "item": "b", "text": "nice", "ts": 2},
    ]


def tiny_model_config(vocab_size: int, **overrides) -> ModelConfig:
    fields = dict(
        n_layers=1,
        n_heads=2,
        d_model=16,
        d_ff=32,
        vocab_size=vocab_size,
        max_seq_len=128,
        n_prompt_per_task=2,
        whole_word_capacity=16,
        dropout=0.0,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def mock_reviews_path(tmp_path):
    path = tmp_path / "reviews.jsonl"
    write_jsonl(path, create_mock_reviews())
    return path


@pytest.fixture
def synthetic_path(tmp_path):
    path = tmp_path / "synthetic.jsonl"
    write_synthetic_corpus(path, SyntheticSpec(seed=0))
    return path


@pytest.fixture
def synthetic(synthetic_path):
    """ReviewSet, splits, entity map and vocabulary of the synthetic corpus"""
    rs = load_reviews(synthetic_path)
    splits = build_splits(rs, min_len=3, seed=0)
    entities = EntityMap(rs.users, rs.items)
    vocab = build_vocab([it.review_text for it in rs.interactions], 256)
    return rs, splits, entities, vocab


@pytest.fixture
def run_config(tmp_path, synthetic):
    """Fast training settings over the synthetic corpus"""
    _, _, _, vocab = synthetic
    raw = {
        "paths": {"work_dir": str(tmp_path / "run")},
        "distill": {"use_cache": False},
        "model": tiny_model_config(len(vocab)).model_dump(mode="json"),
        "trainer": {
            "batch_size": 4,
            "steps_per_epoch": 2,
            "max_epochs": 2,
            "patience": 1,
            "n_negatives": 9,
            "lr": 1e-3,
        },
        "beam": {"beam_width": 10, "max_len": 8},
        "evaluate": {"ks": [1, 5, 10]},
    }
    cfg = build_config(raw)
    cfg.paths.ensure_dirs()
    return cfg


@pytest.fixture
def candidates(synthetic):
    rs, splits, _, _ = synthetic
    return build_eval_candidates(splits, rs.items, 9, seed=0)
