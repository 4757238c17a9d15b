"""
Tests for rationale distillation: prompt rendering, response parsing, the
batch distiller and the response cache.
"""

import pytest

from rdrec.config import BackendConfig
from rdrec.exceptions import DistillError
from rdrec.services.corpus import Interaction, ReviewSet
from rdrec.services.distiller import (
    Distiller,
    RationaleFlag,
    build_prompt,
    distill,
    load_quadruplets,
    parse_rationale,
    quadruplet_index,
    split_sentences,
    write_quadruplets,
)
from rdrec.services.llm_backend import (
    CannedBackend,
    MockBackend,
    ResponseCache,
    content_words,
    extract_review,
    mock_backend,
    select_words,
)

SHORT = frozenset({RationaleFlag.SHORT_REVIEW})
FALLBACK = frozenset({RationaleFlag.PARSE_FALLBACK})


def create_canned_fixture():
    """
    50 interactions with canned responses and hand labels

    0-29: well-formed answers; 0-4 also have short reviews.
    30-39: two plain sentences without the expected openings.
    40-49: malformed (one sentence, or nothing usable).
    """
    interactions, responses, labels = [], {}, {}
    for n in range(50):
        review = f"nice {n}" if n < 5 else f"review number {n} says the strap is strong and the colour fades"
        it = Interaction(user_id=f"u{n:02d}", item_id=f"i{n % 7}", review_text=review, order_index=0, ts=n)
        interactions.append(it)
        prompt = build_prompt(review).text
        if n < 30:
            responses[prompt] = (f"The user prefers strong straps number {n}. "
                                 f"The item's attributes are strength and fading colour")
            labels[it.user_id] = SHORT if n < 5 else frozenset()
        elif n < 40:
            responses[prompt] = f"Strong straps matter to this buyer. Colour fades on item {n}!"
            labels[it.user_id] = FALLBACK
        elif n % 2:
            responses[prompt] = "I cannot help with that request"
        else:
            responses[prompt] = "... ?"
    return interactions, responses, labels


def test_prompt_substitutes_review_verbatim():
    prompt = build_prompt("the {size} label says {x} and it's fine")
    assert "said 'the {size} label says {x} and it's fine'." in prompt.text
    assert prompt.text.endswith("the item's attributes, respectively.")
    assert extract_review(prompt.text) == prompt.review


def test_empty_review_is_rejected():
    with pytest.raises(DistillError) as e:
        build_prompt("   ")
    assert e.value.code == "EMPTY_REVIEW"


def test_split_sentences():
    assert split_sentences("One. Two!  Three?") == ["One.", "Two!", "Three?"]
    assert split_sentences("Version 2.5 is fine. Yes") == ["Version 2.5 is fine.", "Yes"]


def test_parse_primary_form_in_any_order():
    r = parse_rationale("The item's attributes include sturdy soles. The user prefers hiking boots.", 12)
    assert r.preference == "The user prefers hiking boots."
    assert r.attribute == "The item's attributes include sturdy soles."
    assert r.flags == frozenset()


def test_parse_accepts_curly_apostrophe():
    r = parse_rationale("Intro line. The user prefers tea. The item’s attributes are warmth.", 12)
    assert r.preference == "The user prefers tea."
    assert RationaleFlag.PARSE_FALLBACK not in r.flags


def test_parse_falls_back_to_first_two_sentences():
    r = parse_rationale("Likes quiet fans. Fan is silent", 12)
    assert (r.preference, r.attribute) == ("Likes quiet fans.", "Fan is silent.")
    assert r.flags == FALLBACK


def test_parse_flags_short_reviews():
    r = parse_rationale("The user prefers cheap pens. The item's attributes include low cost.", 5)
    assert r.flags == SHORT


@pytest.mark.parametrize("response", ["", "Only one sentence here.", "!!! ..."])
def test_parse_unparseable(response):
    with pytest.raises(DistillError) as e:
        parse_rationale(response, 12)
    assert e.value.code == "UNPARSEABLE"


def test_canned_fixture_yields_forty_quadruplets():
    interactions, responses, labels = create_canned_fixture()
    backend = CannedBackend(responses)
    result = Distiller(BackendConfig(use_cache=False), backend=backend).run(interactions)

    assert len(result.quadruplets) == 40
    assert result.summary.skipped == {"UNPARSEABLE": 10}
    assert result.summary.fallback == 10
    assert result.summary.short_review == 5
    assert result.summary.exit_code == 0
    assert backend.calls == 50
    assert [q.user_id for q in result.quadruplets] == [f"u{n:02d}" for n in range(40)]
    for q in result.quadruplets:
        assert q.rationale.flags == labels[q.user_id]
        assert q.preference.endswith((".", "!", "?"))


def test_backend_failures_set_exit_code():
    interactions, _, _ = create_canned_fixture()
    result = Distiller(BackendConfig(use_cache=False, failure_threshold=0.5), backend=CannedBackend({})).run(
        interactions
    )
    assert result.quadruplets == []
    assert result.summary.failed == 50
    assert result.summary.skipped == {"BACKEND_FAILED": 50}
    assert result.summary.exit_code == 1


def test_empty_reviews_are_skipped_without_backend_call():
    it = Interaction("u", "i", "", 0, 0, empty_review=True)
    backend = MockBackend()
    result = Distiller(BackendConfig(use_cache=False), backend=backend).run([it])
    assert result.summary.skipped == {"EMPTY_REVIEW": 1}
    assert backend.calls == 0


def test_mock_backend_answers_in_primary_form():
    review = "the lantern is bright and the handle is sturdy"
    rationale = parse_rationale(mock_backend(build_prompt(review).text), 9)
    assert rationale.flags == frozenset()
    w1, w2, w3 = select_words(review)
    assert {w1, w2, w3} <= set(content_words(review))
    assert w1 in rationale.preference and w3 in rationale.attribute


def test_cache_is_consulted_before_backend(tmp_path):
    rs = ReviewSet.from_interactions(
        Interaction(f"u{n}", f"i{n}", f"blanket {n} keeps me warm on cold nights", 0, n) for n in range(12)
    )
    cfg = BackendConfig(cache_dir=tmp_path / "cache", max_concurrency=8)
    first_backend, second_backend = MockBackend(), MockBackend()
    first = distill(rs, cfg, backend=first_backend, cache=ResponseCache(cfg.cache_dir))
    second = distill(rs, cfg, backend=second_backend, cache=ResponseCache(cfg.cache_dir))

    assert first_backend.calls == len(rs)
    assert second_backend.calls == 0
    assert second.summary.cache_hits == len(rs)
    assert [q.to_record() for q in second.quadruplets] == [q.to_record() for q in first.quadruplets]


def test_quadruplets_file_and_index(tmp_path):
    interactions, responses, _ = create_canned_fixture()
    result = Distiller(BackendConfig(use_cache=False), backend=CannedBackend(responses)).run(interactions)
    path = tmp_path / "quads.jsonl"
    write_quadruplets(path, result.quadruplets)
    loaded = load_quadruplets(path)
    assert loaded == result.quadruplets
    index = quadruplet_index(loaded)
    assert len(index[("u00", "i0")]) == 1


def test_distill_over_review_set_keeps_input_order():
    interactions = [Interaction(f"u{n}", "i", f"review {n} is about a warm blanket", 0, n) for n in range(6)]
    result = distill(ReviewSet.from_interactions(interactions), BackendConfig(use_cache=False),
                     backend=MockBackend())
    assert [q.user_id for q in result.quadruplets] == [f"u{n}" for n in range(6)]
