"""
Tests for tokenization, vocabulary building, template rendering and
whole-word indices.
"""

import pytest

from rdrec.exceptions import CodecError
from rdrec.services.textcodec import (
    EOS,
    RESERVED,
    UNK,
    WORD_MARK,
    EntityMap,
    Task,
    build_vocab,
    decode,
    encode,
    encode_rendered,
    encode_target,
    load_entities,
    load_vocab,
    normalize,
    pieces,
    render_task_input,
    save_entities,
    save_vocab,
    tokenize,
    whole_word_index,
)


@pytest.fixture
def template_vocab():
    return build_vocab([], 64)


@pytest.fixture
def entities():
    users = [f"u{n:03d}" for n in range(1, 51)]
    items = [f"i{n:03d}" for n in range(1, 21)]
    return EntityMap(users, items)


def test_entity_ids_split_into_shared_pieces():
    assert pieces("user_12") == ["user", "_", "1", "2"]
    assert tokenize("user_12") == [WORD_MARK + "user", "_", "1", "2"]


def test_words_starting_with_a_digit_get_a_bare_marker():
    assert tokenize("12 apples!") == [WORD_MARK, "1", "2", WORD_MARK + "apples", "!"]


def test_reserved_tokens_come_first():
    vocab = build_vocab(["x y z"], 64)
    assert vocab.tokens[:len(RESERVED)] == RESERVED
    assert vocab.token_of(EOS) == "</s>"


def test_vocab_orders_by_frequency():
    vocab = build_vocab(["a a b"], 64, always_include=())
    assert vocab.id_of(WORD_MARK + "a") < vocab.id_of(WORD_MARK + "b")


def test_vocab_cap_sends_rare_tokens_to_unk():
    vocab = build_vocab(["a a b"], 16, always_include=())
    assert len(vocab) == 16
    assert encode("b", vocab).ids == (UNK,)
    assert encode("a", vocab).ids != (UNK,)


def test_vocab_cap_below_minimum():
    with pytest.raises(CodecError) as e:
        build_vocab([], 8)
    assert e.value.code == "BAD_CAP"


def test_template_words_are_always_in_vocab(template_vocab):
    for token in tokenize("which item should be recommended to among predict the next item for the user"):
        assert token in template_vocab


def test_vocab_files_are_deterministic(tmp_path):
    corpus = ["the strap broke", "great strap, great price", "price is right"]
    save_vocab(build_vocab(corpus, 64), tmp_path / "a.txt")
    save_vocab(build_vocab(corpus, 64), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert load_vocab(tmp_path / "a.txt") == build_vocab(corpus, 64)


def test_encode_basics(template_vocab):
    assert encode("", template_vocab).ids == ()
    vocab = build_vocab(["hello"], 32)
    ids = encode("hello hello", vocab).ids
    assert len(ids) == 2 and ids[0] == ids[1]
    assert set(encode("hello", vocab).whole_word) == {0}


@pytest.mark.parametrize("text", ["Great  Product, works WELL", "user_12 bought item_7", "12 apples"])
def test_decode_inverts_encode_up_to_normalization(text):
    vocab = build_vocab([text], 64)
    assert decode(encode(text, vocab).ids, vocab) == normalize(text)


def test_decode_stops_at_eos():
    vocab = build_vocab(["nice mug"], 32)
    ids = list(encode("nice mug", vocab).ids) + [EOS] + list(encode("nice", vocab).ids)
    assert decode(ids, vocab) == "nice mug"


def test_whole_word_golden():
    tokens = ["P1", "P2", "P3", "user", "_", "12", "34", "item", "_", "98", "76"]
    assert whole_word_index(tokens, [(3, 7), (7, 11)]) == [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]


def test_whole_word_trivial_cases():
    assert whole_word_index(5, []) == [0, 0, 0, 0, 0]
    assert whole_word_index(4, [(0, 4)]) == [1, 1, 1, 1]


def test_whole_word_rejects_overlap_and_out_of_bounds():
    with pytest.raises(CodecError) as e:
        whole_word_index(6, [(0, 3), (2, 5)])
    assert e.value.code == "OVERLAPPING_SPANS"
    with pytest.raises(CodecError) as e:
        whole_word_index(3, [(1, 4)])
    assert e.value.code == "BAD_SPAN"


def test_entity_numbers_follow_sorted_ids(entities, tmp_path):
    assert entities.user_surface("u042") == "user_42"
    assert entities.item_surface("i001") == "item_1"
    assert entities.item_from_number(7) == "i007"
    with pytest.raises(CodecError):
        entities.user_surface("nobody")
    save_entities(entities, tmp_path / "entities.json")
    assert load_entities(tmp_path / "entities.json").items == entities.items


def test_render_preference_template(entities):
    rendered = render_task_input(Task.RG_PREF, entities, user="u042")
    assert rendered.text == "Generate user_42's preference"
    assert rendered.spans == ((9, 16),)


def test_render_attribute_template(entities):
    rendered = render_task_input("rg_attr", entities, item="i007")
    assert rendered.text == "Generate item_7's attribute"
    assert len(rendered.spans) == 1


def test_render_sequential_lists_history_in_order(entities):
    rendered = render_task_input(Task.SR, entities, user="u001", history=["i003", "i001", "i002"])
    assert rendered.text == "user_1 has purchased items item_3 item_1 item_2 ; predict the next item for the user"
    assert len(rendered.spans) == 4


def test_render_sequential_truncates_to_recent_history(entities):
    rendered = render_task_input(Task.SR, entities, user="u001", history=["i001", "i002", "i003"], max_history=2)
    assert "item_1 " not in rendered.text
    assert len(rendered.spans) == 3


def test_render_topn_and_explanation(entities):
    topn = render_task_input(Task.TR, entities, user="u002", candidates=["i004", "i005"])
    assert topn.text == "which item should be recommended to user_2 among item_4 item_5"
    eg = render_task_input(Task.EG, entities, user="u002", item="i004")
    assert eg.text == "generate an explanation for user_2 about item_4"


def test_unknown_task_tag(entities):
    with pytest.raises(CodecError) as e:
        render_task_input("summarize", entities, user="u001")
    assert e.value.code == "UNKNOWN_TASK"


def test_encoded_mentions_share_whole_word_indices(entities, template_vocab):
    seq = encode_rendered(render_task_input(Task.RG_PREF, entities, user="u042"), template_vocab)
    # generate | user _ 4 2 | ' s | preference
    assert seq.whole_word == (0, 1, 1, 1, 1, 0, 0, 0)

    seq = encode_rendered(render_task_input(Task.EG, entities, user="u002", item="i013"), template_vocab)
    assert max(seq.whole_word) == 2
    assert seq.whole_word.count(2) == 4


def test_encode_target_ends_with_eos(template_vocab):
    target = encode_target("item_3", template_vocab)
    assert target[-1] == EOS
    assert decode(target, template_vocab) == "item_3"
