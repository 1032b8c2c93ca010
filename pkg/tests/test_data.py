import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fwd2bot.data import (
    COLORS, MAX_OBJECTS, SHAPES, VOCAB, Record, Scene, answer_question, build_corpus, caption_text,
    corpus_stats, format_record, generate_qa, generate_scene, load_corpus, parse_record, question_kind,
    render_caption, save_corpus,
)
from fwd2bot.errors import DataError, VocabularyError

seeds = st.integers(0, 2**32 - 1)


def grammar_terminals():
    """Every word the caption and question templates can emit."""
    words = {"a", "and", "what", "color", "is", "the", "how", "many", "there", "yes", "no", "describe"}
    words |= set(COLORS) | set(SHAPES) | {s + "s" for s in SHAPES}
    words |= {"zero", "one", "two", "three", "four"}
    return words


def test_vocabulary_covers_grammar_and_fits_default_size():
    assert set(VOCAB.tokens[7:]) == grammar_terminals()
    assert len(VOCAB) <= 64
    assert VOCAB.tokens[:3] == ("<pad>", "<bos>", "<eos>")


def test_unknown_word_and_id():
    with pytest.raises(VocabularyError):
        VOCAB.tokenize("a purple circle")
    with pytest.raises(VocabularyError):
        VOCAB.detokenize([len(VOCAB)])


@given(seeds)
def test_caption_and_question_round_trip(seed):
    rng = np.random.default_rng(seed)
    scene = generate_scene(rng)
    cap = caption_text(scene)
    assert VOCAB.detokenize(VOCAB.tokenize(cap)) == cap
    q, a = generate_qa(scene, rng)
    assert answer_question(scene, VOCAB.detokenize(q)) == VOCAB.detokenize(a)


@given(seeds)
def test_scene_object_count_in_range(seed):
    s = generate_scene(np.random.default_rng(seed))
    assert 1 <= len(s.objects()) <= MAX_OBJECTS


def test_single_object_caption_template():
    s = Scene.from_objects({(2, 3): ("red", "circle")})
    assert caption_text(s) == "a red circle"
    assert len(render_caption(s)) == 3


def test_caption_is_reading_order():
    s = Scene.from_objects({(4, 0): ("blue", "square"), (0, 5): ("red", "triangle")})
    assert caption_text(s) == "a red triangle and a blue square"


def test_qa_oracle_by_hand():
    s = Scene.from_objects({(0, 0): ("red", "circle"), (1, 1): ("red", "circle"), (2, 2): ("green", "square")})
    assert answer_question(s, "what color is the circle") == "red"
    assert answer_question(s, "how many circles") == "two"
    assert answer_question(s, "how many triangles") == "zero"
    assert answer_question(s, "is there a square") == "yes"
    assert answer_question(s, "is there a triangle") == "no"
    with pytest.raises(DataError):
        answer_question(s, "what color is the triangle")
    assert question_kind("how many circles") == "count"


def test_scene_validation():
    with pytest.raises(DataError):
        Scene(2, 2, (0, 0, 0))
    with pytest.raises(DataError):
        Scene(1, 1, (13,))
    with pytest.raises(DataError):
        caption_text(Scene.empty())


def test_caption_uniqueness_at_corpus_scale():
    # [DERIVED] collision count over a 2048-scene corpus
    corpus = build_corpus(0, 2048)
    assert corpus_stats(corpus)["caption_uniqueness"] >= 0.99
    caps = [caption_text(s) for s in corpus.scenes]
    assert len(set(caps)) == len(caps)


def test_uniqueness_limit_is_enforced():
    with pytest.raises(DataError):
        build_corpus(0, 10**6)


def test_identical_scenes_identical_captions():
    s = Scene.from_objects({(1, 2): ("yellow", "triangle")})
    assert render_caption(s) == render_caption(Scene(6, 6, s.cells))


def test_build_is_deterministic_and_ids_follow_first_appearance(small_corpus):
    again = build_corpus(7, 96, qa_per_scene=2)
    assert [format_record(r) for r in again.records] == [format_record(r) for r in small_corpus.records]
    assert small_corpus.ids[:3] == ["img00000", "img00001", "img00002"]
    assert small_corpus.records[0].image_id == "img00000"


def test_split_is_scene_disjoint(small_corpus):
    train, held = small_corpus.split(16)
    assert not set(train.ids) & set(held.ids)
    assert len(held.ids) == 16
    assert held.ids == small_corpus.ids[-16:]
    with pytest.raises(DataError):
        small_corpus.split(len(small_corpus.ids))


def test_caption_pairs_one_per_scene(small_corpus):
    pairs = small_corpus.caption_pairs()
    assert [p[0] for p in pairs] == small_corpus.ids


def test_file_round_trip(tmp_path, small_corpus):
    path = tmp_path / "d.txt"
    save_corpus(small_corpus, path)
    loaded = load_corpus(path)
    assert [format_record(r) for r in loaded.records] == [format_record(r) for r in small_corpus.records]
    assert loaded.ids == small_corpus.ids


def test_absent_annotations_round_trip():
    s = Scene.from_objects({(0, 0): ("red", "circle")})
    r = Record(s, caption=render_caption(s))
    back = parse_record(format_record(r))
    assert back.has_caption and not back.has_qa


@pytest.mark.parametrize(
    "line,err",
    [
        ("scene:1,2|cap:|q:|a:", DataError),
        ("garbage", DataError),
        ("scene:" + ",".join(["1"] * 36) + "|cap:99|q:|a:", VocabularyError),
        ("scene:" + ",".join(["0"] * 36) + "|cap:|q:|a:", DataError),
    ],
)
def test_malformed_lines(line, err):
    with pytest.raises(err):
        parse_record(line)


def test_question_kinds_are_balanced(small_corpus):
    stats = corpus_stats(build_corpus(1, 600, qa_per_scene=2))
    for k in ("color", "count", "exist"):
        assert 0.2 < stats[f"question_{k}"] < 0.45


def test_distinct_caption_count_matches_enumeration():
    from fwd2bot.data import _distinct_caption_count

    types = list(itertools.product(COLORS, SHAPES))
    enumerated = sum(1 for n in range(1, MAX_OBJECTS + 1) for _ in itertools.product(types, repeat=n))
    assert _distinct_caption_count() == enumerated
