import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanfilter.metrics import (
    ClipPolicy,
    edit_distance_similarity,
    exact_match,
    levenshtein,
    normalize_whitespace,
    prefix_match_similarity,
    score_completion,
)

from oracles import ALL_STRINGS, ALPHABET, brute_force_distances


def test_levenshtein_matches_brute_force_on_all_short_pairs():
    start = time.perf_counter()
    oracle = brute_force_distances(ALL_STRINGS, ALPHABET)
    mismatches = [
        (a, b)
        for i, a in enumerate(ALL_STRINGS)
        for j, b in enumerate(ALL_STRINGS)
        if levenshtein(a, b) != oracle[i, j]
    ]
    elapsed = time.perf_counter() - start
    assert mismatches == []
    assert elapsed < 10.0


@pytest.mark.parametrize(
    "a,b,d",
    [("", "", 0), ("kitten", "sitting", 3), ("flaw", "lawn", 2), ("abc", "", 3), ("same", "same", 0)],
)
def test_levenshtein_known_values(a, b, d):
    assert levenshtein(a, b) == d
    assert levenshtein(b, a) == d


def test_levenshtein_on_word_lists():
    assert levenshtein("the cat sat".split(), "the dog sat".split()) == 1


@given(st.text(max_size=12), st.text(max_size=12), st.text(max_size=12))
@settings(max_examples=200)
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert (levenshtein(a, b) == 0) == (a == b)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert abs(len(a) - len(b)) <= levenshtein(a, b) <= max(len(a), len(b))


def test_empty_completion_scores_zero():
    assert prefix_match_similarity("", "the followup") == 0.0
    assert edit_distance_similarity("", "the followup") == 0.0
    assert score_completion("   ", "the followup").as_dict() == {"exact": 0, "prefix": 0.0, "edit": 0.0}


def test_identical_completion_scores_one():
    f = "Alpha Beta Gamma"
    assert score_completion(f, f).as_dict() == {"exact": 1, "prefix": 1.0, "edit": 1.0}


def test_empty_followup_rejected():
    with pytest.raises(ValueError):
        edit_distance_similarity("x", "")
    with pytest.raises(ValueError):
        prefix_match_similarity("x", "  ")


def test_whitespace_normalization():
    assert normalize_whitespace("  a \n b\t c ") == "a b c"
    assert exact_match("a  b\n", " a b") == 1
    assert score_completion("a \n b", "a b").edit == 1.0


def test_prefix_and_edit_examples():
    # prefix: common prefix over the shorter length
    assert prefix_match_similarity("abXd", "abcd") == pytest.approx(2 / 4)
    assert prefix_match_similarity("ab", "abcd") == 1.0
    # edit: one substitution over min length 4
    assert edit_distance_similarity("abXd", "abcd") == pytest.approx(0.75)
    # clamped at zero
    assert edit_distance_similarity("zzzzzzzz", "ab") == 0.0


def test_clipping_before_prefix_and_edit_not_exact():
    f = "abcdefghij"  # 10 chars -> clip to 11
    raw = f + "KLMNOPQRSTUVWXYZabcd"
    s = score_completion(raw, f)
    assert s.exact == 0
    assert s.prefix == 1.0
    assert s.edit == pytest.approx(1 - 1 / 10)
    assert len(ClipPolicy().clip(raw, f)) == 11
    # unclipped: 20 deletions over min length 10 clamps to 0
    assert score_completion(raw, f, ClipPolicy(factor=None)).edit == 0.0


def test_word_unit_clipping():
    f = "one two three four five six seven eight nine ten"
    s = score_completion(f + " extra words here", f, ClipPolicy(unit="word"))
    assert s.edit == pytest.approx(1 - 1 / 10)


@given(st.text(alphabet="ab \n", max_size=30), st.text(alphabet="ab ", min_size=1, max_size=20).filter(str.strip))
def test_scores_in_unit_interval(c, f):
    s = score_completion(c, f)
    assert s.exact in (0, 1)
    assert 0.0 <= s.prefix <= 1.0
    assert 0.0 <= s.edit <= 1.0


def test_fuzz_range_100k_pairs():
    rng = random.Random(1234)
    chars = "ab c"
    for _ in range(100_000):
        c = "".join(rng.choice(chars) for _ in range(rng.randint(0, 8)))
        f = "".join(rng.choice(chars) for _ in range(rng.randint(1, 8)))
        if not f.strip():
            f = "a"
        s = score_completion(c, f)
        assert 0.0 <= s.prefix <= 1.0 and 0.0 <= s.edit <= 1.0 and s.exact in (0, 1)
