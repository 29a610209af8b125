from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import lcs_oracle, rouge_l_oracle, rouge_n_oracle
from scribebench.rouge import (
    RougeConfig,
    lcs_length,
    rouge_l,
    rouge_lsum,
    rouge_n,
    rouge_suite,
    split_sentences,
    tokenize,
    union_lcs,
)

VOCAB = [f"w{i}" for i in range(20)]
seqs = st.lists(st.sampled_from(VOCAB), max_size=30)
small_seqs = st.lists(st.sampled_from(VOCAB[:4]), max_size=12)


def test_tokenize_examples():
    assert tokenize("TSH: 4.5 mIU/L") == ["tsh", "4", "5", "miu", "l"]
    assert tokenize("") == []
    assert tokenize("Running runs", RougeConfig(use_stemmer=True)) == ["run", "run"]
    assert tokenize("A_b", RougeConfig(lowercase=False)) == ["A", "b"]


def test_bad_sentence_split():
    with pytest.raises(ValueError):
        RougeConfig(sentence_split="semicolon")


def test_sentence_split_modes():
    text = "First one. Second one\nThird 4.5 mg"
    assert split_sentences(text) == ["First one.", "Second one", "Third 4.5 mg"]
    assert split_sentences(text, RougeConfig(sentence_split="newline")) == ["First one. Second one", "Third 4.5 mg"]


def test_rouge1_hand_count():
    s = rouge_n("the cat sat".split(), "the cat slept".split(), 1)
    assert (s.precision, s.recall) == (2 / 3, 2 / 3)
    assert s.fmeasure == pytest.approx(2 / 3, abs=1e-15)


def test_rouge2_hand_count():
    s = rouge_n("the cat sat on the mat".split(), "the cat sat on a mat".split(), 2)
    assert (s.precision, s.recall, s.fmeasure) == (0.6, 0.6, 0.6)


def test_rouge_l_hand_count():
    assert lcs_length("the cat sat".split(), "the sat cat".split()) == 2
    s = rouge_l("the cat sat".split(), "the sat cat".split())
    assert s.precision == s.recall == 2 / 3


def test_rouge_lsum_union_lcs_example():
    s = rouge_lsum("the cat ran", "the cat sat\nthe dog ran")
    assert (s.precision, s.recall) == (1.0, 0.5)
    assert s.fmeasure == pytest.approx(2 / 3, abs=1e-15)


def test_union_lcs_collects_from_every_candidate_sentence():
    ref = "a b c d".split()
    assert union_lcs(ref, ["a b".split(), "c d".split()]) == ref


@pytest.mark.parametrize("fn", [lambda c, r: rouge_l(c, r), lambda c, r: rouge_n(c, r, 1)])
def test_empty_side_scores_zero(fn):
    assert fn([], ["a"]).fmeasure == 0.0
    assert fn(["a"], []).fmeasure == 0.0


def test_suite_identity_and_zero():
    text = "Patient reports fatigue. TSH elevated.\nStart levothyroxine."
    assert all(v.fmeasure == 1.0 for v in rouge_suite(text, text).values())
    assert all(v.fmeasure == 0.0 for v in rouge_suite("", text).values())


@given(seqs, seqs, st.integers(1, 3))
def test_rouge_n_matches_oracle(c, r, n):
    s = rouge_n(c, r, n)
    p, rc, f = rouge_n_oracle(c, r, n)
    assert Fraction(s.precision) == Fraction(float(p))
    assert Fraction(s.recall) == Fraction(float(rc))
    assert abs(s.fmeasure - float(f)) <= 1e-12


@given(seqs, seqs)
def test_lcs_matches_oracle(a, b):
    assert lcs_length(a, b) == lcs_oracle(a, b)
    s = rouge_l(a, b)
    p, r, f = rouge_l_oracle(a, b)
    assert (s.precision, s.recall) == (float(p), float(r))
    assert abs(s.fmeasure - float(f)) <= 1e-12


@given(seqs, seqs, st.integers(1, 3))
def test_swap_symmetry(c, r, n):
    a, b = rouge_n(c, r, n), rouge_n(r, c, n)
    assert a.fmeasure == b.fmeasure and a.precision == b.recall
    la, lb = rouge_l(c, r), rouge_l(r, c)
    assert la.fmeasure == lb.fmeasure and la.precision == lb.recall


@given(seqs, seqs, st.integers(1, 4))
def test_bounds(c, r, n):
    for s in (rouge_n(c, r, n), rouge_l(c, r)):
        for v in (s.precision, s.recall, s.fmeasure):
            assert 0.0 <= v <= 1.0
    if n > min(len(c), len(r)):
        assert rouge_n(c, r, n).fmeasure == 0.0


@given(seqs, st.integers(1, 3))
def test_identity(x, n):
    if len(x) >= n:
        assert rouge_n(x, x, n).fmeasure == 1.0


@given(small_seqs, small_seqs)
def test_lsum_single_sentence_equals_rouge_l(c, r):
    # With one sentence per side the union LCS is one LCS, and clipping never binds.
    cfg = RougeConfig(sentence_split="newline")
    assert rouge_lsum(" ".join(c), " ".join(r), cfg) == rouge_l(c, r)


@given(st.lists(small_seqs, max_size=4), st.lists(small_seqs, max_size=4))
def test_lsum_bounds(cs, rs):
    s = rouge_lsum("\n".join(map(" ".join, cs)), "\n".join(map(" ".join, rs)))
    assert 0.0 <= s.precision <= 1.0 and 0.0 <= s.recall <= 1.0
