"""ROUGE-1/2/L/Lsum computed from scratch over an explicit tokenizer."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

_TOKEN_RE = re.compile(r"[^\W_]+")
_SENT_NEWLINE = re.compile(r"\n")
_SENT_NEWLINE_OR_PERIOD = re.compile(r"\n|(?<=\.)\s+")

SENTENCE_SPLITS = ("newline", "newline_or_period")


@dataclass(frozen=True)
class RougeConfig:
    lowercase: bool = True
    use_stemmer: bool = False
    sentence_split: str = "newline_or_period"

    def __post_init__(self):
        if self.sentence_split not in SENTENCE_SPLITS:
            raise ValueError(f"sentence_split must be one of {SENTENCE_SPLITS}")


DEFAULT_CONFIG = RougeConfig()


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    fmeasure: float

    def to_json(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f": self.fmeasure}


ZERO = RougeScore(0.0, 0.0, 0.0)


@lru_cache(maxsize=1)
def _stemmer():
    from nltk.stem.porter import PorterStemmer

    return PorterStemmer()


def tokenize(text: str, config: RougeConfig = DEFAULT_CONFIG) -> list[str]:
    if config.lowercase:
        text = text.lower()
    tokens = _TOKEN_RE.findall(text)
    if config.use_stemmer:
        stem = _stemmer().stem
        tokens = [stem(t) for t in tokens]
        tokens = [t for t in tokens if t]
    return tokens


def split_sentences(text: str, config: RougeConfig = DEFAULT_CONFIG) -> list[str]:
    splitter = _SENT_NEWLINE if config.sentence_split == "newline" else _SENT_NEWLINE_OR_PERIOD
    return [s for s in splitter.split(text) if s.strip()]


def _score(hits: int, n_cand: int, n_ref: int) -> RougeScore:
    if n_cand == 0 or n_ref == 0 or hits == 0:
        return ZERO
    # 2PR/(P+R) reduces to 2*hits/(n_cand+n_ref); the count form is exact.
    return RougeScore(hits / n_cand, hits / n_ref, 2 * hits / (n_cand + n_ref))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return _score(overlap, sum(cand.values()), sum(ref.values()))


def lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    """Full (len(a)+1) x (len(b)+1) LCS length table."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, start=1):
        row, prev = table[i], table[i - 1]
        for j, y in enumerate(b, start=1):
            row[j] = prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1])
    return table


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    # Two-row variant; the full table is only needed for backtracking.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    return _score(lcs_length(candidate, reference), len(candidate), len(reference))


def _lcs_ref_indices(ref: Sequence[str], cand: Sequence[str]) -> set[int]:
    """Positions in ``ref`` covered by one LCS with ``cand``.

    Ties during backtracking move up (drop a reference token) first, which
    keeps the choice deterministic.
    """
    table = lcs_table(ref, cand)
    i, j = len(ref), len(cand)
    hit: set[int] = set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hit.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hit


def union_lcs(ref_sentence: Sequence[str], cand_sentences: Sequence[Sequence[str]]) -> list[str]:
    """Tokens of ``ref_sentence`` in the union of its LCS with each candidate sentence."""
    covered: set[int] = set()
    for cand in cand_sentences:
        covered |= _lcs_ref_indices(ref_sentence, cand)
    return [ref_sentence[i] for i in sorted(covered)]


def rouge_lsum(candidate: str, reference: str, config: RougeConfig = DEFAULT_CONFIG) -> RougeScore:
    cand_sents = [tokenize(s, config) for s in split_sentences(candidate, config)]
    ref_sents = [tokenize(s, config) for s in split_sentences(reference, config)]
    cand_sents = [s for s in cand_sents if s]
    ref_sents = [s for s in ref_sents if s]
    cand_budget = Counter(t for s in cand_sents for t in s)
    ref_budget = Counter(t for s in ref_sents for t in s)
    n_cand, n_ref = sum(cand_budget.values()), sum(ref_budget.values())
    if n_cand == 0 or n_ref == 0:
        return ZERO

    hits = 0
    for ref in ref_sents:
        for tok in union_lcs(ref, cand_sents):
            if cand_budget[tok] > 0 and ref_budget[tok] > 0:
                hits += 1
                cand_budget[tok] -= 1
                ref_budget[tok] -= 1
    return _score(hits, n_cand, n_ref)


ROUGE_KEYS = ("rouge1", "rouge2", "rougeL", "rougeLsum")


def rouge_suite(candidate: str, reference: str, config: RougeConfig = DEFAULT_CONFIG) -> dict[str, RougeScore]:
    cand, ref = tokenize(candidate, config), tokenize(reference, config)
    return {
        "rouge1": rouge_n(cand, ref, 1),
        "rouge2": rouge_n(cand, ref, 2),
        "rougeL": rouge_l(cand, ref),
        "rougeLsum": rouge_lsum(candidate, reference, config),
    }
