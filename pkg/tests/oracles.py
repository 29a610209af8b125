"""Independent reference computations used to check the metric code.

Deliberately naive: list-removal multiset matching, top-down memoized LCS,
and set membership for one-hot BERTScore. Exact rational arithmetic throughout.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache


def harmonic(p: Fraction, r: Fraction) -> Fraction:
    return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)


def ngram_list(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def rouge_n_oracle(cand, ref, n):
    c, r = ngram_list(cand, n), ngram_list(ref, n)
    if not c or not r:
        return Fraction(0), Fraction(0), Fraction(0)
    pool = list(r)
    overlap = 0
    for g in c:
        if g in pool:
            pool.remove(g)
            overlap += 1
    p, rc = Fraction(overlap, len(c)), Fraction(overlap, len(r))
    return p, rc, harmonic(p, rc)


def lcs_oracle(a, b) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l_oracle(cand, ref):
    if not cand or not ref:
        return Fraction(0), Fraction(0), Fraction(0)
    L = lcs_oracle(cand, ref)
    p, r = Fraction(L, len(cand)), Fraction(L, len(ref))
    return p, r, harmonic(p, r)


def onehot_bertscore_oracle(cand, ref):
    """Under one-hot embeddings a token's best cosine is 1 iff its type occurs on the other side."""
    if not cand or not ref:
        return 0.0, 0.0, 0.0
    ref_types, cand_types = set(ref), set(cand)
    p = sum(t in ref_types for t in cand) / len(cand)
    r = sum(t in cand_types for t in ref) / len(ref)
    f = 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0
    return p, r, f
