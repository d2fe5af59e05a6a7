import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from callikit.geometry import BBox
from callikit.metrics import aggregate, char_prf, iou, levenshtein, ned, order_accuracy, rouge_l, score_sample
from strategies import boxes, short_text, text30

from oracles import iou_oracle, lcs_bruteforce, lev_recursive, ned_oracle, prf_oracle, rouge_oracle

# -------------------------------------------------------------- examples


def test_char_prf_examples():
    assert tuple(vars(char_prf("ab", "ab")).values()) == (1, 1, 1)
    assert tuple(vars(char_prf("ab", "cd")).values()) == (0, 0, 0)
    r = char_prf("aab", "ab")
    assert (r.precision, r.recall) == (pytest.approx(2 / 3), 1.0)
    assert r.f1 == pytest.approx(0.8)
    assert char_prf("", "").f1 == 1.0
    assert char_prf("", "a").f1 == 0.0


def test_ned_examples():
    assert ned("abc", "abc") == 0
    assert ned("abc", "abd") == pytest.approx(1 / 3)
    assert ned("", "ab") == 1.0
    assert ned("", "") == 0.0


def test_iou_examples():
    b = BBox(0, 0, 2, 2)
    assert iou(b, b) == 1
    assert iou(b, BBox(5, 5, 6, 6)) == 0
    assert iou(b, BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_rouge_examples():
    assert rouge_l("abc", "abc") == 1
    assert rouge_l("abcd", "acbd") == pytest.approx(0.75)
    assert rouge_l("ab", "cd") == 0
    assert rouge_l("", "") == 1


def test_order_accuracy_examples():
    assert order_accuracy([0, 1, 2], [0, 1, 2]) == (1, 1.0)
    assert order_accuracy([0, 1, 2], [0, 2, 1]) == (0, pytest.approx(1 / 3))
    assert order_accuracy([1, 0], [0, 1]) == (0, 0)
    with pytest.raises(ValueError):
        order_accuracy([0, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        order_accuracy([0, 0], [0, 1])


def test_aggregate():
    one = score_sample("a", "ab", "ab")
    r = aggregate([one])
    assert (r.precision, r.recall, r.macro_f1, r.ned) == (1, 1, 1, 0)
    r = aggregate([one, score_sample("b", "xy", "ab")])
    assert r.macro_f1 == 0.5
    with pytest.raises(ValueError):
        aggregate([])
    rng = random.Random(3)
    samples = [score_sample(str(i), "".join(rng.choices("abc", k=rng.randint(0, 6))), "".join(rng.choices("abc", k=rng.randint(0, 6)))) for i in range(40)]
    r = aggregate(samples)
    assert r.macro_f1 == pytest.approx(sum(s.prf.f1 for s in samples) / 40, abs=1e-15)
    assert r.ned == pytest.approx(sum(s.ned for s in samples) / 40, abs=1e-15)


# ------------------------------------------------------------ properties


@given(text30, text30)
def test_ned_properties(a, b):
    d = ned(a, b)
    assert 0 <= d <= 1
    assert d == ned(b, a)
    assert (d == 0) == (a == b)


@given(short_text, short_text)
def test_levenshtein_matches_recursive(a, b):
    assert levenshtein(a, b) == lev_recursive(a, b)


@given(text30, text30)
def test_prf_multiset(a, b):
    assert (char_prf(a, b).f1 == 1) == (Counter(a) == Counter(b))


@given(short_text, short_text, st.sampled_from("abcdez"))
def test_rouge_properties(a, b, t):
    r = rouge_l(a, b)
    assert 0 <= r <= 1
    assert (r == 1) == (a == b)
    # prepending a shared token grows the LCS by exactly one
    assert lcs_bruteforce(t + a, t + b) == lcs_bruteforce(a, b) + 1


@given(boxes(), boxes())
def test_iou_properties(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert iou(a, a) == 1.0
    inner = BBox(a.x1, a.y1, a.x1 + a.width / 2, a.y1 + a.height / 2)
    smaller = BBox(a.x1, a.y1, a.x1 + a.width / 4, a.y1 + a.height / 4)
    assert iou(a, smaller) <= iou(a, inner)


def test_metric_oracle_suite():
    """1,000 random small instances per metric against the brute-force oracles."""
    rng = random.Random(2024)
    for _ in range(1000):
        a = "".join(rng.choices("abcd", k=rng.randint(0, 8)))
        b = "".join(rng.choices("abcd", k=rng.randint(0, 8)))
        assert abs(ned(a, b) - ned_oracle(a, b)) <= 1e-12
        p = char_prf(a, b)
        assert max(abs(x - y) for x, y in zip((p.precision, p.recall, p.f1), prf_oracle(a, b))) <= 1e-12
        assert abs(rouge_l(a, b) - rouge_oracle(a, b)) <= 1e-12
        x, y = rng.uniform(0, 10), rng.uniform(0, 10)
        ba = BBox(x, y, x + rng.uniform(0.1, 5), y + rng.uniform(0.1, 5))
        x, y = rng.uniform(0, 10), rng.uniform(0, 10)
        bb = BBox(x, y, x + rng.uniform(0.1, 5), y + rng.uniform(0.1, 5))
        assert abs(iou(ba, bb) - iou_oracle(ba, bb)) <= 1e-12
