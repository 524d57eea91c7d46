import json
import math
import os

import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from racg.metrics import (
    EvalPair, cider, cider_per_sample, corpus_bleu, evaluate_pairs,
    load_report, mean_sentence_bleu, meteor, porter_stem, rouge_l,
    sentence_bleu, wilcoxon_signed_rank, write_report,
)

from conftest import FIXTURE_DIR

words = st.lists(st.sampled_from("the cache load snapshot node queue".split()),
                 min_size=1, max_size=8)


def pair(pred, ref):
    return EvalPair(prediction=pred.split(), reference=ref.split())


def test_identical_pair_scores():
    p = pair("load the cache", "load the cache")
    assert sentence_bleu(p) == pytest.approx(100.0)
    assert rouge_l(p) == pytest.approx(100.0)


def test_disjoint_pair_scores_zero():
    p = pair("alpha beta", "gamma delta")
    assert sentence_bleu(p) == 0.0
    assert rouge_l(p) == 0.0
    assert meteor(p) == 0.0


def test_single_word_meteor_is_half():
    # one match, one chunk: fragmentation penalty is exactly 0.5
    assert meteor(pair("load", "load")) == pytest.approx(50.0)


def test_corpus_bleu_zero_when_any_order_unmatched():
    # no 4-gram overlap anywhere in the corpus -> unsmoothed score is 0
    pairs = [pair("the cache", "the cache snapshot")]
    assert corpus_bleu(pairs) == 0.0


@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
@settings(max_examples=50, deadline=None)
def test_bleu_rouge_bounds(items):
    pairs = [EvalPair(prediction=a, reference=b) for a, b in items]
    assert 0.0 <= corpus_bleu(pairs) <= 100.0 + 1e-9
    for p in pairs:
        assert 0.0 <= sentence_bleu(p) <= 100.0 + 1e-9
        assert 0.0 <= rouge_l(p) <= 100.0 + 1e-9
        assert 0.0 <= meteor(p) <= 100.0 + 1e-9


@pytest.mark.parametrize("word,stem", [
    ("caresses", "caress"),
    ("ponies", "poni"),
    ("agreed", "agre"),
    ("plastered", "plaster"),
    ("motoring", "motor"),
    ("relational", "relat"),
    ("oscillators", "oscil"),
    ("running", "run"),
    ("runs", "run"),
    ("conflated", "conflat"),
    ("happy", "happi"),
    ("probate", "probat"),
])
def test_porter_stemmer_vectors(word, stem):
    assert porter_stem(word) == stem


def test_meteor_uses_stem_matches():
    # "loading" and "loaded" share the stem "load"
    assert meteor(pair("loading", "loaded")) > 0.0


def test_cider_identity_pair():
    pairs = [pair("load the cache snapshot", "load the cache snapshot"),
             pair("merge node queue twice", "split frame batch apart")]
    per = cider_per_sample(pairs)
    assert per[0] == pytest.approx(10.0)


def test_cider_short_sentences_lack_high_order_ngrams():
    # a 2-word identity pair only contributes to n=1 and n=2 of the 4 orders
    pairs = [pair("a b", "a b"), pair("c d", "e f")]
    assert cider_per_sample(pairs)[0] == pytest.approx(5.0)


def test_fixture_file_matches_hand_derived_values():
    with open(os.path.join(FIXTURE_DIR, "metric_scores.json")) as f:
        fx = json.load(f)
    pairs = [pair(row["prediction"], row["reference"]) for row in fx["pairs"]]
    per_cider = cider_per_sample(pairs)
    for row, p, c in zip(fx["pairs"], pairs, per_cider):
        assert sentence_bleu(p) == pytest.approx(row["sentence_bleu"], abs=1e-4)
        assert rouge_l(p) == pytest.approx(row["rouge_l"], abs=1e-4)
        assert meteor(p) == pytest.approx(row["meteor"], abs=1e-4)
        assert c == pytest.approx(row["cider"], abs=1e-4)
    assert corpus_bleu(pairs) == pytest.approx(fx["corpus_bleu"], abs=1e-4)


def test_wilcoxon_matches_exact_fixture():
    with open(os.path.join(FIXTURE_DIR, "metric_scores.json")) as f:
        w = json.load(f)["wilcoxon"]
    p = wilcoxon_signed_rank(w["scores_a"], w["scores_b"])
    assert p == pytest.approx(w["p_value"], abs=1e-3)


@given(st.lists(st.integers(min_value=-50, max_value=50), min_size=6,
                max_size=20))
@settings(max_examples=60, deadline=None)
def test_wilcoxon_matches_scipy(deltas):
    # integer-valued floats keep tie detection exact on both sides
    a = [float(i) for i in range(len(deltas))]
    b = [x - float(d) for x, d in zip(a, deltas)]
    if all(abs(x - y) < 1e-12 for x, y in zip(a, b)):
        # identical samples carry no evidence against the null
        assert wilcoxon_signed_rank(a, b) == 1.0
        return
    got = wilcoxon_signed_rank(a, b)
    diffs = [x - y for x, y in zip(a, b) if abs(x - y) > 1e-12]
    tie_free = len(set(round(abs(d), 9) for d in diffs)) == len(diffs)
    if tie_free and len(diffs) <= 25:
        expected = stats.wilcoxon(a, b, mode="exact").pvalue
    else:
        expected = stats.wilcoxon(a, b, mode="approx", correction=True,
                                  zero_method="wilcox").pvalue
    assert got == pytest.approx(expected, abs=1e-9)


def test_report_roundtrip(tmp_path):
    pairs = [pair("load the cache", "load the cache"),
             pair("merge node", "merge the node")]
    report = evaluate_pairs(pairs)
    path = tmp_path / "report.json"
    write_report(report, path, comparisons={"sentence_bleu": 0.5})
    loaded = load_report(path)
    assert loaded["scores"]["corpus_bleu"] == pytest.approx(report.corpus_bleu)
    assert loaded["wilcoxon_p_values"] == {"sentence_bleu": 0.5}
    assert len(loaded["per_sample"]["sentence_bleu"]) == 2
