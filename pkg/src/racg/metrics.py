"""Text-generation evaluation: corpus/sentence BLEU-4, ROUGE-L, METEOR
(exact + Porter stem stages), CIDEr, and the Wilcoxon signed-rank test.

Conventions are pinned here and echoed in every report header:
  - preprocessing: lowercase, strip one trailing period, whitespace split
  - sentence BLEU: add-one smoothing on n-gram precisions for n >= 2
  - ROUGE-L: harmonic F (beta = 1)
  - METEOR: exact and Porter-stem matching only (no synonymy stage),
    recall weight 9, fragmentation penalty 0.5 * (chunks / matches)^3
  - CIDEr: per-n (1..4) TF-IDF vectors with IDF from the reference corpus,
    cosine per n, averaged and scaled by 10
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field

METRIC_CONFIG = {
    "preprocessing": "lowercase, strip trailing period, whitespace split",
    "sentence_bleu_smoothing": "add-one for n>=2",
    "rouge_l_beta": 1.0,
    "meteor": "exact+stem, recall weight 9, penalty 0.5*(ch/m)^3",
    "cider": "tf-idf cosine, n=1..4, scale 10",
}


@dataclass
class EvalPair:
    prediction: list
    reference: list


@dataclass
class MetricReport:
    corpus_bleu: float
    mean_sentence_bleu: float
    rouge_l: float
    meteor: float
    cider: float
    per_sample: dict = field(default_factory=dict)  # metric -> list of floats
    config: dict = field(default_factory=lambda: dict(METRIC_CONFIG))


def normalize_text(text):
    """Lowercase, strip a single trailing period, split on whitespace."""
    words = text.lower().split()
    if words and words[-1].endswith(".") and words[-1] != ".":
        words[-1] = words[-1][:-1]
    elif words and words[-1] == ".":
        words = words[:-1]
    return words


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU -------------------------------------------------------------------

def _modified_precision_counts(prediction, reference, n):
    pred = _ngrams(prediction, n)
    ref = _ngrams(reference, n)
    clipped = sum(min(c, ref[g]) for g, c in pred.items())
    return clipped, max(sum(pred.values()), 0)


def corpus_bleu(pairs):
    """BLEU-4 with corpus-pooled modified precisions and brevity penalty."""
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    num = [0] * 4
    den = [0] * 4
    pred_len = 0
    ref_len = 0
    for pair in pairs:
        pred_len += len(pair.prediction)
        ref_len += len(pair.reference)
        for n in range(1, 5):
            c, t = _modified_precision_counts(pair.prediction, pair.reference, n)
            num[n - 1] += c
            den[n - 1] += t
    if any(d == 0 for d in den) or any(c == 0 for c in num):
        return 0.0
    log_prec = sum(0.25 * math.log(num[i] / den[i]) for i in range(4))
    bp = 1.0 if pred_len > ref_len else math.exp(1 - ref_len / max(pred_len, 1))
    if pred_len == 0:
        return 0.0
    return 100.0 * bp * math.exp(log_prec)


def sentence_bleu(pair):
    """Per-sentence BLEU-4; add-one smoothing on precisions for n >= 2."""
    prediction, reference = pair.prediction, pair.reference
    if not prediction:
        return 0.0
    log_prec = 0.0
    for n in range(1, 5):
        c, t = _modified_precision_counts(prediction, reference, n)
        if n >= 2:
            c, t = c + 1, t + 1
        if c == 0 or t == 0:
            return 0.0
        log_prec += 0.25 * math.log(c / t)
    bp = 1.0 if len(prediction) > len(reference) else math.exp(1 - len(reference) / len(prediction))
    return 100.0 * bp * math.exp(log_prec)


def mean_sentence_bleu(pairs):
    if not pairs:
        raise ValueError("mean_sentence_bleu needs at least one pair")
    return sum(sentence_bleu(p) for p in pairs) / len(pairs)


# --- ROUGE-L ----------------------------------------------------------------

def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pair, beta=1.0):
    """LCS F-measure, scaled to [0, 100]."""
    if not pair.prediction or not pair.reference:
        return 0.0
    lcs = _lcs_length(pair.prediction, pair.reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pair.prediction)
    recall = lcs / len(pair.reference)
    f = (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)
    return 100.0 * f


# --- Porter stemmer ---------------------------------------------------------
# Faithful to the 1980 algorithm (steps 1a-5b, measure/condition rules).

_VOWELS = set("aeiou")


def _is_consonant(word, i):
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_consonant(word, i - 1)
    return True


def _measure(stem):
    forms = [_is_consonant(stem, i) for i in range(len(stem))]
    m = 0
    prev = None
    for c in forms:
        if prev is False and c:
            m += 1
        prev = c
    return m


def _has_vowel(stem):
    return any(not _is_consonant(stem, i) for i in range(len(stem)))


def _ends_double_consonant(word):
    return (len(word) >= 2 and word[-1] == word[-2]
            and _is_consonant(word, len(word) - 1))


def _ends_cvc(word):
    if len(word) < 3:
        return False
    if not (_is_consonant(word, len(word) - 3)
            and not _is_consonant(word, len(word) - 2)
            and _is_consonant(word, len(word) - 1)):
        return False
    return word[-1] not in "wxy"


def _replace_if(word, suffix, replacement, min_measure):
    if word.endswith(suffix):
        stem = word[: len(word) - len(suffix)]
        if _measure(stem) > min_measure:
            return stem + replacement, True
        return word, True  # suffix matched, rule consumed
    return word, False


def porter_stem(word):
    if len(word) <= 2:
        return word
    w = word

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        stripped = None
        if w.endswith("ed") and _has_vowel(w[:-2]):
            stripped = w[:-2]
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            stripped = w[:-3]
        if stripped is not None:
            w = stripped
            if w.endswith(("at", "bl", "iz")):
                w += "e"
            elif _ends_double_consonant(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _ends_cvc(w):
                w += "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # step 2
    for suffix, repl in (
        ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
        ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
        ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
        ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
        ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
    ):
        w, matched = _replace_if(w, suffix, repl, 0)
        if matched:
            break

    # step 3
    for suffix, repl in (
        ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
        ("ical", "ic"), ("ful", ""), ("ness", ""),
    ):
        w, matched = _replace_if(w, suffix, repl, 0)
        if matched:
            break

    # step 4
    for suffix in (
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
        "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    ):
        if w.endswith(suffix):
            stem = w[: len(w) - len(suffix)]
            if suffix == "ion" and not stem.endswith(("s", "t")):
                break
            if _measure(stem) > 1:
                w = stem
            break

    # step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            w = stem

    # step 5b
    if _measure(w) > 1 and _ends_double_consonant(w) and w.endswith("l"):
        w = w[:-1]

    return w


# --- METEOR -----------------------------------------------------------------

def _match_quota(pred_words, ref_words):
    pc, rc = Counter(pred_words), Counter(ref_words)
    return sum(min(c, rc[wrd]) for wrd, c in pc.items())


def _chunk_count(alignment):
    # alignment: list of (pred_pos, ref_pos) sorted by pred_pos
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _min_chunk_alignment(candidates, total_matches, node_budget=200000):
    """Among maximal alignments, find one with fewest chunks.

    `candidates` maps each matchable prediction position to the set of
    reference positions it may align to. Exhaustive DFS with pruning; falls
    back to a greedy continuation heuristic if the search budget is hit.
    """
    positions = sorted(candidates)
    best = [len(positions) + 1]
    budget = [node_budget]

    def dfs(idx, used, align, chunks, last):
        if budget[0] <= 0 or chunks >= best[0]:
            return None
        budget[0] -= 1
        remaining = len(positions) - idx
        if len(align) + remaining < total_matches:
            return None
        if len(align) == total_matches:
            best[0] = chunks
            return list(align)
        if idx == len(positions):
            return None
        i = positions[idx]
        result = None
        options = sorted(
            (j for j in candidates[i] if j not in used),
            key=lambda j: (not (last is not None and i == last[0] + 1 and j == last[1] + 1), j),
        )
        for j in options:
            extends = last is not None and i == last[0] + 1 and j == last[1] + 1
            used.add(j)
            align.append((i, j))
            sub = dfs(idx + 1, used, align, chunks + (0 if extends else 1), (i, j))
            align.pop()
            used.remove(j)
            if sub is not None:
                result = sub
                if best[0] == 1:
                    break
        # skipping this position is allowed only if maximality still reachable
        if len(align) + remaining - 1 >= total_matches:
            sub = dfs(idx + 1, used, align, chunks, last)
            if sub is not None:
                result = sub
        return result

    found = dfs(0, set(), [], 0, None)
    if found is not None:
        return found
    # greedy fallback: prefer chunk continuations, then leftmost reference
    align = []
    used = set()
    last = None
    for i in positions:
        if len(align) == total_matches:
            break
        opts = [j for j in candidates[i] if j not in used]
        if not opts:
            continue
        cont = [j for j in opts if last is not None and i == last[0] + 1 and j == last[1] + 1]
        j = cont[0] if cont else min(opts)
        align.append((i, j))
        used.add(j)
        last = (i, j)
    return align


def meteor(pair):
    """Two-stage unigram alignment (exact, then Porter stems), scaled to [0, 100]."""
    pred, ref = pair.prediction, pair.reference
    if not pred or not ref:
        return 0.0

    # Stage 1: exact surface matches. Stage 2: stem matches on the leftovers.
    # The chunk-minimizing search runs over the combined candidate map, with
    # stage quotas fixed by maximal matching sizes.
    exact_quota = _match_quota(pred, ref)
    candidates = {}
    for i, w in enumerate(pred):
        refs = {j for j, r in enumerate(ref) if r == w}
        if refs:
            candidates[i] = refs

    exact_align = _min_chunk_alignment(candidates, exact_quota) if candidates else []
    matched_pred = {i for i, _ in exact_align}
    matched_ref = {j for _, j in exact_align}

    rest_pred = [i for i in range(len(pred)) if i not in matched_pred]
    rest_ref = [j for j in range(len(ref)) if j not in matched_ref]
    pred_stems = {i: porter_stem(pred[i]) for i in rest_pred}
    ref_stems = {j: porter_stem(ref[j]) for j in rest_ref}
    stem_quota = _match_quota([pred_stems[i] for i in rest_pred],
                              [ref_stems[j] for j in rest_ref])
    stem_candidates = {}
    for i in rest_pred:
        refs = {j for j in rest_ref if ref_stems[j] == pred_stems[i]}
        if refs:
            stem_candidates[i] = refs
    stem_align = _min_chunk_alignment(stem_candidates, stem_quota) if stem_candidates else []

    alignment = sorted(exact_align + stem_align)
    matches = len(alignment)
    if matches == 0:
        return 0.0
    precision = matches / len(pred)
    recall = matches / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    chunks = _chunk_count(alignment)
    penalty = 0.5 * (chunks / matches) ** 3
    return 100.0 * f_mean * (1.0 - penalty)


# --- CIDEr ------------------------------------------------------------------

def cider_per_sample(pairs):
    """Per-sample CIDEr values; IDF is computed from the reference corpus."""
    if len(pairs) < 2:
        raise ValueError("cider needs at least 2 pairs (IDF needs a corpus)")
    n_docs = len(pairs)
    doc_freq = [Counter() for _ in range(4)]
    for pair in pairs:
        for n in range(1, 5):
            for gram in _ngrams(pair.reference, n):
                doc_freq[n - 1][gram] += 1

    def tfidf_vector(tokens, n):
        vec = {}
        for gram, count in _ngrams(tokens, n).items():
            idf = math.log(n_docs) - math.log(max(1.0, doc_freq[n - 1][gram]))
            vec[gram] = count * idf
        return vec

    def cosine(u, v):
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    scores = []
    for pair in pairs:
        sims = [cosine(tfidf_vector(pair.prediction, n), tfidf_vector(pair.reference, n))
                for n in range(1, 5)]
        scores.append(10.0 * sum(sims) / 4.0)
    return scores


def cider(pairs):
    return sum(cider_per_sample(pairs)) / len(pairs)


# --- Wilcoxon signed-rank test ----------------------------------------------

def _average_ranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_signed_rank_p(ranks, w_plus):
    # Distribution of W+ over all sign assignments, via the rank-sum
    # generating polynomial. Ranks are integers here (no ties).
    max_sum = int(sum(ranks))
    counts = [0] * (max_sum + 1)
    counts[0] = 1
    for r in ranks:
        r = int(r)
        for s in range(max_sum, r - 1, -1):
            counts[s] += counts[s - r]
    total = 2 ** len(ranks)
    w = int(round(w_plus))
    p_low = sum(counts[: w + 1]) / total
    p_high = sum(counts[w:]) / total
    return min(1.0, 2.0 * min(p_low, p_high))


def wilcoxon_signed_rank(scores_a, scores_b):
    """Two-sided paired test; zero differences dropped, average ranks for ties.

    Uses the exact null distribution when the sample is small and tie-free,
    and the tie-corrected, continuity-corrected normal approximation
    otherwise.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError("paired score sequences must have equal length")
    diffs = [a - b for a, b in zip(scores_a, scores_b) if a != b]
    n = len(diffs)
    if n == 0:
        return 1.0
    abs_diffs = [abs(d) for d in diffs]
    ranks = _average_ranks(abs_diffs)
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)

    has_ties = len(set(abs_diffs)) != n
    if not has_ties and n <= 25:
        return _exact_signed_rank_p(ranks, w_plus)

    mean = n * (n + 1) / 4.0
    tie_counts = Counter(abs_diffs).values()
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in tie_counts) / 48.0
    if var == 0:
        return 1.0
    d = w_plus - mean
    if d > 0:
        d -= 0.5
    elif d < 0:
        d += 0.5
    z = d / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return min(1.0, p)


# --- Report assembly ---------------------------------------------------------

def evaluate_pairs(pairs):
    per_sample = {
        "sentence_bleu": [sentence_bleu(p) for p in pairs],
        "rouge_l": [rouge_l(p, beta=METRIC_CONFIG["rouge_l_beta"]) for p in pairs],
        "meteor": [meteor(p) for p in pairs],
        "cider": cider_per_sample(pairs) if len(pairs) >= 2 else [],
    }
    return MetricReport(
        corpus_bleu=corpus_bleu(pairs),
        mean_sentence_bleu=sum(per_sample["sentence_bleu"]) / len(pairs),
        rouge_l=sum(per_sample["rouge_l"]) / len(pairs),
        meteor=sum(per_sample["meteor"]) / len(pairs),
        cider=sum(per_sample["cider"]) / len(pairs) if per_sample["cider"] else 0.0,
        per_sample=per_sample,
    )


def write_report(report, path, comparisons=None):
    payload = {
        "config": report.config,
        "scores": {
            "corpus_bleu": report.corpus_bleu,
            "mean_sentence_bleu": report.mean_sentence_bleu,
            "rouge_l": report.rouge_l,
            "meteor": report.meteor,
            "cider": report.cider,
        },
        "per_sample": report.per_sample,
    }
    if comparisons:
        payload["wilcoxon_p_values"] = comparisons
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)


def load_report(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
