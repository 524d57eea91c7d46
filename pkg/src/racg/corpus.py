"""Dataset ingestion, preprocessing, vocabulary, and synthetic corpus generation.

The wire format for all splits is JSONL with fields {id, code, comment}.
Code is lexed and identifiers are split into subtokens (camel + snake
conventions); comments are lowercased word sequences.
"""

import hashlib
import json
import random
import re
from dataclasses import dataclass, field, replace

# Reserved vocabulary entries. Ids are fixed so checkpoints and data files
# stay compatible across runs.
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
CLS_TOKEN = "<cls>"
EOS_TOKEN = "</s>"
NL_TOKEN = "<nl>"
HASH_TOKEN = "<#>"

RESERVED_TOKENS = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, EOS_TOKEN, NL_TOKEN, HASH_TOKEN]

PAD_ID, UNK_ID, CLS_ID, EOS_ID, NL_ID, HASH_ID = range(6)


class CorpusError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


@dataclass
class CodeCommentPair:
    id: str
    code_raw: str
    comment_raw: str
    code_tokens: list = field(default_factory=list)
    comment_tokens: list = field(default_factory=list)


@dataclass
class DatasetSplits:
    train: list
    validation: list
    test: list

    def all_pairs(self):
        return list(self.train) + list(self.validation) + list(self.test)


class Vocabulary:
    """Token table with fixed reserved ids. Built from the training split only."""

    def __init__(self):
        self.token_to_id = {}
        self.id_to_token = []
        self.frequencies = {}
        for tok in RESERVED_TOKENS:
            self._add(tok, 0)

    def _add(self, token, freq):
        if token in self.token_to_id:
            raise CorpusError(f"duplicate vocabulary token: {token!r}")
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)
        self.frequencies[token] = freq

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx):
        return self.id_to_token[idx]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for idx, tok in enumerate(self.id_to_token):
                f.write(f"{tok}\t{idx}\t{self.frequencies[tok]}\n")

    @classmethod
    def load(cls, path):
        vocab = cls.__new__(cls)
        vocab.token_to_id = {}
        vocab.id_to_token = []
        vocab.frequencies = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise CorpusError(f"malformed vocabulary line {lineno + 1}")
                tok, idx, freq = parts[0], int(parts[1]), int(parts[2])
                if idx != len(vocab.id_to_token):
                    raise CorpusError(f"non-contiguous id at vocabulary line {lineno + 1}")
                vocab.token_to_id[tok] = idx
                vocab.id_to_token.append(tok)
                vocab.frequencies[tok] = freq
        for i, tok in enumerate(RESERVED_TOKENS):
            if vocab.id_to_token[i] != tok:
                raise CorpusError(f"reserved token {tok!r} missing from id {i}")
        return vocab

    def content_hash(self):
        h = hashlib.sha256()
        for tok in self.id_to_token:
            h.update(tok.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


_SUBTOKEN_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z0-9]*|[a-z0-9]+|[^A-Za-z0-9_]+")
_LEX_RE = re.compile(r"\w+|[^\w\s]")


def split_subtokens(identifier):
    """Split an identifier on camel boundaries and underscores, lowercased.

    Acronym runs split before the last uppercase letter ("HTTPResponse" ->
    ["http", "response"]). Underscores are dropped. Total function: any
    non-identifier characters pass through as their own subtokens.
    """
    return [m.group(0).lower() for m in _SUBTOKEN_RE.finditer(identifier)]


def code_token_strings(text):
    out = []
    for lexeme in _LEX_RE.findall(text):
        if lexeme == "_":
            continue
        out.extend(split_subtokens(lexeme))
    return out


def comment_token_strings(text):
    return [lexeme.lower() for lexeme in _LEX_RE.findall(text)]


def tokenize(text, vocab, mode):
    """Map raw code or comment text to token ids; OOV tokens become <unk>."""
    if mode == "code":
        words = code_token_strings(text)
    elif mode == "comment":
        words = comment_token_strings(text)
    else:
        raise ValueError(f"unknown tokenize mode: {mode!r}")
    return [vocab.lookup(w) for w in words]


def build_vocabulary(pairs, min_freq=1):
    """Count code subtokens and comment words over `pairs` (the training split)."""
    counts = {}
    for pair in pairs:
        for tok in code_token_strings(pair.code_raw):
            counts[tok] = counts.get(tok, 0) + 1
        for tok in comment_token_strings(pair.comment_raw):
            counts[tok] = counts.get(tok, 0) + 1
    vocab = Vocabulary()
    for tok in sorted(counts):
        if counts[tok] >= min_freq and tok not in vocab.token_to_id:
            vocab._add(tok, counts[tok])
    return vocab


def tokenize_pairs(pairs, vocab):
    out = []
    for pair in pairs:
        code = tokenize(pair.code_raw, vocab, "code")
        comment = tokenize(pair.comment_raw, vocab, "comment")
        if not code:
            raise CorpusError(f"sample {pair.id!r} has empty code after preprocessing")
        if not comment:
            raise CorpusError(f"sample {pair.id!r} has empty comment after preprocessing")
        out.append(replace(pair, code_tokens=code, comment_tokens=comment))
    return out


def tokenize_splits(splits, vocab):
    return DatasetSplits(
        train=tokenize_pairs(splits.train, vocab),
        validation=tokenize_pairs(splits.validation, vocab),
        test=tokenize_pairs(splits.test, vocab),
    )


def load_jsonl(path):
    """Load {id, code, comment} records, one JSON object per line."""
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            if not isinstance(rec, dict) or not {"id", "code", "comment"} <= rec.keys():
                raise CorpusError(f"{path}: line {lineno} missing id/code/comment fields")
            sid = str(rec["id"])
            if sid in seen:
                raise CorpusError(f"{path}: duplicate id {sid!r} on line {lineno}")
            seen.add(sid)
            pairs.append(CodeCommentPair(id=sid, code_raw=rec["code"], comment_raw=rec["comment"]))
    return pairs


def save_jsonl(pairs, path):
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(json.dumps(
                {"id": pair.id, "code": pair.code_raw, "comment": pair.comment_raw},
                ensure_ascii=False) + "\n")


def dedup_test_against_train(splits):
    """Drop test samples whose preprocessed code token sequence occurs in train."""
    train_codes = {tuple(p.code_tokens) for p in splits.train}
    kept = [p for p in splits.test if tuple(p.code_tokens) not in train_codes]
    return DatasetSplits(train=splits.train, validation=splits.validation, test=kept)


# --- Synthetic corpus -------------------------------------------------------
#
# Each template owns a comment skeleton (verb/noun/adverb triple) and a pair
# of code keywords placed at fixed structural positions. Fillers are drawn
# from a pool that overlaps the keyword pool, so raw token overlap is a noisy
# predictor of template identity: a lexical retriever cannot be perfect, while
# the comment skeleton makes a same-template exemplar highly informative.

_KEYWORDS = ["alpha", "beta", "gamma", "delta", "omega"]
_NOISE = ["tmp", "buf", "ptr", "idx", "cnt", "obj", "arg", "res", "lhs", "rhs"]
_FILLER_POOL = _KEYWORDS + _NOISE
_SLOTS = [
    "record", "cache", "queue", "token", "frame", "batch", "node", "shard",
    "chunk", "slab", "table", "stream", "socket", "widget", "packet", "cursor",
    "handle", "bucket", "ledger", "branch", "window", "worker", "signal", "lane",
]
_VERBS = [
    "load", "store", "merge", "split", "flush", "scan", "patch", "clone",
    "probe", "drain", "pack", "trace", "seal", "rank", "fold", "weave",
    "graft", "skim", "tally", "prune",
]
_NOUNS = [
    "snapshot", "manifest", "registry", "payload", "summary", "digest",
    "outline", "profile", "archive", "replica", "catalog", "journal",
    "mapping", "preview", "balance", "footprint", "horizon", "pedigree",
    "quorum", "residue",
]
_ADVERBS = [
    "quietly", "eagerly", "lazily", "safely", "twice", "backwards",
    "remotely", "locally", "strictly", "loosely", "briefly", "deeply",
    "evenly", "upfront", "jointly", "apart", "halfway", "inplace",
    "downstream", "verbatim",
]

TRAIN_FRACTION = 0.75
VALID_FRACTION = 0.125


@dataclass
class SyntheticCorpus:
    splits: DatasetSplits
    template_of: dict  # sample id -> template index; evaluation-only metadata


def _sample_code(rng, kw_a, kw_b, slot_a, slot_b):
    f1, f2 = (rng.choice(_FILLER_POOL) for _ in range(2))
    camel = slot_a.capitalize() + slot_b.capitalize()
    return (
        f"def {kw_a}_{slot_a}({slot_b}):\n"
        f"    {f1} = {slot_a}.{kw_b}\n"
        f"    {camel} = {f2}({slot_b})\n"
        f"    return {kw_b}({kw_a}, {camel})"
    )


def generate_synthetic_corpus(num_templates, samples_per_template, seed):
    """Build a deterministic desk-scale corpus of templated code/comment pairs.

    Hidden template ids are returned for evaluation only; models never see
    them. Same-template comments share a skeleton (verb/noun/adverb) and
    differ only in slot words, which also appear in the code.
    """
    if num_templates < 2:
        raise ValueError("num_templates must be >= 2")
    if samples_per_template < 4:
        raise ValueError("samples_per_template must be >= 4")
    if num_templates > len(_VERBS):
        raise ValueError(f"at most {len(_VERBS)} templates supported")

    rng = random.Random(seed)
    pairs_of_keywords = [(a, b) for a in _KEYWORDS for b in _KEYWORDS if a != b]
    rng.shuffle(pairs_of_keywords)
    verbs = rng.sample(_VERBS, num_templates)
    nouns = rng.sample(_NOUNS, num_templates)
    adverbs = rng.sample(_ADVERBS, num_templates)

    per_split = {"train": [], "validation": [], "test": []}
    template_of = {}
    counter = 0
    n_train = max(1, round(samples_per_template * TRAIN_FRACTION))
    n_valid = max(1, round(samples_per_template * VALID_FRACTION))
    for t in range(num_templates):
        kw_a, kw_b = pairs_of_keywords[t % len(pairs_of_keywords)]
        for j in range(samples_per_template):
            slot_a, slot_b = rng.sample(_SLOTS, 2)
            code = _sample_code(rng, kw_a, kw_b, slot_a, slot_b)
            comment = f"{verbs[t]} the {slot_a} {nouns[t]} of each {slot_b} {adverbs[t]}"
            sid = f"s{counter:05d}"
            counter += 1
            pair = CodeCommentPair(id=sid, code_raw=code, comment_raw=comment)
            template_of[sid] = t
            if j < n_train:
                per_split["train"].append(pair)
            elif j < n_train + n_valid:
                per_split["validation"].append(pair)
            else:
                per_split["test"].append(pair)
    for split in per_split.values():
        rng.shuffle(split)
    splits = DatasetSplits(
        train=per_split["train"],
        validation=per_split["validation"],
        test=per_split["test"],
    )
    return SyntheticCorpus(splits=splits, template_of=template_of)


def save_template_metadata(template_of, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(template_of, f, indent=0, sort_keys=True)


def load_template_metadata(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
