"""Non-joint retrievers (BM25, TF-IDF, random, fixed dense encoder) and the
ablation variant mixer. Every retriever exposes the same
(query, k, exclude_id) -> ranked exemplars contract; ties break by
ascending base position, matching dense retrieval."""

import copy
import math
import random
import zlib
from collections import Counter
from dataclasses import dataclass

import torch

from .corpus import CLS_ID, EOS_ID, PAD_ID
from .generator import Budgets, build_input, generation_loss
from .joint import NumericalError, validation_bleu
from .neural import AccumulatingOptimizer
from .retriever import RetrievedExemplar, RetrievalError, build_index, normalize, retrieve_topk

JOINT_DENSE = "joint-dense"
BM25 = "bm25"
TFIDF = "tfidf"
RANDOM = "random"
FIXED_ENCODER = "fixed-encoder"

RETRIEVER_KINDS = (JOINT_DENSE, BM25, TFIDF, RANDOM, FIXED_ENCODER)


def _ranked(base, scores, k, exclude_id):
    order = sorted(range(len(base)), key=lambda i: (-scores[i], i))
    out = []
    for i in order:
        if exclude_id is not None and base[i].id == exclude_id:
            continue
        out.append(RetrievedExemplar(pair=base[i], index_score=float(scores[i])))
        if len(out) == k:
            break
    if not out:
        raise RetrievalError("effective retrieval base is empty")
    return out


class Bm25Index:
    """Okapi BM25 with IDF floored at 0."""

    def __init__(self, base, k1=1.2, b=0.75):
        if not base:
            raise RetrievalError("retrieval base is empty")
        self.base = list(base)
        self.k1 = k1
        self.b = b
        self.term_freqs = [Counter(p.code_tokens) for p in base]
        self.doc_lens = [len(p.code_tokens) for p in base]
        self.avg_len = sum(self.doc_lens) / len(base)
        df = Counter()
        for tf in self.term_freqs:
            for term in tf:
                df[term] += 1
        n = len(base)
        self.idf = {t: max(0.0, math.log((n - d + 0.5) / (d + 0.5))) for t, d in df.items()}
        self.id_to_row = {p.id: i for i, p in enumerate(base)}

    def score(self, query_tokens, row):
        tf = self.term_freqs[row]
        norm = self.k1 * (1 - self.b + self.b * self.doc_lens[row] / self.avg_len)
        s = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f == 0:
                continue
            s += self.idf.get(term, 0.0) * f * (self.k1 + 1) / (f + norm)
        return s


def bm25_score(index, query_tokens, doc_id):
    if doc_id not in index.id_to_row:
        raise RetrievalError(f"unknown document id {doc_id!r}")
    return index.score(query_tokens, index.id_to_row[doc_id])


class Bm25Retriever:
    kind = BM25

    def __init__(self, base, k1=1.2, b=0.75, vocab_hash=""):
        self.index = Bm25Index(base, k1=k1, b=b)
        self.vocab_hash = vocab_hash

    def retrieve(self, query, k, exclude_id=None):
        scores = [self.index.score(query.code_tokens, i)
                  for i in range(len(self.index.base))]
        return _ranked(self.index.base, scores, k, exclude_id)


class TfidfRetriever:
    """Cosine similarity over TF-IDF vectors (the VSM-style lexical baseline)."""

    kind = TFIDF

    def __init__(self, base, vocab_hash=""):
        if not base:
            raise RetrievalError("retrieval base is empty")
        self.base = list(base)
        df = Counter()
        for p in base:
            for term in set(p.code_tokens):
                df[term] += 1
        n = len(base)
        self.idf = {t: math.log(n / d) for t, d in df.items()}
        self.vectors = [self._vector(p.code_tokens) for p in base]
        self.vocab_hash = vocab_hash

    def _vector(self, tokens):
        vec = {t: c * self.idf[t] for t, c in Counter(tokens).items() if t in self.idf}
        norm = math.sqrt(sum(x * x for x in vec.values()))
        return vec, norm

    def retrieve(self, query, k, exclude_id=None):
        qvec, qnorm = self._vector(query.code_tokens)
        scores = []
        for vec, norm in self.vectors:
            if qnorm == 0.0 or norm == 0.0:
                scores.append(0.0)
            else:
                dot = sum(x * vec[t] for t, x in qvec.items() if t in vec)
                scores.append(dot / (qnorm * norm))
        return _ranked(self.base, scores, k, exclude_id)


def tfidf_retrieve(base, query, k, exclude_id=None):
    return TfidfRetriever(base).retrieve(query, k, exclude_id)


def random_retrieve(base, k, seed, exclude_id=None):
    """Uniform sample without replacement, seeded; excluded id never returned."""
    eligible = [p for p in base if p.id != exclude_id]
    if not eligible:
        raise RetrievalError("effective retrieval base is empty")
    rng = random.Random(seed)
    chosen = rng.sample(eligible, min(k, len(eligible)))
    return [RetrievedExemplar(pair=p, index_score=0.0) for p in chosen]


class RandomRetriever:
    kind = RANDOM

    def __init__(self, base, seed=0, vocab_hash=""):
        self.base = list(base)
        self.seed = seed
        self.vocab_hash = vocab_hash

    def retrieve(self, query, k, exclude_id=None):
        # per-query derived seed keeps whole-run determinism (process-stable)
        derived = zlib.crc32(f"{self.seed}:{query.id}".encode())
        return random_retrieve(self.base, k, seed=derived, exclude_id=exclude_id)


class DenseRetriever:
    """Frozen-encoder dense retrieval with the shared ranked contract."""

    def __init__(self, encoder, base, kind=JOINT_DENSE, vocab_hash=""):
        self.kind = kind
        self.encoder = encoder
        self.index = build_index(encoder, base)
        self.vocab_hash = vocab_hash

    def retrieve(self, query, k, exclude_id=None):
        self.encoder.eval()
        with torch.no_grad():
            q = normalize(self.encoder.encode(query.code_tokens))
        return retrieve_topk(self.index, q, k, exclude_id=exclude_id)


class Seq2SeqEncoderView:
    """Exposes a trained seq2seq model's encoder under the EncoderModel
    contract (CLS-position embedding), for the fixed-encoder baseline."""

    def __init__(self, seq2seq):
        self.model = seq2seq
        self.config = seq2seq.config

    @property
    def training(self):
        return self.model.training

    def eval(self):
        self.model.eval()
        return self

    def train(self, mode=True):
        self.model.train(mode)
        return self

    def encode_batch(self, token_lists):
        if any(len(t) == 0 for t in token_lists):
            raise ValueError("cannot encode an empty token sequence")
        budget = self.config.max_positions - 1
        trimmed = [list(t)[:budget] for t in token_lists]
        width = 1 + max(len(t) for t in trimmed)
        device = self.model.token_embedding.weight.device
        ids = torch.full((len(trimmed), width), PAD_ID, dtype=torch.long, device=device)
        mask = torch.ones((len(trimmed), width), dtype=torch.bool, device=device)
        for i, toks in enumerate(trimmed):
            ids[i, 0] = CLS_ID
            ids[i, 1:1 + len(toks)] = torch.tensor(toks, dtype=torch.long, device=device)
            mask[i, :1 + len(toks)] = False
        hidden = self.model.transformer.encoder(
            self.model._embed(ids), src_key_padding_mask=mask)
        return hidden[:, 0, :]

    def encode(self, tokens):
        return self.encode_batch([tokens])[0]


@dataclass
class VariantPredictor:
    """A fixed retriever connected to a fixed generator; no fine-tuning."""

    retriever: object
    generator: object
    budgets: Budgets

    def predict(self, query, beam_size=10, max_len=64):
        from .generator import beam_decode
        exemplar = self.retriever.retrieve(query, 1)[0]
        gen_in = build_input(query, exemplar.pair, self.budgets)
        tokens = beam_decode(self.generator, gen_in, beam_size=beam_size, max_len=max_len)
        return tokens, exemplar


def assemble_variant(retriever, generator, generator_vocab_hash="",
                     budgets=Budgets()):
    if retriever.vocab_hash and generator_vocab_hash and \
            retriever.vocab_hash != generator_vocab_hash:
        raise ValueError("vocabulary hash mismatch between retriever and generator")
    return VariantPredictor(retriever=retriever, generator=generator, budgets=budgets)


def train_baseline_generator(retriever, splits, config, generator):
    """Ordinary cross-entropy training on top-1 exemplars from a fixed
    retriever (self-exclusion applied), with the same early stopping as
    joint training. The retriever receives no updates."""
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    optimizer = AccumulatingOptimizer([generator], config.learning_rate,
                                      config.grad_accum)
    # fixed retriever: exemplar per training sample is retrieved once
    exemplar_of = {
        s.id: retriever.retrieve(s, 1, exclude_id=s.id)[0].pair
        for s in splits.train
    }
    log = []
    best = {"bleu": -1.0, "epoch": -1, "state": None}
    stale_epochs = 0
    step = 0
    for epoch in range(config.epochs):
        generator.train()
        order = list(range(len(splits.train)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [splits.train[i] for i in order[start:start + config.batch_size]]
            losses = []
            for sample in batch:
                gen_in = build_input(sample, exemplar_of[sample.id], config.budgets)
                target = list(sample.comment_tokens) + [EOS_ID]
                loss = generation_loss(generator, gen_in, target)
                if not math.isfinite(float(loss.detach())):
                    raise NumericalError(f"non-finite loss on sample {sample.id!r}")
                losses.append(loss)
            batch_loss = torch.stack(losses).mean()
            batch_loss.backward()
            if optimizer.step():
                step += 1
                log.append({"step": step, "epoch": epoch,
                            "mean_loss": float(batch_loss.detach())})
        optimizer.flush()
        generator.eval()
        bleu = _fixed_retriever_validation_bleu(retriever, generator,
                                                splits.validation, config)
        log.append({"step": step, "epoch": epoch, "validation_bleu": bleu})
        if bleu > best["bleu"]:
            best.update(bleu=bleu, epoch=epoch,
                        state=copy.deepcopy(generator.state_dict()))
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                break
    if best["state"] is not None:
        generator.load_state_dict(best["state"])
    generator.eval()
    return generator, log


def _fixed_retriever_validation_bleu(retriever, generator, pairs, config):
    from .generator import beam_decode
    from .metrics import EvalPair, corpus_bleu
    eval_pairs = []
    for pair in pairs:
        exemplar = retriever.retrieve(pair, 1)[0]
        gen_in = build_input(pair, exemplar.pair, config.budgets)
        tokens = beam_decode(generator, gen_in, beam_size=config.beam_size,
                             max_len=config.max_decode_len)
        eval_pairs.append(EvalPair(prediction=tokens, reference=list(pair.comment_tokens)))
    return corpus_bleu(eval_pairs)


def train_plain_seq2seq(splits, config, generator):
    """Fine-tune a generator on plain code -> comment (no exemplar); its
    encoder then serves as the fixed-encoder retriever."""
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    optimizer = AccumulatingOptimizer([generator], config.learning_rate,
                                      config.grad_accum)
    best = {"bleu": -1.0, "state": None}
    stale_epochs = 0
    for epoch in range(config.epochs):
        generator.train()
        order = list(range(len(splits.train)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [splits.train[i] for i in order[start:start + config.batch_size]]
            losses = []
            for sample in batch:
                target = list(sample.comment_tokens) + [EOS_ID]
                losses.append(-generator.token_logprobs(
                    list(sample.code_tokens)[: config.budgets.code], target).sum())
            torch.stack(losses).mean().backward()
            optimizer.step()
        optimizer.flush()
        generator.eval()
        from .generator import beam_decode
        from .metrics import EvalPair, corpus_bleu
        eval_pairs = []
        for pair in splits.validation:
            tokens = beam_decode_plain(generator, pair, config)
            eval_pairs.append(EvalPair(prediction=tokens, reference=list(pair.comment_tokens)))
        bleu = corpus_bleu(eval_pairs)
        if bleu > best["bleu"]:
            best.update(bleu=bleu, state=copy.deepcopy(generator.state_dict()))
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                break
    if best["state"] is not None:
        generator.load_state_dict(best["state"])
    generator.eval()
    return generator


def beam_decode_plain(generator, pair, config):
    from .generator import GenerationInput, beam_decode
    gen_in = GenerationInput(tokens=list(pair.code_tokens)[: config.budgets.code],
                             source_id=pair.id, exemplar_id="")
    return beam_decode(generator, gen_in, beam_size=config.beam_size,
                       max_len=config.max_decode_len)


def build_retriever(kind, base, encoder=None, seed=0, vocab_hash=""):
    if kind == BM25:
        return Bm25Retriever(base, vocab_hash=vocab_hash)
    if kind == TFIDF:
        return TfidfRetriever(base, vocab_hash=vocab_hash)
    if kind == RANDOM:
        return RandomRetriever(base, seed=seed, vocab_hash=vocab_hash)
    if kind in (JOINT_DENSE, FIXED_ENCODER):
        if encoder is None:
            raise ValueError(f"retriever kind {kind!r} needs an encoder")
        return DenseRetriever(encoder, base, kind=kind, vocab_hash=vocab_hash)
    raise ValueError(f"unknown retriever kind: {kind!r}")
