"""Joint training of the dense retriever and the generator.

One scalar loss per training sample: softmax weights over the live
retrieval scores of the top-k exemplars times their generation losses.
Gradients flow into the retriever through the weights and into the
generator through the losses; freeze_generator keeps the generator fixed
and trains the retriever alone from its loss signals.
"""

import copy
import json
import math
import random
from dataclasses import dataclass, field, asdict

import torch

from .corpus import CodeCommentPair, EOS_ID, UNK_ID
from .generator import Budgets, build_input, generation_loss, beam_decode
from .metrics import EvalPair, corpus_bleu
from .neural import AccumulatingOptimizer
from .retriever import build_index, normalize, retrieve_topk, refresh_rows, refresh_full


class NumericalError(RuntimeError):
    """Non-finite loss during training; message names the offending sample."""


@dataclass
class JointLossBreakdown:
    exemplar_ids: list
    live_scores: list
    weights: list
    per_exemplar_losses: list
    total: float


@dataclass
class TrainingConfig:
    k: int = 4
    epochs: int = 10
    patience: int = 2
    batch_size: int = 8
    grad_accum: int = 4
    beam_size: int = 10
    learning_rate: float = 1e-3
    retriever_learning_rate: float = None  # defaults to learning_rate
    freeze_generator: bool = False
    copy_warmup_epochs: int = 3
    retriever_warmup_epochs: int = 1
    seed: int = 0
    max_decode_len: int = 64
    budgets: Budgets = field(default_factory=Budgets)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(
                "k must be >= 2: with a single exemplar its softmax weight is "
                "constantly 1 and the retriever receives no gradient")


def joint_loss(retriever_encoder, generator, index, sample, k,
               freeze_generator=False, budgets=Budgets()):
    """Weighted joint loss for one training sample.

    Candidates come from the (possibly stale) index with self-exclusion;
    scores used for the softmax weights are recomputed live so the gradient
    reaches the retriever through both the query and the exemplar encodings.

    Returns (total: torch scalar, breakdown: JointLossBreakdown).
    """
    if index.size < 2:
        raise ValueError("training base must contain at least 2 samples")
    query_emb = normalize(retriever_encoder.encode(sample.code_tokens))
    candidates = retrieve_topk(index, query_emb.detach(), k, exclude_id=sample.id)

    ex_emb = retriever_encoder.encode_batch([c.pair.code_tokens for c in candidates])
    ex_emb = ex_emb / torch.linalg.vector_norm(ex_emb, dim=1, keepdim=True)
    live_scores = ex_emb @ query_emb
    weights = torch.softmax(live_scores, dim=0)

    target = list(sample.comment_tokens) + [EOS_ID]
    losses = []
    for cand in candidates:
        gen_in = build_input(sample, cand.pair, budgets)
        if freeze_generator:
            with torch.no_grad():
                losses.append(generation_loss(generator, gen_in, target))
        else:
            losses.append(generation_loss(generator, gen_in, target))
    losses = torch.stack(losses)
    total = (weights * losses).sum()

    for cand, score in zip(candidates, live_scores):
        cand.live_score = score
    breakdown = JointLossBreakdown(
        exemplar_ids=[c.pair.id for c in candidates],
        live_scores=live_scores.detach().tolist(),
        weights=weights.detach().tolist(),
        per_exemplar_losses=losses.detach().tolist(),
        total=float(total.detach()),
    )
    return total, breakdown


def loss_gradient_wrt_scores(breakdown):
    """d total / d live_score_j = w_j * (L_j - total). Diagnostics only."""
    return [
        w * (l - breakdown.total)
        for w, l in zip(breakdown.weights, breakdown.per_exemplar_losses)
    ]


def _weight_entropy(weights):
    return -sum(w * math.log(w) for w in weights if w > 0.0)


def decode_split(retriever_encoder, generator, index, pairs, beam_size,
                 budgets=Budgets(), max_len=64):
    """Top-1 retrieval + beam decoding for every pair; returns predictions."""
    out = []
    for pair in pairs:
        tokens, exemplar = predict(retriever_encoder, generator, index, pair,
                                   beam_size, budgets=budgets, max_len=max_len)
        out.append((pair, tokens, exemplar))
    return out


def validation_bleu(retriever_encoder, generator, index, pairs, beam_size,
                    budgets=Budgets(), max_len=64):
    decoded = decode_split(retriever_encoder, generator, index, pairs,
                           beam_size, budgets=budgets, max_len=max_len)
    eval_pairs = [EvalPair(prediction=toks, reference=list(p.comment_tokens))
                  for p, toks, _ in decoded]
    return corpus_bleu(eval_pairs)


def _copy_warmup_input(sample, budgets):
    """Warmup input: the sample is its own exemplar and the query code is
    masked to a single unknown token, so the generator can only learn to
    reproduce the exemplar comment, never a direct code-to-comment mapping."""
    masked = CodeCommentPair(id=sample.id, code_raw="", comment_raw="",
                             code_tokens=[UNK_ID],
                             comment_tokens=sample.comment_tokens)
    return build_input(masked, sample, budgets)


def _copy_warmup(config, splits, generator, rng, log):
    """Teach the generator to copy the exemplar comment before joint training.

    Without this the cold generator ignores the exemplar, memorizes the
    training targets directly, and the retriever never receives a usable
    loss differential between good and bad exemplars.
    """
    optimizer = AccumulatingOptimizer([generator], config.learning_rate,
                                      config.grad_accum)
    generator.train()
    for epoch in range(config.copy_warmup_epochs):
        order = list(range(len(splits.train)))
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [splits.train[i] for i in order[start:start + config.batch_size]]
            losses = []
            for sample in batch:
                gen_in = _copy_warmup_input(sample, config.budgets)
                target = list(sample.comment_tokens) + [EOS_ID]
                losses.append(generation_loss(generator, gen_in, target))
            mean = torch.stack(losses).mean()
            if not math.isfinite(float(mean.detach())):
                raise NumericalError(
                    f"non-finite warmup loss on sample {batch[0].id!r}")
            mean.backward()
            optimizer.step()
            epoch_loss += float(mean.detach()) * len(batch)
        optimizer.flush()
        log.append({"phase": "copy_warmup", "epoch": epoch,
                    "mean_loss": epoch_loss / len(order)})


def _joint_epoch(config, splits, retriever_encoder, generator, index,
                 optimizer, rng, log, step, epoch, phase, freeze_generator):
    """One pass over the shuffled training split with the weighted joint
    loss, two-tier index refresh, and gradient accumulation. Returns the
    updated optimizer step counter."""
    retriever_encoder.train()
    generator.eval() if freeze_generator else generator.train()
    order = list(range(len(splits.train)))
    rng.shuffle(order)
    touched = set()
    for start in range(0, len(order), config.batch_size):
        batch = [splits.train[i] for i in order[start:start + config.batch_size]]
        batch_total = 0.0
        batch_entropy = 0.0
        losses = []
        for sample in batch:
            total, breakdown = joint_loss(
                retriever_encoder, generator, index, sample, config.k,
                freeze_generator=freeze_generator, budgets=config.budgets)
            if not math.isfinite(breakdown.total):
                raise NumericalError(
                    f"non-finite joint loss on sample {sample.id!r}")
            losses.append(total)
            batch_total += breakdown.total
            batch_entropy += _weight_entropy(breakdown.weights)
            touched.update(breakdown.exemplar_ids)
        (torch.stack(losses).mean()).backward()
        if optimizer.step():
            step += 1
            refresh_rows(index, retriever_encoder, touched, step=step)
            touched.clear()
            log.append({"phase": phase, "step": step, "epoch": epoch,
                        "mean_loss": batch_total / len(batch),
                        "mean_weight_entropy": batch_entropy / len(batch)})
    if optimizer.flush():
        step += 1
        refresh_rows(index, retriever_encoder, touched, step=step)
        touched.clear()
    refresh_full(index, retriever_encoder, step=step)
    return step


@dataclass
class TrainResult:
    retriever_encoder: object
    generator: object
    index: object
    log: list
    best_epoch: int
    best_validation_bleu: float


def train(config, splits, retriever_encoder, generator, on_epoch_end=None):
    """Three-phase training with two-tier index refresh and early stopping.

    Phases: (1) copy warmup teaches the generator to reproduce the exemplar
    comment (query code masked, so no direct mapping forms); (2) a short
    frozen-generator phase trains the retriever alone against the copying
    generator's loss differential; (3) the joint loop trains both models.
    Warmup phases are skipped entirely in freeze_generator mode, which must
    leave the generator untouched.

    Per optimizer step, rows touched since the previous step are re-embedded;
    after every epoch of phase 3 the whole index is rebuilt and the validation
    split is decoded (top-1 retrieval + beam search) for corpus BLEU early
    stopping. Returns the checkpoint with the best validation BLEU.
    `on_epoch_end`, if given, is called as (epoch, retriever_encoder,
    generator, index) for progress diagnostics.
    """
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    retriever_lr = config.retriever_learning_rate or config.learning_rate
    log = []

    if not config.freeze_generator and config.copy_warmup_epochs > 0:
        _copy_warmup(config, splits, generator, rng, log)

    index = build_index(retriever_encoder, splits.train)
    step = 0

    if not config.freeze_generator and config.retriever_warmup_epochs > 0:
        warm_opt = AccumulatingOptimizer([retriever_encoder], retriever_lr,
                                         config.grad_accum)
        for epoch in range(config.retriever_warmup_epochs):
            step = _joint_epoch(config, splits, retriever_encoder, generator,
                                index, warm_opt, rng, log, step, epoch,
                                "retriever_warmup", freeze_generator=True)

    if config.freeze_generator:
        models, lrs = [retriever_encoder], [retriever_lr]
    else:
        models, lrs = [retriever_encoder, generator], [retriever_lr, config.learning_rate]
    optimizer = AccumulatingOptimizer(models, config.learning_rate,
                                      config.grad_accum, per_model_lr=lrs)

    best = {"bleu": -1.0, "epoch": -1, "encoder": None, "generator": None}
    stale_epochs = 0

    for epoch in range(config.epochs):
        step = _joint_epoch(config, splits, retriever_encoder, generator,
                            index, optimizer, rng, log, step, epoch,
                            "joint", freeze_generator=config.freeze_generator)

        retriever_encoder.eval()
        generator.eval()
        bleu = validation_bleu(retriever_encoder, generator, index,
                               splits.validation, config.beam_size,
                               budgets=config.budgets, max_len=config.max_decode_len)
        log.append({"phase": "joint", "step": step, "epoch": epoch,
                    "validation_bleu": bleu})
        if on_epoch_end is not None:
            on_epoch_end(epoch, retriever_encoder, generator, index)
        if bleu > best["bleu"]:
            best.update(bleu=bleu, epoch=epoch,
                        encoder=copy.deepcopy(retriever_encoder.state_dict()),
                        generator=copy.deepcopy(generator.state_dict()))
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                break

    if best["encoder"] is not None:
        retriever_encoder.load_state_dict(best["encoder"])
        generator.load_state_dict(best["generator"])
    retriever_encoder.eval()
    generator.eval()
    index = build_index(retriever_encoder, splits.train, step=step)
    return TrainResult(retriever_encoder=retriever_encoder, generator=generator,
                       index=index, log=log, best_epoch=best["epoch"],
                       best_validation_bleu=best["bleu"])


def predict(retriever_encoder, generator, index, query, beam_size=10,
            budgets=Budgets(), max_len=64):
    """Top-1 retrieval (no self-exclusion) + beam decoding for one query."""
    if index.size < 1:
        raise ValueError("retrieval base is empty")
    was_training = retriever_encoder.training
    retriever_encoder.eval()
    with torch.no_grad():
        query_emb = normalize(retriever_encoder.encode(query.code_tokens))
    if was_training:
        retriever_encoder.train()
    exemplar = retrieve_topk(index, query_emb, 1)[0]
    gen_in = build_input(query, exemplar.pair, budgets)
    tokens = beam_decode(generator, gen_in, beam_size=beam_size, max_len=max_len)
    return tokens, exemplar


def write_training_log(log, path):
    with open(path, "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record) + "\n")


def config_to_dict(config):
    d = asdict(config)
    return d
