"""Exemplar-conditioned generation: input construction with truncation
budgets, per-exemplar cross-entropy loss, and beam-search decoding."""

from dataclasses import dataclass

import torch

from .corpus import EOS_ID, HASH_ID, NL_ID


@dataclass
class Budgets:
    code: int = 256
    comment: int = 64
    total: int = 512


@dataclass
class GenerationInput:
    tokens: list
    source_id: str
    exemplar_id: str


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float
    finished: bool

    def normalized_score(self):
        return self.logprob / max(len(self.tokens), 1)


def build_input(query, exemplar, budgets=Budgets()):
    """query code + \\n + # + exemplar comment + \\n + exemplar code.

    Per-segment budgets truncate from the right; any remaining overflow over
    the total budget comes out of the exemplar code segment.
    """
    code = list(query.code_tokens)[: budgets.code]
    ex_comment = list(exemplar.comment_tokens)[: budgets.comment]
    ex_code = list(exemplar.code_tokens)
    overhead = len(code) + len(ex_comment) + 3  # two \n separators + one #
    ex_code = ex_code[: max(0, budgets.total - overhead)]
    tokens = code + [NL_ID, HASH_ID] + ex_comment + [NL_ID] + ex_code
    return GenerationInput(tokens=tokens, source_id=query.id, exemplar_id=exemplar.id)


def generation_loss(model, gen_input, target):
    """Cross-entropy of the ground-truth comment: -sum_t log p(y_t | y_<t, x').

    `target` must be non-empty and end with the end-of-sequence token.
    """
    if not target:
        raise ValueError("target comment is empty")
    if target[-1] != EOS_ID:
        raise ValueError("target must end with the end-of-sequence token")
    return -model.token_logprobs(gen_input.tokens, target).sum()


def beam_decode(model, gen_input, beam_size=10, max_len=64):
    """Beam search; returns the finished hypothesis with the highest
    length-normalized cumulative log-probability, end marker stripped."""
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    was_training = model.training
    model.eval()
    try:
        live = [BeamHypothesis(tokens=[], logprob=0.0, finished=False)]
        finished = []
        with torch.no_grad():
            for _ in range(max_len):
                logprobs = model.next_token_logprobs(
                    gen_input.tokens, [h.tokens for h in live])
                flat = []
                for b, hyp in enumerate(live):
                    row = logprobs[b]
                    top = torch.topk(row, min(beam_size, row.shape[0]))
                    for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                        flat.append((hyp.logprob + lp, b, tok))
                flat.sort(key=lambda t: -t[0])
                next_live = []
                for lp, b, tok in flat[:beam_size]:
                    hyp = BeamHypothesis(tokens=live[b].tokens + [tok],
                                         logprob=lp, finished=tok == EOS_ID)
                    if hyp.finished:
                        finished.append(hyp)
                    else:
                        next_live.append(hyp)
                live = next_live
                if not live:
                    break
        # force-finish whatever is still live at max_len
        for hyp in live:
            finished.append(BeamHypothesis(tokens=hyp.tokens, logprob=hyp.logprob,
                                           finished=True))
        best = max(finished, key=lambda h: h.normalized_score())
    finally:
        if was_training:
            model.train()
    tokens = best.tokens
    if tokens and tokens[-1] == EOS_ID:
        tokens = tokens[:-1]
    return tokens
