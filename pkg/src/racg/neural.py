"""Trainable models: a transformer code encoder (retriever side) and a
transformer encoder-decoder generator, sized for CPU training.

Both models share the vocabulary. The generator ties its target embedding
with the output projection. Checkpoints round-trip bit-exactly via
torch.save of the state dict plus a JSON-able manifest.
"""

import hashlib
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .corpus import CLS_ID, PAD_ID


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_size: int = 128
    dropout: float = 0.1
    max_positions: int = 512


def _positions(length, device):
    return torch.arange(length, device=device)


def _init_embeddings(*embeddings):
    # small-std init keeps the tied output projection near-uniform at start
    for emb in embeddings:
        nn.init.normal_(emb.weight, mean=0.0, std=0.02)
        if emb.padding_idx is not None:
            with torch.no_grad():
                emb.weight[emb.padding_idx].fill_(0.0)


class EncoderModel(nn.Module):
    """Maps a token sequence to a single embedding (the CLS position)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.hidden_size
        self.token_embedding = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
        self.position_embedding = nn.Embedding(config.max_positions, d)
        layer = nn.TransformerEncoderLayer(
            d_model=d, nhead=config.num_heads, dim_feedforward=config.ff_size,
            dropout=config.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=config.num_layers, enable_nested_tensor=False)
        _init_embeddings(self.token_embedding, self.position_embedding)

    @property
    def hidden_size(self):
        return self.config.hidden_size

    def _embed(self, ids):
        pos = _positions(ids.shape[1], ids.device)
        return self.token_embedding(ids) + self.position_embedding(pos)[None, :, :]

    def encode_batch(self, token_lists):
        """Embeddings for a batch of (non-empty) token id sequences."""
        if any(len(t) == 0 for t in token_lists):
            raise ValueError("cannot encode an empty token sequence")
        budget = self.config.max_positions - 1
        trimmed = [list(t)[:budget] for t in token_lists]
        width = 1 + max(len(t) for t in trimmed)
        device = self.token_embedding.weight.device
        ids = torch.full((len(trimmed), width), PAD_ID, dtype=torch.long, device=device)
        mask = torch.ones((len(trimmed), width), dtype=torch.bool, device=device)
        for i, toks in enumerate(trimmed):
            ids[i, 0] = CLS_ID
            ids[i, 1:1 + len(toks)] = torch.tensor(toks, dtype=torch.long, device=device)
            mask[i, :1 + len(toks)] = False
        hidden = self.encoder(self._embed(ids), src_key_padding_mask=mask)
        return hidden[:, 0, :]

    def encode(self, tokens):
        """Embedding of one token sequence; CLS is prepended here."""
        return self.encode_batch([tokens])[0]


class Seq2SeqModel(nn.Module):
    """Transformer encoder-decoder over the shared vocabulary."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.hidden_size
        self.token_embedding = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
        self.position_embedding = nn.Embedding(config.max_positions, d)
        self.transformer = nn.Transformer(
            d_model=d, nhead=config.num_heads,
            num_encoder_layers=config.num_layers, num_decoder_layers=config.num_layers,
            dim_feedforward=config.ff_size, dropout=config.dropout, batch_first=True)
        # the nested-tensor fast path breaks under padding masks on CPU
        self.transformer.encoder.use_nested_tensor = False
        # output projection tied to the embedding; bias kept separate
        self.output_bias = nn.Parameter(torch.zeros(config.vocab_size))
        _init_embeddings(self.token_embedding, self.position_embedding)

    @property
    def vocab_size(self):
        return self.config.vocab_size

    def _embed(self, ids):
        pos = _positions(ids.shape[1], ids.device)
        return self.token_embedding(ids) + self.position_embedding(pos)[None, :, :]

    def _device(self):
        return self.token_embedding.weight.device

    def _decode_logits(self, source, decoder_inputs):
        """Logits over the vocabulary for each decoder position.

        source: single token id list (shared by all rows); decoder_inputs:
        [B, T] long tensor of already-generated prefixes (CLS-led).
        """
        budget = self.config.max_positions
        src = torch.tensor([list(source)[:budget]], dtype=torch.long, device=self._device())
        memory = self.transformer.encoder(self._embed(src))
        memory = memory.expand(decoder_inputs.shape[0], -1, -1)
        causal = nn.Transformer.generate_square_subsequent_mask(
            decoder_inputs.shape[1], device=self._device(),
            dtype=self.token_embedding.weight.dtype)
        hidden = self.transformer.decoder(
            self._embed(decoder_inputs), memory, tgt_mask=causal, tgt_is_causal=True)
        return hidden @ self.token_embedding.weight.T + self.output_bias

    def token_logprobs(self, source, target):
        """log p(y_t | y_<t, source) for each target position (teacher forcing)."""
        if len(target) == 0:
            raise ValueError("target must be non-empty")
        if len(source) == 0:
            raise ValueError("source must be non-empty")
        target = list(target)[: self.config.max_positions - 1]
        decoder_in = torch.tensor([[CLS_ID] + target[:-1]], dtype=torch.long,
                                  device=self._device())
        logits = self._decode_logits(source, decoder_in)[0]
        logprobs = torch.log_softmax(logits, dim=-1)
        idx = torch.tensor(target, dtype=torch.long, device=self._device())
        return logprobs.gather(1, idx[:, None])[:, 0]

    def next_token_logprobs(self, source, prefixes):
        """Distribution over the next token for each prefix. [B, vocab]."""
        width = 1 + max(len(p) for p in prefixes)
        ids = torch.full((len(prefixes), width), PAD_ID, dtype=torch.long,
                         device=self._device())
        lengths = []
        for i, prefix in enumerate(prefixes):
            row = [CLS_ID] + list(prefix)
            ids[i, : len(row)] = torch.tensor(row, dtype=torch.long, device=self._device())
            lengths.append(len(row) - 1)
        logits = self._decode_logits(source, ids)
        rows = torch.arange(len(prefixes), device=self._device())
        last = logits[rows, torch.tensor(lengths, device=self._device())]
        return torch.log_softmax(last, dim=-1)


def make_encoder(config, seed=0):
    torch.manual_seed(seed)
    return EncoderModel(config)


def make_generator(config, seed=0):
    torch.manual_seed(seed)
    return Seq2SeqModel(config)


class AccumulatingOptimizer:
    """Adam with gradient accumulation: parameters move only every
    `accum_steps`-th call to step(), using the mean of accumulated gradients."""

    def __init__(self, models, learning_rate, accum_steps=4, per_model_lr=None):
        self.models = list(models)
        if per_model_lr is None:
            per_model_lr = [learning_rate] * len(self.models)
        groups = [{"params": list(m.parameters()), "lr": lr}
                  for m, lr in zip(self.models, per_model_lr)]
        self.opt = torch.optim.Adam(groups, lr=learning_rate)
        self.accum_steps = accum_steps
        self._pending = 0

    def step(self):
        """Call once per micro-batch after backward(). Returns True when an
        actual parameter update was applied."""
        self._pending += 1
        if self._pending < self.accum_steps:
            return False
        for m in self.models:
            for p in m.parameters():
                if p.grad is not None:
                    p.grad /= self.accum_steps
        self.opt.step()
        self.opt.zero_grad()
        self._pending = 0
        return True

    def flush(self):
        """Apply whatever is pending at an epoch boundary."""
        if self._pending == 0:
            return False
        for m in self.models:
            for p in m.parameters():
                if p.grad is not None:
                    p.grad /= self._pending
        self.opt.step()
        self.opt.zero_grad()
        self._pending = 0
        return True


def parameter_hash(model):
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, kind, vocab_hash):
    torch.save({
        "kind": kind,
        "config": asdict(model.config),
        "vocab_hash": vocab_hash,
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path):
    """Returns (model, manifest). The model class follows the saved kind."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig(**payload["config"])
    if payload["kind"] == "encoder":
        model = EncoderModel(config)
    elif payload["kind"] == "generator":
        model = Seq2SeqModel(config)
    else:
        raise ValueError(f"unknown checkpoint kind: {payload['kind']!r}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, {"kind": payload["kind"], "vocab_hash": payload["vocab_hash"],
                   "config": payload["config"]}
