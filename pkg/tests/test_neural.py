import pytest
import torch

from racg.neural import (
    AccumulatingOptimizer, ModelConfig, load_checkpoint, make_encoder,
    make_generator, parameter_hash, save_checkpoint,
)

CONFIG = ModelConfig(vocab_size=30, hidden_size=32, num_layers=1, num_heads=2,
                     ff_size=64, dropout=0.0, max_positions=64)


def test_same_seed_same_parameters():
    a, b = make_encoder(CONFIG, seed=1), make_encoder(CONFIG, seed=1)
    assert parameter_hash(a) == parameter_hash(b)
    c = make_encoder(CONFIG, seed=2)
    assert parameter_hash(a) != parameter_hash(c)


def test_encode_single_matches_batch():
    enc = make_encoder(CONFIG, seed=1).eval()
    toks = [7, 8, 9, 10]
    with torch.no_grad():
        single = enc.encode(toks)
        batched = enc.encode_batch([toks, [7, 8]])[0]
    assert torch.allclose(single, batched, atol=1e-6)


def test_encode_rejects_empty_sequence():
    enc = make_encoder(CONFIG, seed=1)
    with pytest.raises(ValueError):
        enc.encode([])


def test_encode_truncates_to_position_budget():
    enc = make_encoder(CONFIG, seed=1).eval()
    long = [7] * 500
    with torch.no_grad():
        a = enc.encode(long)
        b = enc.encode(long[: CONFIG.max_positions - 1])
    assert torch.allclose(a, b)


def test_generator_output_projection_is_tied():
    gen = make_generator(CONFIG, seed=1)
    # the only vocab x hidden matrix is the embedding itself
    vocab_shaped = [n for n, p in gen.named_parameters()
                    if tuple(p.shape) == (CONFIG.vocab_size, CONFIG.hidden_size)]
    assert vocab_shaped == ["token_embedding.weight"]
    # perturbing the embedding must change the logits
    gen.eval()
    with torch.no_grad():
        before = gen.token_logprobs([7, 8], [9, 3])
        gen.token_embedding.weight[9] += 1.0
        after = gen.token_logprobs([7, 8], [9, 3])
    assert not torch.allclose(before, after)


def test_token_logprobs_are_normalized():
    gen = make_generator(CONFIG, seed=1).eval()
    with torch.no_grad():
        lp = gen.next_token_logprobs([7, 8, 9], [[10], [11, 12]])
    assert torch.allclose(lp.exp().sum(dim=1), torch.ones(2), atol=1e-5)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    gen = make_generator(CONFIG, seed=4)
    path = tmp_path / "gen.pt"
    save_checkpoint(gen, path, "generator", "vhash")
    loaded, meta = load_checkpoint(path)
    assert meta["kind"] == "generator" and meta["vocab_hash"] == "vhash"
    assert parameter_hash(loaded) == parameter_hash(gen)


def test_checkpoint_rejects_unknown_kind(tmp_path):
    gen = make_generator(CONFIG, seed=4)
    path = tmp_path / "x.pt"
    save_checkpoint(gen, path, "generator", "v")
    payload = torch.load(path, weights_only=False)
    payload["kind"] = "mystery"
    torch.save(payload, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_accumulation_updates_only_on_boundary():
    model = make_encoder(CONFIG, seed=1)
    opt = AccumulatingOptimizer([model], 1e-2, accum_steps=3)
    before = parameter_hash(model)
    for i in range(2):
        model.encode([7, 8]).sum().backward()
        assert opt.step() is False
    assert parameter_hash(model) == before
    model.encode([7, 8]).sum().backward()
    assert opt.step() is True
    assert parameter_hash(model) != before


def test_flush_applies_pending_gradients():
    model = make_encoder(CONFIG, seed=1)
    opt = AccumulatingOptimizer([model], 1e-2, accum_steps=4)
    model.encode([7, 8]).sum().backward()
    opt.step()
    before = parameter_hash(model)
    assert opt.flush() is True
    assert parameter_hash(model) != before
    assert opt.flush() is False
