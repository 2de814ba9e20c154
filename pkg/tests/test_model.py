import numpy as np
import pytest
import torch

from avwhisper.checkpoint import CheckpointError, load_checkpoint, parameter_checksums, save_checkpoint
from avwhisper.model import (
    SPECIALS,
    CharTokenizer,
    ModelConfig,
    ModelError,
    build_model,
)
from avwhisper.train import batch_loss, make_example
from oracles import central_difference, relative_error

VOCAB = SPECIALS + tuple("abcdef")


def tiny(seed=0, gates=False, dtype=torch.float64, **kw):
    cfg = ModelConfig(vocab=VOCAB, d_model=16, n_heads=2, visual_dim=8, max_text_len=12, n_mels=10, **kw)
    model = build_model(cfg, seed=seed).to(dtype)
    if gates:
        model.add_gates(seed)
    return model.eval()


def randomize(module, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def rand_mel(t=10, n=10, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, t, n, generator=g, dtype=torch.float64) * 2 - 1


def rand_visual(model, frames=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return model.embed_visual(torch.rand(frames, 96, 96, generator=g, dtype=torch.float64))


TOKENS = torch.tensor([[1, 3, 5, 6, 7, 8]])


def test_config_rejects_bad_heads():
    with pytest.raises(ModelError):
        ModelConfig(vocab=VOCAB, d_model=10, n_heads=4)


def test_config_requires_specials():
    with pytest.raises(ModelError):
        ModelConfig(vocab=("a", "b"))


def test_tokenizer_round_trip():
    tok = CharTokenizer.from_texts(["天地", "地日"])
    ids = tok.encode("日天")
    assert tok.decode(ids + [tok.eot] + ids) == "日天"
    assert tok.prompt("zh") == [tok.sot, tok.index["<zh>"]]
    with pytest.raises(ModelError):
        tok.encode("x")


# --------------------------------------------------------------------------- encoder


def test_encoder_deterministic_and_downsamples():
    model = tiny()
    a, _ = model.encode_audio(rand_mel(100))
    b, _ = model.encode_audio(rand_mel(100))
    assert a.shape == (1, 50, 16)
    assert torch.equal(a, b)
    assert model.encode_audio(rand_mel(7))[0].shape[1] == 4


def test_encoder_rejects_one_frame():
    with pytest.raises(ModelError):
        tiny().encode_audio(rand_mel(1))


def test_encoder_is_shared_between_branches():
    model = tiny()
    mel = rand_mel()
    before_w = model.forward_branch(mel, None, TOKENS, "whisper")
    before_n = model.forward_branch(mel, None, TOKENS, "normal")
    with torch.no_grad():
        model.encoder.conv1.weight.mul_(1.5)
    assert not torch.equal(before_w, model.forward_branch(mel, None, TOKENS, "whisper"))
    assert not torch.equal(before_n, model.forward_branch(mel, None, TOKENS, "normal"))


def test_masked_frames_do_not_leak_into_valid_ones():
    model = tiny()
    mel = rand_mel(12)
    alone, _ = model.encode_audio(mel)
    # one zero frame matches the conv's own zero padding; past it anything goes
    tail = torch.cat([torch.zeros(1, 1, 10, dtype=mel.dtype), rand_mel(5, seed=9) * 50], dim=1)
    batch, mask = model.encode_audio(torch.cat([mel, tail], dim=1), torch.tensor([12]))
    assert mask[0, :6].logical_not().all() and mask[0, 6:].all()
    torch.testing.assert_close(batch[0, :6], alone[0], rtol=1e-9, atol=1e-9)


# --------------------------------------------------------------------------- projection


def test_projection_identity_at_init():
    model = tiny()
    x = torch.randn(3, 7, 16, dtype=torch.float64)
    assert torch.equal(model.project_whisper(x), x)
    assert torch.count_nonzero(model.projection.linear2.weight) == 0
    assert torch.count_nonzero(model.projection.linear1.weight) > 0


def test_projection_first_layer_is_he_normal():
    model = build_model(ModelConfig(vocab=VOCAB, d_model=256, n_heads=4), seed=3)
    w = model.projection.linear1.weight.detach()
    assert float(w.std()) == pytest.approx(np.sqrt(2 / 256), rel=0.05)
    assert float(w.mean()) == pytest.approx(0, abs=0.01)


def hand_projection(model):
    with torch.no_grad():
        model.projection.linear1.weight.copy_(torch.eye(16))
        model.projection.linear1.bias.zero_()
        model.projection.linear2.weight.copy_(torch.eye(16))
        model.projection.linear2.bias.zero_()


def test_projection_hand_parameters_double_positive_input():
    model = tiny()
    hand_projection(model)
    v = torch.rand(1, 4, 16, dtype=torch.float64) + 0.1
    torch.testing.assert_close(model.project_whisper(v), 2 * v, rtol=0, atol=1e-15)


def test_projection_relu_dead_region():
    model = tiny()
    hand_projection(model)
    with torch.no_grad():
        model.projection.linear2.weight.normal_()
    v = -(torch.rand(1, 4, 16, dtype=torch.float64) + 0.1)
    assert torch.equal(model.project_whisper(v), v)


def test_projection_shape_mismatch():
    with pytest.raises(ModelError):
        tiny().project_whisper(torch.zeros(1, 2, 5, dtype=torch.float64))


# --------------------------------------------------------------------------- visual


def test_visual_absent_is_zero():
    v = tiny().embed_visual(None, nominal_length=7)
    assert v.frames.shape == (1, 7, 8) and not v.present.any()
    assert torch.count_nonzero(v.frames) == 0


def test_visual_one_row_per_frame():
    model = tiny()
    assert model.embed_visual(torch.rand(25, 96, 96, dtype=torch.float64)).frames.shape == (1, 25, 8)


def test_visual_zero_frames_zero_embedding():
    model = tiny()
    assert torch.count_nonzero(model.embed_visual(torch.zeros(3, 96, 96, dtype=torch.float64)).frames) == 0


def test_visual_rejects_bad_size():
    with pytest.raises(ModelError):
        tiny().embed_visual(torch.zeros(3, 64, 64))


# --------------------------------------------------------------------------- decoder


def test_fusion_at_init_is_bitwise_identity():
    base = tiny()
    fused = tiny(gates=True)
    audio, _ = base.encode_audio(rand_mel())
    v = rand_visual(fused)
    assert torch.count_nonzero(v.frames) > 0
    ref = base.decode(audio, TOKENS)
    assert torch.equal(fused.decode(audio, TOKENS, v, fusion_enabled=True), ref)
    assert torch.equal(fused.decode(audio, TOKENS, v, fusion_enabled=False), ref)


def test_visual_perturbation_blocked_by_zero_gates():
    model = tiny(gates=True)
    audio, _ = model.encode_audio(rand_mel())
    a = model.decode(audio, TOKENS, rand_visual(model, seed=1), fusion_enabled=True)
    b = model.decode(audio, TOKENS, rand_visual(model, seed=2), fusion_enabled=True)
    assert torch.equal(a, b)


def test_open_gates_let_visual_through():
    model = tiny(gates=True)
    with torch.no_grad():
        for blk in model.decoder.blocks:
            blk.gated.alpha.fill_(0.5)
    audio, _ = model.encode_audio(rand_mel())
    a = model.decode(audio, TOKENS, rand_visual(model, seed=1), fusion_enabled=True)
    b = model.decode(audio, TOKENS, rand_visual(model, seed=2), fusion_enabled=True)
    assert not torch.equal(a, b)


@pytest.mark.parametrize("j", range(6))
def test_decoder_is_causal(j):
    model = tiny(gates=True)
    randomize(model, 5)
    audio, _ = model.encode_audio(rand_mel())
    v = rand_visual(model)
    a = model.decode(audio, TOKENS, v, fusion_enabled=True)
    changed = TOKENS.clone()
    changed[0, j] = (changed[0, j] + 1) % len(VOCAB)
    b = model.decode(audio, changed, v, fusion_enabled=True)
    assert torch.equal(a[:, :j], b[:, :j])
    assert not torch.equal(a[:, j:], b[:, j:])


def test_decode_errors():
    model = tiny()
    audio, _ = model.encode_audio(rand_mel())
    with pytest.raises(ModelError):
        model.decode(audio, torch.tensor([[1, 3, len(VOCAB)]]))
    with pytest.raises(ModelError):
        model.decode(audio, torch.ones(1, 13, dtype=torch.long))


# --------------------------------------------------------------------------- inference


def test_untrained_transcription_terminates():
    model = tiny()
    for seed in range(5):
        text = model.greedy_transcribe(rand_mel(seed=seed), None, "whisper", "zh")
        assert len(text) <= model.cfg.max_text_len - 2
        assert set(text) <= set("abcdef")


def test_projection_not_used_for_normal_speech():
    model = tiny()
    randomize(model.projection, 1)
    mel = rand_mel(seed=3)
    normal = model.greedy_transcribe(mel, None, "normal", "zh")
    logits = model.forward_branch(mel, None, TOKENS, "normal")
    with torch.no_grad():
        for p in model.projection.parameters():
            p.zero_()
    assert model.greedy_transcribe(mel, None, "normal", "zh") == normal
    assert torch.equal(model.forward_branch(mel, None, TOKENS, "normal"), logits)


@pytest.mark.parametrize("temperature", [0.1, 0.7, 3.0])
def test_temperature_does_not_change_greedy_output(temperature):
    model = tiny()
    randomize(model, 9)
    mel = rand_mel(seed=4)
    assert model.greedy_transcribe(mel, None, "whisper", "zh", temperature=temperature) == model.greedy_transcribe(
        mel, None, "whisper", "zh"
    )


# --------------------------------------------------------------------------- gradients


def grad_setup():
    model = tiny(gates=True)
    randomize(model.projection, 11)
    with torch.no_grad():
        for i, blk in enumerate(model.decoder.blocks):
            blk.gated.alpha.fill_(0.3 + 0.1 * i)
            blk.gated.beta.fill_(-0.2 + 0.1 * i)
    tok = CharTokenizer(VOCAB)
    rng = np.random.default_rng(0)
    lips = rng.uniform(0, 1, size=(3, 96, 96)).astype(np.float32)
    w = make_example("w", "whisper", "zh", "abca", rng.uniform(-1, 1, (5, 10)), tok, lips)
    n = make_example("n", "normal", "zh", "abc", rng.uniform(-1, 1, (5, 10)), tok, lips)
    return model, [(w, n)]


def test_gradients_match_finite_differences():
    model, batch = grad_setup()
    loss = lambda: batch_loss(batch, model, stage=2).L_total  # noqa: E731
    targets = {
        name: p
        for name, p in model.named_parameters()
        if name.startswith("projection.") or name.endswith((".alpha", ".beta"))
    }
    assert len(targets) == 4 + 2 * len(model.decoder.blocks)
    model.zero_grad()
    loss().backward()
    for name, p in targets.items():
        numeric = central_difference(loss, p, h=1e-4)
        err = relative_error(p.grad, numeric)
        assert float(err.max()) < 1e-3, name


def test_encoder_gradient_is_sum_of_branch_gradients():
    model, batch = grad_setup()
    enc = list(model.encoder.parameters())

    def grads(fn):
        model.zero_grad()
        fn().backward()
        return [p.grad.clone() for p in enc]

    total = grads(lambda: batch_loss(batch, model, 1).L_total)
    lw = grads(lambda: batch_loss(batch, model, 1).L_w)
    ln = grads(lambda: batch_loss(batch, model, 1).L_n)
    for t, a, b in zip(total, lw, ln):
        torch.testing.assert_close(t, a + b, rtol=1e-10, atol=1e-12)


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = tiny(dtype=torch.float32)
    save_checkpoint(tmp_path / "c.pt", model, stage=1, seed=4)
    loaded, meta = load_checkpoint(tmp_path / "c.pt")
    assert meta["stage"] == 1 and meta["seed"] == 4
    assert parameter_checksums(loaded) == parameter_checksums(model)
    assert loaded.cfg == model.cfg


def test_stage1_checkpoint_gains_zero_gates(tmp_path):
    model = tiny(dtype=torch.float32)
    save_checkpoint(tmp_path / "c.pt", model, stage=1, seed=0)
    loaded, _ = load_checkpoint(tmp_path / "c.pt", for_stage=2)
    assert loaded.has_gates
    assert all(b.gated.alpha.item() == 0 and b.gated.beta.item() == 0 for b in loaded.decoder.blocks)
    save_checkpoint(tmp_path / "c2.pt", loaded, stage=2, seed=0)
    again, meta = load_checkpoint(tmp_path / "c2.pt")
    assert again.has_gates and meta["stage"] == 2
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c2.pt", for_stage=1)


def test_checkpoint_detects_tampering(tmp_path):
    model = tiny(dtype=torch.float32)
    save_checkpoint(tmp_path / "c.pt", model, stage=1, seed=0)
    blob = torch.load(tmp_path / "c.pt", weights_only=True)
    blob["tensors"]["projection.linear2.bias"][0] = 1.0
    torch.save(blob, tmp_path / "c.pt")
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c.pt")
