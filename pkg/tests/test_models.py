import numpy as np
import pytest
import torch

from causal_sfda import models as md
from causal_sfda.objectives import DiagCovariance


def test_template_words_drop_class_slot():
    assert md.template_words("a photo of a [CLS].") == ["a", "photo", "of", "a"]
    assert md.template_words("[CLS]") == []


def test_init_prompt_is_seeded_and_padded():
    a = md.init_prompt("a photo of a [CLS].", n_tokens=6, width=8, seed=1)
    b = md.init_prompt("a photo of a [CLS].", n_tokens=6, width=8, seed=1)
    assert a.hash() == b.hash()
    assert a.tokens.shape == (6, 8) and a.tokens.requires_grad
    assert torch.all(a.tokens[4:] == 0)
    # Repeated words share an embedding.
    assert torch.equal(a.tokens[0], a.tokens[3])
    assert md.init_prompt(seed=2, width=8).hash() != md.init_prompt(seed=1, width=8).hash()
    with pytest.raises(ValueError):
        md.init_prompt("[CLS]")


def test_aligned_images_score_their_own_class():
    enc = md.ToyVilEncoder.from_class_names(["a", "b", "c", "d", "e"], in_dim=64, width=32, seed=0)
    G = enc.image_proj.numpy()
    X = (np.linalg.pinv(G) @ enc.anchors.numpy().T).T
    ctx = md.PromptContext(torch.zeros(4, 32, dtype=md.DTYPE))
    probs = torch.softmax(md.vil_class_logits(enc, X, ctx), dim=1).numpy()
    assert np.array_equal(probs.argmax(axis=1), np.arange(5))
    assert probs.max(axis=1).min() > 0.95


def test_encoder_is_frozen():
    enc = md.ToyVilEncoder.from_class_names(["a", "b"], in_dim=6, width=4)
    before = enc.parameter_hash()
    ctx = md.init_prompt(width=4)
    logits = enc.class_logits(torch.randn(3, 6, dtype=md.DTYPE), ctx)
    logits.sum().backward()
    assert ctx.tokens.grad is not None
    assert not any(b.requires_grad for b in enc.buffers())
    assert list(enc.parameters()) == []
    assert enc.parameter_hash() == before


def test_encoder_input_errors():
    enc = md.ToyVilEncoder.from_class_names(["a", "b"], in_dim=6, width=4)
    with pytest.raises(ValueError):
        md.vil_class_logits(enc, np.zeros((0, 6)), md.init_prompt(width=4))
    with pytest.raises(ValueError):
        enc.class_logits(torch.zeros(2, 5, dtype=md.DTYPE), md.init_prompt(width=4))
    with pytest.raises(ValueError):
        enc.class_logits(torch.zeros(2, 6, dtype=md.DTYPE), md.init_prompt(width=5))


def test_target_model_seeding():
    a, b, c = md.TargetModel(8, 3, seed=1), md.TargetModel(8, 3, seed=1), md.TargetModel(8, 3, seed=2)
    assert a.parameter_hash() == b.parameter_hash() != c.parameter_hash()
    assert a.parameter_count() == 8 * 64 + 64 + 64 * 3 + 3
    assert md.target_logits(a, np.zeros((2, 8))).shape == (2, 3)
    with pytest.raises(ValueError):
        md.target_logits(a, np.zeros((2, 7)))


def test_read_only_inputs_are_accepted():
    x = np.zeros((2, 8))
    x.setflags(write=False)
    assert md.target_logits(md.TargetModel(8, 3), x).shape == (2, 3)


def test_checkpoint_round_trip(tmp_path):
    model = md.TargetModel(5, 3, hidden=7, depth=2, seed=4)
    prompt = md.init_prompt(width=6, seed=3)
    cov = DiagCovariance(sigma=[0.5, 1.5, 2.5])
    path = tmp_path / "m.bin"
    md.save_checkpoint(path, model, ["x", "y", "z"], seed=9, prompt=prompt, sigma=cov.sigma)
    ck = md.load_checkpoint(path)
    assert ck["model"].parameter_hash() == model.parameter_hash()
    assert ck["prompt"].hash() == prompt.hash()
    np.testing.assert_array_equal(ck["sigma"], [0.5, 1.5, 2.5])
    assert ck["header"]["class_names"] == ["x", "y", "z"] and ck["header"]["seed"] == 9
    md.save_checkpoint(tmp_path / "again.bin", ck["model"], ["x", "y", "z"], 9, ck["prompt"], ck["sigma"])
    assert md.checkpoint_digest(path) == md.checkpoint_digest(tmp_path / "again.bin")


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(md.CheckpointError):
        md.load_checkpoint(bad)
    good = tmp_path / "good.bin"
    md.save_checkpoint(good, md.TargetModel(2, 2), ["a", "b"], 0)
    good.write_bytes(good.read_bytes() + b"\0" * 8)
    with pytest.raises(md.CheckpointError):
        md.load_checkpoint(good)
