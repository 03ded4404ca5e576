import hashlib

import numpy as np
import pytest
import torch

from ffedit.denoiser import (AdapterTargetError, AttentionHooks, DenoiserNet, attention,
                             parameter_digest)
from ffedit.lora import init_adapters
from conftest import tiny_model

# sha256 of the tiny model's output on the fixed input below (seeded weights, float32)
GOLDEN_OUTPUT_SHA = "13d8220d7ff03f50f157701c4f82cf0fff26f5bdf294c3b3cf1232f0bcefefdf"


def _inputs(seed=0, b=1, L=3):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, L, 4, 4, 4, generator=g)
    c = torch.randn(b, 4, 4, 4, generator=g)
    tok = torch.randn(b, 16, 16, generator=g)
    sigma = torch.full((b,), 0.7)
    return z, sigma, c, tok


def _sha(t):
    return hashlib.sha256(t.detach().numpy().tobytes()).hexdigest()


def test_attention_single_key():
    q = torch.randn(5, 3)
    k = torch.randn(1, 3)
    v = torch.tensor([[2.0, -1.0]])
    out, p = attention(q, k, v)
    assert torch.all(p == 1)
    assert torch.allclose(out, v.expand(5, -1))


def test_attention_equal_scores_is_mean():
    q = torch.tensor([[1.0, 0.0]])
    k = torch.tensor([[0.0, 1.0], [0.0, -1.0], [0.0, 2.0]])
    v = torch.randn(3, 4)
    out, p = attention(q, k, v)
    assert torch.allclose(p, torch.full((1, 3), 1 / 3))
    assert torch.allclose(out, v.mean(0, keepdim=True), atol=1e-6)


def test_attention_dense_oracle():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    s = q @ k.T / 2.0
    e = np.exp(s - s.max(1, keepdims=True))
    p = e / e.sum(1, keepdims=True)
    out, probs = attention(*(torch.from_numpy(a) for a in (q, k, v)))
    np.testing.assert_allclose(probs.numpy(), p, rtol=1e-12)
    np.testing.assert_allclose(out.numpy(), p @ v, rtol=1e-12)
    np.testing.assert_allclose(probs.sum(-1).numpy(), 1.0, atol=1e-5)


def test_attention_dim_mismatch():
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 4))


def test_output_shape_and_determinism(model):
    z, s, c, tok = _inputs()
    out1, out2 = model(z, s, c, tok), model(z, s, c, tok)
    assert out1.shape == z.shape
    assert torch.equal(out1, out2)


def test_golden_output_hash():
    z, s, c, tok = _inputs()
    a = _sha(tiny_model(0)(z, s, c, tok))
    b = _sha(tiny_model(0)(z, s, c, tok))
    assert a == b
    if GOLDEN_OUTPUT_SHA is not None:
        assert a == GOLDEN_OUTPUT_SHA


def test_zero_adapters_bit_identical(model):
    z, s, c, tok = _inputs()
    ads = init_adapters(model, rank=4, seed=1)
    assert torch.equal(model(z, s, c, tok), model(z, s, c, tok, adapters=ads))


def test_unknown_adapter_target(model):
    z, s, c, tok = _inputs()
    ads = init_adapters(model, rank=2)
    ads[("nope.temporal", "query")] = next(iter(ads.values()))
    with pytest.raises(AdapterTargetError):
        model(z, s, c, tok, adapters=ads)


def test_shape_errors(model):
    z, s, c, tok = _inputs()
    with pytest.raises(ValueError):
        model(z[0], s, c, tok)
    with pytest.raises(ValueError):
        model(z, s, c[:, :3], tok)
    with pytest.raises(ValueError):
        model(z, torch.zeros(1), c, tok)


class Recorder(AttentionHooks):
    def __init__(self):
        self.order = []
        self.rows = []

    def on_probs(self, site, probs):
        self.order.append(site.layer_id)
        self.rows.append(probs.sum(-1))
        assert torch.all(probs >= 0)
        return probs


def test_hooks_are_observation_neutral_and_ordered(model):
    z, s, c, tok = _inputs()
    rec = Recorder()
    assert torch.equal(model(z, s, c, tok), model(z, s, c, tok, hooks=rec))
    assert rec.order == [site.layer_id for site in model.instrumented_sites]
    for r in rec.rows:
        assert torch.allclose(r, torch.ones_like(r), atol=1e-5)


def test_sites_and_downscale_factors(model):
    kinds = {(s.layer_id, s.downscale_factor) for s in model.temporal_sites}
    assert kinds == {("enc1.temporal", 1), ("enc2.temporal", 2), ("mid.temporal", 4),
                     ("dec2.temporal", 2), ("dec1.temporal", 1)}
    assert len({s.layer_id for s in model.sites}) == len(model.sites)
    assert set(model.lora_targets) == {(s.layer_id, p) for s in model.temporal_sites
                                       for p in ("query", "key", "value", "output")}


class TemporalTap(AttentionHooks):
    def __init__(self, layer):
        self.layer = layer
        self.out = None

    def extend_kv(self, site, k, v):
        return k, v

    def on_probs(self, site, probs):
        if site.layer_id == self.layer:
            self.out = probs.clone()
        return probs


def test_temporal_attention_mixes_only_frames(model):
    # the first temporal site sees the residual/spatial output; perturbing one
    # position of one frame must leave other positions' temporal maps alone
    # when spatial attention is bypassed, so compare via a hook on the layer input
    lvl = model.enc1
    from ffedit.denoiser import RunContext
    L, hw, c = 3, 16, 8
    tokens = torch.randn(hw, L, c)
    tap = TemporalTap("enc1.temporal")
    ctx = RunContext(None, tap, None, L)
    base = lvl.temporal(tokens, ctx)
    p0 = tap.out
    pert = tokens.clone()
    pert[5, 1] += 1.0
    out = lvl.temporal(pert, ctx)
    changed = (out - base).abs().sum(dim=(1, 2)) > 0
    assert changed.tolist() == [i == 5 for i in range(hw)]
    heads = lvl.temporal.heads
    same = torch.ones(hw * heads, dtype=torch.bool)
    same[5 * heads:6 * heads] = False
    assert torch.equal(tap.out[same], p0[same])


def test_checkpoint_round_trip(tmp_path, model):
    model.save(tmp_path / "m.bin", {"note": "x"})
    back = DenoiserNet.load(tmp_path / "m.bin")
    assert parameter_digest(back) == parameter_digest(model)
    z, s, c, tok = _inputs()
    assert torch.equal(back(z, s, c, tok), model(z, s, c, tok))
