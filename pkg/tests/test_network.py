import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualskin.exceptions import ConfigError, ValidationError
from dualskin.network import (
    ModelConfig,
    clone,
    decode,
    encode,
    forward_stage1,
    forward_two_stage,
    init_params,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
)
from dualskin.training import TrainConfig, train

TINY = ModelConfig(input_size=16, base_channels=4)


def _images(n=2, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


def test_init_deterministic():
    assert param_checksum(init_params(TINY, 3)) == param_checksum(init_params(TINY, 3))
    assert param_checksum(init_params(TINY, 3)) != param_checksum(init_params(TINY, 4))


def test_init_norm_affine_and_independent_decoders():
    net = init_params(TINY, 0)
    for name, p in net.named_parameters():
        if name.endswith("norm.weight"):
            assert torch.all(p == 1)
        if name.endswith("norm.bias"):
            assert torch.all(p == 0)
    ds = dict(net.decoders["skin"].named_parameters())
    db = dict(net.decoders["body"].named_parameters())
    assert ds.keys() == db.keys()
    assert any(not torch.equal(ds[k], db[k]) for k in ds if ds[k].ndim == 4)


def test_desk_and_paper_bottleneck_arithmetic():
    assert ModelConfig().bottleneck_shape == (4, 4, 256)
    paper = ModelConfig.paper_scale()
    assert paper.bottleneck_shape == (32, 32, 1024)
    assert paper.guidance_bottleneck_shape == (32, 32, 512)
    assert [paper.guidance_channels(k) for k in range(5)] == [32, 64, 128, 256, 512]


@settings(max_examples=20, deadline=None)
@given(size=st.sampled_from([16, 32, 48, 64, 512]), base=st.sampled_from([2, 4, 16, 64]))
def test_bottleneck_formula(size, base):
    cfg = ModelConfig(input_size=size, base_channels=base)
    assert cfg.bottleneck_shape == (size // 16, size // 16, base * 16)
    assert cfg.guidance_channels(2) * 2 == cfg.channels(2)


@pytest.mark.parametrize("kw", [dict(input_size=20), dict(base_channels=3), dict(guidance_channel_ratio=0.25)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_encode_spatial_halving_and_purity():
    net = init_params(TINY, 0).eval()
    x = _images()
    f1, f2 = encode(net, x), encode(net, x)
    assert [s.shape[2] for s in f1.skips] == [16, 8, 4, 2]
    assert tuple(f1.bottleneck.shape[1:]) == (64, 1, 1)
    assert torch.equal(f1.bottleneck, f2.bottleneck)
    g = torch.zeros(2, 1, 16, 16)
    assert torch.equal(decode(net, "skin", f1, g), decode(net, "skin", encode(net, x), g))


def test_zero_image_finite():
    net = init_params(TINY, 0).eval()
    o_s, o_b = forward_stage1(net, torch.zeros(2, 3, 16, 16))
    assert torch.isfinite(o_s).all() and torch.isfinite(o_b).all()


def test_size_mismatch_and_bad_branch():
    net = init_params(TINY, 0)
    with pytest.raises(ValidationError):
        encode(net, _images(size=32))
    f = encode(net, _images())
    with pytest.raises(ValidationError):
        decode(net, "hair", f, torch.zeros(2, 1, 16, 16))
    with pytest.raises(ValidationError):
        decode(net, "skin", f, torch.zeros(2, 1, 8, 8))


@pytest.mark.parametrize("training", [True, False])
def test_two_stage_shapes_and_range(training):
    net = init_params(ModelConfig(input_size=32, base_channels=4), 1).train(training)
    trace = forward_two_stage(net, _images(3, 32))
    for out in (trace.O_S, trace.O_B, trace.O2_S, trace.O2_B):
        assert out.shape == (3, 1, 32, 32)
        assert (out > 0).all() and (out < 1).all()


def test_stage1_uses_cross_assigned_initial_guidance():
    net = init_params(TINY, 0).eval()
    x = _images()
    e_s, e_b = torch.zeros(2, 1, 16, 16), torch.ones(2, 1, 16, 16)
    o_s, o_b = forward_stage1(net, x, (e_s, e_b))
    f = encode(net, x)
    assert torch.equal(o_s, decode(net, "skin", f, e_b))
    assert torch.equal(o_b, decode(net, "body", f, e_s))


def test_stage2_default_guidance_is_swapped_outputs():
    net = init_params(TINY, 0).eval()
    trace = forward_two_stage(net, _images())
    g_s, g_b = trace.guidance_stage2
    assert torch.equal(g_s, trace.O_B) and torch.equal(g_b, trace.O_S)


def test_guidance_override_per_branch():
    net = init_params(TINY, 0).eval()
    x = _images()
    m = (torch.rand(2, 1, 16, 16) > 0.5).float()
    trace = forward_two_stage(net, x, guidance_override=(m, None))
    assert torch.equal(trace.guidance_stage2[0], m)
    assert torch.equal(trace.guidance_stage2[1], trace.O_S)
    with pytest.raises(ValidationError):
        forward_two_stage(net, x, guidance_override=(torch.zeros(2, 1, 8, 8), None))


def test_trace_deterministic():
    net = init_params(TINY, 0).eval()
    x = _images()
    a, b = forward_two_stage(net, x), forward_two_stage(net, x)
    assert torch.equal(a.O2_S, b.O2_S) and torch.equal(a.O2_B, b.O2_B)


def test_weight_sharing_across_stages():
    net = init_params(TINY, 0).eval()
    x = _images()
    before = forward_two_stage(net, x)
    with torch.no_grad():
        net.decoders["skin"].head.bias.add_(1.0)
    after = forward_two_stage(net, x)
    assert not torch.equal(before.O_S, after.O_S)
    assert not torch.equal(before.O2_S, after.O2_S)


def _stage1_decoder_grads(grad_stop):
    net = init_params(TINY, 5).train()
    for p in net.encoder.parameters():
        p.requires_grad_(False)
    s1 = clone(net)
    trace = forward_two_stage(net, _images(4), grad_stop=grad_stop, stage1_net=s1)
    (trace.O2_S.mean() + trace.O2_B.mean()).backward()
    stage1_params = list(s1.decoders.parameters()) + list(s1.guidance_encoder.parameters())
    return [torch.zeros_like(p) if p.grad is None else p.grad for p in stage1_params]


def test_gradient_stop_blocks_stage1_decoders():
    assert all(torch.count_nonzero(g) == 0 for g in _stage1_decoder_grads(True))
    assert any(torch.count_nonzero(g) > 0 for g in _stage1_decoder_grads(False))


def test_stage_statistics_are_separate():
    net = init_params(TINY, 0).train()
    forward_two_stage(net, _images())
    bns = [m for m in net.decoders.modules() if hasattr(m, "running_mean_1")]
    assert bns
    assert any(not torch.equal(m.running_mean_0, m.running_mean_1) for m in bns)
    # the shared image encoder keeps a single set
    enc = [m for m in net.encoder.modules() if hasattr(m, "running_mean_1")]
    assert all(torch.equal(m.running_mean_1, torch.zeros_like(m.running_mean_1)) for m in enc)


def test_checkpoint_round_trip(tmp_path):
    net = init_params(TINY, 2).train()
    forward_two_stage(net, _images())  # populate running stats
    net.eval()
    save_checkpoint(tmp_path / "c.ckpt", net, epoch=3, seed=2, phase="finetune", metrics={"val_skin_iou": 0.5})
    loaded, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta["epoch"] == 3 and meta["seed"] == 2 and meta["config"]["input_size"] == 16
    assert param_checksum(loaded) == param_checksum(net)
    x = _images()
    assert torch.equal(forward_two_stage(net, x).O2_S, forward_two_stage(loaded, x).O2_S)
    header = (tmp_path / "c.ckpt").read_bytes().split(b"\nend\n")[0].decode()
    assert header.startswith("DUALSKIN-CHECKPOINT") and "tensor encoder." in header


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_trained_guidance_path_is_live(tiny_train, tiny_val):
    net = init_params(ModelConfig(input_size=32, base_channels=4), 0)
    train(net, tiny_train, TrainConfig(stage1_epochs=1, finetune_epochs=1, augment=None))
    net.eval()
    x = torch.from_numpy(np.stack([s.image for s in tiny_val]).transpose(0, 3, 1, 2).copy())
    f = encode(net, x)
    zeros, ones = torch.zeros(len(x), 1, 32, 32), torch.ones(len(x), 1, 32, 32)
    assert not torch.allclose(decode(net, "skin", f, zeros, 1), decode(net, "skin", f, ones, 1))
