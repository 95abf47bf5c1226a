"""Visual control adapters: zero-init silence, injection layout, schedule."""

import pytest
import torch

from glyphflow.backbone import Backbone, BackboneConfig, ShapeError, assign_positions
from glyphflow.control import (
    ControlAdapters,
    ControlBranch,
    DenseEncoder,
    SparseEncoder,
    branch_is_silent,
)


def _adapters(seed=0, channels=12, text_dim=16, feature_dim=16, patch=8):
    torch.manual_seed(seed)
    return ControlAdapters(channels, text_dim, feature_dim, patch=patch)


def test_dense_encoder_preserves_shape():
    torch.manual_seed(0)
    enc = DenseEncoder(12)
    z = torch.randn(16, 48, 12)
    assert enc(z).shape == (16, 48, 12)
    assert enc(torch.randn(2, 4, 8, 12)).shape == (2, 4, 8, 12)
    convs = [m for m in enc.net if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 6
    assert all(m.stride == (1, 1) for m in convs)


def test_sparse_encoder_downsamples_by_patch():
    torch.manual_seed(1)
    enc = SparseEncoder(8, out_channels=64)
    x = torch.rand(256, 256, 3)
    out = enc(x)
    assert out.shape == (32, 32, 64)
    with pytest.raises(ShapeError, match="divisible"):
        enc(torch.rand(20, 16, 3))
    with pytest.raises(ShapeError, match="power of two"):
        SparseEncoder(6)


def test_injection_is_additive_on_disjoint_regions():
    # zero conv weights, nonzero biases: the injected field is the bias alone,
    # so the oracle is canvas + alpha*0.5 on ref columns + beta*0.25 on target
    ad = _adapters()
    with torch.no_grad():
        ad.c0.bias.fill_(0.5)
        ad.c1.bias.fill_(0.25)
    canvas = torch.zeros(4, 12, 12)
    dense = torch.randn(4, 8, 12)
    sparse = torch.randn(4, 4, 64)
    out = ad.inject(canvas, dense, sparse, alpha=1.0, beta=2.0, ref_width=8)
    assert torch.allclose(out[:, :8], torch.full((4, 8, 12), 0.5))
    assert torch.allclose(out[:, 8:], torch.full((4, 4, 12), 0.5 * 0 + 2.0 * 0.25))


def test_injection_without_references():
    ad = _adapters()
    with torch.no_grad():
        ad.c1.bias.fill_(1.0)
    canvas = torch.ones(4, 4, 12)
    out = ad.inject(canvas, None, torch.randn(4, 4, 64), alpha=0.0, beta=2.0,
                    ref_width=0)
    assert torch.allclose(out, torch.full((4, 4, 12), 3.0))


def test_fresh_adapters_inject_nothing():
    ad = _adapters(seed=2)
    canvas = torch.randn(4, 12, 12)
    out = ad.inject(canvas, torch.randn(4, 8, 12), torch.randn(4, 4, 64),
                    alpha=1.0, beta=1.0, ref_width=8)
    assert torch.equal(out, canvas)


def test_zero_strength_injection_is_identity_even_when_trained():
    ad = _adapters(seed=3)
    with torch.no_grad():
        for p in ad.parameters():
            p.add_(0.3)
    canvas = torch.randn(4, 12, 12)
    out = ad.inject(canvas, torch.randn(4, 8, 12), torch.randn(4, 4, 64),
                    alpha=0.0, beta=0.0, ref_width=8)
    assert torch.allclose(out, canvas)


def test_injection_validates_inputs():
    ad = _adapters()
    canvas = torch.randn(4, 12, 12)
    with pytest.raises(ValueError, match="non-negative"):
        ad.inject(canvas, None, None, alpha=-1.0, beta=0.0, ref_width=0)
    with pytest.raises(ShapeError, match="dense"):
        ad.inject(canvas, torch.randn(4, 13, 12), None, 1.0, 1.0, 8)
    with pytest.raises(ShapeError, match="sparse"):
        ad.inject(canvas, None, torch.randn(4, 3, 64), 1.0, 1.0, 8)


def test_global_visual_token_zero_at_init():
    ad = _adapters()
    assert torch.equal(ad.global_visual_token(torch.randn(16)),
                       torch.zeros(16))


def _backbone(depth=8, dim=32, channels=12):
    torch.manual_seed(4)
    return Backbone(BackboneConfig(depth=depth, model_dim=dim, heads=4,
                                   text_dim=16, latent_channels=channels))


def test_branch_schedule_cycles_over_backbone_blocks():
    bb = _backbone(depth=8)
    branch = ControlBranch(bb, 4)
    sched = branch.schedule()
    assert sched == [0, 1, 2, 3, 0, 1, 2, 3]
    by_residual = {i: [b for b, r in enumerate(sched) if r == i]
                   for i in range(4)}
    assert by_residual == {0: [0, 4], 1: [1, 5], 2: [2, 6], 3: [3, 7]}


def test_branch_copies_are_independent_of_backbone():
    bb = _backbone(depth=4)
    branch = ControlBranch(bb, 2)
    with torch.no_grad():
        branch.blocks[0].qkv_a.weight.add_(1.0)
    assert not torch.equal(branch.blocks[0].qkv_a.weight,
                           bb.blocks[0].qkv_a.weight)


def test_branch_residuals_zero_at_init_and_fused_noop():
    bb = _backbone(depth=4)
    branch = ControlBranch(bb, 2)
    ad = _adapters()
    assert branch_is_silent(ad, branch)
    canvas = torch.randn(2, 4, 12)
    grid = assign_positions(2, [2], 2)
    text = torch.randn(3, 16)
    pooled = torch.randn(16)
    residuals = branch(canvas, grid, text, pooled, 0.5)
    assert len(residuals) == 2
    assert all(torch.equal(r, torch.zeros_like(r)) for r in residuals)
    # feeding them back through the cyclic schedule leaves the backbone exact
    per_block = [residuals[i % 2] for i in range(4)]
    base = bb(canvas, grid, text, pooled, 0.5)
    fused = bb(canvas, grid, text, pooled, 0.5, block_residuals=per_block)
    assert torch.equal(base, fused)


def test_branch_silence_flips_when_any_projection_moves():
    bb = _backbone(depth=4)
    branch = ControlBranch(bb, 2)
    ad = _adapters()
    with torch.no_grad():
        branch.fusion[1].weight[0, 0] = 1e-4
    assert not branch_is_silent(ad, branch)


def test_branch_rejects_bad_block_count():
    bb = _backbone(depth=4)
    with pytest.raises(ShapeError):
        ControlBranch(bb, 5)
    with pytest.raises(ShapeError):
        ControlBranch(bb, 0)
