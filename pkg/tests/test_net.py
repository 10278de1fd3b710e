import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
import torch
import torch.nn as nn

from mkoie.net import (
    MKoIE,
    MRFE,
    RLB,
    TNL,
    ModelConfig,
    SelfAttention,
    SubNode,
    TaskSpecific,
    build_model,
    enhance,
    init_weights,
    load_params,
    save_params,
)
from mkoie.checkpoint import CheckpointShapeError

from .helpers import fd_gradient_check


def np_(t):
    return t.detach().double().numpy()


def randomize(module, seed=0, scale=0.3):
    """Give every parameter (including norm affine, slopes, gamma) a random value."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return module


def zero_branch(module):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.zero_()
                m.bias.zero_()
            if isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


# -- scalar-loop oracles ------------------------------------------------------


def conv_loop(x, w, b, dilation=1, groups=1):
    """Direct zero-padded 'same' convolution, x: C×H×W, w: O×(C/g)×k×k."""
    c_in, h, wd = x.shape
    c_out, c_per, k, _ = w.shape
    pad = dilation * (k // 2)
    out = np.zeros((c_out, h, wd))
    per_group_out = c_out // groups
    for o in range(c_out):
        g = o // per_group_out
        for y in range(h):
            for xx in range(wd):
                acc = b[o]
                for ci in range(c_per):
                    c = g * c_per + ci
                    for i in range(k):
                        for j in range(k):
                            yy = y + i * dilation - pad
                            xj = xx + j * dilation - pad
                            if 0 <= yy < h and 0 <= xj < wd:
                                acc += w[o, ci, i, j] * x[c, yy, xj]
                out[o, y, xx] = acc
    return out


def group_norm_loop(x, groups, weight, bias, eps=1e-5):
    c = x.shape[0]
    out = np.empty_like(x)
    per = c // groups
    for g in range(groups):
        chunk = x[g * per : (g + 1) * per]
        mean = chunk.sum() / chunk.size
        var = ((chunk - mean) ** 2).sum() / chunk.size
        for ci in range(per):
            ch = g * per + ci
            out[ch] = (x[ch] - mean) / math.sqrt(var + eps) * weight[ch] + bias[ch]
    return out


def prelu_loop(x, slope):
    out = x.copy()
    for c in range(x.shape[0]):
        out[c] = np.where(x[c] >= 0, x[c], slope[c] * x[c])
    return out


# -- RLB --------------------------------------------------------------------


def test_rlb_zero_branch_identity():
    block = zero_branch(RLB(32))
    x = torch.randn(1, 32, 16, 16)
    assert torch.equal(block(x), x)


def test_rlb_shape():
    assert RLB(32)(torch.randn(1, 32, 16, 16)).shape == (1, 32, 16, 16)


def test_rlb_channel_mismatch():
    with pytest.raises(ValueError):
        RLB(8)(torch.randn(1, 4, 8, 8))


def test_rlb_matches_loop_oracle():
    block = randomize(RLB(4), seed=1)
    x = torch.randn(1, 4, 6, 5)
    y = np_(block(x))[0]
    xn = np_(x)[0]
    z = conv_loop(xn, np_(block.conv.weight), np_(block.conv.bias))
    z = group_norm_loop(z, 1, np_(block.norm.weight), np_(block.norm.bias))
    expected = xn + prelu_loop(z, np_(block.act.weight))
    assert np.max(np.abs(y - expected)) <= 1e-5


# -- MRFE -------------------------------------------------------------------


def test_mrfe_zero_branch_identity():
    block = zero_branch(MRFE(16))
    x = torch.randn(2, 16, 12, 12)
    assert torch.equal(block(x), x)


def test_mrfe_matches_loop_oracle():
    block = randomize(MRFE(16), seed=2)
    x = torch.randn(1, 16, 12, 12)
    xn = np_(x)[0]
    branches = []
    for branch, d in zip(block.branches, (1, 3, 5)):
        dw = conv_loop(xn, np_(branch.depthwise.weight), np_(branch.depthwise.bias), d, groups=16)
        branches.append(conv_loop(dw, np_(branch.pointwise.weight), np_(branch.pointwise.bias)))
    z = conv_loop(np.concatenate(branches), np_(block.fuse.weight), np_(block.fuse.bias))
    z = group_norm_loop(z, 4, np_(block.norm.weight), np_(block.norm.bias))
    expected = xn + prelu_loop(z, np_(block.act.weight))
    assert np.max(np.abs(np_(block(x))[0] - expected)) <= 1e-5


def mrfe_with_frozen_stats(block, x, ref):
    """MRFE forward where group-norm statistics come from ``ref`` instead of ``x``."""
    z, z_ref = block.spatial(x), block.spatial(ref)
    b, c, h, w = z.shape
    g = block.norm.num_groups
    zr = z_ref.view(b, g, -1)
    mean = zr.mean(-1, keepdim=True)
    var = zr.var(-1, unbiased=False, keepdim=True)
    zn = ((z.view(b, g, -1) - mean) / torch.sqrt(var + block.norm.eps)).view(b, c, h, w)
    zn = zn * block.norm.weight.view(1, c, 1, 1) + block.norm.bias.view(1, c, 1, 1)
    return x + block.act(zn)


def impulse_support(block, size=24, pos=(12, 12), channels=8):
    x = torch.randn(1, channels, size, size, dtype=torch.float64)
    bumped = x.clone()
    bumped[0, :, pos[0], pos[1]] += 1.0
    with torch.no_grad():
        diff = (mrfe_with_frozen_stats(block, bumped, x) - block(x)).abs().amax(1)[0]
    ys, xs = np.nonzero(diff.numpy() > 1e-12)
    return ys, xs


def test_mrfe_spatial_path_support_is_11x11():
    block = randomize(MRFE(8), seed=3).double()
    x = torch.zeros(1, 8, 24, 24, dtype=torch.float64)
    x[0, :, 12, 12] = 1.0
    with torch.no_grad():
        resp = (block.spatial(x) - block.spatial(torch.zeros_like(x))).abs().amax(1)[0]
    ys, xs = np.nonzero(resp.numpy() > 1e-12)
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (7, 17, 7, 17)


def test_mrfe_impulse_confined_with_frozen_norm_stats():
    block = randomize(MRFE(8), seed=4).double()
    ys, xs = impulse_support(block)
    assert ys.min() >= 7 and ys.max() <= 17 and xs.min() >= 7 and xs.max() <= 17


# -- TSM / sub-node -----------------------------------------------------------


def test_tsm_branches_differ_and_isolate():
    tsm = init_weights(TaskSpecific(16), seed=0)
    f = torch.randn(1, 16, 8, 8)
    assert not torch.allclose(tsm(f, 1), tsm(f, 2))
    tsm(f, 1).square().sum().backward()
    assert tsm.branches[0].conv.weight.grad is not None
    for branch in tsm.branches[1:]:
        assert all(p.grad is None or not p.grad.any() for p in branch.parameters())


def test_tsm_zeroed_branch_is_identity():
    tsm = init_weights(TaskSpecific(16))
    zero_branch(tsm.branches[2])
    f = torch.randn(1, 16, 8, 8)
    assert torch.equal(tsm(f, 3), f)


def test_tsm_unknown_task():
    with pytest.raises(ValueError):
        TaskSpecific(8)(torch.randn(1, 8, 4, 4), 4)


def test_subnode_shape_and_divisibility():
    node = SubNode(32)
    assert node(torch.randn(1, 32, 64, 64)).shape == (1, 32, 64, 64)
    with pytest.raises(ValueError):
        node(torch.randn(1, 32, 63, 63))


def resample_oracle(x):
    """2×2 average down, then bilinear ×2 up (half-pixel centres, edge clamped)."""
    c, h, w = x.shape
    down = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    hd, wd = down.shape[1:]
    out = np.empty_like(x)
    for y in range(h):
        sy = max((y + 0.5) / 2 - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), hd - 1)
        y1 = min(y0 + 1, hd - 1)
        fy = sy - y0
        for xx in range(w):
            sx = max((xx + 0.5) / 2 - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), wd - 1)
            x1 = min(x0 + 1, wd - 1)
            fx = sx - x0
            out[:, y, xx] = (
                down[:, y0, x0] * (1 - fy) * (1 - fx)
                + down[:, y0, x1] * (1 - fy) * fx
                + down[:, y1, x0] * fy * (1 - fx)
                + down[:, y1, x1] * fy * fx
            )
    return out


def test_subnode_zero_weights_is_resampling():
    node = zero_branch(SubNode(8))
    x = torch.randn(1, 8, 10, 12)
    assert np.max(np.abs(np_(node(x))[0] - resample_oracle(np_(x)[0]))) <= 1e-5


# -- attention ----------------------------------------------------------------


def test_attention_gamma_zero_identity():
    sa = init_weights(SelfAttention(8, 8))
    f_d, f_ts = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
    assert torch.equal(sa(f_d, f_ts), f_d)


def test_attention_rows_stochastic():
    sa = randomize(SelfAttention(8, 8), seed=5, scale=2.0)
    _, attn = sa(torch.randn(2, 8, 6, 6), torch.randn(2, 8, 6, 6), return_weights=True)
    assert attn.shape == (2, 36, 36)
    assert torch.all(attn >= 0)
    assert torch.max(torch.abs(attn.sum(-1) - 1)) <= 1e-6


def dense_attention_oracle(sa, f_d, f_ts):
    fd, ft = np_(f_d)[0].reshape(8, -1), np_(f_ts)[0].reshape(8, -1)  # C×N

    def proj(conv, f):
        return np_(conv.weight)[:, :, 0, 0] @ f + np_(conv.bias)[:, None]

    q, k, v = proj(sa.query, fd), proj(sa.key, ft), proj(sa.value, fd)
    scores = q.T @ k / math.sqrt(sa.dk)  # N×N
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    out = (weights @ v.T).T  # C×N
    return float(sa.gamma.detach()) * out + fd


def test_attention_matches_dense_oracle():
    sa = randomize(SelfAttention(8, 8), seed=6, scale=0.5)
    f_d, f_ts = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
    expected = dense_attention_oracle(sa, f_d, f_ts).reshape(8, 4, 4)
    assert np.max(np.abs(np_(sa(f_d, f_ts))[0] - expected)) <= 1e-5


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        SelfAttention(8, 8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 2))


# -- TNL ----------------------------------------------------------------------


def test_fusion_logit_zero_gives_mean():
    tnl = TNL(16, 16)
    a, b = torch.randn(1, 16, 4, 4), torch.randn(1, 16, 4, 4)
    assert float(tnl.alpha.detach()) == 0.5
    assert torch.allclose(tnl.fuse(a, b), (a + b) / 2, atol=1e-7)


def test_fusion_stays_within_envelope():
    tnl = TNL(16, 16)
    a, b = torch.randn(1, 16, 4, 4), torch.randn(1, 16, 4, 4)
    for logit in (-30.0, -2.0, 0.7, 5.0):
        with torch.no_grad():
            tnl.fusion_logit.fill_(logit)
        alpha = float(tnl.alpha.detach())
        assert 0.0 < alpha < 1.0 or logit == -30.0
        fused = tnl.fuse(a, b)
        assert torch.all(fused >= torch.minimum(a, b) - 1e-6)
        assert torch.all(fused <= torch.maximum(a, b) + 1e-6)


def _grad_is_zero(module):
    return all(p.grad is None or not p.grad.any() for p in module.parameters())


@pytest.mark.parametrize("task,own", [(1, "id"), (2, "llie")])
def test_single_branch_task_isolation(task, own):
    tnl = init_weights(TNL(16, 16))
    with torch.no_grad():
        tnl.attention.gamma.fill_(0.5)
    tnl(torch.randn(1, 16, 8, 8), task).square().mean().backward()
    assert not _grad_is_zero(tnl.subnodes[own])
    for name, node in tnl.subnodes.items():
        if name != own:
            assert _grad_is_zero(node)
    assert _grad_is_zero(tnl.attention)
    assert tnl.fusion_logit.grad is None or float(tnl.fusion_logit.grad) == 0.0


def test_nhie_matches_step_by_step_composition():
    tnl = randomize(init_weights(TNL(16, 16), seed=1), seed=9, scale=0.2)
    f_e = torch.randn(1, 16, 8, 8)
    with torch.no_grad():
        f_ts = tnl.tsm(f_e, 3)
        fd_llie = tnl.subnodes["llie"].decode(tnl.subnodes["llie"].encode(f_ts))
        fd_id = tnl.subnodes["id"].decode(tnl.subnodes["id"].encode(f_ts))
        a_llie = tnl.attention(fd_llie, f_ts)
        a_id = tnl.attention(fd_id, f_ts)
        alpha = 1.0 / (1.0 + math.exp(-float(tnl.fusion_logit)))
        x_in = alpha * a_llie + (1 - alpha) * a_id
        expected = tnl.subnodes["nhie"].decode(tnl.subnodes["nhie"].encode(x_in))
        got = tnl(f_e, 3)
    assert torch.max(torch.abs(got - expected)) <= 1e-5


# -- full model ----------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(base_channels=4)
    with pytest.raises(ValueError):
        ModelConfig(dilations=(1, 2, 4))
    with pytest.raises(ValueError):
        ModelConfig(attn_dk=0)
    cfg = ModelConfig()
    assert cfg.dk == cfg.tnl_channels == 128 and cfg.size_divisor == 8


@pytest.mark.parametrize("task", [1, 2, 3])
def test_model_shape_and_range_256(task):
    model = build_model(ModelConfig())
    with torch.no_grad():
        y = model(torch.rand(1, 3, 256, 256), task)
    assert y.shape == (1, 3, 256, 256)
    assert y.min() >= 0 and y.max() <= 1


def test_model_batch_independence():
    model = build_model(ModelConfig(base_channels=8), seed=3)
    with torch.no_grad():
        model.tnl.attention.gamma.fill_(0.7)
        x = torch.rand(2, 3, 64, 64)
        both = model(x, 3)
        single = torch.cat([model(x[i : i + 1], 3) for i in range(2)])
    assert torch.max(torch.abs(both - single)) <= 1e-5


def test_model_input_validation():
    model = build_model(ModelConfig(base_channels=8))
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 60, 64), 1)
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 64, 64), 7)


DETERMINISM_SCRIPT = """
import hashlib, torch
from mkoie.net import build_model, ModelConfig
torch.use_deterministic_algorithms(True)
model = build_model(ModelConfig(base_channels=8), seed=42)
gen = torch.Generator().manual_seed(7)
x = torch.rand(1, 3, 32, 32, generator=gen)
with torch.no_grad():
    y = model(x, 3)
print(hashlib.sha256(y.numpy().tobytes()).hexdigest())
"""


def test_model_bitwise_deterministic_across_processes():
    outs = [
        subprocess.run(
            [sys.executable, "-c", DETERMINISM_SCRIPT], capture_output=True, text=True, check=True
        ).stdout.strip()
        for _ in range(2)
    ]
    assert outs[0] == outs[1] and len(outs[0]) == 64


def test_enhance_pads_and_crops():
    model = build_model(ModelConfig(base_channels=8))
    x = torch.rand(1, 3, 50, 46)
    y = enhance(model, x, 2)
    assert y.shape == x.shape
    tiny = enhance(model, torch.rand(1, 3, 3, 5), 1)
    assert tiny.shape == (1, 3, 3, 5)


def test_params_round_trip(tmp_path):
    model = build_model(ModelConfig(base_channels=8), seed=5)
    save_params(model, tmp_path / "m.ckpt")
    back = load_params(tmp_path / "m.ckpt")
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(CheckpointShapeError):
        load_params(tmp_path / "m.ckpt", ModelConfig(base_channels=16))


# -- gradients ----------------------------------------------------------------


def _block_grad_check(block, inputs, seed):
    block = randomize(block.double(), seed=seed)
    gen = torch.Generator().manual_seed(seed)
    out_shape = block(*inputs).shape
    proj = torch.randn(out_shape, generator=gen, dtype=torch.float64)
    leaves = list(inputs) + list(block.parameters())
    results = fd_gradient_check(lambda: (block(*inputs) * proj).sum(), leaves, n_samples=30, seed=seed)
    worst = max(r[2] for r in results)
    assert worst < 1e-2, results


def _leaf(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)


def test_gradients_rlb():
    _block_grad_check(RLB(8), [_leaf(1, 8, 8, 8)], seed=11)


def test_gradients_mrfe():
    _block_grad_check(MRFE(8), [_leaf(1, 8, 8, 8)], seed=12)


def test_gradients_attention():
    _block_grad_check(SelfAttention(8, 8), [_leaf(1, 8, 4, 4, seed=1), _leaf(1, 8, 4, 4, seed=2)], seed=13)


def test_gradients_subnode():
    _block_grad_check(SubNode(8), [_leaf(1, 8, 8, 8)], seed=14)
