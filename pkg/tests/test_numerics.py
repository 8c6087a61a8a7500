from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from partvox.errors import EmptyInput, Malformed, NumericalError, ShapeError
from partvox.numerics import (
    AdamState,
    CrossAttentionPool,
    MultiHeadAttention,
    TransformerBlock,
    adam_step,
    attention_weights,
    count_params,
    cross_attention_pool,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    seeded_init,
    transformer_block,
)


def block(d=16, heads=4, seed=0):
    return seeded_init(TransformerBlock(d, heads), seed).double()


def test_zero_output_projections_give_identity():
    b = block()
    with torch.no_grad():
        for lin in (b.attn.out, b.ff2):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(5, 16, dtype=torch.float64)
    assert torch.equal(transformer_block(x, b, causal=False), x)


def test_causal_mask_blocks_future_for_every_position():
    b = block()
    x = torch.randn(7, 16, dtype=torch.float64)
    base = b(x, causal=True)
    for t in range(6):
        y = x.clone()
        y[t + 1:] += torch.randn(6 - t, 16, dtype=torch.float64)
        out = b(y, causal=True)
        assert torch.allclose(out[: t + 1], base[: t + 1], atol=1e-12, rtol=0)
        assert not torch.allclose(out[t + 1:], base[t + 1:])


def test_single_token_causal_equals_noncausal():
    b = block()
    x = torch.randn(1, 16, dtype=torch.float64)
    assert torch.allclose(b(x, causal=True), b(x, causal=False), atol=1e-14)


def test_head_divisibility_and_width_checks():
    with pytest.raises(ShapeError):
        MultiHeadAttention(10, 4)
    with pytest.raises(ShapeError):
        block()(torch.zeros(3, 8, dtype=torch.float64))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 1000))
def test_softmax_rows_sum_to_one(tq, tk, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(2, tq, 8, generator=g, dtype=torch.float64) * 5
    k = torch.randn(2, tk, 8, generator=g, dtype=torch.float64) * 5
    w = attention_weights(q, k)
    assert torch.all((w.sum(-1) - 1).abs() < 1e-12)


def test_attention_weights_single_key_is_one():
    q = torch.randn(4, 8, dtype=torch.float64)
    k = torch.randn(1, 8, dtype=torch.float64)
    assert torch.equal(attention_weights(q, k), torch.ones(4, 1, dtype=torch.float64))


def test_pool_with_one_token_attends_fully():
    pool = seeded_init(CrossAttentionPool(16, 4, 4), 0).double()
    tok = torch.randn(1, 16, dtype=torch.float64)
    # with a single key every head's weight is 1, so the pooled value is the projected token
    v = pool.attn.v(pool.norm_kv(tok))
    attn = pool.attn.out(v.expand(4, 16))
    y = pool.queries + attn
    expected = y + pool.ff2(torch.nn.functional.gelu(pool.ff1(pool.norm_out(y))))
    assert torch.allclose(cross_attention_pool(pool, tok), expected, atol=1e-12)


def test_pool_shape_and_permutation_invariance():
    pool = seeded_init(CrossAttentionPool(16, 4, 4), 1).double()
    tok = torch.randn(500, 16, dtype=torch.float64)
    out = pool(tok)
    assert out.shape == (4, 16)
    perm = torch.randperm(500)
    assert torch.allclose(pool(tok[perm]), out, atol=1e-12)


def test_pool_padding_mask_matches_unpadded():
    pool = seeded_init(CrossAttentionPool(16, 4, 3), 2).double()
    tok = torch.randn(5, 16, dtype=torch.float64)
    padded = torch.cat([tok, torch.randn(3, 16, dtype=torch.float64)])[None]
    mask = torch.tensor([[True] * 5 + [False] * 3])
    assert torch.allclose(pool(padded, mask)[0], pool(tok), atol=1e-12)


def test_pool_rejects_empty():
    pool = CrossAttentionPool(16, 4, 3)
    with pytest.raises(EmptyInput):
        pool(torch.zeros(0, 16))


def test_seeded_init_is_deterministic():
    a = seeded_init(TransformerBlock(16, 4), 5)
    b = seeded_init(TransformerBlock(16, 4), 5)
    c = seeded_init(TransformerBlock(16, 4), 6)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))
    assert count_params(a) == sum(p.numel() for p in a.parameters())


# --------------------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    before = p.clone()
    adam_step([p], [torch.zeros(2, dtype=torch.float64)], AdamState(), lr=0.1)
    assert torch.equal(p, before)


def test_adam_first_step_is_lr_times_sign():
    g = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
    p = torch.zeros(3, dtype=torch.float64)
    adam_step([p], [g], AdamState(), lr=0.01, eps=0.0)
    assert torch.equal(p, -0.01 * torch.sign(g))
    q = torch.zeros(3, dtype=torch.float64)
    adam_step([q], [g], AdamState(), lr=0.01)
    assert torch.allclose(q, -0.01 * torch.sign(g), rtol=1e-4, atol=0)


def test_adam_constant_gradient_limit():
    g = torch.tensor([2.0, -0.5], dtype=torch.float64)
    p = torch.zeros(2, dtype=torch.float64)
    state = AdamState()
    prev = p.clone()
    for _ in range(500):
        prev = p.clone()
        adam_step([p], [g], state, lr=1e-3)
    step = p - prev
    assert torch.allclose(step, -1e-3 * torch.sign(g), rtol=1e-6)
    assert state.step == 500


def test_adam_matches_reference_optimizer():
    torch.manual_seed(0)
    w = torch.randn(6, dtype=torch.float64)
    ours, ref = w.clone(), w.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.05)
    state = AdamState()
    for i in range(20):
        g = torch.sin(torch.arange(6, dtype=torch.float64) + i)
        adam_step([ours], [g], state, lr=0.05)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(ours, ref.detach(), atol=1e-12)


# --------------------------------------------------------------------------- grad check

def test_grad_check_quadratic():
    theta = torch.randn(50, dtype=torch.float64, requires_grad=True)
    # central differences are exact for quadratics, so a wide step only leaves roundoff
    rep = grad_check(lambda: (theta ** 2).sum(), [("theta", theta)], samples=50, epsilon=1e-3)
    assert rep.max_rel_error < 1e-8 and rep.passed and rep.checked == 50


def test_grad_check_detects_wrong_gradient():
    theta = torch.randn(10, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert not grad_check(lambda: Wrong.apply(theta), [("theta", theta)], samples=10).passed


def test_grad_check_rejects_non_finite_loss():
    theta = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericalError):
        grad_check(lambda: (theta / 0.0).sum(), [("theta", theta)])


# --------------------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    b = seeded_init(TransformerBlock(16, 4), 3)
    save_checkpoint(b, tmp_path / "b.ckpt")
    raw = (tmp_path / "b.ckpt").read_bytes()
    assert raw[:8] == b"PVXCKPT\x00"
    state = load_checkpoint(tmp_path / "b.ckpt")
    assert list(state) == list(b.state_dict())
    for k, v in b.state_dict().items():
        assert torch.equal(state[k], v.float())
    fresh = TransformerBlock(16, 4)
    fresh.load_state_dict(state)
    x = torch.randn(3, 16)
    assert torch.equal(fresh(x), b(x))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(Malformed):
        load_checkpoint(tmp_path / "bad")
    b = TransformerBlock(8, 2)
    save_checkpoint(b, tmp_path / "t.ckpt")
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "trunc").write_bytes(data[:-10])
    with pytest.raises(Malformed):
        load_checkpoint(tmp_path / "trunc")


def test_float64_model_supports_determinism_across_runs():
    def run():
        torch.manual_seed(0)
        b = seeded_init(TransformerBlock(16, 4), 9)
        x = torch.linspace(-1, 1, 48).reshape(3, 16)
        return b(x, causal=True).detach().numpy()

    assert np.array_equal(run(), run())
