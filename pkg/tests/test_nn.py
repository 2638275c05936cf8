import math

import numpy as np
import pytest

from scape.nn import (
    MLP,
    AdamState,
    AttentionConfig,
    MultiHeadAttention,
    adam_step,
    lr_schedule,
    positional_encoding_2d,
)
from scape.tensor import Tape, Tensor, dropout, matmul, relu, square, tsum


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0


# ---------------------------------------------------------------- MLP

def test_mlp_zero_weights_give_zero_output():
    mlp = MLP(5, 3, 4, seed=0, name="m")
    _zero(mlp)
    x = Tensor(np.random.default_rng(0).normal(size=(7, 5)))
    np.testing.assert_array_equal(mlp(x).data, np.zeros((7, 4)))


def test_mlp_attention_filter_widths():
    K_max = 100
    mlp = MLP(K_max, K_max // 2, K_max, seed=0, name="af")
    assert mlp.fc1.W.shape == (100, 50) and mlp.fc2.W.shape == (50, 100)


def test_mlp_matches_composed_ops():
    mlp = MLP(6, 4, 3, seed=3, name="m")
    rng = np.random.default_rng(1)
    for p in mlp.parameters():
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=(2, 5, 6))
    h = np.maximum(0.0, x @ mlp.fc1.W.data + mlp.fc1.b.data)
    expect = h @ mlp.fc2.W.data + mlp.fc2.b.data
    np.testing.assert_allclose(mlp(Tensor(x)).data, expect, atol=1e-12)


def test_linear_init_range():
    mlp = MLP(16, 8, 2, seed=0, name="m")
    s = math.sqrt(1 / 16)
    assert np.all(np.abs(mlp.fc1.W.data) <= s)
    assert np.all(mlp.fc1.b.data == 0)


# ---------------------------------------------------------------- attention

def _mha(seed=0, heads=2, d=8, unshared=False):
    return MultiHeadAttention(AttentionConfig(d, heads, unshared_qk=unshared), seed, "mha")


def reference_attention(mha, x, kv=None):
    """Per-head loop over rows, no batching tricks."""
    kv = x if kv is None else kv
    d, h = mha.cfg.d_model, mha.cfg.n_heads
    dh = d // h
    W = lambda lin, t: t @ lin.W.data + lin.b.data
    Q, K, V = W(mha.q, x), W(mha.k, kv), W(mha.v, kv)
    out = np.zeros((x.shape[0], d))
    maps = np.zeros((h, x.shape[0], kv.shape[0]))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(x.shape[0]):
            logits = [float(Q[i, sl] @ K[j, sl]) / math.sqrt(dh) for j in range(kv.shape[0])]
            m = max(logits)
            e = [math.exp(v - m) for v in logits]
            p = [v / sum(e) for v in e]
            maps[head, i] = p
            out[i, sl] = sum(pj * V[j, sl] for j, pj in enumerate(p))
    return out @ mha.o.W.data + mha.o.b.data, maps


def test_single_key_returns_value_projection():
    mha = _mha()
    rng = np.random.default_rng(2)
    q = rng.normal(size=(1, 5, 8))
    kv = rng.normal(size=(1, 1, 8))
    out, attn = mha(Tensor(q), Tensor(kv))
    v = kv[0] @ mha.v.W.data + mha.v.b.data
    expect = v @ mha.o.W.data + mha.o.b.data
    np.testing.assert_allclose(out.data[0], np.repeat(expect, 5, axis=0), atol=1e-12)
    assert np.all(attn.data == 1.0)


def test_uniform_logits_average_values():
    mha = _mha()
    mha.q.W.data[...] = 0.0
    mha.q.b.data[...] = 0.0
    x = np.random.default_rng(3).normal(size=(1, 4, 8))
    out, _ = mha(Tensor(x))
    v = x[0] @ mha.v.W.data + mha.v.b.data
    expect = v.mean(axis=0) @ mha.o.W.data + mha.o.b.data
    np.testing.assert_allclose(out.data[0], np.tile(expect, (4, 1)), atol=1e-12)


def test_attention_matches_reference_loop():
    mha = _mha(seed=4)
    x = np.random.default_rng(4).normal(size=(3, 8))
    out, attn = mha(Tensor(x[None]))
    ref_out, ref_maps = reference_attention(mha, x)
    np.testing.assert_allclose(out.data[0], ref_out, atol=1e-10)
    np.testing.assert_allclose(attn.data[0], ref_maps, atol=1e-10)


def test_identity_hook_is_bitwise_noop():
    mha = _mha(seed=5, unshared=True)
    x = Tensor(np.random.default_rng(5).normal(size=(2, 6, 8)))
    a, _ = mha(x, split=2)
    b, _ = mha(x, split=2, logit_hook=lambda t: t)
    assert a.data.tobytes() == b.data.tobytes()


def test_tied_unshared_projections_equal_shared_attention():
    shared = _mha(seed=6)
    unshared = _mha(seed=6, unshared=True)
    unshared.q2.W.data = shared.q.W.data.copy()
    unshared.k2.W.data = shared.k.W.data.copy()
    x = Tensor(np.random.default_rng(6).normal(size=(2, 7, 8)))
    a, _ = shared(x)
    b, _ = unshared(x, split=3)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_unshared_projections_differ_per_segment():
    mha = _mha(seed=7, unshared=True)
    x = Tensor(np.random.default_rng(7).normal(size=(1, 5, 8)))
    a, _ = mha(x, split=2)
    b, _ = mha(x, split=3)
    assert not np.allclose(a.data, b.data)


def test_split_out_of_range():
    with pytest.raises(IndexError):
        _mha(unshared=True)(Tensor(np.zeros((1, 3, 8))), split=5)


def test_attention_rows_are_stochastic():
    mha = _mha(seed=8, heads=4, d=16)
    rng = np.random.default_rng(8)
    mask = rng.random((2, 1, 9, 9)) > 0.3
    mask[..., 0] = True
    _, attn = mha(Tensor(rng.normal(size=(2, 9, 16)) * 4), mask=mask)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(10, 3)
    with pytest.raises(ValueError):
        AttentionConfig(8, 2, dropout_p=1.0)


# ---------------------------------------------------------------- dropout

def test_dropout_identity_at_zero():
    x = Tensor(np.arange(5.0))
    assert dropout(x, 0.0, np.random.default_rng(0)) is x


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(100_000))
    y = dropout(x, 0.3, np.random.default_rng(0))
    assert abs(y.data.mean() - 1.0) < 0.01


def test_dropout_off_in_eval():
    x = Tensor(np.ones(10))
    assert dropout(x, 0.5, np.random.default_rng(0), training=False) is x


# ---------------------------------------------------------------- positional encoding

def test_positional_encoding_unique_cells():
    for h in range(1, 17):
        for w in range(1, 17):
            pe = positional_encoding_2d(h, w, 16)
            assert len({row.tobytes() for row in pe}) == h * w


def test_positional_encoding_deterministic_and_bounded():
    a = positional_encoding_2d(8, 8, 32)
    assert a.tobytes() == positional_encoding_2d(8, 8, 32).tobytes()
    assert a.shape == (64, 32)
    assert np.all(np.abs(a) <= 1.0)


def test_positional_encoding_width_check():
    with pytest.raises(ValueError):
        positional_encoding_2d(4, 4, 10)


# ---------------------------------------------------------------- Adam and schedule

def test_adam_first_step_is_lr():
    p = Tensor(np.zeros((3, 2)), requires_grad=True)
    adam_step([p], [np.ones((3, 2))], AdamState(lr=1e-3))
    assert np.all(np.abs(p.data + 1e-3) < 1e-6 * 1e-3)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.arange(4.0), requires_grad=True)
    state = AdamState(lr=1e-2)
    adam_step([p], [np.zeros(4)], state)
    np.testing.assert_array_equal(p.data, np.arange(4.0))
    assert state.step == 1


def test_adam_minimizes_quadratic():
    w = Tensor([1.0], requires_grad=True)
    state = AdamState(lr=1e-2)
    values = []
    for _ in range(100):
        with Tape() as tape:
            f = tsum(square(w))
        values.append(float(f.data))
        tape.backward(f)
        adam_step([w], [w.grad], state)
        w.grad = None
    assert abs(w.data[0]) < 0.5
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(4)], AdamState())


@pytest.mark.parametrize("epoch,expected", [(0, 2e-4), (139, 2e-4), (150, 2e-5), (175, 2e-6)])
def test_lr_schedule_milestones(epoch, expected):
    assert lr_schedule(epoch, 2e-4, 180) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_scales_with_run_length():
    assert lr_schedule(17, 1.0, 18) == pytest.approx(0.01)
    assert lr_schedule(13, 1.0, 18) == 1.0
    assert lr_schedule(14, 1.0, 18) == pytest.approx(0.1)
