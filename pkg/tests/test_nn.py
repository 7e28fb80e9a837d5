import numpy as np
import pytest

from slotalign import nn


def rand_params_block(d, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    p = nn.Params()
    nn.init_block(p, 0, d, rng, dtype)
    return p


def test_block_causality_exact():
    d, T = 16, 8
    p = rand_params_block(d, 0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((T, d))
    base = nn.causal_attention_block(nn.Tensor(x), p, 0, 4).data
    pert = x.copy()
    pert[5] += 1.0
    out = nn.causal_attention_block(nn.Tensor(pert), p, 0, 4).data
    assert np.array_equal(base[:5], out[:5])
    assert not np.allclose(base[5:], out[5:])


def test_block_single_position():
    d = 8
    p = rand_params_block(d, 2)
    x = np.random.default_rng(3).standard_normal((1, d))
    out = nn.causal_attention_block(nn.Tensor(x), p, 0, 2).data
    assert out.shape == (1, d)
    assert np.isfinite(out).all()


def test_block_zero_projections_identity():
    d = 8
    p = rand_params_block(d, 4)
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"):
        p["block0." + name].data[:] = 0.0
    x = np.zeros((4, d))
    out = nn.causal_attention_block(nn.Tensor(x), p, 0, 2).data
    assert np.array_equal(out, x)


def test_block_rejects_nonfinite():
    p = rand_params_block(8, 5)
    x = np.full((2, 8), np.nan)
    with pytest.raises(nn.NumericError):
        nn.causal_attention_block(nn.Tensor(x), p, 0, 2)


def test_masked_softmax_rows_sum_to_one():
    rng = np.random.default_rng(6)
    scores = nn.Tensor(rng.standard_normal((4, 7, 7)))
    p = nn.masked_softmax(scores, nn.causal_mask(7, np.float64)).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    # strictly-causal entries are exactly zero
    assert np.all(p[:, np.triu_indices(7, k=1)[0], np.triu_indices(7, k=1)[1]] == 0.0)


def test_cross_entropy_uniform_logits():
    logits = nn.Tensor(np.zeros((1, 4)), requires_grad=True)
    loss = nn.masked_cross_entropy(logits, np.array([2]))
    assert np.isclose(float(loss.data), np.log(4), atol=1e-12)


def test_cross_entropy_ignores_masked_positions():
    rng = np.random.default_rng(7)
    row = rng.standard_normal((1, 5))
    single = nn.masked_cross_entropy(nn.Tensor(row), np.array([3]))
    both = nn.masked_cross_entropy(nn.Tensor(np.vstack([row, rng.standard_normal((1, 5))])),
                                   np.array([3, nn.IGNORE]))
    assert np.isclose(float(single.data), float(both.data), atol=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 2))
    logits[0, 1] = 20.0
    loss = nn.masked_cross_entropy(nn.Tensor(logits), np.array([1]))
    assert float(loss.data) < 1e-8


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(nn.EmptyLossError):
        nn.masked_cross_entropy(nn.Tensor(np.zeros((2, 3))), np.array([nn.IGNORE, nn.IGNORE]))


def test_cross_entropy_grad_zero_on_ignored_rows():
    logits = nn.Tensor(np.random.default_rng(8).standard_normal((3, 4)), requires_grad=True)
    loss = nn.masked_cross_entropy(logits, np.array([1, nn.IGNORE, 2]))
    loss.backward()
    assert np.array_equal(logits.grad[1], np.zeros(4))
    assert not np.allclose(logits.grad[0], 0)


def test_cross_entropy_permutation_invariant():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((5, 6))
    labels = np.array([0, 2, nn.IGNORE, 4, 1])
    base = float(nn.masked_cross_entropy(nn.Tensor(logits), labels).data)
    perm = rng.permutation(5)
    shuffled = float(nn.masked_cross_entropy(nn.Tensor(logits[perm]), labels[perm]).data)
    assert np.isclose(base, shuffled, atol=1e-12)


def grad_check(build_loss, params, eps=1e-5, tol=1e-4):
    """Central finite differences over every element of every parameter."""
    params.zero_grad()
    build_loss().backward()
    worst = 0.0
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = t.data[ix]
            t.data[ix] = old + eps
            lp = float(build_loss().data)
            t.data[ix] = old - eps
            lm = float(build_loss().data)
            t.data[ix] = old
            fd = (lp - lm) / (2 * eps)
            rel = abs(fd - g[ix]) / max(abs(fd), abs(g[ix]), 1e-8)
            worst = max(worst, rel)
            assert rel <= tol, f"{name}{ix}: analytic {g[ix]} vs fd {fd}"
    return worst


def test_block_gradients_match_finite_differences():
    d, T = 8, 5
    p = rand_params_block(d, 10)
    x = np.random.default_rng(11).standard_normal((T, d))
    labels = np.array([1, nn.IGNORE, 0, 3, nn.IGNORE])
    head = nn.Tensor(np.random.default_rng(12).standard_normal((d, 4)), requires_grad=True)
    p["head"] = head

    def build_loss():
        h = nn.causal_attention_block(nn.Tensor(x), p, 0, 2)
        return nn.masked_cross_entropy(h @ head, labels)

    grad_check(build_loss, p)


def test_zero_grads_leave_params_unchanged():
    p = nn.Params()
    p["w"] = nn.Tensor(np.ones((3, 3)), requires_grad=True)
    p["w"].grad = np.zeros((3, 3))
    state = nn.OptimizerState()
    nn.adam_step(p, state)
    assert np.array_equal(p["w"].data, np.ones((3, 3)))


def test_warmup_lr_ramp():
    assert nn.warmup_lr(0, 3e-4, 1000) == 0.0
    assert nn.warmup_lr(500, 3e-4, 1000) == pytest.approx(1.5e-4)
    assert nn.warmup_lr(1000, 3e-4, 1000) == pytest.approx(3e-4)
    assert nn.warmup_lr(10_000, 3e-4, 1000) == pytest.approx(3e-4)


def test_adam_rejects_nonfinite_grads():
    p = nn.Params()
    p["w"] = nn.Tensor(np.ones(2), requires_grad=True)
    p["w"].grad = np.array([np.nan, 0.0])
    with pytest.raises(nn.NumericError):
        nn.adam_step(p, nn.OptimizerState())


def test_adam_moves_against_gradient():
    p = nn.Params()
    p["w"] = nn.Tensor(np.zeros(3), requires_grad=True)
    p["w"].grad = np.array([1.0, -1.0, 0.0])
    state = nn.OptimizerState(peak_lr=0.1, warmup_steps=1)
    nn.adam_step(p, state)
    assert p["w"].data[0] < 0 and p["w"].data[1] > 0 and p["w"].data[2] == 0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    p = nn.Params()
    p["a.w"] = nn.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    p["b"] = nn.Tensor(rng.standard_normal(7).astype(np.float32), requires_grad=True)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, p)
    back = nn.load_checkpoint(path)
    assert set(back) == {"a.w", "b"}
    for k in p:
        assert np.array_equal(back[k].data, p[k].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(IOError):
        nn.load_checkpoint(path)
