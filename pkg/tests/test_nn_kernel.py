import math

import numpy as np
import pytest
import torch

from callikit.nn import (
    AdamW,
    Dense,
    FeedForward,
    LayerNorm,
    LrSchedule,
    MultiHeadAttention,
    OptimState,
    adamw_step,
    checkpoint_digest,
    cosine_warm_restarts,
    grad_check,
    layer_norm,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    scaled_dot_attention,
)
from callikit.nn.checkpoint import CheckpointError

D = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def naive_attention(q, k, v, mask):
    """Loop-based reference for one (Lq, d) x (Lk, d) head."""
    out = torch.zeros(q.shape[0], v.shape[1], dtype=D)
    for i in range(q.shape[0]):
        s = [float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(k.shape[0])]
        usable = [j for j in range(k.shape[0]) if mask[j]]
        if not usable:
            continue
        m = max(s[j] for j in usable)
        e = {j: math.exp(s[j] - m) for j in usable}
        z = sum(e.values())
        for j in usable:
            out[i] += e[j] / z * v[j]
    return out


# -------------------------------------------------------------- attention


def test_attention_single_unmasked_key():
    k = torch.randn(1, 4, 3, dtype=D)
    v = torch.randn(1, 4, 3, dtype=D)
    mask = torch.tensor([[False, False, True, False]])
    out, empty = scaled_dot_attention(k[:, 2:3], k, v, mask)
    torch.testing.assert_close(out[0, 0], v[0, 2], rtol=0, atol=1e-15)
    assert not empty.any()


def test_attention_all_masked():
    q = torch.randn(2, 3, 4, dtype=D)
    mask = torch.tensor([[True, False, True, True, False], [False] * 5])
    out, empty = scaled_dot_attention(q, torch.randn(2, 5, 4, dtype=D), torch.randn(2, 5, 4, dtype=D), mask)
    assert empty.tolist() == [False, True]
    assert torch.all(out[1] == 0)


def test_attention_matches_naive():
    g = gen(3)
    for _ in range(20):
        lq, lk, d = 3, 6, 5
        q, k, v = (torch.randn(1, n, d, generator=g, dtype=D) for n in (lq, lk, lk))
        mask = torch.rand(1, lk, generator=g) > 0.3
        mask[0, 0] = True
        out, _ = scaled_dot_attention(q, k, v, mask)
        ref = naive_attention(q[0], k[0], v[0], mask[0])
        assert torch.max(torch.abs(out[0] - ref)) < 1e-12


def test_softmax_rows_and_uniform_keys():
    q = torch.randn(1, 4, 8, dtype=D)
    k = torch.ones(1, 6, 8, dtype=D)
    v = torch.randn(1, 6, 8, dtype=D)
    out, _ = scaled_dot_attention(q, k, v, torch.ones(1, 6, dtype=torch.bool))
    torch.testing.assert_close(out[0], v[0].mean(0).expand(4, -1), rtol=0, atol=1e-12)
    # softmax weights recovered with identity values sum to one
    eye = torch.eye(6, dtype=D)[None]
    w, _ = scaled_dot_attention(q[..., :6], torch.randn(1, 6, 6, dtype=D), eye, torch.ones(1, 6, dtype=torch.bool))
    assert torch.max(torch.abs(w.sum(-1) - 1)) < 1e-12


def test_mha_errors_and_padding():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 3, gen())
    mha = MultiHeadAttention(8, 2, gen()).double()
    x = torch.randn(2, 5, 8, dtype=D)
    with pytest.raises(ValueError):
        mha(x, x, torch.ones(2, 4, dtype=torch.bool))
    with pytest.raises(ValueError):
        mha(torch.randn(2, 5, 6, dtype=D), x)
    mask = torch.tensor([[True] * 3 + [False] * 2] * 2)
    a = mha(x, x, mask)
    y = x.clone()
    y[:, 3:] = torch.randn(2, 2, 8, dtype=D)
    b = mha(y, y, mask)
    assert torch.max(torch.abs(a[:, :3] - b[:, :3])) < 1e-12


# -------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    y = layer_norm(torch.tensor([[1.0, 3.0]], dtype=D), None, None, eps=0.0)
    torch.testing.assert_close(y, torch.tensor([[-1.0, 1.0]], dtype=D))
    c = layer_norm(torch.full((1, 6), 4.0, dtype=D), None, None)
    assert torch.max(torch.abs(c)) < 1e-6
    x = torch.randn(50, 16, dtype=D) * 3 + 2
    y = layer_norm(x, None, None, eps=0.0)
    assert torch.max(torch.abs(y.mean(-1))) < 1e-12
    assert torch.max(torch.abs(y.var(-1, unbiased=False) - 1)) < 1e-12
    gamma, beta = torch.randn(16, dtype=D), torch.randn(16, dtype=D)
    mu = x.mean(-1, keepdim=True)
    ref = gamma * (x - mu) / torch.sqrt(((x - mu) ** 2).mean(-1, keepdim=True) + 1e-5) + beta
    assert torch.max(torch.abs(layer_norm(x, gamma, beta) - ref)) < 1e-12


# -------------------------------------------------------------------- mse


def test_mse_examples_and_grad():
    p = torch.randn(3, 4, dtype=D, requires_grad=True)
    t = torch.randn(3, 4, dtype=D)
    assert mse_loss(t, t).item() == 0
    assert mse_loss(t + 1, t).item() == pytest.approx(1.0)
    mask = torch.tensor([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=torch.bool)
    loss = mse_loss(p, t, mask)
    loss.backward()
    expect = 2 * (p.detach() - t) * mask / mask.sum()
    assert torch.max(torch.abs(p.grad - expect)) < 1e-15
    assert grad_check(lambda: mse_loss(p, t, mask), [p]) < 1e-6
    with pytest.raises(ValueError):
        mse_loss(p, t, torch.zeros(3, 4, dtype=torch.bool))
    with pytest.raises(ValueError):
        mse_loss(p, t[:, :3])


# ------------------------------------------------------------- grad checks


def test_grad_check_dense():
    layer = Dense(5, 3, gen()).double()
    x = torch.randn(4, 5, dtype=D, requires_grad=True)
    assert grad_check(lambda: (layer(x) ** 2).sum(), [x, layer.weight, layer.bias]) < 1e-6


def test_grad_check_layer_norm():
    ln = LayerNorm(6).double()
    with torch.no_grad():
        ln.gamma.copy_(torch.randn(6, dtype=D))
        ln.beta.copy_(torch.randn(6, dtype=D))
    x = torch.randn(3, 6, dtype=D, requires_grad=True)
    w = torch.randn(3, 6, dtype=D)
    assert grad_check(lambda: (ln(x) * w).sum(), [x, ln.gamma, ln.beta]) < 1e-4


def test_grad_check_attention_block():
    mha = MultiHeadAttention(8, 2, gen(1), d_kv=6).double()
    q = torch.randn(2, 3, 8, dtype=D, requires_grad=True)
    kv = torch.randn(2, 5, 6, dtype=D, requires_grad=True)
    mask = torch.tensor([[True, True, True, False, True], [True, False, True, True, True]])
    w = torch.randn(2, 3, 8, dtype=D)
    params = [q, kv] + list(mha.parameters())
    assert grad_check(lambda: (mha(q, kv, mask) * w).sum(), params) < 1e-4


def test_grad_check_feed_forward():
    ff = FeedForward(4, 8, gen(2)).double()
    x = torch.randn(3, 4, dtype=D, requires_grad=True)
    assert grad_check(lambda: ff(x).pow(2).sum(), [x] + list(ff.parameters())) < 1e-4


def test_grad_check_needs_float64():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), [x])


# ----------------------------------------------------------------- AdamW


def test_adamw_zero_grad_no_decay():
    p = torch.randn(5, dtype=D)
    before = p.clone()
    adamw_step([p], [torch.zeros(5, dtype=D)], OptimState(), lr=0.1)
    assert torch.equal(p, before)


def test_adamw_scalar_by_hand():
    p = torch.tensor([1.0], dtype=D)
    g = torch.tensor([0.5], dtype=D)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    adamw_step([p], [g], OptimState(), lr, (b1, b2), eps)
    m = (1 - b1) * 0.5
    v = (1 - b2) * 0.25
    expect = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    assert p.item() == pytest.approx(expect, abs=1e-15)


def test_adamw_decoupled_decay():
    p = torch.tensor([2.0, -4.0], dtype=D)
    adamw_step([p], [torch.zeros(2, dtype=D)], OptimState(), lr=0.1, weight_decay=0.5)
    torch.testing.assert_close(p, torch.tensor([2.0, -4.0], dtype=D) * (1 - 0.1 * 0.5))


@pytest.mark.parametrize("amsgrad", [False, True])
@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_matches_torch(amsgrad, wd):
    g = gen(5)
    ours = [torch.randn(3, 4, generator=g, dtype=D), torch.randn(7, generator=g, dtype=D)]
    ref = [torch.nn.Parameter(t.clone()) for t in ours]
    topt = torch.optim.AdamW(ref, lr=1e-2, weight_decay=wd, amsgrad=amsgrad)
    state = OptimState()
    for step in range(25):
        grads = [torch.randn(t.shape, generator=g, dtype=D) for t in ours]
        adamw_step(ours, grads, state, 1e-2, weight_decay=wd, amsgrad=amsgrad)
        for r, gr in zip(ref, grads):
            r.grad = gr.clone()
        topt.step()
    for a, b in zip(ours, ref):
        assert torch.max(torch.abs(a - b.detach())) < 1e-12


def test_adamw_class_skips_missing_grads():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([a, b], lr=0.1)
    a.grad = torch.ones(2)
    opt.step()
    assert torch.equal(b.detach(), torch.ones(2)) and not torch.equal(a.detach(), torch.ones(2))


# -------------------------------------------------------------- schedule


def test_schedule_examples():
    s = LrSchedule(2e-4, 1e-6, 10, 2)
    assert cosine_warm_restarts(0, s) == pytest.approx(2e-4)
    assert cosine_warm_restarts(5, s) == pytest.approx(1e-6 + (2e-4 - 1e-6) / 2)
    assert cosine_warm_restarts(10, s) == pytest.approx(2e-4)
    assert cosine_warm_restarts(30, s) == pytest.approx(2e-4)
    with pytest.raises(ValueError):
        LrSchedule(1e-3, 1e-2)
    with pytest.raises(ValueError):
        LrSchedule(1e-3, 0, T_0=0.5)
    with pytest.raises(ValueError):
        cosine_warm_restarts(-1, s)


@pytest.mark.parametrize("T_mult", [1, 2, 3])
def test_schedule_matches_torch(T_mult):
    s = LrSchedule(2e-4, 1e-6, 10, T_mult)
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=2e-4)
    ref = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=10, T_mult=T_mult, eta_min=1e-6)
    for t in np.arange(0, 150, 0.25):
        ref.step(float(t))
        assert cosine_warm_restarts(float(t), s) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-9, abs=1e-15)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path):
    t = {"w": torch.randn(3, 4), "b": np.arange(5, dtype=np.float32)}
    d1 = save_checkpoint(tmp_path / "a", "toy/v1", {"k": 1}, t, {"loss": 0.5})
    d2 = save_checkpoint(tmp_path / "b", "toy/v1", {"k": 1}, t, {"loss": 0.5})
    assert d1 == d2 == checkpoint_digest(tmp_path / "a")
    manifest, back = load_checkpoint(tmp_path / "a", "toy/v1")
    assert torch.equal(back["w"], t["w"]) and back["b"].numpy().tobytes() == t["b"].tobytes()
    assert manifest["config"] == {"k": 1} and manifest["meta"] == {"loss": 0.5}
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a", "other/v1")
    f = tmp_path / "a" / "tensors" / "w.f32"
    raw = bytearray(f.read_bytes())
    raw[0] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "a")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_forward_bit_reproducible():
    def run():
        mha = MultiHeadAttention(16, 4, gen(7))
        x = torch.randn(2, 5, 16, generator=gen(8))
        return mha(x, x).detach().numpy().tobytes()

    assert run() == run()
