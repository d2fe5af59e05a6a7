import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from callikit.geometry import BBox, CharBox, Layout, PageSample
from callikit.nn import checkpoint_digest
from callikit.orderformer import (
    OrderModel,
    OrderModelConfig,
    OrderSample,
    OrderTrainConfig,
    collate,
    decode_order,
    load_order_model,
    order_sample,
    page_columns,
    predict_reading_order,
    rule_baseline,
    save_order_model,
    target_ranks,
    train_order,
)
from callikit.preprocess import CapacityError, ranks_to_order
from callikit.synthgen import GenConfig, gen_page, gen_pages

SMALL = OrderModelConfig(d_model=32, n_heads=4, n_layers=2, d_ff=64, seed=0)


def column_page(n_cols, rows=3, ltr=False, size=10.0, pitch=16.0, gap=30.0):
    boxes, order = [], []
    xs = [20 + k * gap for k in range(n_cols)]
    if not ltr:
        xs = xs[::-1]
    for c, x in enumerate(xs):
        for r in range(rows):
            order.append(len(boxes))
            boxes.append(CharBox(BBox(x, 10 + r * pitch, x + size, 10 + r * pitch + size), "字", c, r))
    w = int(max(xs) + size + 20)
    return PageSample(w, int(10 + rows * pitch + 20), boxes, order)


# ------------------------------------------------------------- forward


def test_forward_shape_and_errors():
    model = OrderModel(OrderModelConfig(seed=0))
    pages = gen_pages(GenConfig(seed=1, count=2))
    x, m, _ = collate([order_sample(p) for p in pages], length=50)
    with torch.no_grad():
        assert model(x, m).shape == (2, 50, 1)
    with pytest.raises(ValueError):
        model(torch.zeros(2, 50, 3))
    with pytest.raises(ValueError):
        model(torch.zeros(2, 51, 4))
    with pytest.raises(ValueError):
        model(x, m[:, :10])


def test_pad_rows_do_not_leak():
    model = OrderModel(SMALL).double()
    x = torch.zeros(1, 50, 4, dtype=torch.float64)
    x[0, :7] = torch.rand(7, 4, dtype=torch.float64)
    m = torch.zeros(1, 50, dtype=torch.bool)
    m[0, :7] = True
    with torch.no_grad():
        a = model(x, m)
        y = x.clone()
        y[0, 7:] = y[0, 7:][torch.randperm(43)] + torch.rand(43, 4, dtype=torch.float64)
        b = model(y, m)
    assert torch.max(torch.abs(a[0, :7] - b[0, :7])) < 1e-9


def test_zero_parameters_give_constant_scores():
    model = OrderModel(SMALL)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        out = model(torch.rand(3, 20, 4))
    assert torch.all(out == out.flatten()[0])


def test_checkpoint_roundtrip(tmp_path):
    model = OrderModel(SMALL)
    save_order_model(model, tmp_path / "m", {"final_loss": 1.0})
    back, manifest = load_order_model(tmp_path / "m")
    x = torch.rand(2, 9, 4)
    with torch.no_grad():
        assert torch.equal(model(x), back(x))
    assert manifest["meta"]["final_loss"] == 1.0


# -------------------------------------------------------------- decode


def test_decode_examples():
    assert decode_order([2.1, 0.3, 1.2, 4.4, 0.1, -0.1], 4) == [2, 0, 1, 3]
    assert decode_order([0.0, 1.0, 2.0], 3) == [0, 1, 2]
    assert decode_order([5.0, 1.0], 0) == []
    assert decode_order([1.0, 1.0, 0.0], 3) == [1, 2, 0]
    with pytest.raises(ValueError):
        decode_order([1.0], 2)


def rank_oracle(s):
    return [sum(1 for j in range(len(s)) if s[j] < s[i] or (s[j] == s[i] and j < i)) for i in range(len(s))]


scores = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50)


@given(scores)
def test_decode_matches_counting_oracle(s):
    r = decode_order(s, len(s))
    assert r == rank_oracle(s)
    assert sorted(r) == list(range(len(s)))


# distinct, well separated values so the transforms stay strictly increasing in float64
separated = st.lists(st.integers(-10_000, 10_000), min_size=1, max_size=50, unique=True)


@given(separated, st.floats(0.01, 100), st.floats(-50, 50))
def test_decode_invariant_to_increasing_transforms(s, a, b):
    s = np.array(s) / 10.0
    r = decode_order(s, len(s))
    assert decode_order(a * s + b, len(s)) == r
    assert decode_order(np.arctan(s / 1e3), len(s)) == r
    assert decode_order(np.cbrt(s), len(s)) == r


# ------------------------------------------------------------ samples


def test_target_ranks_follow_generator():
    for page in gen_pages(GenConfig(seed=4, count=40, jitter=0.0)):
        pc = page_columns(page)
        ranks = target_ranks(page, pc)
        cols = [pc.perm[i] for i in ranks_to_order(ranks)]
        from callikit.preprocess import reconstruct_char_order

        assert tuple(reconstruct_char_order(pc.columns, cols)) == page.reading_order


def test_collate_masks_and_targets():
    a = OrderSample(np.ones((2, 4)), np.array([1, 0]))
    b = OrderSample(np.ones((3, 4)), np.array([2, 0, 1]))
    x, m, y = collate([a, b])
    assert x.shape == (2, 3, 4) and m.tolist() == [[True, True, False], [True] * 3]
    assert y.tolist() == [[1, 0, 0], [2, 0, 1]]


def test_capacity_error():
    with pytest.raises(CapacityError):
        order_sample(column_page(51, rows=1, gap=14.0))


# ----------------------------------------------------------- training


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_order([], OrderTrainConfig(epochs=1))


def test_memorizes_one_sample():
    s = order_sample(gen_pages(GenConfig(seed=2, count=1, columns=(4, 6)))[0])
    cfg = OrderTrainConfig(lr0=1e-3, T_0=1000, epochs=400, batch=1, seed=0)
    res = train_order([s], cfg, SMALL)
    assert res.final_loss < 1e-3
    assert all(np.isfinite(res.step_losses))


def test_training_deterministic(tmp_path):
    samples = [order_sample(p) for p in gen_pages(GenConfig(seed=3, count=12))]
    cfg = OrderTrainConfig(epochs=2, batch=4, seed=5)
    digests = []
    for k in range(2):
        res = train_order(samples, cfg, SMALL)
        digests.append(save_order_model(res.model, tmp_path / f"m{k}", {"final_loss": res.final_loss}))
    assert digests[0] == digests[1] == checkpoint_digest(tmp_path / "m0")


# ------------------------------------------------------------ pipeline


def test_single_column_any_weights():
    page = column_page(1, rows=5)
    for seed in range(3):
        pred = predict_reading_order(page, OrderModel(OrderModelConfig(seed=seed)))
        assert pred.order == [0, 1, 2, 3, 4]
    assert rule_baseline(page).order == [0, 1, 2, 3, 4]


def test_prediction_is_permutation():
    model = OrderModel(SMALL)
    for page in gen_pages(GenConfig(seed=6, count=15)):
        assert sorted(predict_reading_order(page, model).order) == list(range(len(page.boxes)))


def test_rule_baseline_scroll_and_banner():
    rtl = column_page(4)
    assert tuple(rule_baseline(rtl).order) == rtl.reading_order
    ltr = column_page(4, rows=1, ltr=True)
    assert tuple(rule_baseline(ltr).order) != ltr.reading_order
    rng = np.random.default_rng(0)
    misses = 0
    for _ in range(40):
        page = gen_page(Layout.BANNER, GenConfig(jitter=0.0), rng)
        misses += tuple(rule_baseline(page).order) != page.reading_order
    assert misses > 0


# ------------------------------------------------- trained model (cached)


@pytest.fixture(scope="module")
def trained():
    from order_cache import cached_order_model

    return cached_order_model()[0]


def test_trained_three_column_scroll(trained):
    cfg = GenConfig(jitter=0.0, columns=(3, 3), signature_prob=0.0)
    rng = np.random.default_rng(21)
    for _ in range(10):
        page = gen_page(Layout.HANGING_SCROLL, cfg, rng)
        assert tuple(predict_reading_order(page, trained).order) == page.reading_order


def test_trained_couplet_signature_last(trained):
    rng = np.random.default_rng(22)
    cfg = GenConfig(jitter=0.0, signature_prob=1.0)
    for _ in range(10):
        page = gen_page(Layout.COUPLET, cfg, rng)
        pred = predict_reading_order(page, trained)
        last_col = max(b.column for b in page.boxes)
        want = {i for i, b in enumerate(page.boxes) if b.column == last_col}
        assert set(pred.columns[pred.column_order[-1]].member_indices) == want
