"""Encoder-only transformer that regresses a reading rank for every column box.

Pipeline for a page: cluster boxes into columns, shift/scale the column
extents, pre-sort them, pad to 50, score, rank the scores, and expand the
column order back into a character order.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from callikit.geometry import CharBox, Column, PageSample
from callikit.nn.checkpoint import load_checkpoint, save_checkpoint
from callikit.nn.layers import Dense, FeedForward, LayerNorm, MultiHeadAttention, mse_loss, sinusoidal_encoding
from callikit.nn.optim import AdamW, LrSchedule, cosine_warm_restarts
from callikit.preprocess import (
    MAX_COLUMNS,
    CapacityError,
    cluster_columns,
    column_rows,
    pad_to_n,
    presort,
    ranks_to_order,
    reconstruct_char_order,
)

log = logging.getLogger(__name__)

MODEL_TYPE = "orderformer/v1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OrderModelConfig:
    in_dim: int = 4
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 4
    d_ff: int = 1024
    max_len: int = MAX_COLUMNS
    activation: str = "gelu"
    dropout: float = 0.0
    positional: bool = True
    seed: int = 0


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg: OrderModelConfig, gen: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, gen)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, gen, cfg.activation)
        self.dropout = cfg.dropout

    def forward(self, x: Tensor, mask: Optional[Tensor]) -> Tensor:
        h = self.norm1(x)
        x = x + F.dropout(self.attn(h, h, mask), self.dropout, self.training)
        return x + F.dropout(self.ff(self.norm2(x)), self.dropout, self.training)


class OrderModel(nn.Module):
    def __init__(self, cfg: Optional[OrderModelConfig] = None):
        super().__init__()
        cfg = cfg or OrderModelConfig()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.inp = Dense(cfg.in_dim, cfg.d_model, gen)
        self.layers = nn.ModuleList(EncoderLayer(cfg, gen) for _ in range(cfg.n_layers))
        self.norm = LayerNorm(cfg.d_model)
        self.out = Dense(cfg.d_model, 1, gen)
        self.register_buffer("pe", sinusoidal_encoding(cfg.max_len, cfg.d_model).float(), persistent=False)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        """Scores of shape (B, L, 1) for boxes ``x`` of shape (B, L, 4)."""
        if x.dim() != 3 or x.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"expected (B, L, {self.cfg.in_dim}) input, got {tuple(x.shape)}")
        L = x.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if mask is not None and mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {tuple(mask.shape)} != {tuple(x.shape[:2])}")
        h = self.inp(x)
        if self.cfg.positional:
            h = h + self.pe[:L].to(h.dtype)
        for layer in self.layers:
            h = layer(h, mask)
        return self.out(self.norm(h))

    def tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.state_dict().items()}


def save_order_model(model: OrderModel, path: Union[str, Path], meta: Optional[dict] = None) -> str:
    return save_checkpoint(path, MODEL_TYPE, asdict(model.cfg), model.tensors(), meta)


def load_order_model(path: Union[str, Path]) -> tuple[OrderModel, dict]:
    manifest, tensors = load_checkpoint(path, MODEL_TYPE)
    model = OrderModel(OrderModelConfig(**manifest["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest


# ---------------------------------------------------------------- decode


def decode_order(scores: Sequence[float], n: int) -> list[int]:
    """Rank of each of the first ``n`` scores (ascending; ties by position).

    Pad positions beyond ``n`` are ignored, and any strictly increasing
    transform of the scores yields the same ranks.
    """
    if n <= 0:
        return []
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if n > len(s):
        raise ValueError(f"valid length {n} exceeds {len(s)} scores")
    order = np.argsort(s[:n], kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return [int(r) for r in ranks]


# -------------------------------------------------------------- samples


@dataclass
class PageColumns:
    columns: list[Column]
    rows: np.ndarray  # presorted normalized extents (n, 4)
    perm: np.ndarray  # presorted position -> index into ``columns``


def page_columns(page: PageSample, min_overlap: float = 0.5, split_gap: float = 2.5) -> PageColumns:
    if not page.boxes:
        raise ValueError("page has no boxes")
    columns = cluster_columns(page.boxes, min_overlap, split_gap)
    rows, perm = presort(column_rows(columns, page.width, page.height))
    return PageColumns(columns, rows, perm)


def target_ranks(page: PageSample, pc: PageColumns) -> np.ndarray:
    """Reading rank of each presorted column, ordered by its first-read member."""
    if page.reading_order is None:
        raise ValueError(f"page {page.sample_id!r} has no reading order")
    position = np.empty(len(page.boxes), dtype=np.int64)
    position[list(page.reading_order)] = np.arange(len(page.boxes))
    first = np.array([position[list(pc.columns[c].member_indices)].min() for c in pc.perm])
    ranks = np.empty(len(first), dtype=np.int64)
    ranks[np.argsort(first, kind="stable")] = np.arange(len(first))
    return ranks


@dataclass
class OrderSample:
    rows: np.ndarray  # (n, 4)
    ranks: np.ndarray  # (n,)
    sample_id: str = ""


def order_sample(page: PageSample) -> OrderSample:
    pc = page_columns(page)
    if len(pc.rows) > MAX_COLUMNS:
        raise CapacityError(f"page {page.sample_id!r} has {len(pc.rows)} columns (> {MAX_COLUMNS})")
    return OrderSample(pc.rows, target_ranks(page, pc), page.sample_id)


def collate(samples: Sequence[OrderSample], length: Optional[int] = None) -> tuple[Tensor, Tensor, Tensor]:
    """Stack samples into zero-padded ``(x, mask, target)`` tensors.

    ``length`` defaults to the longest sample; pads are masked out of attention
    and loss, so the valid outputs do not depend on the padded length.
    """
    L = length or max(len(s.rows) for s in samples)
    x = np.zeros((len(samples), L, 4), dtype=np.float32)
    y = np.zeros((len(samples), L), dtype=np.float32)
    m = np.zeros((len(samples), L), dtype=bool)
    for i, s in enumerate(samples):
        n = len(s.rows)
        x[i, :n] = s.rows
        y[i, :n] = s.ranks
        m[i, :n] = True
    return torch.from_numpy(x), torch.from_numpy(m), torch.from_numpy(y)


# -------------------------------------------------------------- training


@dataclass
class OrderTrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 0.0
    amsgrad: bool = True
    T_0: float = 10
    T_mult: float = 2
    eta_min: float = 1e-6
    batch: int = 4
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch <= 0:
            raise ValueError("epochs and batch must be positive")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr0, self.eta_min, self.T_0, self.T_mult)


@dataclass
class OrderTrainResult:
    model: OrderModel
    epoch_losses: list[float]
    step_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def train_order(
    samples: Sequence[OrderSample],
    cfg: Optional[OrderTrainConfig] = None,
    model_cfg: Optional[OrderModelConfig] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> OrderTrainResult:
    """Fit an order model with masked MSE on reading ranks.

    The learning rate follows cosine annealing with warm restarts evaluated at
    fractional epochs. Shuffling uses ``numpy`` PCG64 seeded with ``cfg.seed``.
    """
    cfg = cfg or OrderTrainConfig()
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    model_cfg = model_cfg or OrderModelConfig(seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    model = OrderModel(model_cfg)
    model.train()
    opt = AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad)
    sched = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch)
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch : (k + 1) * cfg.batch]
            x, m, y = collate([samples[i] for i in idx])
            lr = cosine_warm_restarts(epoch + k / steps_per_epoch, sched)
            opt.zero_grad()
            loss = mse_loss(model(x, m).squeeze(-1), y, m)
            loss.backward()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {k}")
            opt.step(lr)
            step_losses.append(value)
            total += value * int(m.sum())
            count += int(m.sum())
        epoch_losses.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
        log.info("epoch %d loss %.5f (%.0fs)", epoch, epoch_losses[-1], time.time() - t0)
    model.eval()
    return OrderTrainResult(model, epoch_losses, step_losses, time.time() - t0)


# ------------------------------------------------------------- inference


@dataclass
class OrderPrediction:
    order: list[int]  # box indices in reading order
    columns: list[Column]
    column_order: list[int]  # column indices in reading order
    scores: Optional[np.ndarray] = None

    def boxes(self, page: PageSample) -> list[CharBox]:
        return [page.boxes[i] for i in self.order]


def _column_order(pc: PageColumns, ranks: Sequence[int]) -> list[int]:
    return [int(pc.perm[pos]) for pos in ranks_to_order(ranks)]


@torch.no_grad()
def score_columns(model: OrderModel, rows_list: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Scores for several presorted column sequences, each padded to ``max_len``."""
    if not rows_list:
        return []
    seqs = [pad_to_n(r, model.cfg.max_len) for r in rows_list]
    x = torch.from_numpy(np.stack([s.rows for s in seqs]).astype(np.float32))
    m = torch.from_numpy(np.stack([s.mask for s in seqs]))
    out = model(x.to(next(model.parameters()).dtype), m)[..., 0].double().numpy()
    return [out[i, : s.valid_len] for i, s in enumerate(seqs)]


def predict_reading_order(page: PageSample, model: OrderModel) -> OrderPrediction:
    return predict_many([page], model)[0]


def predict_many(pages: Sequence[PageSample], model: OrderModel, batch: int = 64) -> list[OrderPrediction]:
    model.eval()
    pcs = [page_columns(p) for p in pages]
    for p, pc in zip(pages, pcs):
        if len(pc.rows) > model.cfg.max_len:
            # pad_to_n would also refuse; name the page here
            pad_to_n(pc.rows, model.cfg.max_len)
    preds = []
    for start in range(0, len(pcs), batch):
        chunk = pcs[start : start + batch]
        for pc, scores in zip(chunk, score_columns(model, [pc.rows for pc in chunk])):
            ranks = decode_order(scores, len(pc.rows))
            col_order = _column_order(pc, ranks)
            preds.append(OrderPrediction(reconstruct_char_order(pc.columns, col_order), pc.columns, col_order, scores))
    return preds


def rule_baseline(page: PageSample) -> OrderPrediction:
    """Read columns in pre-sort order (right to left, top first)."""
    pc = page_columns(page)
    col_order = [int(c) for c in pc.perm]
    return OrderPrediction(reconstruct_char_order(pc.columns, col_order), pc.columns, col_order)


@dataclass
class OrderEval:
    pages: int
    model_exact: float
    baseline_exact: float
    model_column_exact: float
    by_layout: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'layout':<16}{'pages':>7}{'model':>8}{'rule':>8}"]
        for name, d in sorted(self.by_layout.items()):
            lines.append(f"{name:<16}{int(d['pages']):>7}{d['model_exact']:>8.3f}{d['baseline_exact']:>8.3f}")
        lines.append(f"{'all':<16}{self.pages:>7}{self.model_exact:>8.3f}{self.baseline_exact:>8.3f}")
        return "\n".join(lines)


def evaluate_order(pages: Sequence[PageSample], model: OrderModel) -> OrderEval:
    """Exact reading-order match rates for the model and the rule baseline."""
    if not pages:
        raise ValueError("no pages to evaluate")
    preds = predict_many(pages, model)
    rows = []
    for page, pred in zip(pages, preds):
        gt = list(page.reading_order)
        pc = page_columns(page)
        gt_cols = _column_order(pc, target_ranks(page, pc))
        rows.append(
            (
                str(page.layout),
                pred.order == gt,
                rule_baseline(page).order == gt,
                pred.column_order == gt_cols,
            )
        )
    by_layout: dict[str, dict[str, float]] = {}
    for name in sorted({r[0] for r in rows}):
        sub = [r for r in rows if r[0] == name]
        by_layout[name] = {
            "pages": len(sub),
            "model_exact": sum(r[1] for r in sub) / len(sub),
            "baseline_exact": sum(r[2] for r in sub) / len(sub),
        }
    n = len(rows)
    return OrderEval(
        pages=n,
        model_exact=sum(r[1] for r in rows) / n,
        baseline_exact=sum(r[2] for r in rows) / n,
        model_column_exact=sum(r[3] for r in rows) / n,
        by_layout=by_layout,
    )
