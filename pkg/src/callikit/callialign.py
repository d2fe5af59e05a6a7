"""Desk-scale character alignment: a resampler that turns per-character visual
feature tokens into three pseudo-text embeddings.

Targets are per-row standardized rows of a seeded embedding table; decoding
is nearest-neighbour cosine search over those rows.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn

from callikit.nn.checkpoint import load_checkpoint, save_checkpoint
from callikit.nn.layers import Dense, FeedForward, LayerNorm, MultiHeadAttention, sinusoidal_encoding, uniform_init
from callikit.nn.optim import AdamW

log = logging.getLogger(__name__)

MODEL_TYPE = "callialign/v1"
TABLE_TYPE = "embedtable/v1"
Q_TOKENS = 3
PAD_ID = 0


def normalize_target(row, eps: float = 1e-12) -> np.ndarray:
    """Standardize the last axis with population statistics."""
    x = np.asarray(row, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("need at least 2 dims to standardize")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass
class EmbedTable:
    rows: np.ndarray
    eps: float = 1e-12

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise ValueError("table needs shape (V, d) with V >= 2")
        if not np.isfinite(self.rows).all():
            raise ValueError("table rows must be finite")
        self.normalized = normalize_target(self.rows, self.eps)
        self._unit = self.normalized / np.linalg.norm(self.normalized, axis=1, keepdims=True).clip(min=1e-300)

    @classmethod
    def random(cls, vocab: int, dim: int, seed: int = 0, scale: float = 0.02) -> "EmbedTable":
        # small offset/scale so global stats are not trivially (0, 1)
        rng = np.random.default_rng([seed, 0x7AB1E])
        return cls(rng.normal(0.01, scale, size=(vocab, dim)))

    @property
    def vocab(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def mu(self) -> float:
        return float(self.rows.mean())

    @property
    def sigma(self) -> float:
        return float(self.rows.std())

    def normalize_global(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.sigma + self.mu


def nn_decode(pseudo, table: EmbedTable) -> tuple[np.ndarray, np.ndarray]:
    """Nearest table row by cosine similarity for every vector on the last axis.

    Returns ``(ids, scores)`` shaped like ``pseudo`` without its last axis.
    ``argmax`` takes the first maximum, so ties go to the lowest id.
    """
    x = np.asarray(pseudo, dtype=np.float64)
    if x.shape[-1] != table.dim:
        raise ValueError(f"embedding dim {x.shape[-1]} != table dim {table.dim}")
    flat = x.reshape(-1, table.dim)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    sims = (flat / np.where(norms == 0, 1.0, norms)) @ table._unit.T
    ids = sims.argmax(axis=1)
    return ids.reshape(x.shape[:-1]), sims[np.arange(len(ids)), ids].reshape(x.shape[:-1])


# ------------------------------------------------------------- tokenizer


@dataclass
class StubTokenizer:
    """Maps each character id to 1..3 non-pad token ids, unique per character."""

    tokens: list[tuple[int, ...]]

    @classmethod
    def build(cls, n_chars: int, vocab: int, seed: int = 0, lengths=(0.4, 0.35, 0.25)) -> "StubTokenizer":
        if vocab < 2:
            raise ValueError("vocab must leave room for non-pad tokens")
        rng = np.random.default_rng([seed, 0x70CE])
        seen: set[tuple[int, ...]] = set()
        out = []
        while len(out) < n_chars:
            k = int(rng.choice(3, p=lengths)) + 1
            if (vocab - 1) ** k <= len([t for t in seen if len(t) == k]):
                continue
            t = tuple(int(i) for i in rng.integers(1, vocab, size=k))
            if t not in seen:
                seen.add(t)
                out.append(t)
        return cls(out)

    @property
    def n_chars(self) -> int:
        return len(self.tokens)

    def padded(self, char_id: int) -> tuple[int, int, int]:
        t = self.tokens[char_id]
        return tuple(t) + (PAD_ID,) * (Q_TOKENS - len(t))  # type: ignore[return-value]

    def target_ids(self, char_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.padded(int(c)) for c in char_ids], dtype=np.int64).reshape(-1, Q_TOKENS)

    def lookup(self) -> dict[tuple[int, ...], int]:
        return {t: i for i, t in enumerate(self.tokens)}


# -------------------------------------------------------------- features


@dataclass
class FeatureBankConfig:
    n_chars: int = 500
    tokens: int = 64  # v
    dim: int = 64  # d_v
    rank: int = 8
    noise: float = 0.5
    seed: int = 0


class FeatureBank:
    """Stand-in for a frozen vision encoder: ``A_c @ B`` plus Gaussian noise."""

    def __init__(self, cfg: Optional[FeatureBankConfig] = None):
        self.cfg = cfg = cfg or FeatureBankConfig()
        rng = np.random.default_rng([cfg.seed, 0xFEA7])
        self.B = rng.normal(0.0, 1.0 / math.sqrt(cfg.rank), size=(cfg.rank, cfg.dim))
        self.A = rng.normal(0.0, 1.0, size=(cfg.n_chars, cfg.tokens, cfg.rank))

    def base(self, char_id: int) -> np.ndarray:
        if not 0 <= char_id < self.cfg.n_chars:
            raise IndexError(f"char id {char_id} out of range [0, {self.cfg.n_chars})")
        return self.A[char_id] @ self.B

    def sample(self, char_ids: Sequence[int], rng: np.random.Generator, noise: Optional[float] = None) -> np.ndarray:
        ids = np.asarray(char_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.n_chars):
            raise IndexError("char id out of range")
        sigma = self.cfg.noise if noise is None else noise
        x = self.A[ids] @ self.B
        if sigma > 0:
            x = x + rng.normal(0.0, sigma, size=x.shape)
        return x


def synth_char_features(bank: FeatureBank, char_id: int, rng: np.random.Generator, noise: Optional[float] = None):
    """One ``(v, d_v)`` feature array for ``char_id``."""
    bank.base(char_id)  # range check
    return bank.sample([char_id], rng, noise)[0]


# ----------------------------------------------------------------- model


@dataclass
class AlignModelConfig:
    feat_dim: int = 64
    tokens: int = 64
    d_model: int = 128
    n_heads: int = 8
    n_blocks: int = 4
    d_ff: int = 512
    q: int = Q_TOKENS
    feature_pe: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.q != Q_TOKENS:
            raise ValueError(f"query count is fixed at {Q_TOKENS}")
        if self.d_model % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide {self.d_model}")


class ResamplerBlock(nn.Module):
    def __init__(self, cfg: AlignModelConfig, gen: torch.Generator):
        super().__init__()
        self.norm_q = LayerNorm(cfg.d_model)
        self.norm_kv = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, gen)
        self.norm_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, gen)

    def forward(self, lat: Tensor, feats: Tensor) -> Tensor:
        lat = lat + self.attn(self.norm_q(lat), self.norm_kv(feats))
        return lat + self.ff(self.norm_ff(lat))


class AlignModel(nn.Module):
    def __init__(self, cfg: Optional[AlignModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or AlignModelConfig()
        gen = torch.Generator().manual_seed(cfg.seed)
        self.inp = Dense(cfg.feat_dim, cfg.d_model, gen)
        self.queries = nn.Parameter(uniform_init((cfg.q, cfg.d_model), cfg.d_model, gen).float())
        self.blocks = nn.ModuleList(ResamplerBlock(cfg, gen) for _ in range(cfg.n_blocks))
        self.norm = LayerNorm(cfg.d_model)
        self.out = Dense(cfg.d_model, cfg.d_model, gen)
        self.register_buffer("pe", sinusoidal_encoding(cfg.tokens, cfg.d_model).float(), persistent=False)

    def forward(self, feats: Tensor) -> Tensor:
        """``(n, v, d_v)`` or ``(v, d_v)`` features to ``(n, 3, d)`` or ``(3, d)``."""
        single = feats.dim() == 2
        if single:
            feats = feats.unsqueeze(0)
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.feat_dim:
            raise ValueError(f"expected (n, v, {self.cfg.feat_dim}) features, got {tuple(feats.shape)}")
        h = self.inp(feats)
        if self.cfg.feature_pe:
            if h.shape[1] > self.cfg.tokens:
                raise ValueError(f"{h.shape[1]} feature tokens exceed {self.cfg.tokens}")
            h = h + self.pe[: h.shape[1]].to(h.dtype)
        lat = self.queries.unsqueeze(0).expand(h.shape[0], -1, -1)
        for blk in self.blocks:
            lat = blk(lat, h)
        out = self.out(self.norm(lat))
        return out[0] if single else out


# ---------------------------------------------------------------- losses


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def ratio_weight(tau: float, total: float, w_min: float = 0.1, w_max: float = 0.9) -> float:
    if not 0 < w_min < w_max < 1:
        raise ValueError("need 0 < w_min < w_max < 1")
    if total <= 0:
        raise ValueError("total iterations must be positive")
    return w_min + (w_max - w_min) * min(max(tau / total, 0.0), 1.0)


def ratio_loss(
    pred: Tensor, target: Tensor, tau: float, total: float, w_min: float = 0.1, w_max: float = 0.9, eps: float = 0.1
) -> Tensor:
    """Squared error plus a deviation-ratio term whose weight grows linearly over training."""
    w = ratio_weight(tau, total, w_min, w_max)
    ratio = ((target - pred).abs() / (target.abs() + eps)).mean()
    return w * ratio + l2_loss(pred, target)


def crd_loss(pred: Tensor, labels, temperature: float = 0.1) -> Tensor:
    """Supervised contrastive loss over length-normalized, flattened predictions.

    Positives of an anchor are the other samples with the same label. The
    per-anchor terms are averaged over anchors that have a positive.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = pred.shape[0]
    labels = torch.as_tensor(np.asarray(labels)).reshape(-1)
    if n < 2 or labels.numel() != n:
        raise ValueError("crd needs >= 2 samples with one label each")
    z = pred.reshape(n, -1)
    z = z / z.norm(dim=1, keepdim=True)
    sim = z @ z.T / temperature
    eye = torch.eye(n, dtype=torch.bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    has = pos.any(dim=1)
    if not bool(has.any()):
        raise ValueError("crd needs at least one positive pair")
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    per_anchor = -log_prob.sum(dim=1)[has] / pos.sum(dim=1)[has]
    return per_anchor.mean()


# -------------------------------------------------------------- training


@dataclass
class AlignTrainConfig:
    lr0: float = 1e-4
    batch: int = 64
    steps: int = 5000
    loss: str = "l2"  # l2 | l2+rat | l2+crd
    weight_decay: float = 0.01
    w_min: float = 0.1
    w_max: float = 0.9
    ratio_eps: float = 0.1
    crd_temperature: float = 0.1
    crd_weight: float = 0.1
    eval_every: int = 500
    eval_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("l2", "l2+rat", "l2+crd"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 < self.w_min < self.w_max < 1:
            raise ValueError("need 0 < w_min < w_max < 1")
        if self.crd_temperature <= 0:
            raise ValueError("crd temperature must be positive")
        if self.steps <= 0 or self.batch <= 0:
            raise ValueError("steps and batch must be positive")
        if self.loss == "l2+crd" and self.batch < 2:
            raise ValueError("crd needs batches of at least 2")


def cosine_lr(step: int, total: int, lr0: float, eta_min: float = 0.0) -> float:
    return eta_min + (lr0 - eta_min) * (1 + math.cos(math.pi * min(step, total) / total)) / 2


@dataclass
class AlignSetup:
    table: EmbedTable
    tokenizer: StubTokenizer
    bank: FeatureBank

    @classmethod
    def build(cls, vocab: int = 500, dim: int = 128, n_chars: Optional[int] = None, bank: Optional[FeatureBankConfig] = None, seed: int = 0):
        n_chars = vocab if n_chars is None else n_chars
        bcfg = bank or FeatureBankConfig(n_chars=n_chars, seed=seed)
        if bcfg.n_chars != n_chars:
            raise ValueError("feature bank and tokenizer disagree on character count")
        return cls(EmbedTable.random(vocab, dim, seed), StubTokenizer.build(n_chars, vocab, seed), FeatureBank(bcfg))

    def targets(self, char_ids: Sequence[int]) -> np.ndarray:
        return self.table.normalized[self.tokenizer.target_ids(char_ids)]


def char_accuracy(pred: np.ndarray, char_ids: Sequence[int], setup: AlignSetup) -> float:
    """Share of characters whose non-pad target tokens all decode correctly."""
    ids, _ = nn_decode(pred, setup.table)
    want = setup.tokenizer.target_ids(char_ids)
    ok = [(ids[i][want[i] != PAD_ID] == want[i][want[i] != PAD_ID]).all() for i in range(len(want))]
    return float(np.mean(ok)) if ok else 0.0


@dataclass
class AlignTrainResult:
    model: AlignModel
    losses: list[float]
    accuracy: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1][1] if self.accuracy else float("nan")


@torch.no_grad()
def predict_align(model: AlignModel, feats: np.ndarray, batch: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = [model(torch.from_numpy(np.asarray(feats[i : i + batch])).to(dtype)).double().numpy() for i in range(0, len(feats), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, model.cfg.q, model.cfg.d_model))


def heldout_set(setup: AlignSetup, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x4E1D])
    ids = rng.integers(0, setup.tokenizer.n_chars, size=n)
    return ids, setup.bank.sample(ids, rng)


def train_align(
    setup: AlignSetup, cfg: Optional[AlignTrainConfig] = None, model_cfg: Optional[AlignModelConfig] = None
) -> AlignTrainResult:
    cfg = cfg or AlignTrainConfig()
    bc = setup.bank.cfg
    model_cfg = model_cfg or AlignModelConfig(feat_dim=bc.dim, tokens=bc.tokens, d_model=setup.table.dim, seed=cfg.seed)
    if model_cfg.d_model != setup.table.dim or model_cfg.feat_dim != bc.dim:
        raise ValueError("model dims must match the table and feature bank")
    torch.manual_seed(cfg.seed)
    model = AlignModel(model_cfg)
    opt = AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    hold_ids, hold_x = heldout_set(setup, cfg.eval_samples, cfg.seed)
    losses: list[float] = []
    curve: list[tuple[int, float]] = []
    t0 = time.time()
    for step in range(cfg.steps):
        if cfg.loss == "l2+crd":
            # paired views so every batch carries positives
            half = rng.integers(0, setup.tokenizer.n_chars, size=(cfg.batch + 1) // 2)
            ids = np.repeat(half, 2)[: cfg.batch]
        else:
            ids = rng.integers(0, setup.tokenizer.n_chars, size=cfg.batch)
        x = torch.from_numpy(setup.bank.sample(ids, rng)).float()
        y = torch.from_numpy(setup.targets(ids)).float()
        model.train()
        opt.zero_grad()
        pred = model(x)
        if cfg.loss == "l2":
            loss = l2_loss(pred, y)
        elif cfg.loss == "l2+rat":
            loss = ratio_loss(pred, y, step, cfg.steps, cfg.w_min, cfg.w_max, cfg.ratio_eps)
        else:
            loss = l2_loss(pred, y) + cfg.crd_weight * crd_loss(pred, ids, cfg.crd_temperature)
        loss.backward()
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.step(cosine_lr(step, cfg.steps, cfg.lr0))
        losses.append(value)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            acc = char_accuracy(predict_align(model, hold_x), hold_ids, setup)
            curve.append((step + 1, acc))
            log.info("step %d loss %.4f acc %.4f (%.0fs)", step + 1, value, acc, time.time() - t0)
    model.eval()
    return AlignTrainResult(model, losses, curve, time.time() - t0)


# ------------------------------------------------------------ checkpoints


def save_table(path: Union[str, Path], table: EmbedTable, meta: Optional[dict] = None) -> str:
    return save_checkpoint(path, TABLE_TYPE, {"vocab": table.vocab, "dim": table.dim, "eps": table.eps}, {"rows": table.rows}, meta)


def load_table(path: Union[str, Path]) -> EmbedTable:
    manifest, t = load_checkpoint(path, TABLE_TYPE)
    return EmbedTable(t["rows"].double().numpy(), manifest["config"]["eps"])


def save_align(path: Union[str, Path], model: AlignModel, setup: AlignSetup, meta: Optional[dict] = None) -> str:
    """Model weights, table rows and the tokenizer/feature-bank recipe in one checkpoint.

    Table rows are stored as float32, so a reloaded table is the float32
    rounding of the in-memory one.
    """
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors["table.rows"] = setup.table.rows
    config = {
        "model": asdict(model.cfg),
        "bank": asdict(setup.bank.cfg),
        "table": {"vocab": setup.table.vocab, "dim": setup.table.dim, "eps": setup.table.eps},
        "tokens": [list(t) for t in setup.tokenizer.tokens],
    }
    return save_checkpoint(path, MODEL_TYPE, config, tensors, meta)


def load_align(path: Union[str, Path]) -> tuple[AlignModel, AlignSetup, dict]:
    manifest, t = load_checkpoint(path, MODEL_TYPE)
    c = manifest["config"]
    model = AlignModel(AlignModelConfig(**c["model"]))
    model.load_state_dict({k[len("model.") :]: v for k, v in t.items() if k.startswith("model.")})
    model.eval()
    setup = AlignSetup(
        EmbedTable(t["table.rows"].double().numpy(), c["table"]["eps"]),
        StubTokenizer([tuple(x) for x in c["tokens"]]),
        FeatureBank(FeatureBankConfig(**c["bank"])),
    )
    return model, setup, manifest


# ------------------------------------------------------------------ misc


def compression_ratio(v: int, q: int = Q_TOKENS) -> float:
    """Share of visual tokens removed when ``v`` tokens become ``q``."""
    if not v >= q >= 1:
        raise ValueError("need v >= q >= 1")
    return 1.0 - q / v


def assemble_eit_sample(query_ids: Sequence[int], pseudo, table: EmbedTable, page_rows=None) -> np.ndarray:
    """Query-token rows, then denormalized pseudo embeddings, then page feature rows."""
    d = table.dim
    parts = [table.rows[np.asarray(query_ids, dtype=np.int64).reshape(-1)]]
    if pseudo is not None:
        p = np.asarray(pseudo, dtype=np.float64)
        if p.size and p.shape[-1] != d:
            raise ValueError(f"pseudo embedding dim {p.shape[-1]} != {d}")
        parts.append(table.denormalize(p.reshape(-1, d)) if p.size else np.zeros((0, d)))
    if page_rows is not None:
        r = np.asarray(page_rows, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != d:
            raise ValueError(f"page feature rows must have shape (m, {d})")
        parts.append(r)
    return np.concatenate(parts, axis=0)
