"""Desk versions of the two pilot studies: embedding-noise tolerance and
slice-policy fragmentation."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from callikit.callialign import EmbedTable, nn_decode
from callikit.metrics import rouge_l
from callikit.preprocess import FragmentationReport, slice_fragmentation
from callikit.synthgen import SLICING_POLICIES, gen_slicing_fixture


@dataclass
class NoiseGridConfig:
    mu_range: tuple[float, float] = (-2.0, 2.0)
    sigma_range: tuple[float, float] = (0.0, 2.0)
    mu_steps: int = 9
    sigma_steps: int = 9
    sentences: int = 200
    length: tuple[int, int] = (5, 20)
    vocab: int = 500
    dim: int = 32
    seed: int = 0

    def __post_init__(self):
        self.mu_range = tuple(self.mu_range)
        self.sigma_range = tuple(self.sigma_range)
        self.length = tuple(self.length)
        if min(self.sigma_range) < 0:
            raise ValueError("sigma must be >= 0")
        if self.mu_steps < 1 or self.sigma_steps < 1 or self.sentences < 1:
            raise ValueError("steps and sentence count must be positive")
        if not 1 <= self.length[0] <= self.length[1]:
            raise ValueError("bad sentence length range")

    @property
    def mus(self) -> np.ndarray:
        return np.linspace(*self.mu_range, self.mu_steps)

    @property
    def sigmas(self) -> np.ndarray:
        return np.linspace(*self.sigma_range, self.sigma_steps)


@dataclass
class NoiseGrid:
    mus: np.ndarray
    sigmas: np.ndarray
    fidelity: np.ndarray  # (len(mus), len(sigmas))

    def at(self, mu: float, sigma: float) -> float:
        i = int(np.argmin(np.abs(self.mus - mu)))
        j = int(np.argmin(np.abs(self.sigmas - sigma)))
        return float(self.fidelity[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mu\\sigma"] + [f"{s:g}" for s in self.sigmas])
        for mu, row in zip(self.mus, self.fidelity):
            w.writerow([f"{mu:g}"] + [f"{v:.4f}" for v in row])
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _sentences(cfg: NoiseGridConfig, vocab: int, dim: int):
    # Every cell reuses the same sentences and standard-normal draws; cells
    # differ only in how that draw is shifted and scaled.
    out = []
    for s in range(cfg.sentences):
        rng = np.random.default_rng([cfg.seed, s])
        n = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
        out.append((rng.integers(0, vocab, size=n), rng.standard_normal((n, dim))))
    return out


def noise_grid(table: EmbedTable, cfg: Optional[NoiseGridConfig] = None, threads: int = 1) -> NoiseGrid:
    """Mean ROUGE-L between token sentences and the nearest-neighbour decode of
    their normalized embeddings after adding ``N(mu, sigma^2)`` noise to every entry."""
    cfg = cfg or NoiseGridConfig()
    sents = _sentences(cfg, table.vocab, table.dim)
    mus, sigmas = cfg.mus, cfg.sigmas

    def cell(ij):
        mu, sigma = mus[ij[0]], sigmas[ij[1]]
        scores = []
        for ids, z in sents:
            got, _ = nn_decode(table.normalized[ids] + mu + sigma * z, table)
            scores.append(rouge_l(got.tolist(), ids.tolist()))
        return float(np.mean(scores))

    cells = [(i, j) for i in range(len(mus)) for j in range(len(sigmas))]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        values = list(ex.map(cell, cells))
    return NoiseGrid(mus, sigmas, np.array(values).reshape(len(mus), len(sigmas)))


def default_noise_table(cfg: NoiseGridConfig) -> EmbedTable:
    return EmbedTable.random(cfg.vocab, cfg.dim, cfg.seed)


def monotone_violations(grid: NoiseGrid) -> list[tuple[str, int, int, float]]:
    """One-step increases of fidelity when moving away from the origin cell.

    Along sigma this is left to right; along mu it is outward from the mu
    closest to zero. Each entry is ``(axis, i, j, increase)`` for the cell
    reached by the step.
    """
    f = grid.fidelity
    i0 = int(np.argmin(np.abs(grid.mus)))
    out = []
    for i in range(f.shape[0]):
        for j in range(1, f.shape[1]):
            if f[i, j] > f[i, j - 1]:
                out.append(("sigma", i, j, float(f[i, j] - f[i, j - 1])))
    for j in range(f.shape[1]):
        for i in range(f.shape[0]):
            if i == i0:
                continue
            prev = i + 1 if i < i0 else i - 1
            if f[i, j] > f[prev, j]:
                out.append(("mu", i, j, float(f[i, j] - f[prev, j])))
    return out


def slicing_pilot(n_chars: int = 64, seed: int = 0, slice_px: float = 224.0) -> dict[str, FragmentationReport]:
    if n_chars < 1:
        raise ValueError("n_chars must be >= 1")
    out = {}
    for k, policy in enumerate(SLICING_POLICIES):
        page, grid = gen_slicing_fixture(policy, n_chars, np.random.default_rng([seed, k]), slice_px)
        out[policy] = slice_fragmentation(page.boxes, grid)
    return out
