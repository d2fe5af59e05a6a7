"""Synthetic calligraphy page layouts with ground-truth reading order.

Geometry is built in units of the main glyph size ``s`` and scaled to pixels
at the end. Pitches are chosen so that, with center jitter clipped at two
standard deviations and the configured size variation, neighbouring columns
never overlap horizontally and sibling boxes stay below 0.05 IoU.

Each page draws from its own ``numpy`` ``PCG64`` stream seeded with
``SeedSequence([seed, page_index])``, so pages are independent of generation
order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from callikit.geometry import BBox, CharBox, Layout, PageSample, Style
from callikit.ingest import DATASET_FORMAT, dumps_page

RNG_ALGORITHM = {
    "bit_generator": "PCG64",
    "page_stream": "numpy.random.Generator(PCG64(SeedSequence([seed, page_index])))",
}

COL_PITCH = 1.8  # horizontal distance between main column axes
ROW_PITCH = 1.6  # vertical distance between glyph centers
BANNER_PITCH = 1.6
SIG_SCALE = 0.55  # signature glyph size relative to main glyphs
SIG_OFFSET = 1.5  # axis distance between a signature column and its neighbour
TITLE_SCALE = 1.4
SPLIT_EDGE_GAP = 4.0  # edge gap above a signature stacked under main text
MIN_GLYPH_PX = 4.0

CJK_FIRST, CJK_LAST = 0x4E00, 0x9FA5


class InfeasibleLayoutError(ValueError):
    pass


@dataclass
class GenConfig:
    seed: int = 0
    layout_mix: dict[str, float] = field(default_factory=lambda: {l.value: 1.0 for l in Layout})
    columns: tuple[int, int] = (1, 8)
    chars_per_column: tuple[int, int] = (2, 10)
    char_size: tuple[float, float] = (0.03, 0.08)
    jitter: float = 0.08
    size_variation: float = 0.3
    signature_prob: float = 0.7
    page_size: tuple[int, int] = (2048, 2048)
    count: int = 100
    splits: dict[str, float] = field(default_factory=lambda: {"train": 1.0})

    def __post_init__(self):
        self.columns = tuple(int(v) for v in self.columns)
        self.chars_per_column = tuple(int(v) for v in self.chars_per_column)
        self.char_size = tuple(float(v) for v in self.char_size)
        self.page_size = tuple(int(v) for v in self.page_size)
        lo, hi = self.columns
        if not 1 <= lo <= hi:
            raise ValueError(f"columns range {self.columns} must satisfy 1 <= lo <= hi")
        lo, hi = self.chars_per_column
        if not 1 <= lo <= hi:
            raise ValueError(f"chars_per_column range {self.chars_per_column} invalid")
        lo, hi = self.char_size
        if not 0 < lo <= hi:
            raise ValueError(f"char_size range {self.char_size} invalid")
        weights = list(self.layout_mix.values())
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("layout weights must be non-negative with a positive sum")
        for name in self.layout_mix:
            Layout(name)
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if not 0 <= self.size_variation < 1:
            raise ValueError("size_variation must be in [0, 1)")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if sum(self.splits.values()) <= 0 or any(v < 0 for v in self.splits.values()):
            raise ValueError("split fractions must be non-negative with a positive sum")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("columns", "chars_per_column", "char_size", "page_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _Glyph:
    cx: float
    cy: float
    size: float  # nominal size in units of s


@dataclass
class _Col:
    glyphs: list[_Glyph]


def page_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _randint(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _stack(x: float, y_top: float, n: int, size: float = 1.0, pitch: float = ROW_PITCH) -> _Col:
    """Column of ``n`` glyphs whose first glyph's top edge is at ``y_top``."""
    step = pitch * size
    y0 = y_top + size / 2
    return _Col([_Glyph(x, y0 + k * step, size) for k in range(n)])


def _signature_len(rng, main_count: int) -> int:
    # keep signature glyphs a minority so the median box height is a main glyph
    return max(1, min(_randint(rng, 2, 4), main_count - 1))


def _rtl_block(rng, x_right: float, n_cols: int, cpc: int, ragged_last: bool) -> list[_Col]:
    cols = []
    for k in range(n_cols):
        n = cpc
        if ragged_last and k == n_cols - 1:
            n = _randint(rng, 1, cpc)
        cols.append(_stack(x_right - k * COL_PITCH, 0.0, n))
    return cols


def _signature_beside(rng, x: float, main_rows: int) -> _Col:
    main_count = max(main_rows, 2)
    n = _signature_len(rng, main_count)
    y_top = ROW_PITCH * rng.uniform(0.5, max(0.5, main_rows - 0.5 * n))
    return _stack(x, y_top, n, SIG_SCALE)


def _scroll(rng, cfg: GenConfig, n_cols: int, cpc: int) -> list[_Col]:
    cols = _rtl_block(rng, 0.0, n_cols, cpc, ragged_last=True)
    main_count = sum(len(c.glyphs) for c in cols)
    if main_count >= 2 and rng.random() < cfg.signature_prob:
        last = cols[-1]
        if rng.random() < 0.3:
            # signature stacked under the last column after a wide gap
            bottom = last.glyphs[-1].cy + 0.5
            n = _signature_len(rng, main_count)
            cols.append(_stack(last.glyphs[0].cx, bottom + SPLIT_EDGE_GAP, n, SIG_SCALE))
        else:
            cols.append(_signature_beside(rng, last.glyphs[0].cx - SIG_OFFSET, cpc))
    return cols


def _hanging_scroll(rng, cfg):
    return _scroll(rng, cfg, _randint(rng, *cfg.columns), _randint(rng, *cfg.chars_per_column))


def _middle_scroll(rng, cfg):
    lo, hi = cfg.columns
    clo, chi = cfg.chars_per_column
    n_cols = _randint(rng, min(lo + 1, hi), hi)
    cpc = _randint(rng, clo, max(clo, (clo + chi) // 2))
    return _scroll(rng, cfg, n_cols, cpc)


def _squared_sheet(rng, cfg):
    n_cols = _randint(rng, *cfg.columns)
    clo, chi = cfg.chars_per_column
    cpc = int(np.clip(n_cols + _randint(rng, -1, 1), clo, chi))
    cols = _rtl_block(rng, 0.0, n_cols, cpc, ragged_last=False)
    if cpc * n_cols >= 2 and rng.random() < cfg.signature_prob:
        cols.append(_signature_beside(rng, cols[-1].glyphs[0].cx - SIG_OFFSET, cpc))
    return cols


def _album(rng, cfg):
    lo, hi = cfg.columns
    right = _randint(rng, 1, max(1, hi // 2))
    left = _randint(rng, 1, max(1, hi // 2))
    cpc = _randint(rng, *cfg.chars_per_column)
    cols = _rtl_block(rng, 0.0, right, cpc, ragged_last=False)
    gutter = COL_PITCH * rng.uniform(2.0, 3.0)
    x_left = cols[-1].glyphs[0].cx - gutter
    cols += _rtl_block(rng, x_left, left, cpc, ragged_last=True)
    if rng.random() < cfg.signature_prob:
        cols.append(_signature_beside(rng, cols[-1].glyphs[0].cx - SIG_OFFSET, cpc))
    return cols


def _hand_scroll(rng, cfg):
    lo, hi = cfg.columns
    clo, chi = cfg.chars_per_column
    title_cols = _randint(rng, 1, 2)
    title_len = _randint(rng, 2, 4)
    cols = [
        _stack(-k * COL_PITCH * TITLE_SCALE, 0.0, title_len, TITLE_SCALE) for k in range(title_cols)
    ]
    x_main = cols[-1].glyphs[0].cx - 3.0
    n_main = _randint(rng, max(lo, 2), hi + 2)
    cpc = _randint(rng, clo, max(clo, (clo + chi) // 2))
    cols += _rtl_block(rng, x_main, n_main, cpc, ragged_last=True)
    if rng.random() < cfg.signature_prob:
        cols.append(_signature_beside(rng, cols[-1].glyphs[0].cx - SIG_OFFSET, cpc))
    return cols


def _couplet(rng, cfg):
    clo, chi = cfg.chars_per_column
    cpc = _randint(rng, max(clo, 3), max(chi, 3))
    gap = COL_PITCH * rng.uniform(3.0, 6.0)
    cols = [_stack(0.0, 0.0, cpc), _stack(-gap, 0.0, cpc)]
    if rng.random() < cfg.signature_prob:
        # the signature goes on either side of the left scroll and is read last
        side = 1.0 if rng.random() < 0.5 else -1.0
        cols.append(_signature_beside(rng, -gap + side * SIG_OFFSET, cpc))
    return cols


def _banner(rng, cfg):
    lo, hi = cfg.columns
    k = _randint(rng, max(lo, 2), max(hi, 2))
    rtl = rng.random() < 0.5
    direction = -1.0 if rtl else 1.0
    cols = [_Col([_Glyph(direction * i * BANNER_PITCH, 0.0, 1.0)]) for i in range(k)]
    # the signature always closes the line, on the side reading ends; it is
    # the only cue separating left-to-right from right-to-left banners
    n = _randint(rng, 2, 4)
    x_sig = direction * ((k - 1) * BANNER_PITCH + SIG_OFFSET)
    cols.append(_stack(x_sig, -0.5, n, SIG_SCALE))
    return cols


_BUILDERS = {
    Layout.HANGING_SCROLL: _hanging_scroll,
    Layout.MIDDLE_SCROLL: _middle_scroll,
    Layout.SQUARED_SHEET: _squared_sheet,
    Layout.ALBUM: _album,
    Layout.HAND_SCROLL: _hand_scroll,
    Layout.COUPLET: _couplet,
    Layout.BANNER: _banner,
}


def _truncated_normal(rng, sigma: float, size: int) -> np.ndarray:
    if sigma == 0:
        return np.zeros(size)
    return np.clip(rng.normal(0.0, sigma, size), -2 * sigma, 2 * sigma)


def gen_page(
    layout: Union[Layout, str],
    cfg: GenConfig,
    rng: np.random.Generator,
    sample_id: str = "",
) -> PageSample:
    """One synthetic page whose reading order is fixed by the layout's convention."""
    layout = Layout(layout)
    cols = _BUILDERS[layout](rng, cfg)

    # jitter and size variation, in units of s
    raw = []  # (x1, y1, x2, y2, column, row)
    for c_idx, col in enumerate(cols):
        n = len(col.glyphs)
        sizes = np.array([g.size for g in col.glyphs])
        dx = _truncated_normal(rng, cfg.jitter, n) * sizes
        dy = _truncated_normal(rng, cfg.jitter, n) * sizes
        v = cfg.size_variation
        fw = rng.uniform(1 - v, 1 + v, n) if v > 0 else np.ones(n)
        fh = rng.uniform(1 - v, 1 + v, n) if v > 0 else np.ones(n)
        for r, g in enumerate(col.glyphs):
            cx, cy = g.cx + dx[r], g.cy + dy[r]
            hw, hh = g.size * fw[r] / 2, g.size * fh[r] / 2
            raw.append((cx - hw, cy - hh, cx + hw, cy + hh, c_idx, r))
    arr = np.array([r[:4] for r in raw])
    x0, y0 = arr[:, 0].min(), arr[:, 1].min()
    content_w = arr[:, 2].max() - x0
    content_h = arr[:, 3].max() - y0
    ml, mr, mt, mb = rng.uniform(0.5, 2.0, 4)

    W_max, H_max = cfg.page_size
    s_px = rng.uniform(*cfg.char_size) * min(W_max, H_max)
    # shrink glyphs until the page fits; ceil() below may add one pixel
    s_fit = min((W_max - 1) / (content_w + ml + mr), (H_max - 1) / (content_h + mt + mb))
    s_px = min(s_px, s_fit)
    if s_px < MIN_GLYPH_PX:
        raise InfeasibleLayoutError(
            f"{layout.value}: {len(raw)} glyphs cannot fit a {W_max}x{H_max} page "
            f"(glyph size would be {s_px:.2f}px)"
        )
    width = int(math.ceil((content_w + ml + mr) * s_px))
    height = int(math.ceil((content_h + mt + mb) * s_px))

    chars = rng.integers(CJK_FIRST, CJK_LAST + 1, len(raw))
    order = rng.permutation(len(raw))  # storage position -> raw glyph index
    boxes = []
    for k in order:
        x1, y1, x2, y2, c_idx, r = raw[k]
        box = BBox(
            (x1 - x0 + ml) * s_px,
            (y1 - y0 + mt) * s_px,
            (x2 - x0 + ml) * s_px,
            (y2 - y0 + mt) * s_px,
        )
        boxes.append(CharBox(box, chr(int(chars[k])), c_idx, r))
    # raw glyphs are already in reading order
    position = np.empty(len(raw), dtype=np.int64)
    position[order] = np.arange(len(raw))
    reading_order = tuple(int(i) for i in position)

    styles = list(Style)
    return PageSample(
        width=width,
        height=height,
        boxes=tuple(boxes),
        reading_order=reading_order,
        layout=layout,
        style=styles[int(rng.integers(len(styles)))],
        author="synthetic",
        sample_id=sample_id,
    )


def _choose_layout(rng, cfg: GenConfig) -> Layout:
    names = sorted(cfg.layout_mix)
    w = np.array([cfg.layout_mix[n] for n in names], dtype=np.float64)
    return Layout(names[int(rng.choice(len(names), p=w / w.sum()))])


def gen_pages(cfg: GenConfig, start: int = 0, count: Optional[int] = None) -> list[PageSample]:
    """Pages ``start .. start+count`` of the dataset described by ``cfg``, in memory."""
    count = cfg.count if count is None else count
    pages = []
    for i in range(start, start + count):
        rng = page_rng(cfg.seed, i)
        pages.append(gen_page(_choose_layout(rng, cfg), cfg, rng, sample_id=f"page_{i:05d}"))
    return pages


def _split_names(cfg: GenConfig) -> list[str]:
    names = list(cfg.splits)
    total = sum(cfg.splits.values())
    out = []
    acc = 0.0
    for name in names:
        acc += cfg.splits[name] / total
        out.append((acc, name))
    labels = []
    for i in range(cfg.count):
        frac = (i + 0.5) / cfg.count
        labels.append(next(name for edge, name in out if frac <= edge + 1e-12))
    return labels


def gen_dataset(cfg: GenConfig, out_dir: Union[str, Path]) -> dict:
    """Write ``cfg.count`` pages plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = _split_names(cfg)
    files = []
    for i in range(cfg.count):
        rng = page_rng(cfg.seed, i)
        page = gen_page(_choose_layout(rng, cfg), cfg, rng, sample_id=f"page_{i:05d}")
        data = dumps_page(page).encode("utf-8")
        name = f"{page.sample_id}.json"
        (out_dir / name).write_bytes(data)
        files.append(
            {"file": name, "id": page.sample_id, "split": splits[i], "sha256": hashlib.sha256(data).hexdigest()}
        )
    manifest = {
        "format": DATASET_FORMAT,
        "generator": "callikit.synthgen",
        "seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "config": cfg.to_dict(),
        "files": files,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8"
    )
    return manifest


# ------------------------------------------------------------- slicing


SLICING_POLICIES = ("multi", "single", "intersect", "cross")


@dataclass(frozen=True)
class SliceGrid:
    """Slice boundaries along each axis, including the page edges."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    @property
    def cells(self) -> int:
        return (len(self.xs) - 1) * (len(self.ys) - 1)


def gen_slicing_fixture(
    policy: str, n_chars: int, rng: np.random.Generator, slice_px: float = 224.0
) -> tuple[PageSample, SliceGrid]:
    """Characters placed relative to a slice grid.

    ``single``: one character per slice; ``multi``: up to four per slice;
    ``intersect``: each character centered on a vertical slice boundary;
    ``cross``: each character centered on a corner shared by four slices.
    """
    if policy not in SLICING_POLICIES:
        raise ValueError(f"unknown slicing policy {policy!r}")
    if n_chars < 1:
        raise ValueError("n_chars must be >= 1")
    S = float(slice_px)
    glyph = 0.5 * S
    centers: list[tuple[float, float]] = []
    sizes: list[float] = []
    if policy == "single":
        n_x, n_y = n_chars, 1
        for i in range(n_chars):
            centers.append(((i + 0.5) * S, 0.5 * S))
            sizes.append(glyph)
    elif policy == "multi":
        per = 4
        n_x, n_y = math.ceil(n_chars / per), 1
        for i in range(n_chars):
            cell, k = divmod(i, per)
            qx, qy = k % 2, k // 2
            centers.append(((cell + 0.25 + 0.5 * qx) * S, (0.25 + 0.5 * qy) * S))
            sizes.append(0.35 * S)
    elif policy == "intersect":
        n_x, n_y = n_chars + 1, 1
        for i in range(n_chars):
            centers.append(((i + 1) * S, 0.5 * S))
            sizes.append(glyph)
    else:
        n_x, n_y = n_chars + 1, 2
        for i in range(n_chars):
            centers.append(((i + 1) * S, S))
            sizes.append(glyph)

    boxes = []
    for (cx, cy), size in zip(centers, sizes):
        # small random shape change that keeps the policy's geometry intact
        w = size * rng.uniform(0.8, 1.0)
        h = size * rng.uniform(0.8, 1.0)
        label = chr(int(rng.integers(CJK_FIRST, CJK_LAST + 1)))
        boxes.append(CharBox(BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), label, len(boxes), 0))
    width, height = int(round(n_x * S)), int(round(n_y * S))
    page = PageSample(
        width=width,
        height=height,
        boxes=tuple(boxes),
        reading_order=tuple(range(len(boxes))),
        layout=Layout.BANNER,
        sample_id=f"slicing_{policy}",
    )
    grid = SliceGrid(tuple(k * S for k in range(n_x + 1)), tuple(k * S for k in range(n_y + 1)))
    return page, grid
