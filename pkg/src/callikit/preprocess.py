"""Column clustering and the geometric preprocessing in front of the order model."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from callikit.geometry import BBox, CharBox, Column, union_all
from callikit.synthgen import SliceGrid

MAX_COLUMNS = 50


class CapacityError(ValueError):
    """Page has more columns than the order model accepts."""


def _as_bbox(b: Union[BBox, CharBox]) -> BBox:
    return b.box if isinstance(b, CharBox) else b


def cluster_columns(
    boxes: Sequence[Union[BBox, CharBox]],
    min_overlap: float = 0.5,
    split_gap: float = 2.5,
) -> list[Column]:
    """Group boxes into vertical columns.

    Boxes are swept right to left by x-center. A box joins the current column
    when its horizontal overlap with the column's running x-extent is at least
    ``min_overlap`` of the box width. Each column is then cut wherever the
    vertical gap between consecutive members exceeds ``split_gap`` times the
    page's median box height, which separates signatures written under the
    main text.
    """
    bb = [_as_bbox(b) for b in boxes]
    if not bb:
        return []
    cx = [b.center[0] for b in bb]
    cy = [b.center[1] for b in bb]
    sweep = sorted(range(len(bb)), key=lambda i: (-cx[i], cy[i], i))

    groups: list[list[int]] = []
    lo = hi = 0.0
    for i in sweep:
        b = bb[i]
        if groups and min(hi, b.x2) - max(lo, b.x1) >= min_overlap * b.width:
            groups[-1].append(i)
            lo, hi = min(lo, b.x1), max(hi, b.x2)
        else:
            groups.append([i])
            lo, hi = b.x1, b.x2

    limit = split_gap * float(np.median([b.height for b in bb]))
    columns = []
    for g in groups:
        g.sort(key=lambda i: (cy[i], i))
        start = 0
        for k in range(1, len(g) + 1):
            if k == len(g) or bb[g[k]].y1 - bb[g[k - 1]].y2 > limit:
                members = tuple(g[start:k])
                columns.append(Column(members, union_all([bb[i] for i in members])))
                start = k
    return columns


def normalize_boxes(boxes: Sequence[Union[BBox, CharBox]], width: float, height: float) -> np.ndarray:
    """Shift so the smallest x1/y1 become zero, then divide by page width/height."""
    bb = [_as_bbox(b) for b in boxes]
    if not bb:
        raise ValueError("normalize_boxes needs at least one box")
    if width <= 0 or height <= 0:
        raise ValueError("page width and height must be positive")
    a = np.array([b.as_list() for b in bb], dtype=np.float64)
    xmin, ymin = a[:, 0].min(), a[:, 1].min()
    a[:, [0, 2]] = (a[:, [0, 2]] - xmin) / width
    a[:, [1, 3]] = (a[:, [1, 3]] - ymin) / height
    return a


def presort(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical order: x-center descending, then y1, then x1 ascending.

    Returns the sorted rows and ``perm`` with ``sorted = rows[perm]``.
    """
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    xc = (rows[:, 0] + rows[:, 2]) / 2
    # np.lexsort sorts by the last key first; the remaining columns make fully
    # identical rows interchangeable, so the result is input-order independent
    perm = np.lexsort((rows[:, 3], rows[:, 2], rows[:, 0], rows[:, 1], -xc))
    return rows[perm], perm


@dataclass(frozen=True)
class NormalizedSeq:
    rows: np.ndarray  # (N, 4)
    valid_len: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(len(self.rows), dtype=bool)
        m[: self.valid_len] = True
        return m


def pad_to_n(seq: np.ndarray, n: int = MAX_COLUMNS) -> NormalizedSeq:
    seq = np.asarray(seq, dtype=np.float64).reshape(-1, 4)
    if len(seq) > n:
        raise CapacityError(f"{len(seq)} columns exceed the model capacity of {n}")
    rows = np.zeros((n, 4), dtype=np.float64)
    rows[: len(seq)] = seq
    return NormalizedSeq(rows, len(seq))


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (edge values clamped)."""
    src = np.asarray(img, dtype=np.float64)
    H, W = src.shape

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def crop_pad_resize(image: np.ndarray, box: BBox, h: int, w: int) -> np.ndarray:
    """Crop ``box``, pad the short side to a square with the image mean, resize to ``h x w``.

    The crop covers whole pixels ``floor(x1)..ceil(x2)``. Output is float64.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    if h <= 0 or w <= 0:
        raise ValueError("output size must be positive")
    H, W = image.shape
    if box.x1 < 0 or box.y1 < 0 or box.x2 > W or box.y2 > H:
        raise ValueError(f"box {box.as_list()} outside image {W}x{H}")
    x1, y1 = int(math.floor(box.x1)), int(math.floor(box.y1))
    x2, y2 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    crop = image[y1:y2, x1:x2].astype(np.float64)
    ch, cw = crop.shape
    side = max(ch, cw)
    fill = float(image.mean())
    square = np.full((side, side), fill, dtype=np.float64)
    top, left = (side - ch) // 2, (side - cw) // 2
    square[top : top + ch, left : left + cw] = crop
    return bilinear_resize(square, h, w)


@dataclass
class FragmentationReport:
    fragments: list[int]  # cells touched per character

    @property
    def total(self) -> int:
        return len(self.fragments)

    @property
    def uncut_count(self) -> int:
        return sum(1 for f in self.fragments if f == 1)

    @property
    def uncut_fraction(self) -> float:
        return self.uncut_count / self.total if self.total else 1.0

    @property
    def mean_fragments(self) -> float:
        return sum(self.fragments) / self.total if self.total else 0.0

    @property
    def histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.fragments).items()))

    def to_dict(self) -> dict:
        return {
            "characters": self.total,
            "uncut_count": self.uncut_count,
            "uncut_fraction": self.uncut_fraction,
            "mean_fragments": self.mean_fragments,
            "fragment_histogram": {str(k): v for k, v in self.histogram.items()},
        }


def _intervals_hit(lo: float, hi: float, edges: Sequence[float]) -> int:
    # slices [edges[k], edges[k+1]] overlapping (lo, hi) with positive length
    return sum(1 for a, b in zip(edges[:-1], edges[1:]) if min(hi, b) - max(lo, a) > 0)


def slice_fragmentation(boxes: Sequence[Union[BBox, CharBox]], grid: SliceGrid) -> FragmentationReport:
    """How many grid cells each character is spread over (1 means uncut)."""
    frags = []
    for b in (_as_bbox(x) for x in boxes):
        frags.append(_intervals_hit(b.x1, b.x2, grid.xs) * _intervals_hit(b.y1, b.y2, grid.ys))
    return FragmentationReport(frags)


def reconstruct_char_order(columns: Sequence[Column], column_order: Sequence[int]) -> list[int]:
    """Box indices read column by column; ``column_order`` lists column indices in reading order."""
    if sorted(int(c) for c in column_order) != list(range(len(columns))):
        raise ValueError(f"column_order {list(column_order)} is not a permutation of {len(columns)} columns")
    out: list[int] = []
    for c in column_order:
        out.extend(columns[int(c)].member_indices)
    return out


def column_rows(columns: Sequence[Column], width: float, height: float) -> np.ndarray:
    """Normalized extents of ``columns`` (shift/scale over the column boxes)."""
    return normalize_boxes([c.extent for c in columns], width, height)


def ranks_to_order(ranks: Sequence[int]) -> list[int]:
    """Invert ``ranks`` (position -> reading rank) into indices in reading order."""
    order = [0] * len(ranks)
    for pos, r in enumerate(ranks):
        order[int(r)] = pos
    return order
