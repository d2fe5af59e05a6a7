"""Boxes, character boxes and page samples shared by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``(x1, y1, x2, y2)`` with ``x1 < x2`` and ``y1 < y2``.

    Pixel units on raw pages, unitless after normalization.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")
        # store plain floats so equality and serialization are stable
        for name, v in zip(("x1", "y1", "x2", "y2"), vals):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> "BBox":
        xs = [float(p[0]) for p in points]
        ys = [float(p[1]) for p in points]
        return cls(min(xs), min(ys), max(xs), max(ys))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return bbox_center(self)

    def union(self, other: "BBox") -> "BBox":
        return bbox_union(self, other)

    def intersection_area(self, other: "BBox") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def contains(self, other: "BBox") -> bool:
        return (
            self.x1 <= other.x1 and self.y1 <= other.y1 and self.x2 >= other.x2 and self.y2 >= other.y2
        )

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def bbox_center(box: BBox) -> tuple[float, float]:
    return ((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)


def bbox_union(a: BBox, b: BBox) -> BBox:
    """Smallest box containing both ``a`` and ``b``."""
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def union_all(boxes: Sequence[BBox]) -> BBox:
    if not boxes:
        raise ValueError("union of an empty box set")
    return BBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


@dataclass(frozen=True)
class Other:
    """Annotation value outside the known enum members, kept verbatim."""

    value: str

    def __str__(self) -> str:
        return self.value


class Layout(str, Enum):
    BANNER = "banner"
    SQUARED_SHEET = "squared_sheet"
    ALBUM = "album"
    HANGING_SCROLL = "hanging_scroll"
    MIDDLE_SCROLL = "middle_scroll"
    COUPLET = "couplet"
    HAND_SCROLL = "hand_scroll"

    @classmethod
    def parse(cls, value: Optional[str]) -> Union["Layout", Other]:
        return _parse_enum(cls, value)

    def __str__(self) -> str:
        return self.value


class Style(str, Enum):
    SEAL = "seal"
    CLERICAL = "clerical"
    REGULAR = "regular"
    RUNNING = "running"
    CURSIVE = "cursive"

    @classmethod
    def parse(cls, value: Optional[str]) -> Union["Style", Other]:
        return _parse_enum(cls, value)

    def __str__(self) -> str:
        return self.value


def _parse_enum(cls, value):
    if value is None:
        return Other("unknown")
    key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
    key = key.removeprefix("calligraphy_").removesuffix("_script")
    # plural spellings ("couplets", "hanging_scrolls")
    for candidate in (key, key.removesuffix("s")):
        if candidate in cls._value2member_map_:
            return cls(candidate)
    return Other(str(value))


def label_str(value) -> Optional[str]:
    """Serialized form of a layout/style value (``None`` stays ``None``)."""
    if value is None:
        return None
    return str(value)


@dataclass(frozen=True)
class CharBox:
    box: BBox
    label: Optional[str] = None
    column: Optional[int] = None
    row: Optional[int] = None

    def __post_init__(self):
        for name in ("column", "row"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or int(v) != v or v < 0):
                raise ValueError(f"{name} index must be a non-negative integer, got {v!r}")


@dataclass(frozen=True)
class Column:
    """Vertical run of character boxes, members ordered top to bottom."""

    member_indices: tuple[int, ...]
    extent: BBox

    def __len__(self) -> int:
        return len(self.member_indices)


class PageValidationError(ValueError):
    pass


@dataclass(frozen=True)
class PageSample:
    """One annotated page.

    ``reading_order`` lists box indices in the order a reader visits them.
    """

    width: int
    height: int
    boxes: tuple[CharBox, ...]
    reading_order: Optional[tuple[int, ...]] = None
    layout: Union[Layout, Other] = Other("unknown")
    style: Optional[Union[Style, Other]] = None
    author: Optional[str] = None
    sample_id: str = ""
    raster: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.reading_order is not None:
            object.__setattr__(self, "reading_order", tuple(int(i) for i in self.reading_order))
        problems = validate_page(self)
        if problems:
            raise PageValidationError("; ".join(problems))

    @property
    def text(self) -> str:
        """Labels concatenated in reading order (box order if none is set)."""
        order = self.reading_order if self.reading_order is not None else range(len(self.boxes))
        return "".join(self.boxes[i].label or "" for i in order)

    def bboxes(self) -> list[BBox]:
        return [cb.box for cb in self.boxes]


def validate_page(page: PageSample) -> list[str]:
    """Invariant violations of ``page``; an empty list means it is valid."""
    problems = []
    if int(page.width) != page.width or page.width <= 0:
        problems.append(f"width must be a positive integer, got {page.width!r}")
    if int(page.height) != page.height or page.height <= 0:
        problems.append(f"height must be a positive integer, got {page.height!r}")
    for i, cb in enumerate(page.boxes):
        b = cb.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > page.width or b.y2 > page.height:
            problems.append(f"box {i} {b.as_list()} outside page {page.width}x{page.height}")
    if page.reading_order is not None:
        n = len(page.boxes)
        if sorted(page.reading_order) != list(range(n)):
            problems.append(f"reading_order is not a permutation of {n} box indices")
    if page.raster is not None:
        r = page.raster
        if r.ndim != 2 or r.dtype != np.uint8:
            problems.append("raster must be a 2D uint8 array")
        elif r.shape != (page.height, page.width):
            problems.append(f"raster shape {r.shape} != ({page.height}, {page.width})")
    return problems
