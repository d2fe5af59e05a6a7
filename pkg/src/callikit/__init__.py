"""Reading-order recovery, character alignment and recognition metrics for calligraphy pages."""

from callikit.geometry import (
    BBox,
    CharBox,
    Column,
    Layout,
    Other,
    PageSample,
    PageValidationError,
    Style,
    bbox_center,
    bbox_union,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CharBox",
    "Column",
    "Layout",
    "Other",
    "PageSample",
    "PageValidationError",
    "Style",
    "bbox_center",
    "bbox_union",
]
