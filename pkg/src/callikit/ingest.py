"""LabelMe annotations, the internal page/dataset format, and dataset statistics."""

from __future__ import annotations

import base64
import io
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from callikit.geometry import BBox, CharBox, Layout, Other, PageSample, Style, label_str

log = logging.getLogger(__name__)

PAGE_FORMAT = "callikit.page/v1"
DATASET_FORMAT = "callikit.dataset/v1"


class ParseError(ValueError):
    """Malformed annotation; ``field`` names the offending JSON path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------- LabelMe


def _as_int(value, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ParseError(field, f"expected an integer, got {value!r}")
    return int(value)


def _optional_index(shape: dict, key: str, field: str) -> Optional[int]:
    value = shape.get(key)
    if value is None or value == "":
        return None
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        value = int(value)
    idx = _as_int(value, field)
    if idx < 0:
        raise ParseError(field, f"index must be non-negative, got {idx}")
    return idx


def _decode_raster(data: str) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(base64.b64decode(data))) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8).copy()


def _encode_raster(raster: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(raster, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def parse_labelme(text: Union[str, bytes, dict], sample_id: str = "") -> PageSample:
    """Parse a LabelMe document into a :class:`PageSample`.

    Page metadata lives in ``flags`` (``author``/``authority``, ``layout``,
    ``style``); each shape carries a character ``label``, a rectangle given
    as two diagonal corners or a polygon, and optional ``column``/``row``.
    """
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError("$", f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("$", "top-level value must be an object")

    flags = doc.get("flags") or {}
    if not isinstance(flags, dict):
        raise ParseError("flags", "must be an object")
    author = flags.get("author", flags.get("authority"))
    layout = Layout.parse(flags.get("layout"))
    style = Style.parse(flags["style"]) if flags.get("style") else None

    width = _as_int(doc.get("imageWidth"), "imageWidth")
    height = _as_int(doc.get("imageHeight"), "imageHeight")

    shapes = doc.get("shapes")
    if not isinstance(shapes, list):
        raise ParseError("shapes", "missing or not a list")
    boxes = []
    for i, shape in enumerate(shapes):
        where = f"shapes[{i}]"
        if not isinstance(shape, dict):
            raise ParseError(where, "must be an object")
        label = shape.get("label")
        if not isinstance(label, str) or not label:
            raise ParseError(f"{where}.label", "missing or empty label")
        points = shape.get("points")
        if (
            not isinstance(points, list)
            or len(points) < 2
            or not all(isinstance(p, (list, tuple)) and len(p) == 2 for p in points)
        ):
            raise ParseError(f"{where}.points", "need two diagonal corners or a polygon")
        try:
            if len(points) == 2:
                # two-corner rectangle: first corner must be the top-left one
                (x1, y1), (x2, y2) = points
                box = BBox(float(x1), float(y1), float(x2), float(y2))
            else:
                box = BBox.from_points(points)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}.points", str(exc)) from None
        boxes.append(
            CharBox(
                box,
                label,
                _optional_index(shape, "column", f"{where}.column"),
                _optional_index(shape, "row", f"{where}.row"),
            )
        )

    raster = _decode_raster(doc["imageData"]) if doc.get("imageData") else None
    if not sample_id:
        sample_id = Path(doc.get("imagePath") or "").stem
    order = None
    if boxes and all(cb.column is not None and cb.row is not None for cb in boxes):
        try:
            order = _order_from_indices(boxes)
        except ValueError:
            order = None  # duplicates only block order derivation, not parsing
    try:
        return PageSample(
            width=width,
            height=height,
            boxes=tuple(boxes),
            reading_order=order,
            layout=layout,
            style=style,
            author=str(author) if author is not None else None,
            sample_id=sample_id,
            raster=raster,
        )
    except ValueError as exc:
        raise ParseError("$", str(exc)) from None


def to_labelme(page: PageSample) -> dict:
    flags = {"layout": label_str(page.layout)}
    if page.style is not None:
        flags["style"] = label_str(page.style)
    if page.author is not None:
        flags["author"] = page.author
    shapes = []
    for cb in page.boxes:
        b = cb.box
        shape = {
            "label": cb.label or "",
            "points": [[b.x1, b.y1], [b.x2, b.y2]],
            "shape_type": "rectangle",
        }
        if cb.column is not None:
            shape["column"] = cb.column
        if cb.row is not None:
            shape["row"] = cb.row
        shapes.append(shape)
    return {
        "version": "5.2.1",
        "flags": flags,
        "shapes": shapes,
        "imagePath": f"{page.sample_id}.png" if page.sample_id else "",
        "imageData": _encode_raster(page.raster) if page.raster is not None else None,
        "imageHeight": page.height,
        "imageWidth": page.width,
    }


def serialize_labelme(page: PageSample) -> str:
    return json.dumps(to_labelme(page), ensure_ascii=False, indent=1)


def load_labelme_dir(path: Union[str, Path], threads: int = 1) -> list[PageSample]:
    """Parse every ``*.json`` under ``path``; results follow sorted filename order."""
    files = sorted(Path(path).glob("*.json"))

    def parse(f: Path) -> PageSample:
        return parse_labelme(f.read_text(encoding="utf-8"), sample_id=f.stem)

    if threads <= 1:
        return [parse(f) for f in files]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(parse, files))


# ------------------------------------------------------- reading order


def derive_reading_order(sample: PageSample) -> list[int]:
    """Box indices sorted by ``(column, row)``; ``row`` counts within a column."""
    return _order_from_indices(sample.boxes)


def _order_from_indices(boxes: Sequence[CharBox]) -> list[int]:
    missing = [i for i, cb in enumerate(boxes) if cb.column is None or cb.row is None]
    if missing:
        raise ValueError(f"boxes without column/row indices: {missing}")
    seen: dict[tuple[int, int], list[int]] = {}
    for i, cb in enumerate(boxes):
        seen.setdefault((cb.column, cb.row), []).append(i)
    dups = {k: v for k, v in seen.items() if len(v) > 1}
    if dups:
        listing = ", ".join(f"(column={c}, row={r}): boxes {v}" for (c, r), v in sorted(dups.items()))
        raise ValueError(f"duplicate (column, row) pairs: {listing}")
    return sorted(range(len(boxes)), key=lambda i: (boxes[i].column, boxes[i].row))


# --------------------------------------------------- internal page format


def page_to_dict(page: PageSample) -> dict:
    d: dict[str, Any] = {
        "format": PAGE_FORMAT,
        "id": page.sample_id,
        "width": page.width,
        "height": page.height,
        "layout": label_str(page.layout),
        "style": label_str(page.style),
        "author": page.author,
        "boxes": [
            {"box": cb.box.as_list(), "label": cb.label, "column": cb.column, "row": cb.row}
            for cb in page.boxes
        ],
        "reading_order": list(page.reading_order) if page.reading_order is not None else None,
    }
    if page.raster is not None:
        d["raster"] = _encode_raster(page.raster)
    return d


def page_from_dict(d: dict) -> PageSample:
    fmt = d.get("format")
    if fmt != PAGE_FORMAT:
        raise ParseError("format", f"unsupported page format {fmt!r} (expected {PAGE_FORMAT})")
    try:
        boxes = tuple(
            CharBox(BBox(*b["box"]), b.get("label"), b.get("column"), b.get("row")) for b in d["boxes"]
        )
        return PageSample(
            width=d["width"],
            height=d["height"],
            boxes=boxes,
            reading_order=d.get("reading_order"),
            layout=Layout.parse(d.get("layout")),
            style=Style.parse(d["style"]) if d.get("style") else None,
            author=d.get("author"),
            sample_id=d.get("id", ""),
            raster=_decode_raster(d["raster"]) if d.get("raster") else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("$", str(exc)) from None


def dumps_page(page: PageSample) -> str:
    return json.dumps(page_to_dict(page), ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def load_page(path: Union[str, Path]) -> PageSample:
    """Read a page in either the internal format or LabelMe."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError("$", f"malformed JSON in {path}: {exc}") from None
    if isinstance(doc, dict) and "format" in doc:
        return page_from_dict(doc)
    return parse_labelme(doc, sample_id=path.stem)


@dataclass
class Dataset:
    root: Path
    manifest: dict

    def files(self, split: Optional[str] = None) -> list[Path]:
        return [
            self.root / e["file"]
            for e in self.manifest["files"]
            if split is None or e.get("split") == split
        ]

    def pages(self, split: Optional[str] = None) -> list[PageSample]:
        return [load_page(f) for f in self.files(split)]


def open_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise ParseError("format", f"unsupported dataset format {manifest.get('format')!r}")
    return Dataset(root, manifest)


# ------------------------------------------------------------- stats


@dataclass
class DatasetStats:
    pages: int
    total_chars: int
    char_count_hist: dict[int, int]
    layout_counts: dict[str, int]
    style_counts: dict[str, int]
    box_width: dict[str, float]
    box_height: dict[str, float]

    def layout_fractions(self) -> dict[str, float]:
        return {k: v / self.pages for k, v in self.layout_counts.items()}

    def to_dict(self) -> dict:
        return {
            "pages": self.pages,
            "total_chars": self.total_chars,
            "char_count_hist": {str(k): v for k, v in sorted(self.char_count_hist.items())},
            "layout_counts": dict(sorted(self.layout_counts.items())),
            "layout_fractions": dict(sorted(self.layout_fractions().items())),
            "style_counts": dict(sorted(self.style_counts.items())),
            "box_width": self.box_width,
            "box_height": self.box_height,
        }

    def table(self) -> str:
        lines = [f"pages {self.pages}   characters {self.total_chars}", "layout            pages   share"]
        for k, v in sorted(self.layout_counts.items()):
            lines.append(f"{k:<16}{v:>7}{v / self.pages:>8.1%}")
        lines.append(
            "box width px  min {min:.1f}  median {median:.1f}  max {max:.1f}".format(**self.box_width)
        )
        lines.append(
            "box height px min {min:.1f}  median {median:.1f}  max {max:.1f}".format(**self.box_height)
        )
        return "\n".join(lines)


def _summary(values: Sequence[float]) -> dict[str, float]:
    if not values:
        return {"min": 0.0, "p25": 0.0, "median": 0.0, "p75": 0.0, "max": 0.0, "mean": 0.0}
    a = np.asarray(values, dtype=np.float64)
    q = np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "min": float(q[0]),
        "p25": float(q[1]),
        "median": float(q[2]),
        "p75": float(q[3]),
        "max": float(q[4]),
        "mean": float(a.mean()),
    }


def dataset_stats(samples: Iterable[PageSample]) -> DatasetStats:
    samples = list(samples)
    if not samples:
        raise ValueError("dataset_stats needs at least one page")
    widths = [cb.box.width for p in samples for cb in p.boxes]
    heights = [cb.box.height for p in samples for cb in p.boxes]
    return DatasetStats(
        pages=len(samples),
        total_chars=sum(len(p.boxes) for p in samples),
        char_count_hist=dict(Counter(len(p.boxes) for p in samples)),
        layout_counts=dict(Counter(str(p.layout) for p in samples)),
        style_counts=dict(Counter(str(p.style) if p.style is not None else "none" for p in samples)),
        box_width=_summary(widths),
        box_height=_summary(heights),
    )


# ------------------------------------------------------- predictions


def read_predictions(path: Union[str, Path]) -> tuple[dict[str, str], int]:
    """Read ``{"id", "prediction"}`` JSONL.

    Returns the id -> prediction map and the number of duplicate ids (later
    lines win).
    """
    preds: dict[str, str] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid, pred = obj["id"], obj["prediction"]
                if not isinstance(sid, str) or not isinstance(pred, str):
                    raise TypeError("id and prediction must be strings")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"line {lineno}", f"bad prediction record: {exc}") from None
            if sid in preds:
                duplicates += 1
            preds[sid] = pred
    if duplicates:
        log.warning("%s: %d duplicate prediction ids, later lines kept", path, duplicates)
    return preds, duplicates
