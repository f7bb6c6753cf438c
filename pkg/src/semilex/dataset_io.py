"""Loaders for the package's file boundaries.

Three ingestion surfaces live here: IDX image/label files (big-endian, magic
0x00000803 / 0x00000801), board images that are cut into 81 cell tokens, and
detection-proposal JSON files consumed by the object verifier.

Detection JSON schema (versioned by convention, ``crop`` optional)::

    {"image": {"w": int, "h": int},
     "proposals": [{"name": "wheel|seat|frame|handlebar",
                    "score": float,            # in [0, 1]
                    "box": {"cx": float, "cy": float, "bw": float, "bh": float},
                    "crop": "relative/path.png"}]}

Box centers/sizes are in pixels and must lie within the image bounds.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConsistencyError, FormatError, GeometryError, InputError, SchemaError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

COMPONENT_NAMES = ("wheel", "seat", "frame", "handlebar")

# A cell counts as empty when at least this fraction of pixels is below the
# ink floor after normalisation (ink bright, background dark).
EMPTY_FRACTION = 0.99
INK_FLOOR = 0.05

__all__ = [
    "IDX_IMAGES_MAGIC",
    "IDX_LABELS_MAGIC",
    "COMPONENT_NAMES",
    "LabeledImageSet",
    "load_idx",
    "save_idx",
    "GridSpec",
    "BoardImage",
    "segment_board",
    "load_board_dir",
    "load_board",
    "Box",
    "Detection",
    "DetectionFile",
    "load_detections",
    "load_image",
    "save_image",
]


@dataclass
class LabeledImageSet:
    """Grayscale digit images in [0, 1] with labels 0..9."""

    images: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise InputError("labels must lie in 0..9")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.source)


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, offset: int, path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated at byte offset {offset + len(data)} "
            f"(wanted {count} more bytes, got {len(data)})"
        )
    return data


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Read an IDX image/label file pair (gzip-compressed accepted via .gz suffix)."""
    with _open_maybe_gzip(images_path) as fh:
        header = _read_exact(fh, 16, 0, images_path)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(fh, count * rows * cols, 16, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        header = _read_exact(fh, 8, 0, labels_path)
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        raw = _read_exact(fh, n_labels, 8, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8)

    if count != n_labels:
        raise ConsistencyError(
            f"{images_path} holds {count} images but {labels_path} holds {n_labels} labels"
        )
    return LabeledImageSet(images / 255.0, labels.astype(np.int64), source=str(images_path))


def save_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Write the set back out as an IDX pair; pixels are quantised to bytes."""
    images = np.round(dataset.images * 255.0).astype(np.uint8)
    n, rows, cols = images.shape
    with _open_maybe_gzip_w(images_path) as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with _open_maybe_gzip_w(labels_path) as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _open_maybe_gzip_w(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "wb")
    return open(path, "wb")


# ---------------------------------------------------------------------------
# board segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a 9x9 board image.

    Cell (r, c) occupies a ``cell_size`` square starting at
    ``origin + r * pitch`` / ``origin + c * pitch``.  The spans must tile the
    image exactly: ``origin + 8 * pitch + cell_size + tail`` equals the image
    side.  ``pitch`` defaults to ``cell_size`` (no gridlines); a board with
    gridlines of width g before every cell uses origin=g, pitch=cell_size+g.
    """

    cell_size: int = 28
    origin: int = 0
    pitch: int | None = None
    tail: int = 0

    @classmethod
    def with_margins(cls, cell_size: int = 28, margin: int = 0, gridline: int = 0) -> "GridSpec":
        """The common layout: equal margins on all sides, gridlines only
        between adjacent cells."""
        return cls(cell_size=cell_size, origin=margin,
                   pitch=cell_size + gridline, tail=margin)

    @property
    def step(self) -> int:
        return self.cell_size if self.pitch is None else self.pitch

    def span(self) -> int:
        return self.origin + 8 * self.step + self.cell_size + self.tail


@dataclass
class BoardImage:
    """81 cell token images in row-major order plus an empty-cell mask."""

    cells: np.ndarray  # (9, 9, 28, 28) float64 in [0, 1]
    origin: str = ""
    empty: np.ndarray = field(default=None)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (9, 9, 28, 28):
            raise InputError(f"cells must be (9, 9, 28, 28), got {self.cells.shape}")
        if self.empty is None:
            self.empty = _empty_mask(self.cells)
        self.empty = np.asarray(self.empty, dtype=bool)


def _empty_mask(cells: np.ndarray) -> np.ndarray:
    below = (cells < INK_FLOOR).mean(axis=(2, 3))
    return below >= EMPTY_FRACTION


def _normalize_polarity(img: np.ndarray) -> np.ndarray:
    # Scanned boards are dark ink on light paper; tokens use the opposite
    # convention (ink bright).  Flip when the background is light.
    if np.median(img) > 0.5:
        return 1.0 - img
    return img


def load_image(path) -> np.ndarray:
    """8-bit grayscale image file as float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_image(path, arr: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def segment_board(image, grid: GridSpec = GridSpec()) -> BoardImage:
    """Cut a single board image into 81 cells, resampled to 28x28.

    ``image`` may be a path or a 2-D array already scaled to [0, 1].  The grid
    must tile the image exactly; anything else raises :class:`GeometryError`.
    """
    if isinstance(image, (str, Path)):
        name = str(image)
        img = load_image(image)
    else:
        name = "<array>"
        img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"board image must be 2-D grayscale, got shape {img.shape}")
    span = grid.span()
    if img.shape[0] != span or img.shape[1] != span:
        raise GeometryError(
            f"{name}: image is {img.shape[1]}x{img.shape[0]} but the grid spans "
            f"{span}x{span} (origin {grid.origin} + 8*pitch {grid.step} + "
            f"cell {grid.cell_size} + tail {grid.tail})"
        )
    img = _normalize_polarity(img)
    cells = np.empty((9, 9, 28, 28), dtype=np.float64)
    for r in range(9):
        for c in range(9):
            y = grid.origin + r * grid.step
            x = grid.origin + c * grid.step
            tile = img[y:y + grid.cell_size, x:x + grid.cell_size]
            if grid.cell_size != 28:
                tile = ndimage.zoom(tile, 28.0 / grid.cell_size, order=1)[:28, :28]
            cells[r, c] = tile
    return BoardImage(cells=cells, origin=name)


def load_board_dir(path) -> BoardImage:
    """Load a directory of 81 cell images named r{i}c{j}.png (1-indexed)."""
    base = Path(path)
    cells = np.empty((9, 9, 28, 28), dtype=np.float64)
    for r in range(9):
        for c in range(9):
            cell_path = base / f"r{r + 1}c{c + 1}.png"
            if not cell_path.exists():
                raise InputError(f"missing cell image {cell_path}")
            img = _normalize_polarity(load_image(cell_path))
            if img.shape != (28, 28):
                img = ndimage.zoom(img, (28.0 / img.shape[0], 28.0 / img.shape[1]), order=1)[:28, :28]
            cells[r, c] = img
    return BoardImage(cells=cells, origin=str(base))


def load_board(path, grid: GridSpec = GridSpec()) -> BoardImage:
    """Dispatch on the board input format: cell directory or single image."""
    p = Path(path)
    if p.is_dir():
        return load_board_dir(p)
    return segment_board(p, grid)


# ---------------------------------------------------------------------------
# detection proposals
# ---------------------------------------------------------------------------


class Box(NamedTuple):
    cx: float
    cy: float
    bw: float
    bh: float


@dataclass(frozen=True)
class Detection:
    """One scored component proposal; ``crop`` optionally points at a token image."""

    name: str
    score: float
    box: Box
    crop: str | None = None


@dataclass(frozen=True)
class DetectionFile:
    width: int
    height: int
    proposals: tuple
    source: str = ""


def _require(cond: bool, message: str):
    if not cond:
        raise SchemaError(message)


def load_detections(path) -> DetectionFile:
    """Parse and validate a detection-proposal JSON file.

    Proposals come back sorted by descending score (stable).  Component names
    outside the object alphabet, scores outside [0, 1] and boxes crossing the
    image bounds are schema errors.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    _require(isinstance(doc, dict), f"{path}: top level must be an object")
    img = doc.get("image")
    _require(isinstance(img, dict) and "w" in img and "h" in img, f"{path}: missing image.w/image.h")
    w, h = img["w"], img["h"]
    _require(isinstance(w, int) and isinstance(h, int) and w > 0 and h > 0,
             f"{path}: image dimensions must be positive integers")
    raw = doc.get("proposals")
    _require(isinstance(raw, list), f"{path}: proposals must be a list")

    proposals = []
    for i, entry in enumerate(raw):
        where = f"{path}: proposals[{i}]"
        _require(isinstance(entry, dict), f"{where} must be an object")
        name = entry.get("name")
        _require(name in COMPONENT_NAMES,
                 f"{where}: unknown component name {name!r} (expected one of {', '.join(COMPONENT_NAMES)})")
        score = entry.get("score")
        _require(isinstance(score, (int, float)) and 0.0 <= score <= 1.0,
                 f"{where}: score {score!r} outside [0, 1]")
        box = entry.get("box")
        _require(isinstance(box, dict) and all(k in box for k in ("cx", "cy", "bw", "bh")),
                 f"{where}: box must carry cx, cy, bw, bh")
        b = Box(float(box["cx"]), float(box["cy"]), float(box["bw"]), float(box["bh"]))
        _require(b.bw > 0 and b.bh > 0, f"{where}: box size must be positive")
        _require(
            b.cx - b.bw / 2 >= 0 and b.cx + b.bw / 2 <= w and b.cy - b.bh / 2 >= 0 and b.cy + b.bh / 2 <= h,
            f"{where}: box exceeds the {w}x{h} image bounds",
        )
        crop = entry.get("crop")
        if crop is not None:
            _require(isinstance(crop, str), f"{where}: crop must be a path string")
            crop = str((path.parent / crop).resolve())
        proposals.append(Detection(name=name, score=float(score), box=b, crop=crop))

    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    return DetectionFile(width=w, height=h, proposals=tuple(proposals[i] for i in order), source=str(path))
