"""Positional mapping of token pieces into a sparse grid, plus shape augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BBox, ClassSet, Document
from .tokenizer import TokenPiece


class GridOverflowError(RuntimeError):
    """A grid row stayed full even after repeated column growth."""


@dataclass(frozen=True)
class GridShape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 4 or self.cols < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.rows}x{self.cols}")


@dataclass(frozen=True)
class AugmentParams:
    """Gaussian sampling of training grid shapes, clamped per dimension."""

    mean_rows: int = 64
    mean_cols: int = 64
    sigma: float = 8.0
    min_size: int = 32
    max_size: int = 128

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.min_size < 4 or self.max_size < self.min_size:
            raise ValueError("need 4 <= min_size <= max_size")

    def mean_shape(self) -> GridShape:
        return GridShape(self.mean_rows, self.mean_cols)


class Grid:
    """Token ids, label indices, and piece back-references on an R x C lattice.

    Cell id 0 is PAD (no token). `piece_index[r, c]` indexes into `pieces`
    for occupied cells and is -1 elsewhere. Arrays are frozen after
    construction.
    """

    def __init__(
        self,
        shape: GridShape,
        token_ids: np.ndarray,
        labels: np.ndarray,
        piece_index: np.ndarray,
        pieces: list[TokenPiece],
    ):
        self.shape = shape
        self.token_ids = token_ids
        self.labels = labels
        self.piece_index = piece_index
        self.pieces = pieces
        for arr in (token_ids, labels, piece_index):
            arr.flags.writeable = False

    @property
    def occupancy(self) -> np.ndarray:
        return self.piece_index >= 0

    @property
    def n_occupied(self) -> int:
        return int((self.piece_index >= 0).sum())


def cell_of(bbox: BBox, doc_size: tuple[float, float], shape: GridShape) -> tuple[int, int]:
    """Grid cell of a box: its center scaled by grid extent, floored, clamped."""
    w, h = doc_size
    if w <= 0 or h <= 0:
        raise ValueError("document size must be positive")
    cx, cy = bbox.center()
    col = math.floor(shape.cols * (cx / w))
    row = math.floor(shape.rows * (cy / h))
    return (
        min(max(row, 0), shape.rows - 1),
        min(max(col, 0), shape.cols - 1),
    )


def _try_place(
    doc: Document,
    ordered: list[tuple[tuple, TokenPiece]],
    shape: GridShape,
    class_set: ClassSet,
) -> Grid | None:
    token_ids = np.zeros((shape.rows, shape.cols), dtype=np.int64)
    labels = np.zeros((shape.rows, shape.cols), dtype=np.int64)
    piece_index = np.full((shape.rows, shape.cols), -1, dtype=np.int64)
    pieces = [p for _, p in ordered]
    size = (doc.width, doc.height)
    for pi, (_, piece) in enumerate(ordered):
        row, col = cell_of(piece.bbox, size, shape)
        target = None
        if piece_index[row, col] < 0:
            target = col
        else:
            for c in range(col + 1, shape.cols):
                if piece_index[row, c] < 0:
                    target = c
                    break
            if target is None:
                for c in range(col - 1, -1, -1):
                    if piece_index[row, c] < 0:
                        target = c
                        break
        if target is None:
            return None  # row full: caller grows the grid
        token_ids[row, target] = piece.token_id
        labels[row, target] = class_set.index(doc.tokens[piece.source_index].label)
        piece_index[row, target] = pi
    return Grid(shape, token_ids, labels, piece_index, pieces)


def map_to_grid(
    doc: Document,
    pieces: list[TokenPiece],
    shape: GridShape,
    class_set: ClassSet | None = None,
) -> Grid:
    """Place pieces at their mapped cells in reading order.

    Collisions probe rightward in the row, then leftward. If an entire row
    overflows, columns grow by 25% (rounded up) and mapping is retried, at
    most 4 times.
    """
    class_set = class_set or ClassSet()
    size = (doc.width, doc.height)
    cols = shape.cols
    for _ in range(5):
        current = GridShape(shape.rows, cols)

        def key_for(piece: TokenPiece):
            row, _ = cell_of(piece.bbox, size, current)
            return (row, piece.bbox.center()[0], piece.source_index, piece.piece_index)

        ordered = sorted(((key_for(p), p) for p in pieces), key=lambda kp: kp[0])
        grid = _try_place(doc, ordered, current, class_set)
        if grid is not None:
            return grid
        cols = math.ceil(cols * 1.25)
    raise GridOverflowError(
        f"document {doc.id!r}: a grid row stayed full after growing columns to {cols}"
    )


def sample_shape(params: AugmentParams, rng: np.random.Generator) -> GridShape:
    """Draw rows and cols independently from round(Normal(mean, sigma)), clamped."""
    rows = int(round(rng.normal(params.mean_rows, params.sigma)))
    cols = int(round(rng.normal(params.mean_cols, params.sigma)))
    rows = min(max(rows, params.min_size), params.max_size)
    cols = min(max(cols, params.min_size), params.max_size)
    return GridShape(rows, cols)


def read_back(grid: Grid, class_grid: np.ndarray) -> list[tuple[TokenPiece, int]]:
    """Attach each occupied cell's predicted class to its piece, reading order."""
    if class_grid.shape != (grid.shape.rows, grid.shape.cols):
        raise ValueError(
            f"prediction grid {class_grid.shape} does not match {grid.shape}"
        )
    out = []
    rows, cols = np.nonzero(grid.piece_index >= 0)
    for r, c in zip(rows, cols):
        out.append((grid.pieces[grid.piece_index[r, c]], int(class_grid[r, c])))
    return out


def render_grid(grid: Grid) -> str:
    """Text matrix of piece texts ('.' for PAD), for debugging and golden files."""
    lines = []
    for r in range(grid.shape.rows):
        cells = []
        for c in range(grid.shape.cols):
            pi = grid.piece_index[r, c]
            cells.append(grid.pieces[pi].text if pi >= 0 else ".")
        lines.append(" ".join(cells))
    return "\n".join(lines)
