"""Document-to-prediction glue shared by the trainer, the CLI, and the service."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassSet, Document
from .gridder import Grid, GridShape, map_to_grid, read_back
from .metrics import EvalReport, FieldExtraction, evaluate
from .model import TokenGridNet
from .tokenizer import TokenPiece, Vocabulary, tokenize_document


@dataclass
class DocPrediction:
    """Per-piece predictions for one document, in grid reading order."""

    doc: Document
    pieces: list[TokenPiece]
    predicted: list[int]
    confidence: list[float]
    truth: list[int]
    grid: Grid


class Predictor:
    """Runs the trained net over documents and turns cells back into pieces."""

    def __init__(self, model: TokenGridNet, vocab: Vocabulary, classes: ClassSet,
                 grid_shape: GridShape = GridShape(64, 64)):
        if len(classes) != model.config.num_classes:
            raise ValueError(
                f"class set has {len(classes)} entries but the model head "
                f"outputs {model.config.num_classes}")
        self.model = model
        self.vocab = vocab
        self.classes = classes
        self.grid_shape = grid_shape

    def predict(self, doc: Document, shape: GridShape | None = None) -> DocPrediction:
        pieces = tokenize_document(doc, self.vocab)
        grid = map_to_grid(doc, pieces, shape or self.grid_shape, self.classes)
        logits = self.model.forward(grid.token_ids[None])[0]  # [K, H, W]
        z = logits - logits.max(axis=0, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=0, keepdims=True)
        pred_grid = np.argmax(logits, axis=0)

        ordered_pieces: list[TokenPiece] = []
        pred: list[int] = []
        conf: list[float] = []
        truth: list[int] = []
        occupied = np.nonzero(grid.piece_index >= 0)
        for piece, cls in read_back(grid, pred_grid):
            ordered_pieces.append(piece)
            pred.append(cls)
            truth.append(self.classes.index(doc.tokens[piece.source_index].label))
        for r, c in zip(*occupied):
            conf.append(float(probs[pred_grid[r, c], r, c]))
        return DocPrediction(doc, ordered_pieces, pred, conf, truth, grid)

    def extraction(self, dp: DocPrediction) -> FieldExtraction:
        ex = FieldExtraction(doc_id=dp.doc.id)
        for piece, cls, gt in zip(dp.pieces, dp.predicted, dp.truth):
            pid = (dp.doc.id, piece.source_index, piece.piece_index)
            if cls != 0:
                ex.predicted.setdefault(cls, set()).add(pid)
            if gt != 0:
                ex.truth.setdefault(gt, set()).add(pid)
        return ex

    def evaluate(self, docs: list[Document],
                 shape: GridShape | None = None) -> EvalReport:
        extractions = []
        pairs: list[tuple[int, int]] = []
        for doc in docs:
            dp = self.predict(doc, shape)
            extractions.append(self.extraction(dp))
            pairs.extend(zip(dp.predicted, dp.truth))
        return evaluate(extractions, self.classes.names, pairs)

    def infer_payload(self, doc: Document, shape: GridShape | None = None) -> dict:
        """Annotation JSON: per-piece boxes/classes for overlays, plus the
        per-class texts concatenated in reading order."""
        dp = self.predict(doc, shape)
        fields: dict[str, str] = {}
        for piece, cls in zip(dp.pieces, dp.predicted):
            if cls == 0:
                continue
            name = self.classes.names[cls]
            fields[name] = (fields[name] + " " + piece.text) if name in fields else piece.text
        return {
            "document_id": doc.id,
            "width": doc.width,
            "height": doc.height,
            "grid": {"rows": dp.grid.shape.rows, "cols": dp.grid.shape.cols},
            "classes": list(self.classes.names),
            "pieces": [
                {
                    "text": piece.text,
                    "bbox": piece.bbox.as_list(),
                    "source_index": piece.source_index,
                    "piece_index": piece.piece_index,
                    "class": self.classes.names[cls],
                    "confidence": c,
                }
                for piece, cls, c in zip(dp.pieces, dp.predicted, dp.confidence)
            ],
            "fields": fields,
        }
