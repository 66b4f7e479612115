"""Document data model, JSONL dataset IO, splitting, and synthetic receipts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Background class first; the remaining eight are the receipt field types.
RECEIPT_CLASSES = [
    "DontCare",
    "VendorName",
    "VendorTaxID",
    "InvoiceDate",
    "InvoiceNumber",
    "ExpenseAmount",
    "BaseAmount",
    "TaxAmount",
    "TaxRate",
]


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid documents."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image pixel coordinates."""

    x_left: float
    y_top: float
    x_right: float
    y_bottom: float

    def __post_init__(self):
        if self.x_left > self.x_right or self.y_top > self.y_bottom:
            raise ValueError(f"inverted bbox: {self}")
        if min(self.x_left, self.y_top) < 0:
            raise ValueError(f"negative bbox coordinate: {self}")

    @property
    def width(self) -> float:
        return self.x_right - self.x_left

    @property
    def height(self) -> float:
        return self.y_bottom - self.y_top

    def center(self) -> tuple[float, float]:
        return (
            self.x_left + (self.x_right - self.x_left) / 2,
            self.y_top + (self.y_bottom - self.y_top) / 2,
        )

    def as_list(self) -> list[float]:
        return [self.x_left, self.y_top, self.x_right, self.y_bottom]


@dataclass(frozen=True)
class RawToken:
    """One OCR token: its text, box, and key-information class name."""

    text: str
    bbox: BBox
    label: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("token text must be non-empty")


@dataclass
class Document:
    id: str
    width: float
    height: float
    tokens: list[RawToken]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"document {self.id!r}: non-positive image size")


class ClassSet:
    """Ordered class names; index 0 is the background ('don't care') class."""

    def __init__(self, names: Sequence[str] = RECEIPT_CLASSES):
        names = list(names)
        if len(names) < 2:
            raise ValueError("class set needs a background class and at least one field class")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        return self._index[name]

    @property
    def background(self) -> str:
        return self.names[0]

    @classmethod
    def load(cls, path: str | Path) -> "ClassSet":
        with open(path, encoding="utf-8") as f:
            names = json.load(f)
        if not isinstance(names, list):
            raise DatasetError(f"{path}: class set file must be a JSON array of names")
        return cls(names)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.names, f, ensure_ascii=False, indent=0)


def _clamped_bbox(raw: Sequence[float], width: float, height: float, where: str) -> BBox:
    if len(raw) != 4 or not all(isinstance(v, (int, float)) for v in raw):
        raise DatasetError(f"{where}: bbox must be four numbers, got {raw!r}")
    xl, yt, xr, yb = (float(v) for v in raw)
    if xl > xr or yt > yb:
        raise DatasetError(f"{where}: inverted bbox {raw!r}")
    cxl = min(max(xl, 0.0), width)
    cxr = min(max(xr, 0.0), width)
    cyt = min(max(yt, 0.0), height)
    cyb = min(max(yb, 0.0), height)
    if (cxl, cyt, cxr, cyb) != (xl, yt, xr, yb):
        logger.warning("%s: bbox %s clamped to image bounds", where, raw)
    return BBox(cxl, cyt, cxr, cyb)


def document_from_record(obj: dict, class_set: ClassSet | None = None,
                         where: str = "record") -> Document:
    """Build a Document from one parsed JSONL record.

    Missing token labels default to the background class (inference input);
    present labels must belong to `class_set`. Out-of-image boxes are clamped
    with a warning, inverted ones rejected.
    """
    class_set = class_set or ClassSet()
    try:
        doc_id = str(obj["id"])
        width = float(obj["width"])
        height = float(obj["height"])
        raw_tokens = obj["tokens"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{where}: missing or malformed document field ({e})") from e
    if not isinstance(raw_tokens, list):
        raise DatasetError(f"{where}: tokens must be a list")
    if width <= 0 or height <= 0:
        raise DatasetError(f"{where}: non-positive image size {width}x{height}")
    tokens = []
    for ti, t in enumerate(raw_tokens):
        tw = f"{where} token {ti}"
        if not isinstance(t, dict):
            raise DatasetError(f"{tw}: not an object")
        text = t.get("text")
        if not text or not isinstance(text, str):
            raise DatasetError(f"{tw}: missing text")
        label = t.get("label", class_set.background)
        if label not in class_set:
            raise DatasetError(f"{tw}: unknown label {label!r}")
        bbox = _clamped_bbox(t.get("bbox", []), width, height, tw)
        tokens.append(RawToken(text, bbox, label))
    return Document(doc_id, width, height, tokens)


def load_dataset(path: str | Path, class_set: ClassSet | None = None) -> list[Document]:
    """Read a JSONL dataset: one document object per line."""
    class_set = class_set or ClassSet()
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{where}: invalid JSON ({e})") from e
            docs.append(document_from_record(obj, class_set, where))
    return docs


def save_dataset(docs: Sequence[Document], path: str | Path) -> None:
    """Write documents as JSONL, one object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            obj = {
                "id": doc.id,
                "width": doc.width,
                "height": doc.height,
                "tokens": [
                    {"text": t.text, "bbox": t.bbox.as_list(), "label": t.label}
                    for t in doc.tokens
                ],
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def style_of(doc: Document) -> str:
    """Document type key: the id prefix before the trailing '-<number>'."""
    return doc.id.rsplit("-", 1)[0]


def split_dataset(
    docs: Sequence[Document],
    ratio: float,
    seed: int,
    group_key: Callable[[Document], str] | None = None,
) -> tuple[list[Document], list[Document]]:
    """Deterministic train/test split.

    Train gets round(ratio * N) documents after a seeded shuffle. With
    `group_key`, the rounding is applied within each group separately
    (per-document-type splitting), which changes the counts slightly.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(docs) < 2:
        raise ValueError("need at least 2 documents to split")
    if group_key is None:
        groups = [list(docs)]
    else:
        by_key: dict[str, list[Document]] = {}
        for d in docs:
            by_key.setdefault(group_key(d), []).append(d)
        groups = [by_key[k] for k in sorted(by_key)]
    rng = np.random.default_rng(seed)
    train: list[Document] = []
    test: list[Document] = []
    for group in groups:
        order = rng.permutation(len(group))
        n_train = int(round(ratio * len(group)))
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(group[idx])
    return train, test


# ---------------------------------------------------------------------------
# Synthetic receipt generation
# ---------------------------------------------------------------------------

STYLES = ("two_column", "centered", "ragged")

_VENDOR_HEAD = [
    "BAR", "CAFETERIA", "RESTAURANTE", "HOTEL", "TALLER", "LIBRERIA",
    "PANADERIA", "FARMACIA", "SUPERMERCADO", "GASOLINERA", "HOSTAL", "KIOSCO",
]
_VENDOR_TAIL = [
    "SOL", "LUNA", "CENTRAL", "PLAZA", "MADRID", "GOYA", "EUROPA",
    "AVENIDA", "NORTE", "DELTA", "REAL", "MAYOR",
]
_STREET_KIND = ["CALLE", "AVDA", "PLAZA", "PASEO"]
_STREET_NAME = ["ALCALA", "SERRANO", "VELAZQUEZ", "ARAGON", "COLON", "SEGOVIA"]
_ITEM_WORDS = [
    "CAFE", "TOSTADA", "MENU", "AGUA", "CERVEZA", "TAPA", "BOCADILLO",
    "ZUMO", "PAN", "LECHE", "FRUTA", "POSTRE", "RACION", "ENSALADA",
    "PIZZA", "PASTA", "SOPA", "CROQUETAS",
]
_FOOTER_WORDS = ["GRACIAS", "POR", "SU", "VISITA"]
_TAX_RATES = (4, 10, 21)


def _amount(rng: np.random.Generator, lo: float, hi: float) -> str:
    return f"{rng.uniform(lo, hi):.2f}"


def _default_generators() -> dict[str, Callable[[np.random.Generator], str]]:
    return {
        "VendorTaxID": lambda rng: "B" + "".join(str(rng.integers(0, 10)) for _ in range(8)),
        "InvoiceDate": lambda rng: "%02d/%02d/%04d"
        % (rng.integers(1, 29), rng.integers(1, 13), rng.integers(2018, 2025)),
        "InvoiceNumber": lambda rng: "A-%05d" % rng.integers(1, 100000),
    }


@dataclass
class SynthSpec:
    """Parameters for the synthetic receipt generator."""

    n_documents: int = 100
    style_weights: dict[str, float] = field(
        default_factory=lambda: {"two_column": 0.4, "centered": 0.35, "ragged": 0.25}
    )
    jitter: float = 3.0
    seed: int = 0
    # Per-class probability that a document contains the class; unset -> 1.0.
    presence: dict[str, float] = field(default_factory=dict)
    generators: dict[str, Callable[[np.random.Generator], str]] = field(
        default_factory=_default_generators
    )

    def __post_init__(self):
        if self.n_documents < 1:
            raise ValueError("n_documents must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        unknown = set(self.style_weights) - set(STYLES)
        if unknown:
            raise ValueError(f"unknown layout styles: {sorted(unknown)}")
        total = sum(self.style_weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"style weights must sum to 1, got {total}")
        for c, p in self.presence.items():
            if c not in RECEIPT_CLASSES[1:]:
                raise ValueError(f"presence for unknown class {c!r}")
            if not 0 <= p <= 1:
                raise ValueError(f"presence probability out of range for {c!r}")


def _build_lines(spec: SynthSpec, rng: np.random.Generator) -> list[list[tuple[str, str]]]:
    """Logical receipt content: lines of (text, label) pairs, top to bottom."""
    gen = spec.generators

    def present(cls: str) -> bool:
        p = spec.presence.get(cls, 1.0)
        return p >= 1.0 or rng.random() < p

    lines: list[list[tuple[str, str]]] = []
    if present("VendorName"):
        vendor = [(_VENDOR_HEAD[rng.integers(len(_VENDOR_HEAD))], "VendorName"),
                  (_VENDOR_TAIL[rng.integers(len(_VENDOR_TAIL))], "VendorName")]
        if rng.random() < 0.4:
            vendor.append(("S.L.", "VendorName"))
        lines.append(vendor)
    lines.append([
        (_STREET_KIND[rng.integers(len(_STREET_KIND))], "DontCare"),
        (_STREET_NAME[rng.integers(len(_STREET_NAME))], "DontCare"),
        (str(rng.integers(1, 200)), "DontCare"),
    ])
    if present("VendorTaxID"):
        lines.append([("CIF:", "DontCare"), (gen["VendorTaxID"](rng), "VendorTaxID")])
    if present("InvoiceDate"):
        lines.append([("FECHA:", "DontCare"), (gen["InvoiceDate"](rng), "InvoiceDate")])
    if present("InvoiceNumber"):
        lines.append([("FACTURA", "DontCare"), ("N:", "DontCare"),
                      (gen["InvoiceNumber"](rng), "InvoiceNumber")])
    n_items = int(rng.integers(3, 9))
    for _ in range(n_items):
        lines.append([
            (str(rng.integers(1, 4)), "DontCare"),
            (_ITEM_WORDS[rng.integers(len(_ITEM_WORDS))], "DontCare"),
            (_amount(rng, 0.5, 30.0), "DontCare"),
        ])
    base = float(rng.uniform(5, 120))
    rate = int(_TAX_RATES[rng.integers(len(_TAX_RATES))])
    tax = base * rate / 100
    if present("BaseAmount"):
        lines.append([("BASE", "DontCare"), ("IMPONIBLE:", "DontCare"),
                      (f"{base:.2f}", "BaseAmount")])
    iva_line: list[tuple[str, str]] = [("IVA", "DontCare")]
    if present("TaxRate"):
        iva_line.append((f"{rate}%", "TaxRate"))
    if present("TaxAmount"):
        iva_line.append((f"{tax:.2f}", "TaxAmount"))
    if len(iva_line) > 1:
        lines.append(iva_line)
    if present("ExpenseAmount"):
        lines.append([("TOTAL:", "DontCare"), (f"{base + tax:.2f}", "ExpenseAmount")])
    lines.append([(w, "DontCare") for w in _FOOTER_WORDS])
    return lines


def _place_line(
    line: list[tuple[str, str]],
    style: str,
    rng: np.random.Generator,
    width: float,
    char_w: float,
    gap: float,
) -> list[tuple[str, str, float, float]]:
    """Assign x extents: (text, label, x_left, x_right) per token."""
    widths = [max(1, len(t)) * char_w for t, _ in line]
    margin = 30.0
    if style == "two_column" and len(line) >= 2:
        # keyword column left, value column right; middle tokens packed left
        xs = []
        x = margin
        for w in widths[:-1]:
            xs.append(x)
            x += w + gap
        right_col = width * 0.62
        xs.append(max(right_col, x))
    elif style == "centered":
        total = sum(widths) + gap * (len(widths) - 1)
        x = max(margin, (width - total) / 2)
        xs = []
        for w in widths:
            xs.append(x)
            x += w + gap
    else:  # ragged
        x = margin + float(rng.uniform(0, 80))
        xs = []
        for w in widths:
            xs.append(x)
            x += w + float(rng.uniform(6, 24))
    placed = []
    for (text, label), x, w in zip(line, xs, widths):
        placed.append((text, label, x, x + w))
    return placed


def _make_document(spec: SynthSpec, index: int) -> Document:
    rng = np.random.default_rng([spec.seed, index])
    styles = sorted(spec.style_weights)
    weights = np.array([spec.style_weights[s] for s in styles])
    style = styles[rng.choice(len(styles), p=weights / weights.sum())]

    width = float(rng.integers(440, 640))
    line_h = float(rng.integers(26, 35))
    char_w = float(rng.uniform(7, 9))
    gap = float(rng.uniform(8, 16))
    token_h = line_h * 0.55

    lines = _build_lines(spec, rng)
    height = 40 + line_h * len(lines) + 60

    tokens = []
    for li, line in enumerate(lines):
        y = 40 + li * line_h
        for text, label, xl, xr in _place_line(line, style, rng, width, char_w, gap):
            if spec.jitter > 0:
                xl += float(rng.uniform(-spec.jitter, spec.jitter))
                xr += float(rng.uniform(-spec.jitter, spec.jitter))
                yj = y + float(rng.uniform(-spec.jitter, spec.jitter))
            else:
                yj = y
            xl = min(max(xl, 0.0), width - 2)
            xr = min(max(xr, xl + 1.0), width)
            yt = min(max(yj, 0.0), height - 2)
            yb = min(yt + token_h, height)
            tokens.append(RawToken(text, BBox(xl, yt, xr, yb), label))
    return Document(f"{style}-{index:05d}", width, height, tokens)


def synth_generate(spec: SynthSpec) -> list[Document]:
    """Generate receipts deterministically; each document's stream is (seed, index)."""
    return [_make_document(spec, i) for i in range(spec.n_documents)]
