"""Greedy longest-match-first subword tokenizer with proportional bbox splitting."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import BBox, Document

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
PAD_ID = 0
UNK_ID = 1


def normalize(text: str) -> str:
    """Lowercase, Unicode NFC, strip outer whitespace."""
    return unicodedata.normalize("NFC", text.lower()).strip()


class Vocabulary:
    """Token table with dense ids; id 0 is PAD (empty grid cell), id 1 is UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise ValueError(f"vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        # reserved markers never match text
        self._match = {t: i for i, t in enumerate(tokens) if i >= 2}
        self._max_len = max((len(t) for t in self._match), default=0)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._match

    def lookup(self, token: str) -> int | None:
        return self._match.get(token)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass(frozen=True)
class TokenPiece:
    """A subword piece carrying its share of the source token's box."""

    text: str
    token_id: int
    bbox: BBox
    source_index: int
    piece_index: int

    @property
    def key(self) -> tuple[int, int]:
        """Stable identity of the piece within its document."""
        return (self.source_index, self.piece_index)


def build_vocab(corpus: Sequence[Document], max_size: int) -> Vocabulary:
    """Frequency vocabulary: whole normalized words first, then corpus characters.

    Both sections are ordered by frequency (descending), ties broken
    lexicographically, and the result truncated to `max_size` entries
    including PAD and UNK.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if max_size < 3:
        raise ValueError("max_size must be at least 3")
    word_freq: Counter[str] = Counter()
    char_freq: Counter[str] = Counter()
    for doc in corpus:
        for token in doc.tokens:
            word = normalize(token.text)
            if not word:
                continue
            word_freq[word] += 1
            char_freq.update(word)
    words = sorted(word_freq, key=lambda w: (-word_freq[w], w))
    chars = sorted(char_freq, key=lambda c: (-char_freq[c], c))
    ordered: list[str] = [PAD_TOKEN, UNK_TOKEN]
    seen = {PAD_TOKEN, UNK_TOKEN}
    for entry in words + chars:
        if entry not in seen:
            seen.add(entry)
            ordered.append(entry)
        if len(ordered) >= max_size:
            break
    return Vocabulary(ordered)


def tokenize(text: str, vocab: Vocabulary) -> list[tuple[str, int]]:
    """Split normalized text into (piece, id) by greedy longest-match-first.

    A character that starts no vocabulary entry becomes a single-character
    UNK piece, so tokenization is total and pieces always concatenate back
    to the normalized input.
    """
    s = normalize(text)
    if not s:
        raise ValueError("text is empty after normalization")
    pieces: list[tuple[str, int]] = []
    i = 0
    n = len(s)
    while i < n:
        matched = None
        for length in range(min(vocab._max_len, n - i), 0, -1):
            candidate = s[i : i + length]
            token_id = vocab.lookup(candidate)
            if token_id is not None:
                matched = (candidate, token_id)
                break
        if matched is None:
            matched = (s[i], UNK_ID)
        pieces.append(matched)
        i += len(matched[0])
    return pieces


def split_bbox(bbox: BBox, piece_lengths: Sequence[int]) -> list[BBox]:
    """Divide a box horizontally, widths proportional to character counts."""
    if not piece_lengths or any(n < 1 for n in piece_lengths):
        raise ValueError("piece_lengths must be non-empty, all >= 1")
    if len(piece_lengths) == 1:
        return [bbox]
    total = sum(piece_lengths)
    width = bbox.width
    edges = [bbox.x_left]
    acc = 0
    for n in piece_lengths[:-1]:
        acc += n
        edges.append(bbox.x_left + width * (acc / total))
    edges.append(bbox.x_right)
    return [
        BBox(edges[k], bbox.y_top, edges[k + 1], bbox.y_bottom)
        for k in range(len(piece_lengths))
    ]


def tokenize_document(doc: Document, vocab: Vocabulary) -> list[TokenPiece]:
    """All pieces of a document, in source token order.

    Tokens that normalize to the empty string are dropped.
    """
    out: list[TokenPiece] = []
    for src, token in enumerate(doc.tokens):
        if not normalize(token.text):
            continue
        parts = tokenize(token.text, vocab)
        boxes = split_bbox(token.bbox, [len(p) for p, _ in parts])
        for k, ((piece, token_id), box) in enumerate(zip(parts, boxes)):
            out.append(TokenPiece(piece, token_id, box, src, k))
    return out
