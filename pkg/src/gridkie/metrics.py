"""Evaluation: strict AP, soft AP, token accuracy, and a brute-force oracle.

A class counts as correct in a document under the strict rule only when the
predicted piece set matches ground truth exactly; under the soft rule when
every ground-truth piece is predicted (false positives tolerated, empty
ground truth never soft-correct).  The denominator for a class is the number
of documents where it occurs in ground truth or prediction, so hallucinated
fields cost accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

# piece identity: (document id, source token index, piece index)
PieceId = tuple[str, int, int]


class MetricsError(ValueError):
    pass


@dataclass
class FieldExtraction:
    """Predicted and ground-truth piece sets for one document, keyed by class
    index.  Background never appears as a key."""

    doc_id: str
    predicted: dict[int, set[PieceId]] = field(default_factory=dict)
    truth: dict[int, set[PieceId]] = field(default_factory=dict)

    def __post_init__(self):
        if 0 in self.predicted or 0 in self.truth:
            raise MetricsError("background class must not appear in extraction sets")


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_ap: dict[str, float | None]
    per_class_soft: dict[str, float | None]
    mean_ap: float
    mean_soft: float
    token_accuracy: float | None
    n_documents: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_documents": self.n_documents,
                "mean_ap": self.mean_ap,
                "mean_soft_ap": self.mean_soft,
                "token_accuracy": self.token_accuracy,
                "per_class": {
                    name: {
                        "ap": self.per_class_ap[name],
                        "soft_ap": self.per_class_soft[name],
                    }
                    for name in self.class_names[1:]
                },
            },
            indent=2,
            sort_keys=True,
        )

    def to_table(self) -> str:
        """Aligned text table, one '(AP/softAP)' column per class."""
        width = max([len(n) for n in self.class_names[1:]] + [12])

        def cell(a: float | None, s: float | None) -> str:
            if a is None:
                return "(---/---)"
            return f"({a:.3f}/{s:.3f})"

        lines = [f"{'class':<{width}}  (AP/softAP)"]
        for name in self.class_names[1:]:
            lines.append(
                f"{name:<{width}}  {cell(self.per_class_ap[name], self.per_class_soft[name])}"
            )
        lines.append(f"{'mean':<{width}}  ({self.mean_ap:.3f}/{self.mean_soft:.3f})")
        if self.token_accuracy is not None:
            lines.append(f"{'token acc':<{width}}  {self.token_accuracy:.3f}")
        return "\n".join(lines)


def _per_class_scores(
    extractions: list[FieldExtraction], n_classes: int, soft: bool
) -> dict[int, float | None]:
    if not extractions:
        raise MetricsError("cannot evaluate an empty document set")
    out: dict[int, float | None] = {}
    for c in range(1, n_classes):
        denom = 0
        correct = 0
        for ex in extractions:
            gt = ex.truth.get(c, set())
            pred = ex.predicted.get(c, set())
            if not gt and not pred:
                continue
            denom += 1
            if soft:
                if gt and gt <= pred:
                    correct += 1
            elif pred == gt:
                correct += 1
        out[c] = correct / denom if denom else None
    return out


def _mean_over_scored(scores: dict[int, float | None]) -> float:
    vals = [v for v in scores.values() if v is not None]
    if not vals:
        raise MetricsError("no class has a nonzero denominator")
    return sum(vals) / len(vals)


def strict_ap(
    extractions: list[FieldExtraction], n_classes: int
) -> tuple[dict[int, float | None], float]:
    """Exact-set-match accuracy per class, plus mean over scored classes."""
    scores = _per_class_scores(extractions, n_classes, soft=False)
    return scores, _mean_over_scored(scores)


def soft_ap(
    extractions: list[FieldExtraction], n_classes: int
) -> tuple[dict[int, float | None], float]:
    """Superset-match accuracy per class, plus mean over scored classes."""
    scores = _per_class_scores(extractions, n_classes, soft=True)
    return scores, _mean_over_scored(scores)


def token_accuracy(predicted: list[int], truth: list[int], background: int = 0) -> float:
    """Fraction of correctly classified pieces among non-background ground truth."""
    if len(predicted) != len(truth):
        raise MetricsError(
            f"prediction/truth length mismatch: {len(predicted)} vs {len(truth)}"
        )
    hits = 0
    total = 0
    for p, t in zip(predicted, truth):
        if t == background:
            continue
        total += 1
        if p == t:
            hits += 1
    if total == 0:
        raise MetricsError("no piece has a non-background ground-truth class")
    return hits / total


def evaluate(
    extractions: list[FieldExtraction],
    class_names: list[str],
    token_pairs: list[tuple[int, int]] | None = None,
) -> EvalReport:
    """Assemble the full report.  token_pairs is (predicted, truth) per piece."""
    k = len(class_names)
    aps, mean_ap = strict_ap(extractions, k)
    softs, mean_soft = soft_ap(extractions, k)
    acc = None
    if token_pairs is not None:
        acc = token_accuracy([p for p, _ in token_pairs], [t for _, t in token_pairs])
    return EvalReport(
        class_names=list(class_names),
        per_class_ap={class_names[c]: aps[c] for c in range(1, k)},
        per_class_soft={class_names[c]: softs[c] for c in range(1, k)},
        mean_ap=mean_ap,
        mean_soft=mean_soft,
        token_accuracy=acc,
        n_documents=len(extractions),
    )


def oracle_eval(
    extractions: list[FieldExtraction],
    class_names: list[str],
    token_pairs: list[tuple[int, int]] | None = None,
) -> EvalReport:
    """Deliberately naive re-implementation used to cross-check `evaluate`.

    Works on sorted piece lists and explicit membership loops instead of set
    algebra; any disagreement with the production path is a bug in one of them.
    """
    if not extractions:
        raise MetricsError("cannot evaluate an empty document set")
    k = len(class_names)
    ap: dict[str, float | None] = {}
    soft: dict[str, float | None] = {}
    for c in range(1, k):
        docs_counted = 0
        strict_hits = 0
        soft_hits = 0
        for ex in extractions:
            gt = sorted(ex.truth.get(c, set()))
            pred = sorted(ex.predicted.get(c, set()))
            if len(gt) == 0 and len(pred) == 0:
                continue
            docs_counted += 1
            exact = len(gt) == len(pred)
            if exact:
                for a, b in zip(gt, pred):
                    if a != b:
                        exact = False
                        break
            if exact:
                strict_hits += 1
            covered = len(gt) > 0
            for g in gt:
                found = False
                for p in pred:
                    if p == g:
                        found = True
                        break
                if not found:
                    covered = False
                    break
            if covered:
                soft_hits += 1
        name = class_names[c]
        ap[name] = strict_hits / docs_counted if docs_counted else None
        soft[name] = soft_hits / docs_counted if docs_counted else None

    ap_vals = [v for v in ap.values() if v is not None]
    soft_vals = [v for v in soft.values() if v is not None]
    if not ap_vals:
        raise MetricsError("no class has a nonzero denominator")

    acc = None
    if token_pairs is not None:
        num = 0
        den = 0
        for p, t in token_pairs:
            if t != 0:
                den += 1
                if p == t:
                    num += 1
        if den == 0:
            raise MetricsError("no piece has a non-background ground-truth class")
        acc = num / den

    return EvalReport(
        class_names=list(class_names),
        per_class_ap=ap,
        per_class_soft=soft,
        mean_ap=sum(ap_vals) / len(ap_vals),
        mean_soft=sum(soft_vals) / len(soft_vals),
        token_accuracy=acc,
        n_documents=len(extractions),
    )
