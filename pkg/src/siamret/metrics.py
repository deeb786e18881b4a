"""Rank-based retrieval metrics and the leave-one-out evaluation driver."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .retrieval import EmbeddingIndex, EmbeddingRecord, query_knn

F64 = np.float64


@dataclass(frozen=True)
class QueryJudgment:
    query_id: str
    flags: tuple[bool, ...]  # relevance of ranked results, best rank first
    total_relevant: int  # relevant items in the searched pool
    query_label: int | None = None


@dataclass
class MetricsReport:
    map: float
    mrr: float
    q: int
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    queries: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "map": self.map,
            "mrr": self.mrr,
            "q": self.q,
            "per_class": {
                str(label): self.per_class[label] for label in sorted(self.per_class)
            },
            "queries": self.queries,
        }
        return json.dumps(doc, sort_keys=True, indent=2)


def reciprocal_rank(flags) -> float:
    """1 / rank of the first relevant result; 0.0 when none is relevant."""
    for i, f in enumerate(flags):
        if f:
            return 1.0 / (i + 1)
    return 0.0


def mean_reciprocal_rank(judgments: list[QueryJudgment]) -> float:
    if not judgments:
        raise ValidationError("mean_reciprocal_rank needs at least one judgment")
    return float(np.mean([reciprocal_rank(j.flags) for j in judgments]))


def average_precision(flags, total_relevant: int) -> float:
    """Uninterpolated AP: mean over hits of precision at each hit rank,
    divided by the number of relevant items in the pool (not just retrieved).
    """
    if total_relevant < 1:
        raise ValidationError("average_precision needs total_relevant >= 1")
    hits = 0
    acc = F64(0.0)
    for i, f in enumerate(flags):
        if f:
            hits += 1
            acc += F64(hits) / F64(i + 1)
    return float(acc / F64(total_relevant))


def mean_average_precision(judgments: list[QueryJudgment]) -> float:
    if not judgments:
        raise ValidationError("mean_average_precision needs at least one judgment")
    return float(
        np.mean([average_precision(j.flags, j.total_relevant) for j in judgments])
    )


def judge_queries(
    index: EmbeddingIndex,
    queries: list[EmbeddingRecord],
    k: int | None = None,
    exclude_self: bool = True,
) -> list[QueryJudgment]:
    """Run every query against the index and mark same-label hits relevant."""
    if index.size == 0:
        raise ValidationError("cannot evaluate against an empty index")
    unknown = [rec.id for rec in queries if rec.label < 0]
    if unknown:
        raise ValidationError(
            "queries with unknown labels cannot be judged: " + ", ".join(unknown)
        )
    label_counts: dict[int, int] = {}
    for lab in index.labels:
        label_counts[int(lab)] = label_counts.get(int(lab), 0) + 1
    id_to_label = {ident: int(lab) for ident, lab in zip(index.ids, index.labels)}

    judgments = []
    for rec in queries:
        exclude = rec.id if exclude_self and rec.id in id_to_label else None
        relevant = label_counts.get(rec.label, 0)
        if exclude is not None and id_to_label[exclude] == rec.label:
            relevant -= 1
        if relevant < 1:
            # nothing retrievable is relevant for this query; it cannot be judged
            continue
        depth = index.size if k is None else k
        hits = query_knn(index, rec.vector, depth, exclude_id=exclude)
        judgments.append(
            QueryJudgment(
                query_id=rec.id,
                flags=tuple(h.label == rec.label for h in hits),
                total_relevant=relevant,
                query_label=rec.label,
            )
        )
    return judgments


def evaluate_retrieval(
    index: EmbeddingIndex,
    queries: list[EmbeddingRecord],
    k: int | None = None,
    exclude_self: bool = True,
) -> MetricsReport:
    """MAP and MRR over all judgeable queries, with per-class breakdowns."""
    judgments = judge_queries(index, queries, k=k, exclude_self=exclude_self)
    if not judgments:
        raise ValidationError("no judgeable queries (every query had zero relevant items)")
    report = MetricsReport(
        map=mean_average_precision(judgments),
        mrr=mean_reciprocal_rank(judgments),
        q=len(judgments),
    )
    by_label: dict[int, list[QueryJudgment]] = {}
    for j in judgments:
        by_label.setdefault(int(j.query_label), []).append(j)
    for label in sorted(by_label):
        group = by_label[label]
        report.per_class[label] = {
            "map": mean_average_precision(group),
            "mrr": mean_reciprocal_rank(group),
        }
    for j in judgments:
        first = next((i + 1 for i, f in enumerate(j.flags) if f), None)
        report.queries.append(
            {
                "id": j.query_id,
                "first_relevant_rank": first,
                "ap": average_precision(j.flags, j.total_relevant),
            }
        )
    return report
