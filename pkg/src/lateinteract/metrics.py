"""Binary-relevance IR metrics and TREC-style file handling."""

from __future__ import annotations

import json
import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

logger = logging.getLogger(__name__)

Run = Mapping[str, Sequence[str]]
Qrels = Mapping[str, set]


class EvaluationError(ValueError):
    """Run and qrels share no queries."""


def read_qrels(path) -> dict[str, set]:
    """``qid 0 docid rel`` lines; only ``rel > 0`` counts as relevant."""
    qrels: dict[str, set] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'qid 0 docid rel'")
            qid, _, doc_id, rel = parts
            try:
                relevant = int(rel) > 0
            except ValueError:
                raise ValueError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from None
            if relevant:
                qrels.setdefault(qid, set()).add(doc_id)
    return qrels


def read_run(path) -> dict[str, list[str]]:
    """TREC run file; documents are ordered by rank within each query."""
    rows: dict[str, list[tuple[int, str]]] = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            try:
                rank = int(parts[3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: rank {parts[3]!r} is not an integer") from None
            rows.setdefault(parts[0], []).append((rank, parts[2]))
    return {qid: [d for _, d in sorted(pairs, key=lambda p: p[0])] for qid, pairs in rows.items()}


def read_queries(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            qid, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'qid<TAB>text'")
            out.append((qid, text))
    return out


def read_candidates(path) -> dict[str, list[str]]:
    """``qid \\t docid`` lines (extra trailing columns are ignored)."""
    out: dict[str, list[str]] = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if parts == [""]:
                continue
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'qid<TAB>docid'")
            out.setdefault(parts[0], []).append(parts[1])
    return out


# -- per-query metrics --

def reciprocal_rank(ranking: Sequence[str], relevant: set, cutoff: int = 10) -> float:
    for rank, doc in enumerate(ranking[:cutoff], 1):
        if doc in relevant:
            return 1.0 / rank
    return 0.0


def recall(ranking: Sequence[str], relevant: set, k: int) -> float:
    return len(relevant.intersection(ranking[:k])) / len(relevant)


def average_precision(ranking: Sequence[str], relevant: set) -> float:
    hits = 0
    total = 0.0
    seen = set()
    for rank, doc in enumerate(ranking, 1):
        if doc in relevant and doc not in seen:
            seen.add(doc)
            hits += 1
            total += hits / rank
    return total / len(relevant)


def _judged(run: Run, qrels: Qrels) -> list[str]:
    qids = [q for q in run if qrels.get(q)]
    skipped = len(run) - len(qids)
    if skipped:
        logger.warning("skipping %d run queries without relevance judgements", skipped)
    if not qids:
        raise EvaluationError("no query in the run has relevance judgements")
    return qids


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def mrr_at_10(run: Run, qrels: Qrels) -> float:
    return _mean(reciprocal_rank(run[q], qrels[q], 10) for q in _judged(run, qrels))


def recall_at_k(run: Run, qrels: Qrels, k: int) -> float:
    return _mean(recall(run[q], qrels[q], k) for q in _judged(run, qrels))


def map_metric(run: Run, qrels: Qrels) -> float:
    return _mean(average_precision(run[q], qrels[q]) for q in _judged(run, qrels))


# -- reports --

DEFAULT_RECALL_DEPTHS = (50, 200, 1000)


@dataclass
class EvalReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    metrics: list[str] = field(default_factory=list)

    @property
    def query_count(self) -> int:
        return len(self.per_query)

    @property
    def aggregates(self) -> dict[str, float]:
        return {m: _mean(v[m] for v in self.per_query.values()) for m in self.metrics}

    def to_dict(self) -> dict:
        return {"query_count": self.query_count, "aggregates": self.aggregates,
                "per_query": self.per_query}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        aggs = self.aggregates
        width = max(len(m) for m in self.metrics + ["queries"])
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        lines += [f"{m:<{width}}  {aggs[m]:.4f}" for m in self.metrics]
        lines.append(f"{'queries':<{width}}  {self.query_count}")
        return "\n".join(lines)


def evaluate(run: Run, qrels: Qrels, recall_depths: Sequence[int] = DEFAULT_RECALL_DEPTHS,
             sample: int | None = None, seed: int = 0) -> EvalReport:
    """MRR@10, Recall@k for each depth, and MAP; optionally on a query sample."""
    qids = _judged(run, qrels)
    if sample is not None and sample < len(qids):
        qids = sorted(random.Random(seed).sample(sorted(qids), sample))
    metrics = ["MRR@10"] + [f"Recall@{k}" for k in recall_depths] + ["MAP"]
    report = EvalReport(metrics=metrics)
    for q in qids:
        ranking, rel = run[q], qrels[q]
        values = {"MRR@10": reciprocal_rank(ranking, rel, 10)}
        values.update({f"Recall@{k}": recall(ranking, rel, k) for k in recall_depths})
        values["MAP"] = average_precision(ranking, rel)
        report.per_query[q] = values
    return report
