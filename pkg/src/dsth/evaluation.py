"""Retrieval metrics: average precision at depth R and precision-scope curves."""

from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LabelSet
from .retrieval import PackedCodeIndex, rank

# relevance(query_position, ids) -> boolean array aligned with ids
Relevance = Callable[[int, np.ndarray], np.ndarray]


class LabelRelevance:
    """Relevance by shared labels between query and database samples.

    ``db_labels`` is indexed by the external ids stored in the index.
    """

    def __init__(self, query_labels: LabelSet, db_labels: LabelSet):
        n_labels = 1 + max(
            max(max(s) for s in query_labels.sets), max(max(s) for s in db_labels.sets)
        )
        self._q = query_labels.indicator(n_labels).astype(np.float32)
        self._d = db_labels.indicator(n_labels).astype(np.float32)

    def __call__(self, qi: int, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        return (self._d[ids] @ self._q[qi]) > 0


def average_precision(relevant_flags: Sequence[bool], R: int) -> float:
    """Mean of precision@r over the relevant positions among the top ``R``.

    Missing positions count as non-relevant; no relevant item gives 0.  The
    sum is accumulated in exact rationals, so the result is the correctly
    rounded value whatever order the terms would be added in.
    """
    flags = np.asarray(relevant_flags, dtype=bool)[:R]
    positions = np.flatnonzero(flags) + 1
    if positions.size == 0:
        return 0.0
    total = sum(Fraction(k, int(r)) for k, r in enumerate(positions, start=1))
    return float(total / positions.size)


def _exact_mean(values) -> float:
    # math.fsum is exact, so the mean does not depend on query order
    values = list(values)
    return math.fsum(values) / len(values)


def _query_codes(queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.uint64)
    return q[None, :] if q.ndim == 1 else q


@dataclass
class EvalReport:
    map: float
    per_query_ap: list
    precision_scope: list
    R: int
    excluded_queries: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    def to_csv(self, ap_path, scope_path) -> None:
        with open(ap_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query", "ap"])
            for qi, ap in self.per_query_ap:
                w.writerow([qi, repr(ap)])
        with open(scope_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "precision"])
            for s, p in self.precision_scope:
                w.writerow([s, repr(p)])


def _ranked_relevance(queries, index: PackedCodeIndex, relevance: Relevance, self_ids=None):
    # self_ids[qi] is dropped from query qi's ranking (queries drawn from the database)
    for qi, q in enumerate(_query_codes(queries)):
        ids, _ = rank(index, q)
        if self_ids is not None:
            ids = ids[ids != np.uint64(self_ids[qi])]
        yield qi, relevance(qi, ids)


def per_query_ap(queries, index: PackedCodeIndex, relevance: Relevance, R: int = 100, self_ids=None):
    """``(query position, AP)`` pairs plus the positions with nothing relevant in the index."""
    aps, excluded = [], []
    for qi, rel in _ranked_relevance(queries, index, relevance, self_ids):
        if not rel.any():
            excluded.append(qi)
            continue
        aps.append((qi, average_precision(rel, R)))
    return aps, excluded


def mean_ap(queries, index: PackedCodeIndex, relevance: Relevance, R: int = 100, self_ids=None) -> float:
    """mAP@R over the queries that have at least one relevant database item."""
    if len(_query_codes(queries)) == 0:
        raise ValueError("mean_ap: empty query set")
    aps, _ = per_query_ap(queries, index, relevance, R, self_ids)
    if not aps:
        raise ValueError("mean_ap: no query has a relevant item in the index")
    return _exact_mean(ap for _, ap in aps)


def precision_scope_curve(queries, index: PackedCodeIndex, relevance: Relevance, scopes, self_ids=None):
    """Mean fraction of relevant items among the top ``s`` for each scope ``s``."""
    scopes = [int(s) for s in scopes]
    if any(b <= a for a, b in zip(scopes, scopes[1:])):
        raise ValueError("scopes must be strictly ascending")
    n = index.n - (1 if self_ids is not None else 0)
    for s in scopes:
        if s < 1 or s > n:
            raise ValueError(f"scope {s} outside [1, n={n}]")
    if len(_query_codes(queries)) == 0:
        raise ValueError("precision_scope_curve: empty query set")
    per_scope = {s: [] for s in scopes}
    for _, rel in _ranked_relevance(queries, index, relevance, self_ids):
        hits = np.cumsum(rel)
        for s in scopes:
            per_scope[s].append(hits[s - 1] / s)
    return [(s, _exact_mean(per_scope[s])) for s in scopes]


def evaluate(
    queries, index: PackedCodeIndex, relevance: Relevance, R: int = 100, scopes=(), config=None, self_ids=None
) -> EvalReport:
    """mAP@R plus an optional precision-scope curve, bundled with the run config."""
    curve = precision_scope_curve(queries, index, relevance, scopes, self_ids) if scopes else []
    aps, excluded = per_query_ap(queries, index, relevance, R, self_ids)
    if not aps:
        raise ValueError("no query has a relevant item in the index")
    return EvalReport(
        map=_exact_mean(ap for _, ap in aps),
        per_query_ap=aps,
        precision_scope=curve,
        R=R,
        excluded_queries=excluded,
        config=dict(config or {}),
    )
