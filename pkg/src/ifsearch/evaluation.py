"""Retrieval evaluation: average precision, PR curves, localization accuracy.

Average precision follows the trapezoidal ranked-list convention used by
the classic landmark-retrieval benchmarks: junk images are dropped from
the ranking without penalty before scoring, and each relevant hit
contributes the recall step times the average of the precision before
and after the hit, with precision-before starting at 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvariantError
from .search import Ranking
from .tensor_store import BoundingBox, GroundTruth


@dataclass(frozen=True)
class QueryEval:
    query_id: str
    ap: float
    num_relevant: int
    num_retrieved: int
    flagged: bool = False  # True when the query had no positives at all


@dataclass(frozen=True)
class LocalizationStats:
    """Hit count for predicted boxes against planted boxes."""

    hits: int
    total: int
    threshold: float

    @property
    def accuracy(self) -> float:
        return self.hits / self.total if self.total else 0.0


@dataclass(frozen=True)
class EvalReport:
    per_query: tuple[QueryEval, ...]
    mean_ap: float
    stage: str
    localization: LocalizationStats | None = None

    @property
    def query_ids(self) -> tuple[str, ...]:
        return tuple(q.query_id for q in self.per_query)

    @property
    def flagged_queries(self) -> tuple[str, ...]:
        return tuple(q.query_id for q in self.per_query if q.flagged)


def average_precision(ranked_ids: Sequence[str], truth: GroundTruth) -> float:
    """AP of a ranked id list against good/ok/junk ground truth.

    Junk entries are removed first, preserving order.  A query with no
    positives scores 0 (callers decide whether that should be flagged).
    """
    positives = truth.positives
    if not positives:
        return 0.0
    ap = 0.0
    hits = 0
    seen = 0  # non-junk entries consumed
    old_precision = 1.0
    total = len(positives)
    for image_id in ranked_ids:
        if image_id in truth.junk:
            continue
        seen += 1
        if image_id in positives:
            hits += 1
            precision = hits / seen
            ap += (1.0 / total) * (old_precision + precision) / 2.0
            old_precision = precision
        else:
            old_precision = hits / seen
    return ap


def precision_recall_curve(
    ranked_ids: Sequence[str], truth: GroundTruth
) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) sampled after each non-junk ranking position.

    Both arrays start with the implicit (0, 1) anchor point so the curve
    can be drawn from the origin of the recall axis.
    """
    positives = truth.positives
    recalls = [0.0]
    precisions = [1.0]
    hits = 0
    seen = 0
    total = len(positives)
    for image_id in ranked_ids:
        if image_id in truth.junk:
            continue
        seen += 1
        if image_id in positives:
            hits += 1
        recalls.append(hits / total if total else 0.0)
        precisions.append(hits / seen)
    return np.asarray(recalls), np.asarray(precisions)


def evaluate_ranking(ranking: Ranking, truth: GroundTruth) -> QueryEval:
    flagged = not truth.positives
    if flagged:
        warnings.warn(
            f"query '{ranking.query_id}' has no positive images; AP forced to 0",
            stacklevel=2,
        )
    return QueryEval(
        query_id=ranking.query_id,
        ap=average_precision(ranking.image_ids, truth),
        num_relevant=len(truth.positives),
        num_retrieved=len(ranking.entries),
        flagged=flagged,
    )


def _truth_by_query(ground_truth) -> Mapping[str, GroundTruth]:
    if isinstance(ground_truth, Mapping):
        return ground_truth
    return {gt.query_id: gt for gt in ground_truth}


def mean_ap(
    rankings: Sequence[Ranking],
    ground_truth,
    *,
    localizations: Mapping[str, Mapping[str, BoundingBox]] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Evaluate a batch of rankings; mean AP is the unweighted query mean.

    ``ground_truth`` may be a list or a query-id mapping; every ranking
    must be covered (all uncovered query ids are reported at once).  When
    true instance boxes are supplied, localization accuracy over
    positives with a predicted box is reported alongside.
    """
    if not rankings:
        raise InvariantError("cannot evaluate an empty list of rankings")
    truth = _truth_by_query(ground_truth)
    stages = {r.stage for r in rankings}
    if len(stages) > 1:
        raise InvariantError(
            "rankings mix stages: " + ", ".join(sorted(s.value for s in stages))
        )
    missing = [r.query_id for r in rankings if r.query_id not in truth]
    if missing:
        raise InvariantError("no ground truth for: " + ", ".join(missing))

    per_query = tuple(evaluate_ranking(r, truth[r.query_id]) for r in rankings)
    loc = None
    if localizations is not None:
        loc = localization_stats(
            rankings, truth, localizations, iou_threshold=iou_threshold
        )
    return EvalReport(
        per_query=per_query,
        mean_ap=float(np.mean([q.ap for q in per_query])),
        stage=next(iter(stages)).value,
        localization=loc,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when they do not overlap."""
    ix_min = max(a.x_min, b.x_min)
    iy_min = max(a.y_min, b.y_min)
    ix_max = min(a.x_max, b.x_max)
    iy_max = min(a.y_max, b.y_max)
    iw = ix_max - ix_min
    ih = iy_max - iy_min
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def localization_stats(
    rankings: Sequence[Ranking],
    ground_truth,
    true_boxes: Mapping[str, Mapping[str, BoundingBox]],
    *,
    iou_threshold: float = 0.5,
) -> LocalizationStats:
    """Count planted boxes recovered by the predicted localizations.

    Every ranking entry that is a positive for its query and has a known
    true box contributes to the denominator.  It counts as a hit when the
    entry carries a predicted box whose IoU with the true box reaches the
    threshold; positives left without a predicted box are misses.
    """
    truth_map = _truth_by_query(ground_truth)
    total = 0
    hits = 0
    for ranking in rankings:
        truth = truth_map.get(ranking.query_id)
        if truth is None:
            continue
        query_boxes = true_boxes.get(ranking.query_id, {})
        for entry in ranking.entries:
            if entry.image_id not in truth.positives:
                continue
            true_box = query_boxes.get(entry.image_id)
            if true_box is None:
                continue
            total += 1
            if entry.localization is None:
                continue
            if iou(entry.localization, true_box) >= iou_threshold:
                hits += 1
    return LocalizationStats(hits=hits, total=total, threshold=iou_threshold)
