"""Alignment, extraction metrics, review ranking, and BLB confidence intervals.

Alignment pairs ground-truth and predicted instances one-to-one: root-based
schemes require equal canonicalized root values; weighted schemes score
attribute agreement and threshold it. Matching is greedy by descending
score with (gt order, pred order) tie-breaks, which is deterministic and
optimal when all candidate scores are equal.

Date tolerance is applied in two places with different defaults: alignment
uses 0 days (dates are decisive anchors), metric computation takes the
configured tolerance, so widening the tolerance can only turn mismatches
into matches and never changes which instances are paired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .schema import (
    AttributeSpec,
    EntityInstance,
    EntityTypeSpec,
    Kind,
    PatientRecord,
    RootAlignment,
    SchemaRegistry,
    TypedValue,
    WeightedAlignment,
    canonical_value,
)

_SCORE_EPS = 1e-9


@dataclass(frozen=True)
class MatchPolicy:
    date_tolerance_days: int = 0
    numeric_epsilon: float = 1e-9


ALIGNMENT_POLICY = MatchPolicy(date_tolerance_days=0)


def match_attribute(
    spec: AttributeSpec,
    policy: MatchPolicy,
    v1: Optional[TypedValue],
    v2: Optional[TypedValue],
) -> bool:
    """True when two values agree under the policy; both-null is not a match."""
    if v1 is None or v2 is None:
        return False
    if v1.kind is not v2.kind:
        return False
    if spec.kind is Kind.DATE:
        delta = abs((v1.value - v2.value).days)  # type: ignore[operator]
        return delta <= policy.date_tolerance_days
    if spec.kind in (Kind.INTEGER, Kind.DECIMAL):
        a, b = float(v1.value), float(v2.value)  # type: ignore[arg-type]
        return math.isclose(a, b, rel_tol=policy.numeric_epsilon, abs_tol=policy.numeric_epsilon)
    if spec.kind is Kind.BOOLEAN:
        return v1.value == v2.value
    return canonical_value(spec.name, str(v1.value)) == canonical_value(spec.name, str(v2.value))


def attribute_mismatch(
    spec: AttributeSpec,
    policy: MatchPolicy,
    v1: Optional[TypedValue],
    v2: Optional[TypedValue],
) -> bool:
    """True when the values disagree; both-null is neither match nor mismatch."""
    if v1 is None and v2 is None:
        return False
    return not match_attribute(spec, policy, v1, v2)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentResult:
    pairs: list[tuple[EntityInstance, EntityInstance, float]] = field(default_factory=list)
    unmatched_gt: list[EntityInstance] = field(default_factory=list)
    unmatched_pred: list[EntityInstance] = field(default_factory=list)


def _pair_score(
    spec: EntityTypeSpec,
    scheme: WeightedAlignment,
    policy: MatchPolicy,
    gt: EntityInstance,
    pred: EntityInstance,
) -> float:
    score = 0.0
    for name, weight in scheme.weights:
        if match_attribute(spec.attribute(name), policy, gt.get(name), pred.get(name)):
            score += weight
    return score


def align_entities(
    spec: EntityTypeSpec,
    policy: MatchPolicy,
    gt: Sequence[EntityInstance],
    pred: Sequence[EntityInstance],
) -> AlignmentResult:
    """One-to-one alignment between ground truth and predictions.

    Candidate pairs: equal canonicalized root values (root scheme, score 1),
    or weighted score >= threshold (weighted scheme). Candidates are taken
    greedily by descending score; each instance joins at most one pair.
    """
    scheme = spec.alignment
    candidates: list[tuple[float, int, int]] = []
    if isinstance(scheme, RootAlignment):
        root = scheme.root_attribute
        spec.attribute(root)  # raises on schemes referencing unknown attributes
        for gi, g in enumerate(gt):
            g_root = g.get(root)
            if g_root is None:
                continue
            g_key = canonical_value(root, str(g_root.to_json()))
            for pi, p in enumerate(pred):
                p_root = p.get(root)
                if p_root is None:
                    continue
                if canonical_value(root, str(p_root.to_json())) == g_key:
                    candidates.append((1.0, gi, pi))
    else:
        for name, _ in scheme.weights:
            spec.attribute(name)
        for gi, g in enumerate(gt):
            for pi, p in enumerate(pred):
                score = _pair_score(spec, scheme, policy, g, p)
                if score >= scheme.threshold - _SCORE_EPS:
                    candidates.append((score, gi, pi))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    result = AlignmentResult()
    for score, gi, pi in candidates:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        result.pairs.append((gt[gi], pred[pi], score))
    result.unmatched_gt = [g for i, g in enumerate(gt) if i not in used_gt]
    result.unmatched_pred = [p for i, p in enumerate(pred) if i not in used_pred]
    return result


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def to_json(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


@dataclass
class EntityMetrics:
    n_gt: int = 0
    n_pred: int = 0
    n_aligned: int = 0
    tp: int = 0
    driver_mismatched_pairs: int = 0

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    @property
    def undefined(self) -> bool:
        return self.n_pred == 0 or self.n_gt == 0

    def to_json(self) -> dict:
        return {
            "n_gt": self.n_gt, "n_pred": self.n_pred, "n_aligned": self.n_aligned,
            "tp": self.tp, "driver_mismatched_pairs": self.driver_mismatched_pairs,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "undefined": self.undefined,
        }


@dataclass
class MetricsReport:
    per_entity: dict[str, EntityMetrics] = field(default_factory=dict)
    per_attribute: dict[str, dict[str, MetricCounts]] = field(default_factory=dict)

    def macro_f1(self) -> float:
        if not self.per_entity:
            return 0.0
        return sum(m.f1 for m in self.per_entity.values()) / len(self.per_entity)

    def to_json(self) -> dict:
        return {
            "per_entity": {k: v.to_json() for k, v in sorted(self.per_entity.items())},
            "per_attribute": {
                entity: {a: c.to_json() for a, c in sorted(attrs.items())}
                for entity, attrs in sorted(self.per_attribute.items())
            },
            "macro_f1": self.macro_f1(),
        }


def compute_metrics(
    alignments: Mapping[str, AlignmentResult],
    registry: SchemaRegistry,
    policy: MatchPolicy,
) -> MetricsReport:
    """Entity- and attribute-level precision/recall/F1 from aligned results.

    Entity TP is the pair count for root schemes; for weighted schemes a
    pair only counts when its driver attribute matches under *policy*
    (driver-mismatched pairs are reported separately). Attribute counts
    cover aligned pairs plus every non-null attribute of unmatched
    instances on either side.
    """
    report = MetricsReport()
    for entity_name, result in alignments.items():
        spec = registry.get(entity_name)
        entity = EntityMetrics(
            n_gt=len(result.pairs) + len(result.unmatched_gt),
            n_pred=len(result.pairs) + len(result.unmatched_pred),
            n_aligned=len(result.pairs),
        )
        driver = spec.anchor_attribute
        driver_spec = spec.attribute(driver)
        for gt_inst, pred_inst, _ in result.pairs:
            if isinstance(spec.alignment, RootAlignment):
                entity.tp += 1
            elif match_attribute(driver_spec, policy, gt_inst.get(driver), pred_inst.get(driver)):
                entity.tp += 1
            else:
                entity.driver_mismatched_pairs += 1
        report.per_entity[spec.name] = entity

        attrs = report.per_attribute.setdefault(spec.name, {})
        for attr in spec.attributes:
            counts = attrs.setdefault(attr.name, MetricCounts())
            for gt_inst, pred_inst, _ in result.pairs:
                gv, pv = gt_inst.get(attr.name), pred_inst.get(attr.name)
                if gv is None and pv is None:
                    continue
                if match_attribute(attr, policy, gv, pv):
                    counts.tp += 1
                    continue
                if pv is not None:
                    counts.fp += 1
                if gv is not None:
                    counts.fn += 1
            for inst in result.unmatched_pred:
                if inst.get(attr.name) is not None:
                    counts.fp += 1
            for inst in result.unmatched_gt:
                if inst.get(attr.name) is not None:
                    counts.fn += 1
    return report


# ---------------------------------------------------------------------------
# Disagreement scoring and review ranking
# ---------------------------------------------------------------------------

def disagreement_score(
    gt: PatientRecord,
    pred: PatientRecord,
    registry: SchemaRegistry,
    policy: MatchPolicy,
    alignment_policy: MatchPolicy = ALIGNMENT_POLICY,
) -> int:
    """Count of mismatched attributes between a patient's two records.

    Aligned pairs contribute each attribute that disagrees under *policy*;
    wholly unmatched instances contribute every non-null attribute.
    """
    score = 0
    gt_by_entity = gt.by_entity()
    pred_by_entity = pred.by_entity()
    for entity_name in sorted(set(gt_by_entity) | set(pred_by_entity)):
        spec = registry.get(entity_name)
        result = align_entities(
            spec,
            alignment_policy,
            gt_by_entity.get(entity_name, []),
            pred_by_entity.get(entity_name, []),
        )
        for gt_inst, pred_inst, _ in result.pairs:
            for attr in spec.attributes:
                if attribute_mismatch(attr, policy, gt_inst.get(attr.name), pred_inst.get(attr.name)):
                    score += 1
        for inst in result.unmatched_gt + result.unmatched_pred:
            score += len(inst.non_null())
    return score


def rank_for_review(scores: Mapping[str, int], n: int = 50) -> list[str]:
    """Patients by descending disagreement, ties by id, truncated to *n*."""
    ordered = sorted(scores, key=lambda pid: (-scores[pid], pid))
    return ordered[:max(n, 0)]


# ---------------------------------------------------------------------------
# Adjudication metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdjudicationTally:
    patient_id: str
    entity_type: str
    n_correct: int = 0
    n_incorrect: int = 0
    n_missing: int = 0

    def __post_init__(self) -> None:
        if min(self.n_correct, self.n_incorrect, self.n_missing) < 0:
            raise ValueError("tally counts must be >= 0")

    @property
    def n_extracted(self) -> int:
        return self.n_correct + self.n_incorrect


@dataclass
class AdjudicationRates:
    acceptance_score: Optional[float]
    edit_rate: Optional[float]
    missing_rate: Optional[float]
    acceptance_over_extracted: Optional[float]
    edit_over_extracted: Optional[float]
    n_correct: int
    n_incorrect: int
    n_missing: int

    @property
    def undefined(self) -> bool:
        return self.acceptance_score is None or self.missing_rate is None

    def to_json(self) -> dict:
        return {
            "acceptance_score": self.acceptance_score,
            "edit_rate": self.edit_rate,
            "missing_rate": self.missing_rate,
            "acceptance_over_extracted": self.acceptance_over_extracted,
            "edit_over_extracted": self.edit_over_extracted,
            "n_correct": self.n_correct,
            "n_incorrect": self.n_incorrect,
            "n_missing": self.n_missing,
        }


def acceptance_and_missing(tallies: Iterable[AdjudicationTally]) -> AdjudicationRates:
    """Adjudication rates over all reviewed items.

    The headline rates share one denominator (reviewed = extracted plus
    reviewer-added missing items), so approvals, edits, and misses sum
    to 1. Extracted-only variants are reported alongside. With nothing
    extracted the acceptance and edit rates are undefined (None).
    """
    correct = incorrect = missing = 0
    for tally in tallies:
        correct += tally.n_correct
        incorrect += tally.n_incorrect
        missing += tally.n_missing
    extracted = correct + incorrect
    reviewed = extracted + missing
    return AdjudicationRates(
        acceptance_score=correct / reviewed if extracted else None,
        edit_rate=incorrect / reviewed if extracted else None,
        missing_rate=missing / reviewed if reviewed else None,
        acceptance_over_extracted=correct / extracted if extracted else None,
        edit_over_extracted=incorrect / extracted if extracted else None,
        n_correct=correct,
        n_incorrect=incorrect,
        n_missing=missing,
    )


# ---------------------------------------------------------------------------
# Bag of Little Bootstraps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BLBConfig:
    subsets: int = 10
    subset_size: int = 128
    replicates: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.subsets, self.subset_size, self.replicates) < 1:
            raise ValueError("BLB parameters must be positive")


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_json(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "level": self.level}


def blb_ci(
    per_patient_values: Sequence[float],
    cfg: BLBConfig = BLBConfig(),
    level: float = 0.95,
) -> ConfidenceInterval:
    """Bag-of-little-bootstraps percentile CI for the mean.

    Draw protocol (fixed so runs are reproducible from the seed): one
    ``numpy`` generator seeded with ``cfg.seed``; for each of ``s`` subsets,
    ``choice(N, size=m, replace=False)`` picks members, then each of ``r``
    replicates draws ``multinomial(N, [1/m]*m)`` weights and computes the
    weighted mean over the subset scaled back to size N. Per-subset
    percentile endpoints (linear interpolation) are averaged across subsets.
    """
    values = np.asarray(per_patient_values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise ValueError("no values")
    if cfg.subset_size > n:
        raise ValueError(f"subset_size {cfg.subset_size} exceeds population {n}")
    rng = np.random.default_rng(cfg.seed)
    alpha = (1.0 - level) / 2.0
    lowers = np.empty(cfg.subsets)
    uppers = np.empty(cfg.subsets)
    probabilities = np.full(cfg.subset_size, 1.0 / cfg.subset_size)
    for s in range(cfg.subsets):
        indices = rng.choice(n, size=cfg.subset_size, replace=False)
        subset = values[indices]
        stats = np.empty(cfg.replicates)
        for r in range(cfg.replicates):
            weights = rng.multinomial(n, probabilities)
            stats[r] = float(np.dot(weights, subset)) / n
        lowers[s] = np.percentile(stats, alpha * 100.0)
        uppers[s] = np.percentile(stats, (1.0 - alpha) * 100.0)
    return ConfidenceInterval(
        lower=float(lowers.mean()), upper=float(uppers.mean()), level=level
    )
