"""Top-5 mean average precision for the N, N+V, N+δ and All criteria.

Protocol, per image:

1. Predictions are ranked by score (ties: lower input index first).
2. For every ground-truth box ``g`` the candidate set ``C(g)`` is the five
   highest-ranked predictions whose box IoU with ``g`` is at least the IoU
   threshold.
3. ``g`` is matched to the highest-ranked member of ``C(g)`` that also
   satisfies the criterion (noun argmax, plus verb argmax and/or
   time-to-contact tolerance). GTs are matched independently, so one
   prediction may serve several heavily overlapping GTs.
4. A prediction that is some GT's match is a true positive; one that only
   sits in the candidate set of a matched GT is ignored; everything else is
   a false positive.

AP per noun class uses all-point interpolation over the global ranking
(score desc, then image id, then input index); mAP averages over noun
classes present in the ground truth. Because each GT's match can only move
later (or vanish) and the false-positive set can only grow as a criterion
gets stricter, mAP(All) <= mAP(N+V), mAP(N+δ) <= mAP(N) always holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, ValidationError
from .head import GroundTruthInstance, STAPrediction, box_iou

CRITERIA = ("N", "N+V", "N+δ", "All")
REPORT_SCHEMA_VERSION = 1
TOP_K = 5

_ALIASES = {"N+delta": "N+δ", "N+d": "N+δ", "ALL": "All", "all": "All"}


@dataclass(frozen=True)
class MatchCriterion:
    name: str = "N"
    iou_threshold: float = 0.5
    ttc_tolerance: float = 0.25

    def __post_init__(self):
        name = _ALIASES.get(self.name, self.name)
        if name not in CRITERIA:
            raise ConfigurationError(f"unknown criterion {self.name!r}; expected one of {CRITERIA}")
        object.__setattr__(self, "name", name)

    @property
    def uses_verb(self) -> bool:
        return self.name in ("N+V", "All")

    @property
    def uses_ttc(self) -> bool:
        return self.name in ("N+δ", "All")

    def labels_ok(self, pred: STAPrediction, gt: GroundTruthInstance) -> bool:
        if pred.noun != gt.noun:
            return False
        if self.uses_verb and pred.verb != gt.verb:
            return False
        if self.uses_ttc and abs(pred.ttc - gt.ttc) > self.ttc_tolerance:
            return False
        return True


def match_instance(pred: STAPrediction, gt: GroundTruthInstance, crit: MatchCriterion) -> bool:
    return box_iou(pred.box, gt.box) >= crit.iou_threshold and crit.labels_ok(pred, gt)


@dataclass
class CriterionResult:
    mAP: float
    ap_per_class: Dict[int, float]
    tp: int
    fp: int
    ignored: int
    missed: int


@dataclass
class EvalReport:
    results: Dict[str, CriterionResult] = field(default_factory=dict)
    iou_threshold: float = 0.5
    ttc_tolerance: float = 0.25

    def mAP(self, name: str) -> float:
        return self.results[_ALIASES.get(name, name)].mAP

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "iou_threshold": self.iou_threshold,
            "ttc_tolerance": self.ttc_tolerance,
            "criteria": {
                name: {
                    "mAP": r.mAP,
                    "ap_per_class": {str(k): v for k, v in sorted(r.ap_per_class.items())},
                    "tp": r.tp,
                    "fp": r.fp,
                    "ignored": r.ignored,
                    "missed": r.missed,
                }
                for name, r in self.results.items()
            },
        }


PerImage = Union[Mapping[Hashable, Sequence], Sequence[Tuple[Hashable, Sequence]]]


def _as_mapping(items: PerImage, what: str) -> Dict[Hashable, list]:
    if isinstance(items, Mapping):
        return {k: list(v) for k, v in items.items()}
    out: Dict[Hashable, list] = {}
    for image_id, entries in items:
        if image_id in out:
            raise ValidationError(f"duplicate image id {image_id!r} in {what}")
        out[image_id] = list(entries)
    return out


def average_precision(hits: Sequence[int], is_fp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP of a ranked list.

    ``hits[i]`` is the number of GTs matched by entry ``i`` (0 for a false
    positive) and ``is_fp[i]`` flags false positives.
    """
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(hits, dtype=np.float64))
    fp = np.cumsum(np.asarray(is_fp, dtype=np.float64))
    if len(tp) == 0:
        return 0.0
    recall = tp / num_gt
    denom = tp + fp
    precision = np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _match_image(preds: List[STAPrediction], gts: List[GroundTruthInstance], crit: MatchCriterion):
    """Per-prediction status (``tp``/``ignored``/``fp``), hit counts and missed GTs."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    status = ["fp"] * len(preds)
    hits = [0] * len(preds)
    missed = 0
    exempt = set()
    for g in gts:
        cands = [i for i in order if box_iou(preds[i].box, g.box) >= crit.iou_threshold][:TOP_K]
        match = next((i for i in cands if crit.labels_ok(preds[i], g)), None)
        if match is None:
            missed += 1
            continue
        hits[match] += 1
        exempt.update(cands)
    for i in range(len(preds)):
        if hits[i]:
            status[i] = "tp"
        elif i in exempt:
            status[i] = "ignored"
    return status, hits, missed


def evaluate_criterion(preds: PerImage, gts: PerImage, crit: MatchCriterion) -> CriterionResult:
    pred_map = _as_mapping(preds, "predictions")
    gt_map = _as_mapping(gts, "ground truth")
    unknown = [k for k in pred_map if k not in gt_map]
    if unknown:
        raise ValidationError(f"predictions reference unknown image ids {unknown[:5]}")

    num_gt: Dict[int, int] = {}
    for insts in gt_map.values():
        for g in insts:
            num_gt[g.noun] = num_gt.get(g.noun, 0) + 1

    ranked = []  # (-score, image_id, index, noun, hits, is_fp)
    tp = fp = ignored = missed = 0
    for image_id, insts in gt_map.items():
        plist = pred_map.get(image_id, [])
        status, hits, miss = _match_image(plist, insts, crit)
        missed += miss
        for i, (p, s, h) in enumerate(zip(plist, status, hits)):
            if s == "ignored":
                ignored += 1
                continue
            tp += s == "tp"
            fp += s == "fp"
            ranked.append((-p.score, image_id, i, p.noun, h, s == "fp"))
    ranked.sort(key=lambda r: r[:3])

    ap = {}
    for cls in sorted(num_gt):
        rows = [r for r in ranked if r[3] == cls]
        ap[cls] = average_precision([r[4] for r in rows], [r[5] for r in rows], num_gt[cls])
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return CriterionResult(mean, ap, tp, fp, ignored, missed)


def evaluate(preds: PerImage, gts: PerImage, criteria: Sequence[str] = CRITERIA,
             iou_threshold: float = 0.5, ttc_tolerance: float = 0.25) -> EvalReport:
    report = EvalReport(iou_threshold=iou_threshold, ttc_tolerance=ttc_tolerance)
    for name in criteria:
        crit = MatchCriterion(name, iou_threshold, ttc_tolerance)
        report.results[crit.name] = evaluate_criterion(preds, gts, crit)
    return report


# ----------------------------------------------------------------------
# JSON files: flat arrays keyed by image_id

def group_predictions(items: Sequence[dict]) -> Dict[Hashable, List[STAPrediction]]:
    out: Dict[Hashable, List[STAPrediction]] = {}
    for obj in items:
        out.setdefault(obj["image_id"], []).append(STAPrediction.from_json(obj))
    return out


def group_ground_truth(items: Sequence[dict]) -> Dict[Hashable, List[GroundTruthInstance]]:
    out: Dict[Hashable, List[GroundTruthInstance]] = {}
    for obj in items:
        out.setdefault(obj["image_id"], []).append(GroundTruthInstance.from_json(obj))
    return out
