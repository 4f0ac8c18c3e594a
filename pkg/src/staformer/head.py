"""Dense single-stage prediction head, decoding, NMS and training loss.

Each pyramid cell emits ``1 + 4 + N_n + N_v + 1`` raw values laid out as
``[objectness, box(4), noun logits, verb logits, ttc]``. Boxes are encoded
relative to the cell: the centre is ``(col + sigmoid(u)) / W`` (so it always
stays inside the cell) and the size is ``exp(s) / W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    MLP,
    Linear,
    Module,
    Tensor,
    bce_with_logits,
    concat,
    exp,
    gather_last,
    log,
    log_softmax,
    maximum,
    minimum,
    sigmoid,
    smooth_l1,
    softplus,
)
from .autodiff.nn import Init
from .errors import ConfigurationError, ValidationError
from .fusion import FeaturePyramid

TTC_EPS = 1e-3
_OFFSET_CLIP = 10.0


@dataclass
class HeadConfig:
    d: int = 32
    num_nouns: int = 6
    num_verbs: int = 4
    hidden: int = 64
    levels: int = 3
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 20
    zero_init: bool = True
    lambda_box: float = 1.0
    lambda_noun: float = 1.0
    lambda_verb: float = 1.0
    lambda_ttc: float = 1.0

    @property
    def channels(self) -> int:
        return 1 + 4 + self.num_nouns + self.num_verbs + 1

    def validate(self) -> None:
        if self.num_nouns < 1 or self.num_verbs < 1:
            raise ConfigurationError("vocabularies must be non-empty")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigurationError("score_threshold must lie in [0, 1]")
        if self.max_detections < 1:
            raise ConfigurationError("max_detections must be >= 1")


@dataclass
class STAPrediction:
    """One anticipated interaction: where, what, how and when."""

    box: Tuple[float, float, float, float]
    noun_probs: np.ndarray
    verb_probs: np.ndarray
    ttc: float
    score: float
    cell: Optional[Tuple[int, int, int]] = field(default=None, compare=False)

    @property
    def noun(self) -> int:
        return int(np.argmax(self.noun_probs))

    @property
    def verb(self) -> int:
        return int(np.argmax(self.verb_probs))

    def replace(self, **changes) -> "STAPrediction":
        values = dict(box=self.box, noun_probs=self.noun_probs, verb_probs=self.verb_probs,
                      ttc=self.ttc, score=self.score, cell=self.cell)
        values.update(changes)
        return STAPrediction(**values)

    def to_json(self, image_id) -> dict:
        return {
            "image_id": image_id,
            "box": [float(v) for v in self.box],
            "noun_probs": [float(v) for v in self.noun_probs],
            "verb_probs": [float(v) for v in self.verb_probs],
            "ttc": float(self.ttc),
            "score": float(self.score),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "STAPrediction":
        pred = cls(
            box=tuple(float(v) for v in obj["box"]),
            noun_probs=np.asarray(obj["noun_probs"], dtype=np.float64),
            verb_probs=np.asarray(obj["verb_probs"], dtype=np.float64),
            ttc=float(obj["ttc"]),
            score=float(obj["score"]),
        )
        validate_box(pred.box)
        return pred


@dataclass
class GroundTruthInstance:
    box: Tuple[float, float, float, float]
    noun: int
    verb: int
    ttc: float

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        validate_box(self.box)
        if not self.ttc > 0:
            raise ValidationError(f"time to contact must be positive, got {self.ttc}")

    def to_json(self, image_id) -> dict:
        return {"image_id": image_id, "box": list(self.box), "noun": int(self.noun),
                "verb": int(self.verb), "ttc": float(self.ttc)}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthInstance":
        return cls(tuple(obj["box"]), int(obj["noun"]), int(obj["verb"]), float(obj["ttc"]))


def validate_box(box: Sequence[float]) -> None:
    if len(box) != 4:
        raise ValidationError(f"box needs 4 coordinates, got {box}")
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise ValidationError(f"degenerate box {tuple(box)}")
    if min(box) < 0.0 or max(box) > 1.0:
        raise ValidationError(f"box {tuple(box)} outside normalized [0, 1] coordinates")


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


class DetectionHead(Module):
    """Per-cell MLP shared across levels, conditioned on the fused class token."""

    def __init__(self, cfg: HeadConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        self.context = Linear(init, cfg.d, cfg.d)
        self.mlp = MLP(init, cfg.d, cfg.hidden, cfg.channels)
        if cfg.zero_init:
            self.mlp.fc2.weight.data[...] = 0.0

    def __call__(self, pyramid: FeaturePyramid) -> List[Tensor]:
        if len(pyramid.levels) != self.cfg.levels:
            raise ConfigurationError(f"head expects {self.cfg.levels} levels, got {len(pyramid.levels)}")
        ctx = None
        if pyramid.class_token is not None:
            c = self.context(pyramid.class_token)
            ctx = c.reshape(*c.shape[:-1], 1, 1, c.shape[-1])
        raw = []
        for level in pyramid.levels:
            feats = level if ctx is None else level + ctx
            raw.append(self.mlp(feats))
        return raw


# ----------------------------------------------------------------------
# decoding

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def decode_level(raw: np.ndarray, level: int, cfg: HeadConfig) -> List[STAPrediction]:
    """Turn one level's ``[h, w, C]`` raw outputs into per-cell predictions."""
    raw = np.asarray(raw, dtype=np.float64)
    h, w, c = raw.shape
    if c != cfg.channels:
        raise ConfigurationError(f"raw head output has {c} channels, expected {cfg.channels}")
    nn_, nv = cfg.num_nouns, cfg.num_verbs
    score = _sigmoid(raw[..., 0])
    off = np.clip(raw[..., 1:5], -_OFFSET_CLIP, _OFFSET_CLIP)
    cols = np.arange(w)[None, :]
    rows = np.arange(h)[:, None]
    cx = (cols + _sigmoid(off[..., 0])) / w
    cy = (rows + _sigmoid(off[..., 1])) / h
    bw = np.exp(off[..., 2]) / w
    bh = np.exp(off[..., 3]) / h
    x1 = np.clip(cx - bw / 2, 0.0, 1.0)
    y1 = np.clip(cy - bh / 2, 0.0, 1.0)
    x2 = np.clip(cx + bw / 2, 0.0, 1.0)
    y2 = np.clip(cy + bh / 2, 0.0, 1.0)
    nouns = _softmax(raw[..., 5:5 + nn_])
    verbs = _softmax(raw[..., 5 + nn_:5 + nn_ + nv])
    ttc = np.logaddexp(0.0, raw[..., -1]) + TTC_EPS
    out = []
    for r in range(h):
        for q in range(w):
            out.append(STAPrediction(
                box=(float(x1[r, q]), float(y1[r, q]), float(x2[r, q]), float(y2[r, q])),
                noun_probs=nouns[r, q], verb_probs=verbs[r, q], ttc=float(ttc[r, q]),
                score=float(score[r, q]), cell=(level, r, q),
            ))
    return out


def sort_key(p: STAPrediction):
    return (-p.score, p.cell if p.cell is not None else (0, 0, 0))


def nms(preds: Sequence[STAPrediction], iou_threshold: float) -> List[STAPrediction]:
    """Class-agnostic greedy NMS; a box is dropped when IoU > threshold with a kept box."""
    kept: List[STAPrediction] = []
    for p in sorted(preds, key=sort_key):
        if all(box_iou(p.box, k.box) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def decode(raw_levels: Sequence, cfg: HeadConfig) -> List[STAPrediction]:
    """Threshold, NMS and truncate the raw outputs of a single sample."""
    cands = []
    for lvl, raw in enumerate(raw_levels):
        arr = raw.data if isinstance(raw, Tensor) else raw
        cands.extend(p for p in decode_level(arr, lvl, cfg) if p.score >= cfg.score_threshold)
    return nms(cands, cfg.nms_iou)[: cfg.max_detections]


def predict(pyramid: FeaturePyramid, head: DetectionHead, cfg: Optional[HeadConfig] = None) -> List[STAPrediction]:
    cfg = cfg or head.cfg
    raw = head(pyramid)
    if raw[0].ndim != 3:
        raise ConfigurationError("predict() handles one sample; index the batch first")
    return decode(raw, cfg)


# ----------------------------------------------------------------------
# loss

def assign_cell(box: Sequence[float], h: int, w: int) -> Tuple[int, int]:
    """Row/col of the cell containing the box centre."""
    cx = 0.5 * (box[0] + box[2])
    cy = 0.5 * (box[1] + box[3])
    return min(int(cy * h), h - 1), min(int(cx * w), w - 1)


def encode_box(box: Sequence[float], row: int, col: int, h: int, w: int) -> np.ndarray:
    """Raw offsets that decode exactly to ``box`` at cell ``(row, col)``."""
    cx = 0.5 * (box[0] + box[2]) * w - col
    cy = 0.5 * (box[1] + box[3]) * h - row
    cx = np.clip(cx, 1e-9, 1 - 1e-9)
    cy = np.clip(cy, 1e-9, 1 - 1e-9)
    return np.array([
        np.log(cx / (1 - cx)),
        np.log(cy / (1 - cy)),
        np.log((box[2] - box[0]) * w),
        np.log((box[3] - box[1]) * h),
    ])


def _giou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    # pred/target: [P, 4] as x1, y1, x2, y2
    t = Tensor(target.astype(pred.dtype))
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    tx1, ty1, tx2, ty2 = (t[:, i] for i in range(4))
    zero = Tensor(np.zeros(target.shape[0], dtype=pred.dtype))
    iw = maximum(minimum(px2, tx2) - maximum(px1, tx1), zero)
    ih = maximum(minimum(py2, ty2) - maximum(py1, ty1), zero)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    hull = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    giou = inter / union - (hull - union) / hull
    return (1.0 - giou).sum()


Targets = Sequence[GroundTruthInstance]


def sta_loss(raw_levels: Sequence[Tensor], targets: Union[Targets, Sequence[Targets]], cfg: HeadConfig,
             return_terms: bool = False):
    """Detection loss summed over assigned cells, averaged over the batch.

    ``raw_levels`` are ``[h, w, C]`` (one sample, ``targets`` a list of
    instances) or ``[B, h, w, C]`` (``targets`` a list per sample).
    """
    batched = raw_levels[0].ndim == 4
    if not batched:
        raw_levels = [r.reshape(1, *r.shape) for r in raw_levels]
        targets = [targets]
    B = raw_levels[0].shape[0]
    if len(targets) != B:
        raise ValidationError(f"{len(targets)} target lists for batch of {B}")
    for sample in targets:
        for gt in sample:
            validate_box(gt.box)
            if not gt.ttc > 0:
                raise ValidationError(f"time to contact must be positive, got {gt.ttc}")

    nn_, nv = cfg.num_nouns, cfg.num_verbs
    obj_terms, pos_rows, pos_info = [], [], []
    for lvl, raw in enumerate(raw_levels):
        _, h, w, c = raw.shape
        if c != cfg.channels:
            raise ConfigurationError(f"raw head output has {c} channels, expected {cfg.channels}")
        obj_target = np.zeros((B, h, w))
        bi, ri, ci = [], [], []
        for b, sample in enumerate(targets):
            for gt in sample:
                r, q = assign_cell(gt.box, h, w)
                if obj_target[b, r, q]:
                    continue  # first target claims the cell
                obj_target[b, r, q] = 1.0
                bi.append(b), ri.append(r), ci.append(q)
                pos_info.append((gt, r, q, h, w))
        obj_terms.append(bce_with_logits(raw[..., 0], obj_target).sum())
        if bi:
            pos_rows.append(raw[np.array(bi), np.array(ri), np.array(ci)])

    obj = obj_terms[0]
    for t in obj_terms[1:]:
        obj = obj + t
    terms = {"objectness": obj}
    zero = Tensor(np.zeros((), dtype=raw_levels[0].dtype))
    if pos_rows:
        rows = concat(pos_rows, axis=0)  # [P, C]
        col = np.array([[q, r] for _, r, q, _, _ in pos_info], dtype=np.float64)
        size = np.array([[w, h] for _, _, _, h, w in pos_info], dtype=np.float64)
        dtype = rows.dtype
        centre = (sigmoid(rows[:, 1:3]) + col.astype(dtype)) / size.astype(dtype)
        extent = exp(rows[:, 3:5]) / size.astype(dtype)
        half = extent * 0.5
        pred_box = concat([centre - half, centre + half], axis=1)
        tgt_box = np.array([gt.box for gt, *_ in pos_info])
        terms["box"] = _giou_loss(pred_box, tgt_box)
        nouns = np.array([gt.noun for gt, *_ in pos_info])
        verbs = np.array([gt.verb for gt, *_ in pos_info])
        terms["noun"] = -gather_last(log_softmax(rows[:, 5:5 + nn_]), nouns).sum()
        terms["verb"] = -gather_last(log_softmax(rows[:, 5 + nn_:5 + nn_ + nv]), verbs).sum()
        ttc_gt = np.log(np.array([gt.ttc for gt, *_ in pos_info])).astype(dtype)
        ttc_pred = log(softplus(rows[:, -1]) + TTC_EPS)
        terms["ttc"] = smooth_l1(ttc_pred - Tensor(ttc_gt)).sum()
    else:
        terms.update(box=zero, noun=zero, verb=zero, ttc=zero)
    total = (
        terms["objectness"]
        + terms["box"] * cfg.lambda_box
        + terms["noun"] * cfg.lambda_noun
        + terms["verb"] * cfg.lambda_verb
        + terms["ttc"] * cfg.lambda_ttc
    ) * (1.0 / B)
    if return_terms:
        return total, {k: float(v.data) / B for k, v in terms.items()}
    return total
