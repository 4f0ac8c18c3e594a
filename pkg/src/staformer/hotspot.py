"""Interaction hotspots from hand/object tracks and score re-weighting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ValidationError

Point = Tuple[float, float]


@dataclass
class HotspotConfig:
    enabled: bool = False
    gamma: float = 0.5
    sigma: float = 0.1
    height: int = 16
    width: int = 16
    horizon: float = 1.0
    object_weight: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.sigma <= 0 or self.height < 1 or self.width < 1:
            raise ConfigurationError("sigma and map size must be positive")


@dataclass
class TrackFrame:
    """Detections in one frame; ``None`` marks an absent hand/object slot."""

    hands: List[Optional[Point]] = field(default_factory=list)
    objects: List[Optional[Point]] = field(default_factory=list)


@dataclass
class HandObjectTracks:
    frames: List[TrackFrame] = field(default_factory=list)

    def validate(self) -> None:
        for f in self.frames:
            for p in list(f.hands) + list(f.objects):
                if p is None:
                    continue
                if len(p) != 2 or not all(0.0 <= float(c) <= 1.0 for c in p):
                    raise ValidationError(f"track coordinate {p} outside [0, 1]")

    def to_json(self) -> dict:
        def enc(points):
            return [None if p is None else [float(p[0]), float(p[1])] for p in points]

        return {"frames": [{"hands": enc(f.hands), "objects": enc(f.objects)} for f in self.frames]}

    @classmethod
    def from_json(cls, obj: dict) -> "HandObjectTracks":
        def dec(points):
            return [None if p is None else (float(p[0]), float(p[1])) for p in points]

        tracks = cls([TrackFrame(dec(f.get("hands", [])), dec(f.get("objects", []))) for f in obj["frames"]])
        tracks.validate()
        return tracks


@dataclass
class Hotspot:
    map: np.ndarray  # [H_h, W_h], values in [0, 1]

    def sample(self, x: float, y: float) -> float:
        """Bilinear lookup at normalized image coordinates (cell centres at (i+0.5)/n)."""
        h, w = self.map.shape
        u = min(max(x * w - 0.5, 0.0), w - 1.0)
        v = min(max(y * h - 0.5, 0.0), h - 1.0)
        c0, r0 = int(np.floor(u)), int(np.floor(v))
        c1, r1 = min(c0 + 1, w - 1), min(r0 + 1, h - 1)
        fu, fv = u - c0, v - r0
        m = self.map
        # lerp form keeps constant neighbourhoods exact
        top = m[r0, c0] + fu * (m[r0, c1] - m[r0, c0])
        bottom = m[r1, c0] + fu * (m[r1, c1] - m[r1, c0])
        return float(top + fv * (bottom - top))


def _track_points(frames: Sequence[TrackFrame], attr: str) -> List[List[Point]]:
    """Observed positions per slot index, in frame order."""
    slots: List[List[Point]] = []
    for f in frames:
        for i, p in enumerate(getattr(f, attr)):
            while len(slots) <= i:
                slots.append([])
            if p is not None:
                slots[i].append((float(p[0]), float(p[1])))
    return [s for s in slots if s]


def kernel_centres(tracks: HandObjectTracks, cfg: HotspotConfig) -> List[Tuple[float, float, float]]:
    """``(x, y, weight)`` for each extrapolated hand and last-seen object."""
    centres = []
    for obs in _track_points(tracks.frames, "hands"):
        x, y = obs[-1]
        if len(obs) >= 2:
            px, py = obs[-2]
            x, y = x + cfg.horizon * (x - px), y + cfg.horizon * (y - py)
        centres.append((x, y, 1.0))
    for obs in _track_points(tracks.frames, "objects"):
        centres.append((obs[-1][0], obs[-1][1], cfg.object_weight))
    return centres


def predict_hotspot(tracks: HandObjectTracks, cfg: HotspotConfig) -> Hotspot:
    """Max-normalised sum of Gaussian kernels on the last-frame grid."""
    cfg.validate()
    tracks.validate()
    centres = kernel_centres(tracks, cfg)
    if not centres:
        return Hotspot(np.ones((cfg.height, cfg.width)))
    ys = (np.arange(cfg.height) + 0.5) / cfg.height
    xs = (np.arange(cfg.width) + 0.5) / cfg.width
    gx, gy = np.meshgrid(xs, ys)
    acc = np.zeros((cfg.height, cfg.width))
    for cx, cy, wt in centres:
        acc += wt * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * cfg.sigma ** 2))
    peak = acc.max()
    if peak <= 0:  # every kernel underflowed far off-grid
        return Hotspot(np.ones((cfg.height, cfg.width)))
    return Hotspot(acc / peak)


def reweigh_scores(preds, hotspot: Hotspot, gamma: float):
    """``s' = s * (gamma + (1 - gamma) * H(box centre))``, re-sorted by ``s'``."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    out = []
    for p in preds:
        cx = 0.5 * (p.box[0] + p.box[2])
        cy = 0.5 * (p.box[1] + p.box[3])
        # == gamma + (1 - gamma) * H, written so H == 1 or gamma == 1 is exact
        factor = 1.0 - (1.0 - gamma) * (1.0 - hotspot.sample(cx, cy))
        out.append(p.replace(score=p.score * factor))
    # stable sort keeps the incoming order among equal scores
    return sorted(out, key=lambda p: -p.score)
