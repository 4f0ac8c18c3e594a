"""Synthetic egocentric interaction scenarios.

Each scenario is a short clip on a scene-tinted background with 1-3 coloured
rectangles (the noun is the colour and its shade) and a white "hand" dot.
One rectangle is the next-active object: the hand swings across it and
sits on it in the last frame. The verb is the direction of the final
stroke, so it can be read neither from the last frame nor from the
unordered set of frames. Every scene affords one shade per colour pair,
which gives the affordance memory something to learn, and the hand track
plus active object give the hotspot a real signal; the remaining
rectangles act as off-hotspot false-positive bait.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .autodiff.serialize import load_tensor, save_tensor
from .errors import ConfigurationError, ValidationError
from .head import GroundTruthInstance
from .hotspot import HandObjectTracks, TrackFrame

DATASET_FORMAT_VERSION = 1

BASE_COLOURS = np.array([
    [0.95, 0.15, 0.15],
    [0.15, 0.90, 0.20],
    [0.20, 0.35, 1.00],
    [0.95, 0.90, 0.15],
    [0.90, 0.20, 0.90],
    [0.15, 0.90, 0.90],
])
SHADE_SCALE = (1.0, 0.72)
BACKGROUNDS = np.array([
    [0.10, 0.10, 0.12],
    [0.30, 0.22, 0.12],
    [0.12, 0.28, 0.16],
    [0.26, 0.12, 0.28],
    [0.12, 0.20, 0.32],
    [0.32, 0.30, 0.14],
    [0.20, 0.20, 0.20],
    [0.34, 0.14, 0.14],
])
VERB_NAMES = ("static", "move_right", "move_left", "move_up", "move_down")
VERB_DIRECTIONS = ((0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, -1.0), (0.0, 1.0))
FILLER_WORDS = ("person", "hand", "reach", "look", "table", "surface", "near", "item", "then", "slowly")
HAND_COLOUR = np.array([1.0, 1.0, 1.0])


@dataclass
class DatasetSpec:
    num_nouns: int = 6
    num_verbs: int = 4
    num_scenes: int = 4
    num_scenarios: int = 64
    frames: int = 4
    video_size: int = 32
    image_size: int = 64
    max_objects: int = 3
    speed: float = 6.0
    noise: float = 0.03
    min_side: int = 6
    max_side: int = 9

    def validate(self) -> None:
        if not 1 <= self.num_nouns <= len(BASE_COLOURS) * len(SHADE_SCALE):
            raise ConfigurationError(
                f"num_nouns={self.num_nouns} exceeds the {len(BASE_COLOURS) * len(SHADE_SCALE)} distinguishable shapes"
            )
        if not 1 <= self.num_verbs <= len(VERB_NAMES):
            raise ConfigurationError(f"num_verbs={self.num_verbs} exceeds the {len(VERB_NAMES)} motion patterns")
        if not 1 <= self.num_scenes <= len(BACKGROUNDS):
            raise ConfigurationError(f"num_scenes must be in 1..{len(BACKGROUNDS)}")
        if self.image_size % self.video_size:
            raise ConfigurationError("image_size must be a multiple of video_size")
        if self.frames < 2:
            raise ConfigurationError("at least two frames are needed to plant motion")
        if self.max_objects < 1 or self.min_side > self.max_side:
            raise ConfigurationError("invalid object settings")


@dataclass
class SyntheticScenario:
    scenario_id: int
    scene_id: int
    video: np.ndarray  # [t, h_f, w_f, 3] float32
    image: np.ndarray  # [h_s, w_s, 3] float32
    tracks: HandObjectTracks
    gt: List[GroundTruthInstance]
    narration: List[str] = field(default_factory=list)


def noun_colour(noun: int) -> np.ndarray:
    return BASE_COLOURS[noun // 2] * SHADE_SCALE[noun % 2]


def scene_nouns(scene: int, num_nouns: int) -> List[int]:
    """Nouns afforded by a scene: one shade from each colour pair.

    The shade bits follow an even-parity code, so over the first
    ``2**(pairs-1)`` scenes every noun is afforded equally often.
    """
    pairs = (num_nouns + 1) // 2
    bits = [(scene >> k) & 1 for k in range(max(pairs - 1, 0))]
    bits.append(sum(bits) % 2)
    out = []
    for k in range(pairs):
        n = 2 * k + bits[k]
        out.append(n if n < num_nouns else 2 * k)
    return out


def scene_words(scene: int) -> List[str]:
    return [f"scene{scene}_{w}" for w in ("place", "tool", "zone")]


def _swing_offset(steps_back: int) -> float:
    """Hand offset, in units of the verb velocity, ``steps_back`` frames before the end.

    The hand swings across the object and returns: ..., +1, 0, -1, 0. Over
    four frames the visited positions are the same for opposite directions,
    so only their order tells left from right.
    """
    return (0.0, -1.0, 0.0, 1.0)[steps_back % 4]


def _place(rng, centres, min_dist, lo, hi, avoid=(), avoid_dist=0.0, tries=100):
    for _ in range(tries):
        c = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(c - o)) >= min_dist for o in centres) and all(
            np.hypot(*(c - a)) >= avoid_dist for a in avoid
        ):
            return c
    return None


def _draw_rect(frame, centre, size, colour):
    h, w = frame.shape[:2]
    x0 = int(round(centre[0] - size[0] / 2))
    y0 = int(round(centre[1] - size[1] / 2))
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x0 + size[0]), min(h, y0 + size[1])
    frame[y0:y1, x0:x1] = colour
    return x0, y0, x1, y1


def generate_scenario(spec: DatasetSpec, rng: np.random.Generator, scenario_id: int) -> SyntheticScenario:
    S, t = spec.video_size, spec.frames
    scene = int(rng.integers(spec.num_scenes))
    afforded = scene_nouns(scene, spec.num_nouns)
    n_obj = int(rng.integers(1, spec.max_objects + 1))
    active_noun = int(rng.choice(afforded))
    verb = int(rng.integers(spec.num_verbs))
    velocity = np.array(VERB_DIRECTIONS[verb]) * spec.speed

    margin = spec.max_side / 2 + 1
    while True:
        centre = rng.uniform(margin, S - margin, size=2)
        hand_last = centre + rng.uniform(-1.5, 1.5, size=2)
        trail = [hand_last + _swing_offset(t - 1 - k) * velocity for k in range(t)]
        if all(2.0 <= c <= S - 3.0 for p in trail for c in p):
            break
    size = rng.integers(spec.min_side, spec.max_side + 1, size=2)

    objects = [(active_noun, centre, size)]
    for _ in range(n_obj - 1):
        c = _place(rng, [o[1] for o in objects], 12.0, margin, S - margin, avoid=trail, avoid_dist=7.0)
        if c is None:
            continue
        objects.append((int(rng.choice(afforded)), c, rng.integers(spec.min_side, spec.max_side + 1, size=2)))

    hand_px = [np.clip(np.round(p).astype(int), 1, S - 2) for p in trail]
    frames = np.empty((t, S, S, 3), dtype=np.float64)
    active_extent = None
    for k in range(t):
        frame = np.empty((S, S, 3))
        frame[...] = BACKGROUNDS[scene]
        for i, (noun, c, sz) in enumerate(objects):
            ext = _draw_rect(frame, c, sz, noun_colour(noun))
            if i == 0 and k == t - 1:
                active_extent = ext
        hx, hy = hand_px[k]
        frame[hy - 1:hy + 2, hx - 1:hx + 2] = HAND_COLOUR
        frame += rng.normal(0.0, spec.noise, size=frame.shape)
        frames[k] = np.clip(frame, 0.0, 1.0)
    video = frames.astype(np.float32)
    scale = spec.image_size // S
    image = np.repeat(np.repeat(video[-1], scale, axis=0), scale, axis=1)

    x0, y0, x1, y1 = active_extent
    box = (x0 / S, y0 / S, x1 / S, y1 / S)
    obj_centre = ((x0 + x1) / 2, (y0 + y1) / 2)
    hand_centres = [((p[0] + 0.5) / S, (p[1] + 0.5) / S) for p in hand_px]
    dist = float(np.hypot(hand_px[-1][0] + 0.5 - obj_centre[0], hand_px[-1][1] + 0.5 - obj_centre[1]))
    ttc = 0.25 + 0.5 * dist / (spec.speed * (verb != 0) + 1.0)
    tracks = HandObjectTracks([
        TrackFrame(hands=[hand_centres[k]], objects=[(obj_centre[0] / S, obj_centre[1] / S)])
        for k in range(t)
    ])
    words = scene_words(scene)
    narration = [words[i] for i in sorted(rng.choice(len(words), size=2, replace=False))]
    narration += [FILLER_WORDS[i] for i in rng.choice(len(FILLER_WORDS), size=2, replace=False)]
    return SyntheticScenario(
        scenario_id=scenario_id,
        scene_id=scene,
        video=video,
        image=image,
        tracks=tracks,
        gt=[GroundTruthInstance(box, active_noun, verb, ttc)],
        narration=narration,
    )


def generate_dataset(spec: DatasetSpec, seed: int) -> List[SyntheticScenario]:
    """Deterministic list of ``spec.num_scenarios`` scenarios."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return [generate_scenario(spec, rng, i) for i in range(spec.num_scenarios)]


# ----------------------------------------------------------------------
# persistence: manifest.json, videos.stat, images.stat, gt.json, tracks.json

def save_dataset(scenarios: Sequence[SyntheticScenario], path: Union[str, Path], spec: DatasetSpec,
                 seed: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": asdict(spec),
        "seed": seed,
        "scenarios": [
            {"scenario_id": s.scenario_id, "scene_id": s.scene_id, "narration": s.narration}
            for s in scenarios
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    save_tensor(path / "videos.stat", np.stack([s.video for s in scenarios]))
    save_tensor(path / "images.stat", np.stack([s.image for s in scenarios]))
    gt = [g.to_json(s.scenario_id) for s in scenarios for g in s.gt]
    (path / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
    tracks = {str(s.scenario_id): s.tracks.to_json() for s in scenarios}
    (path / "tracks.json").write_text(json.dumps(tracks, indent=1, sort_keys=True))


def load_dataset(path: Union[str, Path]) -> Tuple[List[SyntheticScenario], DatasetSpec, int]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValidationError(f"unsupported dataset version {manifest.get('format_version')}")
    videos = load_tensor(path / "videos.stat")
    images = load_tensor(path / "images.stat")
    gt_items = json.loads((path / "gt.json").read_text())
    tracks = json.loads((path / "tracks.json").read_text())
    by_id = {}
    for item in gt_items:
        by_id.setdefault(item["image_id"], []).append(GroundTruthInstance.from_json(item))
    scenarios = []
    for i, meta in enumerate(manifest["scenarios"]):
        sid = meta["scenario_id"]
        scenarios.append(SyntheticScenario(
            scenario_id=sid,
            scene_id=meta["scene_id"],
            video=videos[i].copy(),
            image=images[i].copy(),
            tracks=HandObjectTracks.from_json(tracks[str(sid)]),
            gt=by_id.get(sid, []),
            narration=list(meta["narration"]),
        ))
    return scenarios, DatasetSpec(**manifest["spec"]), manifest["seed"]
