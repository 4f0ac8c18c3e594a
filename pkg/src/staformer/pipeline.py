"""End-to-end model, inference pipeline, checkpoints and the toy training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .affordance import (
    AffordanceSample,
    ZoneRecord,
    bag_of_words,
    build_database,
    query_affordances,
    refine_predictions,
)
from .autodiff import Adam, Linear, Module, Tensor
from .autodiff.nn import Init
from .autodiff.serialize import load_tensor, save_tensor
from .config import PipelineConfig, config_from_dict
from .encoders import ImageEncoder, TokenSet2D, TokenSet3D, VideoEncoder
from .errors import IncompatibleCheckpointError, NumericError, ValidationError
from .fusion import (
    DualAttention,
    FeaturePyramid,
    FrameGuidedPool,
    PooledVideoTokens,
    PyramidFusion,
    RefinedTokens,
    mean_pool,
    sum_fusion,
)
from .head import DetectionHead, STAPrediction, decode, sta_loss
from .hotspot import Hotspot, predict_hotspot, reweigh_scores
from .synthetic import SyntheticScenario

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Stages:
    image: TokenSet2D
    video: Optional[TokenSet3D]
    pooled: Optional[PooledVideoTokens]
    refined: RefinedTokens
    pyramid: FeaturePyramid
    raw: List[Tensor]

    def attention_maps(self) -> List[np.ndarray]:
        maps = list(self.image.attention)
        if self.video is not None:
            maps += self.video.attention
        if self.pooled is not None:
            maps += self.pooled.attention
        return maps + self.refined.attention


class STAformer(Module):
    """Encoders -> temporal pooling -> image/video fusion -> pyramid -> head."""

    def __init__(self, cfg: PipelineConfig):
        cfg.validate()
        self.cfg = cfg
        init = Init(cfg.seed, np.dtype(cfg.dtype))
        self.image_encoder = ImageEncoder(cfg.image_encoder, init)
        self.video_encoder = self.adapter = self.pool = self.dual = None
        if cfg.use_video:
            self.video_encoder = VideoEncoder(cfg.video_encoder, init)
            if cfg.video_encoder.d != cfg.image_encoder.d:
                self.adapter = Linear(init, cfg.video_encoder.d, cfg.image_encoder.d)
            if cfg.fusion.pooling == "frame_guided":
                self.pool = FrameGuidedPool(cfg.fusion, init)
            if cfg.fusion.fusion == "dual":
                self.dual = DualAttention(cfg.fusion, init)
        self.pyramid = PyramidFusion(cfg.fusion, init, cfg.image_encoder.grid)
        self.head = DetectionHead(cfg.head, init)

    def forward(self, image, video=None) -> Stages:
        img = self.image_encoder(image)
        vid = pooled = None
        if self.video_encoder is not None:
            if video is None:
                raise ValidationError("this configuration needs video input")
            vid = self.video_encoder(video)
            if self.adapter is not None:
                vid = TokenSet3D(self.adapter(vid.tokens), self.adapter(vid.class_token), vid.attention)
            pooled = self.pool(vid) if self.pool is not None else mean_pool(vid)
        if pooled is not None and self.dual is not None:
            refined = self.dual(img, pooled)
        else:
            refined = sum_fusion(img, pooled)
        pyramid = self.pyramid(refined)
        return Stages(img, vid, pooled, refined, pyramid, self.head(pyramid))

    __call__ = forward


# ----------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/params/<name>.stat

@dataclass
class Checkpoint:
    config: PipelineConfig
    state: Dict[str, np.ndarray]
    history: List[float] = field(default_factory=list)

    def build_model(self, config: Optional[PipelineConfig] = None) -> STAformer:
        config = config or self.config
        if config.architecture() != self.config.architecture():
            raise IncompatibleCheckpointError(
                f"checkpoint (format v{CHECKPOINT_FORMAT_VERSION}) was trained with a different architecture"
            )
        model = STAformer(config)
        model.load_state_dict(self.state)
        return model


def checkpoint_from_model(model: STAformer, history: Sequence[float] = ()) -> Checkpoint:
    return Checkpoint(model.cfg.copy(), model.state_dict(), list(history))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    params = []
    for name in sorted(ckpt.state):
        fname = f"{name}.stat"
        save_tensor(path / "params" / fname, ckpt.state[name])
        params.append({"name": name, "shape": list(ckpt.state[name].shape), "file": fname})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "params": params,
        "history": [float(x) for x in ckpt.history],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format v{version} is not supported (expected v{CHECKPOINT_FORMAT_VERSION})"
        )
    state = {p["name"]: load_tensor(path / "params" / p["file"]) for p in manifest["params"]}
    return Checkpoint(config_from_dict(manifest["config"]), state, manifest.get("history", []))


# ----------------------------------------------------------------------
# inference

def _batch(scenarios: Sequence[SyntheticScenario]):
    return np.stack([s.image for s in scenarios]), np.stack([s.video for s in scenarios])


def query_embedding(stages: Stages) -> np.ndarray:
    """Video class token (image class token when the video branch is off)."""
    tok = stages.video.class_token if stages.video is not None else stages.image.class_token
    return np.asarray(tok.data, dtype=np.float64)


@dataclass
class PipelineOutput:
    predictions: List[STAPrediction]
    raw_predictions: List[STAPrediction]
    stages: Stages
    hotspot: Optional[Hotspot] = None


def run_pipeline_full(scenario: SyntheticScenario, config: PipelineConfig, model: Union[STAformer, Checkpoint],
                      affordance_db: Optional[Sequence[ZoneRecord]] = None) -> PipelineOutput:
    if isinstance(model, Checkpoint):
        model = model.build_model(config)
    elif model.cfg.architecture() != config.architecture():
        raise IncompatibleCheckpointError("model architecture does not match the pipeline config")
    stages = model(scenario.image, scenario.video)
    raw_preds = decode(stages.raw, config.head)
    preds = raw_preds
    if config.affordance.enabled:
        if not affordance_db:
            raise ValidationError("affordances enabled but no affordance database given")
        dist = query_affordances(query_embedding(stages), bag_of_words(scenario.narration),
                                 affordance_db, config.affordance)
        preds = refine_predictions(preds, dist, config.affordance.lam)
    hotspot = None
    if config.hotspot.enabled:
        hotspot = predict_hotspot(scenario.tracks, config.hotspot)
        preds = reweigh_scores(preds, hotspot, config.hotspot.gamma)
    return PipelineOutput(preds, raw_preds, stages, hotspot)


def run_pipeline(scenario: SyntheticScenario, config: PipelineConfig, checkpoint: Union[STAformer, Checkpoint],
                 affordance_db: Optional[Sequence[ZoneRecord]] = None) -> List[STAPrediction]:
    return run_pipeline_full(scenario, config, checkpoint, affordance_db).predictions


def batched_raw_predictions(model: STAformer, scenarios: Sequence[SyntheticScenario], batch_size: int = 32):
    """Head decodes plus query embeddings for many scenarios at once."""
    preds, embeddings = [], []
    for start in range(0, len(scenarios), batch_size):
        chunk = scenarios[start:start + batch_size]
        images, videos = _batch(chunk)
        stages = model(images, videos if model.video_encoder is not None else None)
        emb = query_embedding(stages)
        for i in range(len(chunk)):
            preds.append(decode([r.data[i] for r in stages.raw], model.cfg.head))
            embeddings.append(emb[i])
    return preds, embeddings


def predict_dataset(model: STAformer, scenarios: Sequence[SyntheticScenario], config: PipelineConfig,
                    affordance_db: Optional[Sequence[ZoneRecord]] = None) -> Dict[int, List[STAPrediction]]:
    """Same result as :func:`run_pipeline` per scenario, computed in batches."""
    raw, embeddings = batched_raw_predictions(model, scenarios)
    out = {}
    for s, preds, emb in zip(scenarios, raw, embeddings):
        if config.affordance.enabled:
            dist = query_affordances(emb, bag_of_words(s.narration), affordance_db, config.affordance)
            preds = refine_predictions(preds, dist, config.affordance.lam)
        if config.hotspot.enabled:
            preds = reweigh_scores(preds, predict_hotspot(s.tracks, config.hotspot), config.hotspot.gamma)
        out[s.scenario_id] = preds
    return out


def affordance_samples(model: STAformer, scenarios: Sequence[SyntheticScenario]) -> List[AffordanceSample]:
    _, embeddings = batched_raw_predictions(model, scenarios)
    return [
        AffordanceSample(emb, g.noun, g.verb, list(s.narration))
        for s, emb in zip(scenarios, embeddings)
        for g in s.gt
    ]


def build_affordance_db(model: STAformer, scenarios: Sequence[SyntheticScenario], config: PipelineConfig):
    return build_database(affordance_samples(model, scenarios), config.head.num_nouns,
                          config.head.num_verbs, config.affordance)


def dump_stages(output: PipelineOutput, path: Union[str, Path]) -> List[str]:
    """Write every intermediate tensor as a binary tensor file; returns file names."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    st = output.stages
    arrays = {
        "image_tokens": st.image.tokens,
        "image_class": st.image.class_token,
        "class_fused": st.refined.class_fused,
        "refined_image": st.refined.image,
    }
    if st.video is not None:
        arrays["video_tokens"] = st.video.tokens
        arrays["video_class"] = st.video.class_token
        arrays["pooled_tokens"] = st.pooled.tokens
        arrays["pooled_class"] = st.pooled.class_token
        arrays["refined_video"] = st.refined.video
    for i, lvl in enumerate(st.pyramid.levels):
        arrays[f"pyramid_{i}"] = lvl
    for i, raw in enumerate(st.raw):
        arrays[f"head_raw_{i}"] = raw
    if output.hotspot is not None:
        arrays["hotspot"] = output.hotspot.map
    names = []
    for name, arr in sorted(arrays.items()):
        save_tensor(path / f"{name}.stat", np.asarray(getattr(arr, "data", arr)))
        names.append(f"{name}.stat")
    preds = [p.to_json(0) for p in output.predictions]
    (path / "predictions.json").write_text(json.dumps(preds, indent=1, sort_keys=True))
    names.append("predictions.json")
    return names


# ----------------------------------------------------------------------
# training

def learning_rate(tc, step: int) -> float:
    """Linear warmup, then constant or cosine-decayed learning rate."""
    if step < tc.warmup_steps:
        return tc.lr * (step + 1) / tc.warmup_steps
    if tc.schedule == "cosine":
        span = max(tc.steps - tc.warmup_steps, 1)
        return 0.5 * tc.lr * (1.0 + np.cos(np.pi * (step - tc.warmup_steps) / span))
    return tc.lr


def train_toy(dataset: Sequence[SyntheticScenario], config: PipelineConfig,
              model: Optional[STAformer] = None) -> Checkpoint:
    """Adam on the detection loss with seeded minibatch shuffling."""
    if not dataset:
        raise ValidationError("training set is empty")
    model = model or STAformer(config)
    tc = config.train
    opt = Adam(model.parameters(), lr=tc.lr, grad_clip=tc.grad_clip)
    rng = np.random.default_rng(tc.seed)
    bs = min(tc.batch_size, len(dataset))
    order = rng.permutation(len(dataset))
    cursor = 0
    history = []
    for step in range(tc.steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        batch = [dataset[i] for i in order[cursor:cursor + bs]]
        cursor += bs
        images, videos = _batch(batch)
        stages = model(images, videos if config.use_video else None)
        loss = sta_loss(stages.raw, [s.gt for s in batch], config.head)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"loss diverged to {value} at step {step} (lr={tc.lr})")
        opt.zero_grad()
        loss.backward()
        opt.lr = learning_rate(tc, step)
        opt.step()
        history.append(value)
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d loss %.4f", step, value)
    return checkpoint_from_model(model, history)
