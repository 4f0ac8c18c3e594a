"""Image/video fusion blocks.

* :class:`FrameGuidedPool` compresses a spatio-temporal token grid onto the
  last frame: last-frame tokens (plus the video class token) query every
  video token through residual cross-attention.
* :class:`DualAttention` refines image tokens with pooled video tokens and
  vice versa, with independent parameters per direction.
* :class:`PyramidFusion` resizes both refined grids to every pyramid level,
  sums them and applies one shared 3x3 convolution.

``mean_pool`` and ``sum_fusion`` are the parameter-free baselines used by
the ablation ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .attention import CrossAttentionBlock
from .autodiff import Module, Tensor, bilinear_resize, broadcast_to, concat, conv2d_3x3
from .autodiff.nn import Init
from .encoders import TokenSet2D, TokenSet3D
from .errors import ConfigurationError, DimensionError

POOLING_MODES = ("frame_guided", "mean")
FUSION_MODES = ("dual", "sum")


@dataclass
class FusionConfig:
    d: int = 32
    heads: int = 4
    use_multi_head: bool = True
    temporal_pos_embed: bool = True
    pyramid_levels: int = 3
    frames: int = 4
    pooling: str = "frame_guided"
    fusion: str = "dual"
    zero_init_out: bool = False

    @property
    def effective_heads(self) -> int:
        return self.heads if self.use_multi_head else 1

    def validate(self) -> None:
        if self.d % self.effective_heads:
            raise ConfigurationError(f"heads={self.effective_heads} must divide d={self.d}")
        if self.pyramid_levels < 1:
            raise ConfigurationError("pyramid_levels must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(f"pooling must be one of {POOLING_MODES}")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}")


@dataclass
class PooledVideoTokens:
    tokens: Tensor  # [..., H_v, W_v, d]
    class_token: Tensor  # [..., d]
    attention: List[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class RefinedTokens:
    image: Tensor
    video: Optional[Tensor]
    class_image: Tensor
    class_video: Optional[Tensor]
    class_fused: Tensor
    attention: List[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class FeaturePyramid:
    levels: List[Tensor]
    class_token: Optional[Tensor] = None


def _with_class(tokens: Tensor, cls: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
    # [..., H, W, d] + [..., d] -> [..., 1 + H*W, d]
    *lead, h, w, d = tokens.shape
    seq = tokens.reshape(*lead, h * w, d)
    return concat([cls.reshape(*lead, 1, d), seq], axis=-2), (h, w)


def _split_class(seq: Tensor, grid: Tuple[int, int]) -> Tuple[Tensor, Tensor]:
    *lead, _, d = seq.shape
    return seq[..., 1:, :].reshape(*lead, *grid, d), seq[..., 0, :]


class FrameGuidedPool(Module):
    """Residual cross-attention from last-frame tokens onto all video tokens."""

    def __init__(self, cfg: FusionConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        self.block = CrossAttentionBlock(init, cfg.d, cfg.effective_heads, zero_out=cfg.zero_init_out)
        self.time_pos = init((cfg.frames, cfg.d)) if cfg.temporal_pos_embed else None

    def __call__(self, video: TokenSet3D) -> PooledVideoTokens:
        tokens, cls = video.tokens, video.class_token
        *lead, t, h, w, d = tokens.shape
        if t < 1:
            raise DimensionError("frame_guided_pool needs at least one frame")
        if d != self.cfg.d:
            raise DimensionError(f"video width {d} != fusion width {self.cfg.d}")
        query, grid = _with_class(tokens[..., t - 1, :, :, :], cls)
        frames = tokens.reshape(*lead, t * h * w, d)
        context = concat([cls.reshape(*lead, 1, d), frames], axis=-2)
        key_offset = None
        if self.time_pos is not None:
            if t > self.cfg.frames:
                raise ConfigurationError(f"{t} frames exceed temporal embedding size {self.cfg.frames}")
            per_frame = broadcast_to(self.time_pos[:t].reshape(t, 1, d), (t, h * w, d)).reshape(t * h * w, d)
            zero = Tensor(np.zeros((1, d), dtype=per_frame.dtype))
            key_offset = concat([zero, per_frame], axis=0)
        out, weights = self.block(query, context, key_offset)
        pooled, pooled_cls = _split_class(out, grid)
        return PooledVideoTokens(pooled, pooled_cls, [weights])


def mean_pool(video: TokenSet3D) -> PooledVideoTokens:
    """Parameter-free temporal average (ablation baseline)."""
    return PooledVideoTokens(video.tokens.mean(axis=-4), video.class_token)


class DualAttention(Module):
    """Image-guided and video-guided residual cross-attention."""

    def __init__(self, cfg: FusionConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        heads = cfg.effective_heads
        self.image_guided = CrossAttentionBlock(init, cfg.d, heads, zero_out=cfg.zero_init_out)
        self.video_guided = CrossAttentionBlock(init, cfg.d, heads, zero_out=cfg.zero_init_out)

    def __call__(self, image: TokenSet2D, pooled: PooledVideoTokens) -> RefinedTokens:
        if image.tokens.shape[-1] != pooled.tokens.shape[-1]:
            raise DimensionError(
                f"token widths differ: image {image.tokens.shape} vs video {pooled.tokens.shape}"
            )
        img_seq, img_grid = _with_class(image.tokens, image.class_token)
        vid_seq, vid_grid = _with_class(pooled.tokens, pooled.class_token)
        img_out, w_img = self.image_guided(img_seq, vid_seq)
        vid_out, w_vid = self.video_guided(vid_seq, img_seq)
        img_tokens, img_cls = _split_class(img_out, img_grid)
        vid_tokens, vid_cls = _split_class(vid_out, vid_grid)
        return RefinedTokens(img_tokens, vid_tokens, img_cls, vid_cls, img_cls + vid_cls, [w_img, w_vid])


def sum_fusion(image: TokenSet2D, pooled: Optional[PooledVideoTokens]) -> RefinedTokens:
    """No cross-modal refinement; class tokens are still summed."""
    if pooled is None:
        return RefinedTokens(image.tokens, None, image.class_token, None, image.class_token)
    return RefinedTokens(
        image.tokens, pooled.tokens, image.class_token, pooled.class_token,
        image.class_token + pooled.class_token,
    )


def pyramid_shapes(grid: Tuple[int, int], levels: int) -> List[Tuple[int, int]]:
    """Level resolutions at scale 1, 1/2, 1/4, ... of the image token grid."""
    h, w = grid
    shapes = []
    for lvl in range(levels):
        s = 2 ** lvl
        shapes.append((max(1, h // s), max(1, w // s)))
    for a, b in zip(shapes, shapes[1:]):
        if not (b[0] <= a[0] and b[1] <= a[1] and b != a):
            raise ConfigurationError(f"grid {grid} too small for {levels} strictly decreasing levels")
    return shapes


class PyramidFusion(Module):
    """Resize both modalities per level, add, then a level-shared 3x3 conv."""

    def __init__(self, cfg: FusionConfig, init: Init, grid: Tuple[int, int]):
        cfg.validate()
        self.cfg = cfg
        self.shapes = pyramid_shapes(grid, cfg.pyramid_levels)
        self.weight = init((3, 3, cfg.d, cfg.d), "identity")
        self.bias = init((cfg.d,), "zeros")

    def __call__(self, refined: RefinedTokens) -> FeaturePyramid:
        levels = []
        for h, w in self.shapes:
            x = bilinear_resize(refined.image, h, w)
            if refined.video is not None:
                x = x + bilinear_resize(refined.video, h, w)
            levels.append(conv2d_3x3(x, self.weight, self.bias))
        return FeaturePyramid(levels, refined.class_fused)
