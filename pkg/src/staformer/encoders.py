"""Small trainable image and video encoders with a fixed token contract.

The image encoder is a plain ViT: patch embedding, learned 2D positional
embedding, a class token and ``depth`` pre-norm self-attention blocks.
The video encoder uses divided space-time attention: temporal attention
across frames at each spatial index, then spatial attention inside each
frame together with the class token, whose per-frame outputs are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .attention import MultiHeadAttention, TransformerBlock
from .autodiff import LayerNorm, Linear, MLP, Module, Tensor, broadcast_to, concat
from .autodiff.nn import Init
from .errors import ConfigurationError

TRAINABLE_MODES = ("all", "last_block", "frozen")


@dataclass
class ImageEncoderConfig:
    height: int = 64
    width: int = 64
    patch: int = 8
    d: int = 32
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 2
    trainable: str = "all"

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    def validate(self) -> None:
        _validate_common(self)


@dataclass
class VideoEncoderConfig:
    frames: int = 4
    height: int = 32
    width: int = 32
    patch: int = 8
    d: int = 32
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 2
    trainable: str = "all"

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    def validate(self) -> None:
        _validate_common(self)
        if self.frames < 1:
            raise ConfigurationError(f"frames must be >= 1, got {self.frames}")


def _validate_common(cfg) -> None:
    if cfg.patch < 1 or cfg.height % cfg.patch or cfg.width % cfg.patch:
        raise ConfigurationError(
            f"image size {cfg.height}x{cfg.width} is not divisible by patch size {cfg.patch}"
        )
    if cfg.heads < 1 or cfg.d % cfg.heads:
        raise ConfigurationError(f"heads={cfg.heads} must divide d={cfg.d}")
    if cfg.depth < 0:
        raise ConfigurationError("depth must be >= 0")
    if cfg.trainable not in TRAINABLE_MODES:
        raise ConfigurationError(f"trainable must be one of {TRAINABLE_MODES}, got {cfg.trainable!r}")


@dataclass
class TokenSet2D:
    """Token grid ``[..., H, W, d]`` plus class token ``[..., d]``."""

    tokens: Tensor
    class_token: Tensor
    attention: List[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class TokenSet3D:
    """Token grid ``[..., t, H, W, d]`` plus class token ``[..., d]``."""

    tokens: Tensor
    class_token: Tensor
    attention: List[np.ndarray] = field(default_factory=list, repr=False)


def patchify(pixels: Tensor, patch: int) -> Tensor:
    """``[..., h, w, c]`` -> ``[..., (h/p)*(w/p), p*p*c]`` in row-major patch order."""
    *lead, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"input {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    k = len(lead)
    x = pixels.reshape(*lead, gh, patch, gw, patch, c)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def _expand_class(cls: Tensor, lead) -> Tensor:
    # [d] -> [*lead, 1, d]
    return broadcast_to(cls.reshape(*([1] * (len(lead) + 1)), cls.shape[-1]), (*lead, 1, cls.shape[-1]))


def _apply_trainable(blocks, module: Module, mode: str, final_norm: Module) -> None:
    if mode == "all":
        return
    module.set_trainable(False)
    if mode == "last_block" and blocks:
        blocks[-1].set_trainable(True)
        final_norm.set_trainable(True)


def _as_pixels(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class ImageEncoder(Module):
    def __init__(self, cfg: ImageEncoderConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        gh, gw = cfg.grid
        self.embed = Linear(init, cfg.patch * cfg.patch * 3, cfg.d)
        self.pos = init((gh * gw, cfg.d))
        self.cls = init((cfg.d,))
        self.blocks = [TransformerBlock(init, cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(init, cfg.d)
        _apply_trainable(self.blocks, self, cfg.trainable, self.norm)

    def __call__(self, pixels) -> TokenSet2D:
        cfg = self.cfg
        pixels = _as_pixels(pixels, self.pos.dtype)
        if pixels.ndim < 3 or pixels.shape[-3:] != (cfg.height, cfg.width, 3):
            raise ConfigurationError(
                f"image encoder expects [..., {cfg.height}, {cfg.width}, 3], got {pixels.shape}"
            )
        lead = pixels.shape[:-3]
        x = self.embed(patchify(pixels, cfg.patch)) + self.pos
        seq = concat([_expand_class(self.cls, lead), x], axis=-2)
        attention = []
        for block in self.blocks:
            seq, w = block(seq)
            attention.append(w)
        seq = self.norm(seq)
        gh, gw = cfg.grid
        tokens = seq[..., 1:, :].reshape(*lead, gh, gw, cfg.d)
        return TokenSet2D(tokens, seq[..., 0, :], attention)


class DividedSpaceTimeBlock(Module):
    """Temporal attention, then spatial attention with the class token, then MLP."""

    def __init__(self, init: Init, d: int, heads: int, mlp_ratio: int = 2):
        self.norm_t = LayerNorm(init, d)
        self.attn_t = MultiHeadAttention(init, d, heads)
        self.norm_s = LayerNorm(init, d)
        self.attn_s = MultiHeadAttention(init, d, heads)
        self.norm2 = LayerNorm(init, d)
        self.mlp = MLP(init, d, mlp_ratio * d)

    def __call__(self, x: Tensor, cls: Tensor, time_pos: Tensor):
        # x: [..., t, N, d]; cls: [..., d]; time_pos: [t, d] (enters queries/keys only)
        *lead, t, n, d = x.shape
        k = len(lead)
        xt = x.swapaxes(k, k + 1)  # [..., N, t, d]
        h = self.norm_t(xt)
        hq = h + time_pos
        upd, w_t = self.attn_t(hq, hq, h)
        x = (xt + upd).swapaxes(k, k + 1)

        cls_frames = broadcast_to(cls.reshape(*lead, 1, 1, d), (*lead, t, 1, d))
        seq = concat([cls_frames, x], axis=-2)  # [..., t, 1+N, d]
        h = self.norm_s(seq)
        upd, w_s = self.attn_s(h, h)
        seq = seq + upd
        cls = seq[..., 0, :].mean(axis=-2)
        x = seq[..., 1:, :]

        x = x + self.mlp(self.norm2(x))
        cls = cls + self.mlp(self.norm2(cls))
        return x, cls, (w_t, w_s)


class VideoEncoder(Module):
    def __init__(self, cfg: VideoEncoderConfig, init: Init):
        cfg.validate()
        self.cfg = cfg
        gh, gw = cfg.grid
        self.embed = Linear(init, cfg.patch * cfg.patch * 3, cfg.d)
        self.space_pos = init((gh * gw, cfg.d))
        self.time_pos = init((cfg.frames, cfg.d))
        self.cls = init((cfg.d,))
        self.blocks = [DividedSpaceTimeBlock(init, cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(init, cfg.d)
        _apply_trainable(self.blocks, self, cfg.trainable, self.norm)

    def __call__(self, frames) -> TokenSet3D:
        cfg = self.cfg
        frames = _as_pixels(frames, self.cls.dtype)
        if frames.ndim < 4 or frames.shape[-3:] != (cfg.height, cfg.width, 3):
            raise ConfigurationError(
                f"video encoder expects [..., t, {cfg.height}, {cfg.width}, 3], got {frames.shape}"
            )
        t = frames.shape[-4]
        if not 1 <= t <= cfg.frames:
            raise ConfigurationError(f"video has {t} frames; encoder supports 1..{cfg.frames}")
        lead = frames.shape[:-4]
        x = self.embed(patchify(frames, cfg.patch)) + self.space_pos  # [..., t, N, d]
        cls = broadcast_to(self.cls.reshape(*([1] * len(lead)), cfg.d), (*lead, cfg.d))
        time_pos = self.time_pos[:t]
        attention = []
        for block in self.blocks:
            x, cls, weights = block(x, cls, time_pos)
            attention.extend(weights)
        x = self.norm(x)
        cls = self.norm(cls)
        gh, gw = cfg.grid
        return TokenSet3D(x.reshape(*lead, t, gh, gw, cfg.d), cls, attention)
