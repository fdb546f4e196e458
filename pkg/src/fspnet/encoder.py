"""Patch serialization and the pre-norm transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .nn import LayerNorm, Linear, Module, init_parameter
from .tensor import ShapeError, Tensor, matmul, reshape, transpose


@dataclass
class EncoderConfig:
    image_c: int = 3
    image_h: int = 96
    image_w: int = 96
    patch_size: int = 16
    embed_dim: int = 32
    num_layers: int = 12
    num_heads: int = 2
    mlp_ratio: float = 4.0
    terminal_norm: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def seq_len(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_c

    def validate(self) -> None:
        for key in ("image_c", "image_h", "image_w", "patch_size", "embed_dim", "num_layers", "num_heads"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} must divide image size {self.image_h}x{self.image_w}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")


@dataclass
class TokenSequence:
    """(B, l, c) tokens plus the patch grid they came from."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"token tensor {self.tokens.shape} does not match grid {self.grid_h}x{self.grid_w}"
            )

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.grid_h, self.grid_w)


def patchify(image: Tensor, s: int) -> tuple[Tensor, int, int]:
    """(B, C, H, W) -> (B, l, s*s*C) raw patches, row-major over the grid.

    Each patch is flattened channel-major: index = ch*s*s + row*s + col.
    """
    if image.ndim != 4:
        raise ShapeError(f"expected a (B, C, H, W) image batch, got {image.shape}")
    b, c, h, w = image.shape
    if h % s or w % s:
        raise ShapeError(f"patch size {s} does not divide image size {h}x{w}")
    gh, gw = h // s, w // s
    x = reshape(image, (b, c, gh, s, gw, s))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, gh * gw, c * s * s)), gh, gw


def unpatchify(patches: Tensor, grid_h: int, grid_w: int, s: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = patches.shape[0]
    x = reshape(patches, (b, grid_h, grid_w, channels, s, s))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (b, channels, grid_h * s, grid_w * s))


def serialize_patches(image: Tensor, s: int, projection: Linear) -> TokenSequence:
    patches, gh, gw = patchify(image, s)
    return TokenSequence(projection(patches), gh, gw)


def add_positional(seq: TokenSequence, table: Tensor) -> TokenSequence:
    if seq.tokens.shape[1:] != table.shape:
        raise ShapeError(f"positional table {table.shape} does not match tokens {seq.tokens.shape[1:]}")
    return seq.with_tokens(seq.tokens + table)


def deserialize(seq: TokenSequence) -> Tensor:
    """(B, l, c) tokens -> (B, c, grid_h, grid_w) feature map, row-major token order."""
    b, _, c = seq.tokens.shape
    x = transpose(seq.tokens, (0, 2, 1))
    return reshape(x, (b, c, seq.grid_h, seq.grid_w))


class MultiHeadSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        b, l, c = x.shape
        dh = c // self.heads
        qkv = reshape(self.qkv(x), (b, l, 3, self.heads, dh))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))  # 3, B, heads, l, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = matmul(attn, v)  # B, heads, l, dh
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, l, c))
        return self.proj(out)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, dim: int, ratio: float):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """y = x + MSA(LN(x)); out = y + MLP(LN(y))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        y = x + self.attn(self.norm1(x))
        return seq.with_tokens(y + self.mlp(self.norm2(y)))


class Encoder(Module):
    """Serializes an image and returns the output of every transformer layer."""

    def __init__(self, rng: np.random.Generator, config: EncoderConfig):
        config.validate()
        self.config = config
        c = config.embed_dim
        self.patch_embed = Linear(rng, config.patch_dim, c)
        self.pos_embed = init_parameter(rng, (config.seq_len, c), "trunc_normal")
        self.layers = [
            TransformerLayer(rng, c, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers)
        ]
        self.final_norm = LayerNorm(c) if config.terminal_norm else None

    def embed(self, image: Tensor) -> TokenSequence:
        cfg = self.config
        if image.shape[1:] != (cfg.image_c, cfg.image_h, cfg.image_w):
            raise ShapeError(
                f"image {image.shape[1:]} does not match encoder input "
                f"{(cfg.image_c, cfg.image_h, cfg.image_w)}"
            )
        seq = serialize_patches(image, cfg.patch_size, self.patch_embed)
        return add_positional(seq, self.pos_embed)

    def forward(self, image: Tensor) -> list[TokenSequence]:
        seq = self.embed(image)
        outputs = []
        for layer in self.layers:
            seq = layer(seq)
            outputs.append(seq)
        if self.final_norm is not None:
            outputs[-1] = seq.with_tokens(self.final_norm(seq.tokens))
        return outputs
