"""Vision transformer backbone over log-mel spectrograms plus the three heads.

Spectrograms enter as ``(B, T, F)`` tensors. Tiles are ``p x p`` and are
ordered row-major over the (time, frequency) grid; each tile is flattened
row-major as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericFault

VARIANTS = {
    # name: (depth, embed_dim, n_heads)
    "tiny": (4, 96, 3),
    "small": (12, 384, 3),
    "base": (12, 768, 6),
}


@dataclass
class BackboneConfig:
    variant: str = "tiny"
    depth: int = 4
    embed_dim: int = 96
    n_heads: int = 3
    mlp_ratio: float = 4.0
    patch_size: int = 16
    qkv_bias: bool = True
    dropout: float = 0.0
    # Projection/reconstruction head widths; 2048/256 at full scale.
    head_hidden_dim: int = 2048
    head_bottleneck_dim: int = 256

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "BackboneConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {variant!r}; expected one of {sorted(VARIANTS)}")
        depth, dim, heads = VARIANTS[variant]
        return cls(variant=variant, depth=depth, embed_dim=dim, n_heads=heads, **overrides)

    def validate(self) -> None:
        if self.depth < 0:
            raise ConfigError("backbone.depth must be >= 0")
        if self.embed_dim <= 0 or self.n_heads <= 0:
            raise ConfigError("backbone.embed_dim and backbone.n_heads must be positive")
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"backbone.embed_dim ({self.embed_dim}) must be divisible by backbone.n_heads ({self.n_heads})"
            )
        if self.patch_size < 1:
            raise ConfigError("backbone.patch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("backbone.dropout must lie in [0, 1)")
        if self.head_hidden_dim < 1 or self.head_bottleneck_dim < 1:
            raise ConfigError("head widths must be positive")


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_t: int
    grid_f: int

    @property
    def n(self) -> int:
        return self.grid_t * self.grid_f

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_t * self.patch_size, self.grid_f * self.patch_size

    @classmethod
    def for_shape(cls, frames: int, bins: int, patch_size: int) -> "PatchGrid":
        return cls(patch_size, -(-frames // patch_size), -(-bins // patch_size))


@dataclass
class TokenEmbeddings:
    class_token: torch.Tensor  # (B, D)
    data_tokens: torch.Tensor  # (B, n, D)


def pad_to_grid(spec: torch.Tensor, p: int) -> torch.Tensor:
    """Zero-pad the last two axes up to multiples of ``p``."""
    t, f = spec.shape[-2:]
    pad_t, pad_f = (-t) % p, (-f) % p
    if pad_t or pad_f:
        spec = F.pad(spec, (0, pad_f, 0, pad_t))
    return spec


def patchify(spec: torch.Tensor, p: int) -> torch.Tensor:
    """``(..., T, F)`` -> ``(..., n, p*p)``. Both axes must already be multiples of p."""
    *lead, t, f = spec.shape
    if t % p or f % p:
        raise ValueError(f"spectrogram {t}x{f} is not divisible by patch size {p}; pad first")
    gt, gf = t // p, f // p
    x = spec.reshape(*lead, gt, p, gf, p)
    x = x.transpose(-3, -2)  # (..., gt, gf, p, p)
    return x.reshape(*lead, gt * gf, p * p)


def unpatchify(tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    *lead, n, pp = tokens.shape
    p = grid.patch_size
    if n != grid.n or pp != p * p:
        raise ValueError(f"token tensor {tuple(tokens.shape)} does not match grid {grid}")
    x = tokens.reshape(*lead, grid.grid_t, grid.grid_f, p, p)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, grid.grid_t * p, grid.grid_f * p)


class Attention(nn.Module):
    def __init__(self, dim, n_heads, qkv_bias=True, dropout=0.0):
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        x = F.scaled_dot_product_attention(q, k, v, dropout_p=self.dropout if self.training else 0.0)
        x = x.transpose(1, 2).reshape(b, n, d)
        return self.drop(self.proj(x))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, n_heads, mlp_ratio=4.0, qkv_bias=True, dropout=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads, qkv_bias, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim), nn.Dropout(dropout)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class VisionTransformer(nn.Module):
    """Encoder E / s_b / t_b.

    ``input_shape`` is the (T, F) of the pretraining spectrogram; positional
    embeddings are sized to its padded patch grid and bilinearly resized for
    other grids.
    """

    def __init__(self, cfg: BackboneConfig, input_shape=(592, 128)):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        p = cfg.patch_size
        self.grid = PatchGrid.for_shape(*input_shape, p)
        self.patch_embed = nn.Linear(p * p, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid.n + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio, cfg.qkv_bias, cfg.dropout) for _ in range(cfg.depth)
        )
        # depth 0 is a test-only configuration whose output is the raw embedded tokens
        self.norm = nn.LayerNorm(cfg.embed_dim) if cfg.depth > 0 else nn.Identity()
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def positional_embedding(self, grid: PatchGrid) -> torch.Tensor:
        if grid.grid_t == self.grid.grid_t and grid.grid_f == self.grid.grid_f:
            return self.pos_embed
        cls_pos, data_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = data_pos.shape[-1]
        data_pos = data_pos.reshape(1, self.grid.grid_t, self.grid.grid_f, d).permute(0, 3, 1, 2)
        data_pos = F.interpolate(data_pos, size=(grid.grid_t, grid.grid_f), mode="bilinear", align_corners=False)
        data_pos = data_pos.permute(0, 2, 3, 1).reshape(1, grid.n, d)
        return torch.cat([cls_pos, data_pos], dim=1)

    def embed(self, spec: torch.Tensor) -> tuple[torch.Tensor, PatchGrid]:
        p = self.cfg.patch_size
        spec = pad_to_grid(spec, p)
        grid = PatchGrid.for_shape(spec.shape[-2], spec.shape[-1], p)
        return patchify(spec, p), grid

    def encode_tokens(self, tokens: torch.Tensor, grid: PatchGrid | None = None) -> TokenEmbeddings:
        """Run the encoder on already-patchified tokens ``(B, n, p*p)``."""
        grid = grid or self.grid
        x = self.patch_embed(tokens)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding(grid)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericFault(f"non-finite activations after transformer block {i}", block=i)
        x = self.norm(x)
        return TokenEmbeddings(class_token=x[:, 0], data_tokens=x[:, 1:])

    def forward(self, spec: torch.Tensor) -> TokenEmbeddings:
        tokens, grid = self.embed(spec)
        return self.encode_tokens(tokens, grid)


class MLP3(nn.Module):
    """in -> hidden -> GELU -> hidden -> GELU -> bottleneck."""

    def __init__(self, in_dim, hidden_dim, bottleneck_dim):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.apply(_init_weights)

    def forward(self, x):
        return self.layers(x)


class ReconstructionHead(nn.Module):
    """Light decoder D: per-token MLP, then a p-strided transposed convolution back to pixels."""

    def __init__(self, embed_dim, patch_size, hidden_dim=2048, bottleneck_dim=256):
        super().__init__()
        self.patch_size = patch_size
        self.mlp = MLP3(embed_dim, hidden_dim, bottleneck_dim)
        self.deconv = nn.ConvTranspose2d(bottleneck_dim, 1, kernel_size=patch_size, stride=patch_size)

    def to_pixels(self, z: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        """``(B, n, bottleneck)`` -> ``(B, T, F)``."""
        # kernel == stride, so the transposed convolution is one linear map per token
        w = self.deconv.weight.reshape(z.shape[-1], -1)
        tiles = z @ w + self.deconv.bias
        return unpatchify(tiles, grid)

    def forward(self, data_tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        return self.to_pixels(self.mlp(data_tokens), grid)


class WeightNormLinear(nn.Module):
    """Bias-free linear layer whose weight rows always have unit l2 norm."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.weight_v = nn.Parameter(torch.randn(out_dim, in_dim))
        with torch.no_grad():
            self.weight_v /= self.weight_v.norm(dim=1, keepdim=True)

    @property
    def weight(self) -> torch.Tensor:
        return self.weight_v / self.weight_v.norm(dim=1, keepdim=True)

    def forward(self, x):
        return F.linear(x, self.weight)


class ProjectionHead(nn.Module):
    """s_lcl / s_gcl: MLP, l2 normalisation, weight-normalised classifier."""

    eps = 1e-8

    def __init__(self, embed_dim, out_dim, hidden_dim=2048, bottleneck_dim=256):
        super().__init__()
        self.mlp = MLP3(embed_dim, hidden_dim, bottleneck_dim)
        self.last_layer = WeightNormLinear(bottleneck_dim, out_dim)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(self.eps)
        return self.last_layer(z)

    def forward(self, x):
        return self.classify(self.mlp(x))


class ASiTNetwork(nn.Module):
    """Backbone plus reconstruction, local and global heads.

    Student and teacher are two instances of this class with identical
    parameter layouts.
    """

    def __init__(self, cfg: BackboneConfig, local_dim=1024, global_dim=8192, input_shape=(592, 128)):
        super().__init__()
        self.backbone = VisionTransformer(cfg, input_shape)
        d, h, bn = cfg.embed_dim, cfg.head_hidden_dim, cfg.head_bottleneck_dim
        self.recon_head = ReconstructionHead(d, cfg.patch_size, h, bn)
        self.local_head = ProjectionHead(d, local_dim, h, bn)
        self.global_head = ProjectionHead(d, global_dim, h, bn)

    def forward(self, spec: torch.Tensor, recon=True, local=True, global_=True) -> dict:
        t, f = spec.shape[-2:]
        tokens, grid = self.backbone.embed(spec)
        emb = self.backbone.encode_tokens(tokens, grid)
        out = {"class_token": emb.class_token, "data_tokens": emb.data_tokens}
        if recon:
            out["recon"] = self.recon_head(emb.data_tokens, grid)[..., :t, :f]
        if local:
            out["local_logits"] = self.local_head(emb.data_tokens)
        if global_:
            out["global_logits"] = self.global_head(emb.class_token)
        return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

