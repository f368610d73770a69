"""Frozen feature extractors and position-embedding resampling.

The toolkit treats any module with a (B, 3, H, W) -> (B, D, Gh, Gw)
forward and per-block taps as an encoder. TinyEncoder is a desk-scale
ViT used for development and the test suite: 2 pre-norm blocks, separate
q/k/v projections (so low-rank adapters can target them by name), a
learned position grid, no class token, no dropout, and no final norm,
which makes the last tap identical to the plain forward output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    n_blocks: int = 2
    patch_size: int = 8
    n_heads: int = 4
    mlp_ratio: float = 4.0
    native_resolution: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        h, w = self.native_resolution
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"native resolution {self.native_resolution} not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.n_blocks < 1:
            raise ValueError("need at least one block")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "n_blocks": self.n_blocks,
            "patch_size": self.patch_size,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
            "native_resolution": list(self.native_resolution),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        d = dict(d)
        if "native_resolution" in d:
            d["native_resolution"] = tuple(d["native_resolution"])
        return cls(**d)


@dataclass(frozen=True)
class PosEmbedGrid:
    """Learned position embeddings as an (Gh, Gw, D) grid plus an optional
    class-token embedding that resampling must never touch."""

    grid: torch.Tensor
    cls: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.grid.ndim != 3:
            raise ValueError(f"grid must be (Gh, Gw, D), got shape {tuple(self.grid.shape)}")


def interpolate_pos_embed(pe: PosEmbedGrid, new_hw: tuple[int, int]) -> PosEmbedGrid:
    """Resample a position grid to a new patch-grid shape, bicubic.

    Matching shapes return the input untouched. The interpolation runs on
    a per-channel residual (grid minus its corner value) and the anchor is
    added back afterwards: a constant channel has an all-zero residual,
    which interpolates to exact zeros, so constants survive bit-exactly
    (plain bicubic does not guarantee that in float32).
    """
    nh, nw = int(new_hw[0]), int(new_hw[1])
    if nh < 1 or nw < 1:
        raise ValueError(f"degenerate target grid {new_hw}")
    gh, gw, _ = pe.grid.shape
    if (gh, gw) == (nh, nw):
        return pe

    g = pe.grid.permute(2, 0, 1).unsqueeze(0)
    anchor = g[:, :, :1, :1]
    out = anchor + F.interpolate(g - anchor, size=(nh, nw), mode="bicubic", align_corners=False)
    if not torch.isfinite(out).all():
        raise ValueError("position embedding interpolation produced non-finite values")
    return PosEmbedGrid(grid=out.squeeze(0).permute(1, 2, 0).contiguous(), cls=pe.cls)


class FeatureExtractor(nn.Module):
    """Contract for encoders: dense patch features at 1/patch_size scale."""

    patch_size: int
    embed_dim: int
    n_blocks: int
    native_resolution: tuple[int, int]

    def forward(self, images: torch.Tensor) -> torch.Tensor:  # (B, D, Gh, Gw)
        raise NotImplementedError

    def forward_taps(self, images: torch.Tensor, n_taps: int) -> tuple[torch.Tensor, ...]:
        """Outputs of the last n_taps blocks, shallowest first."""
        raise NotImplementedError


class _Block(nn.Module):
    """Pre-norm transformer block with separate q/k/v projections."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.n_heads
        y = self.norm1(x)
        q = self.q(y).view(b, n, self.n_heads, hd).transpose(1, 2)
        k = self.k(y).view(b, n, self.n_heads, hd).transpose(1, 2)
        v = self.v(y).view(b, n, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * hd**-0.5
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        y = self.norm2(x)
        x = x + self.fc2(F.gelu(self.fc1(y)))
        return x


class TinyEncoder(FeatureExtractor):
    """Desk-scale ViT with deterministic seeded init.

    Inputs at resolutions other than the native one are handled by
    resampling the position grid on the fly; the patch grid just has to
    divide evenly.
    """

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.patch_size = cfg.patch_size
        self.embed_dim = cfg.embed_dim
        self.n_blocks = cfg.n_blocks
        self.native_resolution = cfg.native_resolution

        gh = cfg.native_resolution[0] // cfg.patch_size
        gw = cfg.native_resolution[1] // cfg.patch_size
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.embed_dim, gh, gw))
        self.blocks = nn.ModuleList(
            _Block(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks)
        )
        self._init_weights(cfg.seed)

    def _init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        # registration order is fixed, so the draw sequence is reproducible
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.ndim >= 2:
                    nn.init.trunc_normal_(p, std=0.02, generator=g)
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    p.zero_()

    def pos_embed_grid(self) -> PosEmbedGrid:
        return PosEmbedGrid(grid=self.pos_embed.detach()[0].permute(1, 2, 0).contiguous())

    def _pos_for(self, gh: int, gw: int) -> torch.Tensor:
        if (gh, gw) == tuple(self.pos_embed.shape[2:]):
            return self.pos_embed
        pe = PosEmbedGrid(grid=self.pos_embed[0].permute(1, 2, 0))
        pe = interpolate_pos_embed(pe, (gh, gw))
        return pe.grid.permute(2, 0, 1).unsqueeze(0)

    def _tokens(self, images: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.patch_embed(images)
        b, d, gh, gw = x.shape
        x = x + self._pos_for(gh, gw)
        return x.flatten(2).transpose(1, 2), gh, gw

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x, gh, gw = self._tokens(images)
        for blk in self.blocks:
            x = blk(x)
        return x.transpose(1, 2).reshape(-1, self.embed_dim, gh, gw)

    def forward_taps(self, images: torch.Tensor, n_taps: int) -> tuple[torch.Tensor, ...]:
        x, gh, gw = self._tokens(images)
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x.transpose(1, 2).reshape(-1, self.embed_dim, gh, gw))
        return tuple(outs[-n_taps:])


def tiny_encoder(cfg: EncoderConfig | None = None) -> TinyEncoder:
    return TinyEncoder(cfg or EncoderConfig())


def _check_divisible(encoder: FeatureExtractor, images: torch.Tensor) -> None:
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    h, w = images.shape[2], images.shape[3]
    p = encoder.patch_size
    if h % p or w % p:
        raise ValueError(
            f"image resolution {h}x{w} must be a multiple of patch_size {p}"
        )


def extract(encoder: FeatureExtractor, images: torch.Tensor) -> torch.Tensor:
    """Dense features (B, D, H/p, W/p) for a batch of images."""
    _check_divisible(encoder, images)
    return encoder(images)


def extract_taps(
    encoder: FeatureExtractor, images: torch.Tensor, n_taps: int = 4
) -> tuple[torch.Tensor, ...]:
    """Feature maps of the last n_taps blocks, shallowest first."""
    _check_divisible(encoder, images)
    if not 1 <= n_taps <= encoder.n_blocks:
        raise ValueError(
            f"n_taps must be in [1, {encoder.n_blocks}] for this encoder, got {n_taps}"
        )
    taps = encoder.forward_taps(images, n_taps)
    shapes = {tuple(t.shape) for t in taps}
    if len(shapes) != 1:
        raise ValueError(f"taps disagree on shape: {sorted(shapes)}")
    return taps
