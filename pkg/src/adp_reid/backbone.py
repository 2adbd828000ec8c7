"""Vision transformer backbone with class-token attention tracing.

The forward pass returns the final class-token feature and, for every block
and head, the softmaxed attention row of the class-token query over all
``N + 1`` keys.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "adp-reid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    patch_size: int
    stride: int

    @property
    def num_patches(self) -> int:
        return self.h * self.w


def compute_patch_grid(H: int, W: int, patch_size: int, stride: int) -> PatchGrid:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch_size < 1 or patch_size > H or patch_size > W:
        raise ValueError(f"patch size {patch_size} does not fit a {H}x{W} image")
    return PatchGrid((H + stride - patch_size) // stride, (W + stride - patch_size) // stride, patch_size, stride)


@dataclass(frozen=True)
class BackboneConfig:
    image_height: int = 256
    image_width: int = 128
    patch_size: int = 16
    stride: int = 16
    depth: int = 12
    num_heads: int = 8
    embed_dim: int = 768
    mlp_ratio: float = 4.0
    final_norm: bool = True

    @property
    def grid(self) -> PatchGrid:
        return compute_patch_grid(self.image_height, self.image_width, self.patch_size, self.stride)


class PatchEmbed(nn.Module):
    """Shared linear projection of (possibly overlapping) P x P patches."""

    def __init__(self, patch_size: int, stride: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)  # B x N x d


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embed_dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim / num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)  # B x heads x T x T
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out), attn[:, :, 0, :]


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor):
        y, cls_row = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, cls_row


class VisionTransformer(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.grid = config.grid
        d = config.embed_dim
        self.patch_embed = PatchEmbed(config.patch_size, config.stride, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d) if config.final_norm else nn.Identity()
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                nn.init.trunc_normal_(m.weight, std=math.sqrt(1.0 / fan_in))
                nn.init.zeros_(m.bias)

    @property
    def num_tokens(self) -> int:
        return self.grid.num_patches + 1

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """``B x 3 x H x W`` images to the ``B x (N+1) x d`` input sequence."""
        H, W = self.config.image_height, self.config.image_width
        if images.dim() != 4 or images.shape[1:] != (3, H, W):
            raise ValueError(f"expected B x 3 x {H} x {W} images, got {tuple(images.shape)}")
        tokens = self.patch_embed(images)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward_sequence(self, seq: torch.Tensor):
        """Run the blocks; returns ``(feature, trace)``.

        ``trace`` has shape ``B x depth x heads x (N+1)``.
        """
        rows = []
        x = seq
        for block in self.blocks:
            x, cls_row = block(x)
            rows.append(cls_row)
        feature = self.norm(x[:, 0])
        return feature, torch.stack(rows, dim=1)

    def forward(self, images: torch.Tensor):
        return self.forward_sequence(self.embed(images))


# --- checkpoint container -----------------------------------------------------


def save_checkpoint(path, config: dict, tensors: dict[str, dict], extra: dict | None = None) -> None:
    """Write a versioned container: named parameter groups plus the config."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "tensors": tensors,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types on corrupt zips
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_pretrained(model: VisionTransformer, state_dict: dict, strict: bool = False):
    """Hook for external (e.g. ImageNet) weights; position embeddings must already match the grid."""
    own = model.state_dict()
    usable = {k: v for k, v in state_dict.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(usable, strict=strict)
    return sorted(set(own) - set(usable))


def backbone_config_dict(config: BackboneConfig) -> dict:
    return asdict(config)
