"""Background-carried artificial occlusion and its pixel/patch masks.

Images here are ``3 x H x W`` float tensors with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

AREA_RATIO_RANGE = (0.1, 0.5)
ASPECT_RANGE = (0.3, 3.3)


@dataclass(frozen=True)
class OccluderGeometry:
    area_ratio: float
    aspect: float
    height: int
    width: int
    top: int
    left: int
    image_height: int
    image_width: int

    @property
    def target_area(self) -> float:
        """Pre-clipping area ``s_o`` the occluder was sized for."""
        return self.area_ratio * self.image_height * self.image_width


@dataclass
class OccludedPair:
    holistic: torch.Tensor
    occluded: torch.Tensor
    pixel_mask: torch.Tensor  # H x W, {0, 1}
    patch_mask: torch.Tensor  # N, fractional coverage


def occluder_size(H: int, W: int, area_ratio: float, aspect: float) -> tuple[int, int]:
    """Occluder height and width for a target area ``area_ratio * H * W``."""
    area = area_ratio * H * W
    return int(round(math.sqrt(area * aspect))), int(round(math.sqrt(area / aspect)))


def crop_corner_background(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Crop an ``(H//4, W//4)`` patch from a uniformly chosen image corner."""
    _, H, W = image.shape
    if H < 8 or W < 8:
        raise ValueError(f"image must be at least 8x8 for a corner crop, got {H}x{W}")
    h, w = H // 4, W // 4
    corner = int(rng.integers(4))
    top = 0 if corner in (0, 1) else H - h
    left = 0 if corner in (0, 2) else W - w
    return image[:, top:top + h, left:left + w]


def sample_occluder_geometry(H: int, W: int, rng: np.random.Generator) -> OccluderGeometry:
    if H < 16 or W < 16:
        raise ValueError(f"image must be at least 16x16, got {H}x{W}")
    area_ratio = float(rng.uniform(*AREA_RATIO_RANGE))
    aspect = float(rng.uniform(*ASPECT_RANGE))
    height, width = occluder_size(H, W, area_ratio, aspect)
    top = int(rng.integers(H))
    left = int(rng.integers(W))
    return OccluderGeometry(area_ratio, aspect, height, width, top, left, H, W)


def make_geometry(H: int, W: int, area_ratio: float, aspect: float, top: int = 0, left: int = 0) -> OccluderGeometry:
    height, width = occluder_size(H, W, area_ratio, aspect)
    return OccluderGeometry(area_ratio, aspect, height, width, top, left, H, W)


def _clipped_box(geom: OccluderGeometry, H: int, W: int):
    top, left = max(geom.top, 0), max(geom.left, 0)
    bottom, right = min(geom.top + geom.height, H), min(geom.left + geom.width, W)
    if bottom <= top or right <= left:
        raise ValueError(f"occluder {geom} lies entirely outside the {H}x{W} image")
    return top, left, bottom, right


def pixel_mask(geom: OccluderGeometry, H: int, W: int) -> torch.Tensor:
    top, left, bottom, right = _clipped_box(geom, H, W)
    mask = torch.zeros(H, W)
    mask[top:bottom, left:right] = 1.0
    return mask


def patchify_mask(mask: torch.Tensor, patch_size: int, stride: int) -> torch.Tensor:
    """Fraction of each patch cell covered by ``mask``; row-major, length N.

    Accepts ``H x W`` or ``B x H x W`` masks.
    """
    batched = mask.dim() == 3
    m = mask if batched else mask.unsqueeze(0)
    cover = F.avg_pool2d(m.unsqueeze(1).to(torch.float32), kernel_size=patch_size, stride=stride)
    cover = cover.flatten(1)
    return cover if batched else cover[0]


def paste_background(holistic: torch.Tensor, patch: torch.Tensor, geom: OccluderGeometry):
    """Paste the bilinearly resized patch; returns ``(pasted_image, pixel_mask)``."""
    _, H, W = holistic.shape
    top, left, bottom, right = _clipped_box(geom, H, W)
    resized = F.interpolate(
        patch.unsqueeze(0), size=(geom.height, geom.width), mode="bilinear", align_corners=False
    )[0]
    pasted = holistic.clone()
    # clip the resized occluder to the visible window
    pasted[:, top:bottom, left:right] = resized[
        :, top - geom.top:bottom - geom.top, left - geom.left:right - geom.left
    ]
    mask = torch.zeros(H, W, dtype=holistic.dtype)
    mask[top:bottom, left:right] = 1.0
    return pasted, mask


def superimpose(pasted: torch.Tensor, mask: torch.Tensor, canvas: torch.Tensor) -> torch.Tensor:
    """Add ``canvas`` inside ``mask`` and clamp to the valid pixel range.

    Works for single images (``3 x H x W`` with ``H x W`` mask) and batches.
    """
    return torch.clamp(pasted + canvas * mask.unsqueeze(-3), 0.0, 1.0)


def apply_occlusion(
    holistic: torch.Tensor,
    patch: torch.Tensor,
    geom: OccluderGeometry,
    canvas: torch.Tensor | None = None,
    patch_size: int = 16,
    stride: int | None = None,
) -> OccludedPair:
    if canvas is not None and canvas.shape != holistic.shape:
        raise ValueError(f"canvas shape {tuple(canvas.shape)} != image shape {tuple(holistic.shape)}")
    pasted, mask = paste_background(holistic, patch, geom)
    occluded = pasted if canvas is None else superimpose(pasted, mask, canvas)
    cover = patchify_mask(mask, patch_size, stride or patch_size)
    return OccludedPair(holistic, occluded, mask, cover)


def random_erase(holistic: torch.Tensor, geom: OccluderGeometry):
    """Random-erasing baseline: fill the occluder box with the per-channel image mean."""
    _, H, W = holistic.shape
    top, left, bottom, right = _clipped_box(geom, H, W)
    erased = holistic.clone()
    erased[:, top:bottom, left:right] = holistic.mean(dim=(1, 2), keepdim=True)
    mask = torch.zeros(H, W, dtype=holistic.dtype)
    mask[top:bottom, left:right] = 1.0
    return erased, mask
