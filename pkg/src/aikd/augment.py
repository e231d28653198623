"""Training-time augmentation: pad-crop-flip plus cutout / mixup / cutmix.

All functions are pure in (batch, rng): drawing from an explicitly passed
``numpy.random.Generator`` keeps every pipeline decision replayable. Mixing
policies return a ``MixedBatch`` whose two label vectors and mixing rate feed
the label-mixed cross-entropy; distillation teachers always consume the same
mixed images and never see mixed labels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .losses import SoftDistribution, cross_entropy

__all__ = [
    "AugmentPolicy",
    "MixedBatch",
    "standard_augment",
    "center_crop",
    "cutout",
    "mixup",
    "cutmix",
    "apply_policy",
    "mixed_ce",
]

_EXTRAS = ("none", "cutout", "mixup", "cutmix")


@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    crop: int | None = None  # None: crop back to the input size
    hflip_prob: float = 0.5
    extra: str = "none"
    cutout_size: int = 16
    mix_alpha: float = 1.0

    def __post_init__(self):
        if self.extra not in _EXTRAS:
            raise ValueError(f"extra must be one of {_EXTRAS}, got {self.extra!r}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if self.crop is not None and self.crop < 8:
            raise ValueError("crop must be at least 8 pixels")
        if self.extra == "cutout" and self.cutout_size <= 0:
            raise ValueError("cutout_size must be positive")
        if self.extra in ("mixup", "cutmix") and self.mix_alpha <= 0:
            raise ValueError("mix_alpha must be positive")


@dataclass
class MixedBatch:
    """Augmented images plus the (possibly mixed) label bookkeeping.

    For non-mixing policies ``lam`` is 1 and ``labels_b`` aliases
    ``labels_a``.
    """

    images: torch.Tensor
    labels_a: torch.Tensor
    labels_b: torch.Tensor
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")


def standard_augment(
    images: torch.Tensor,
    rng: np.random.Generator,
    pad: int = 4,
    hflip_prob: float = 0.5,
    crop: int | None = None,
) -> torch.Tensor:
    """Random crop plus random mirror.

    With ``crop`` unset (or equal to the input side) the batch is zero-padded
    by ``pad`` and cropped back to its original size, the small-image recipe.
    With ``crop`` smaller than the input side the batch is randomly cropped
    straight down to ``crop`` pixels: the loader's resize to the (larger)
    stored resolution supplies the "resize" half of resize-then-crop, as used
    for high-resolution fine-grained inputs. Requires square images.
    """
    if images.ndim != 4:
        raise ValueError("expected a (batch, channels, h, w) tensor")
    b, _, h, w = images.shape
    if h != w:
        raise ValueError(f"expected square images, got {h}x{w}")
    target = h if crop is None else crop
    if target > h:
        raise ValueError(f"crop {target} exceeds input side {h}")
    if target == h:
        canvas, slack = (F.pad(images, (pad, pad, pad, pad)), 2 * pad) if pad > 0 else (images, 0)
    else:
        canvas, slack = images, h - target
    if slack > 0:
        tops = rng.integers(0, slack + 1, size=b)
        lefts = rng.integers(0, slack + 1, size=b)
        out = torch.stack(
            [
                canvas[i, :, t : t + target, l : l + target]
                for i, (t, l) in enumerate(zip(tops, lefts))
            ]
        )
    else:
        out = canvas
    flips = rng.random(b) < hflip_prob
    if flips.any():
        out = out.clone()
        idx = np.flatnonzero(flips)
        out[idx] = torch.flip(out[idx], dims=[3])
    return out


def _cutout_box(center_y: int, center_x: int, size: int, h: int, w: int):
    """Square of side ``size`` around a center, clipped to the image."""
    half = size // 2
    y0, y1 = max(center_y - half, 0), min(center_y + (size - half), h)
    x0, x1 = max(center_x - half, 0), min(center_x + (size - half), w)
    return y0, y1, x0, x1


def cutout(images: torch.Tensor, size: int, rng: np.random.Generator) -> torch.Tensor:
    """Zero one square region per image; centers are uniform, regions clip at borders."""
    if size <= 0:
        raise ValueError("cutout size must be positive")
    b, _, h, w = images.shape
    if size > h or size > w:
        raise ValueError("cutout size exceeds image side")
    out = images.clone()
    cy = rng.integers(0, h, size=b)
    cx = rng.integers(0, w, size=b)
    for i in range(b):
        y0, y1, x0, x1 = _cutout_box(int(cy[i]), int(cx[i]), size, h, w)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out


def mixup(
    images: torch.Tensor, labels: torch.Tensor, alpha: float, rng: np.random.Generator
) -> MixedBatch:
    """Blend the batch with a shuffled copy of itself at a Beta(alpha, alpha) rate."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    b = images.shape[0]
    if b < 2:
        return MixedBatch(images, labels, labels, 1.0)
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(b))
    mixed = lam * images + (1.0 - lam) * images[perm]
    return MixedBatch(mixed, labels, labels[perm], lam)


def cutmix(
    images: torch.Tensor, labels: torch.Tensor, alpha: float, rng: np.random.Generator
) -> MixedBatch:
    """Paste one rectangle from a shuffled copy; lam is recomputed from the
    exact clipped area so the label mix matches the pixels."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    b, _, h, w = images.shape
    if b < 2:
        return MixedBatch(images, labels, labels, 1.0)
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(b))
    cut_ratio = np.sqrt(1.0 - lam)
    cut_h, cut_w = int(h * cut_ratio), int(w * cut_ratio)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = max(cy - cut_h // 2, 0), min(cy + (cut_h - cut_h // 2), h)
    x0, x1 = max(cx - cut_w // 2, 0), min(cx + (cut_w - cut_w // 2), w)
    mixed = images.clone()
    mixed[:, :, y0:y1, x0:x1] = images[perm][:, :, y0:y1, x0:x1]
    lam_exact = 1.0 - ((y1 - y0) * (x1 - x0)) / (h * w)
    if lam_exact == 1.0:
        return MixedBatch(images, labels, labels, 1.0)
    return MixedBatch(mixed, labels, labels[perm], lam_exact)


def center_crop(images: torch.Tensor, crop: int | None) -> torch.Tensor:
    """Deterministic evaluation-time counterpart of the random training crop."""
    if crop is None or images.shape[-1] == crop:
        return images
    if crop > images.shape[-1]:
        raise ValueError(f"crop {crop} exceeds input side {images.shape[-1]}")
    offset = (images.shape[-1] - crop) // 2
    return images[:, :, offset : offset + crop, offset : offset + crop]


def apply_policy(
    images: torch.Tensor,
    labels: torch.Tensor,
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> MixedBatch:
    """Run the full pipeline for one batch: standard crop-and-flip, then the extra policy."""
    out = standard_augment(
        images, rng, pad=policy.pad, hflip_prob=policy.hflip_prob, crop=policy.crop
    )
    if policy.extra == "cutout":
        out = cutout(out, policy.cutout_size, rng)
    elif policy.extra == "mixup":
        return mixup(out, labels, policy.mix_alpha, rng)
    elif policy.extra == "cutmix":
        return cutmix(out, labels, policy.mix_alpha, rng)
    return MixedBatch(out, labels, labels, 1.0)


def mixed_ce(student_probs: SoftDistribution, mixed: MixedBatch) -> torch.Tensor:
    """Cross-entropy against both label vectors, blended by the mixing rate.

    Only this hard-label term mixes; guide/progressive/critic paths use the
    teachers' outputs on the same mixed images.
    """
    if mixed.lam == 1.0:
        return cross_entropy(mixed.labels_a, student_probs)
    return mixed.lam * cross_entropy(mixed.labels_a, student_probs) + (
        1.0 - mixed.lam
    ) * cross_entropy(mixed.labels_b, student_probs)
