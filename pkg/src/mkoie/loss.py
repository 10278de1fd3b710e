"""Hybrid training objective: L1/Charbonnier reconstruction plus a perceptual
term on frozen VGG-16 feature taps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHARBONNIER_EPS = 1e-6
LOSS_WEIGHTS = (0.8, 0.2)
DEFAULT_TAPS = ("conv1_2", "conv2_2", "conv3_3")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG-16 up to conv3_3; "M" marks 2x2 max pooling
VGG16_LAYOUT = (
    ("conv1_1", 64), ("conv1_2", 64), "M",
    ("conv2_1", 128), ("conv2_2", 128), "M",
    ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256),
)
# indices of the same convs inside torchvision's ``vgg16().features``
_TORCHVISION_INDEX = {
    "conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14,
}


def _check_pair(i_re, i_gt):
    if i_re.shape != i_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(i_re.shape)} vs {tuple(i_gt.shape)}")


def reconstruction_loss(i_re: torch.Tensor, i_gt: torch.Tensor) -> torch.Tensor:
    """Mean of ``0.5*|d| + 0.5*sqrt(d**2 + eps)`` over all elements."""
    _check_pair(i_re, i_gt)
    d = i_re - i_gt
    return (0.5 * d.abs() + 0.5 * torch.sqrt(d * d + CHARBONNIER_EPS)).mean()


class FeatureExtractor(nn.Module):
    """Frozen VGG-16 trunk returning the tapped conv outputs (pre-activation).

    ``width`` scales every layer's channel count; 1.0 is the real VGG-16.
    Inputs are images in [0, 1]; mean/std normalisation happens here.
    """

    def __init__(self, taps=DEFAULT_TAPS, width: float = 1.0, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.taps = tuple(taps)
        self.width = width
        names = [item[0] for item in VGG16_LAYOUT if item != "M"]
        unknown = set(self.taps) - set(names)
        if unknown:
            raise ValueError(f"unknown feature taps {sorted(unknown)}")
        self.convs = nn.ModuleDict()
        self._plan = []
        c_in = 3
        last_tap = max(names.index(t) for t in self.taps)
        for item in VGG16_LAYOUT:
            if item == "M":
                self._plan.append("M")
                continue
            name, c = item
            c = max(1, int(round(c * width)))
            self.convs[name] = nn.Conv2d(c_in, c, 3, padding=1)
            self._plan.append(name)
            c_in = c
            if names.index(name) == last_tap:
                break
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for step in self._plan:
            if step == "M":
                x = F.max_pool2d(x, 2)
                continue
            x = self.convs[step](x)
            if step in self.taps:
                feats.append(x)
                if len(feats) == len(self.taps):
                    break
            x = F.relu(x)
        return feats

    @classmethod
    def frozen_random(cls, seed: int = 0, width: float = 1.0, taps=DEFAULT_TAPS) -> "FeatureExtractor":
        """Fixed-seed random weights; usable offline wherever pretrained weights are absent."""
        fx = cls(taps=taps, width=width)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in fx.convs.values():
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
                conv.bias.zero_()
        return fx

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], taps=DEFAULT_TAPS) -> "FeatureExtractor":
        """Build from ``<conv>.weight`` / ``<conv>.bias`` arrays (full VGG-16 widths)."""
        fx = cls(taps=taps, width=1.0)
        state = {}
        for name, conv in fx.convs.items():
            for part in ("weight", "bias"):
                key = f"{name}.{part}"
                if key not in arrays:
                    raise ValueError(f"extractor weights missing {key}")
                arr = np.asarray(arrays[key])
                if tuple(arr.shape) != tuple(getattr(conv, part).shape):
                    raise ValueError(f"{key}: shape {arr.shape} does not match VGG-16")
                state[f"convs.{key}"] = torch.from_numpy(arr.astype(np.float32))
        fx.load_state_dict(state, strict=False)
        return fx.freeze()

    @classmethod
    def pretrained_vgg16(cls, path, taps=DEFAULT_TAPS) -> "FeatureExtractor":
        """Load VGG-16 weights from a named-array checkpoint or a torchvision state dict (.pth)."""
        path = str(path)
        if path.endswith((".pth", ".pt")):
            sd = torch.load(path, map_location="cpu", weights_only=True)
            arrays = {}
            for name, idx in _TORCHVISION_INDEX.items():
                for part in ("weight", "bias"):
                    key = f"features.{idx}.{part}"
                    if key in sd:
                        arrays[f"{name}.{part}"] = sd[key].numpy()
            return cls.from_arrays(arrays, taps)
        from .checkpoint import read_arrays

        arrays, _ = read_arrays(path)
        return cls.from_arrays(arrays, taps)


def make_extractor(profile: str = "frozen-random", weights=None, seed: int = 0, width: float = 1.0):
    if profile == "pretrained-vgg16":
        if weights is None:
            raise ValueError("pretrained-vgg16 profile needs a weights file")
        return FeatureExtractor.pretrained_vgg16(weights)
    if profile == "frozen-random":
        return FeatureExtractor.frozen_random(seed=seed, width=width)
    raise ValueError(f"unknown extractor profile {profile!r}")


def perceptual_loss(i_re, i_gt, fx: FeatureExtractor, n_layers: int = 3) -> torch.Tensor:
    """Mean over feature taps of the mean squared feature difference."""
    _check_pair(i_re, i_gt)
    if len(fx.taps) != n_layers:
        raise ValueError(f"extractor exposes {len(fx.taps)} taps, expected {n_layers}")
    feats_re = fx(i_re)
    with torch.no_grad():
        feats_gt = fx(i_gt)
    return sum(F.mse_loss(a, b) for a, b in zip(feats_re, feats_gt)) / n_layers


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    per: torch.Tensor
    total: torch.Tensor
    weights: tuple = LOSS_WEIGHTS

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "per", "total")}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v)) for v in (self.rec, self.per, self.total))


def total_loss(i_re, i_gt, fx: FeatureExtractor | None, weights=LOSS_WEIGHTS) -> LossBreakdown:
    """Weighted sum of the two terms. With a zero perceptual weight ``fx`` may be None."""
    w_rec, w_per = weights
    rec = reconstruction_loss(i_re, i_gt)
    if fx is None:
        if w_per != 0:
            raise ValueError("a feature extractor is required when the perceptual weight is non-zero")
        per = torch.zeros((), dtype=rec.dtype)
    else:
        per = perceptual_loss(i_re, i_gt, fx)
    return LossBreakdown(rec=rec, per=per, total=w_rec * rec + w_per * per, weights=tuple(weights))
