"""Pluggable fixed feature extractors for perceptual losses and metrics.

Full-scale use plugs a pretrained backbone behind the same interface; at
desk scale we use a frozen random-weight conv stack built from a recorded
seed, which is enough to define feature-space distances.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import TOY_FEATURE_SEED


class FeatureExtractor(nn.Module):
    """Fixed network returning a list of tap-layer feature maps."""

    extractor_id: str = "base"

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Last tap, the conventional single-layer perceptual target."""
        return self.taps(x)[-1]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B, F] pooled embedding for distribution metrics."""
        return self.taps(x)[-1].mean(dim=(2, 3))


class IdentityExtractor(FeatureExtractor):
    """Features are the pixels themselves; reduces feature losses to pixel losses."""

    extractor_id = "identity"

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


class ToyFeatureExtractor(FeatureExtractor):
    """Frozen random conv stack; deterministic given the recorded seed."""

    def __init__(self, in_channels: int = 3, seed: int = TOY_FEATURE_SEED):
        super().__init__()
        self.extractor_id = f"toy_conv(seed={seed})"
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, 8, kernel_size=3, stride=2, padding=1),
                nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1),
                nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            ]
        )
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.15, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.1)
            feats.append(h)
        return feats
