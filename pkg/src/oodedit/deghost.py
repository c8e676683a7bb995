"""Deghosting: encoder-decoder restoration with hierarchical generator-prior
aggregation, plus the synthetic-pair construction and three-term objective
used to train it.

Training pairs fold the activation mask into [0, 0.5] so the original image
dominates the blend and can serve as ground truth while ghosting artifacts
remain visible. The generator itself is a frozen prior: its per-scale
features are projected into the decoder but its weights are never updated.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.functional import interpolate, leaky_relu, softplus

from .config import DeghostHyperparams
from .diffact import TrainingDiverged, upsample_mask
from .features import FeatureExtractor, ToyFeatureExtractor
from .images import ActivationMask, Image, ShapeError, image_from_tensor
from .latent import GeneratorHandle


@dataclass
class DeghostTrainPair:
    f_train: Image
    target: Image


def fold_mask(mask: ActivationMask) -> ActivationMask:
    """Per entry: m if m <= 0.5 else 1 - m; range collapses to [0, 0.5]."""
    m = mask.data
    return ActivationMask(np.where(m <= 0.5, m, 1.0 - m))


def synth_train_pair(original: Image, edited: Image, mask: ActivationMask) -> DeghostTrainPair:
    """Blend with the folded mask; the original is the supervision target."""
    if original.data.shape != edited.data.shape:
        raise ShapeError(
            f"image shapes differ: {original.data.shape} vs {edited.data.shape}"
        )
    if mask.resolution != original.resolution:
        mask = upsample_mask(mask, original.resolution)
    folded = fold_mask(mask).data
    t = edited.to_signed().data
    i = original.to_signed().data
    f_train = Image(t * folded + i * (1.0 - folded))
    return DeghostTrainPair(f_train=f_train, target=original.to_signed())


def _pixel_count(shape) -> int:
    return int(shape[-2] * shape[-1])


def mse_loss_tensor(pred: torch.Tensor, target: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Batched pixel-count-normalized 2-norm (or conventional MSE)."""
    diff = (target - pred).flatten(start_dim=1)
    if squared:
        return diff.pow(2).mean()
    q = _pixel_count(pred.shape)
    return (diff.pow(2).sum(dim=1).sqrt() / q).mean()


def mse_loss(pred: Image, target: Image, squared: bool = False) -> float:
    """(1/Q) * ||target - pred||_2 with Q the pixel count (H*W)."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"shapes differ: {pred.data.shape} vs {target.data.shape}")
    return float(
        mse_loss_tensor(
            pred.to_tensor().unsqueeze(0), target.to_tensor().unsqueeze(0), squared
        )
    )


def perceptual_loss_tensor(
    pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor, squared: bool = False
) -> torch.Tensor:
    """Feature-space distance at the extractor's designated tap layer.

    Q stays the pixel count of the input images, matching the pixel-loss
    normalization, so an identity extractor reduces this to mse_loss.
    """
    fp = extractor(pred).flatten(start_dim=1)
    ft = extractor(target).flatten(start_dim=1)
    if squared:
        return (ft - fp).pow(2).mean()
    q = _pixel_count(pred.shape)
    return ((ft - fp).pow(2).sum(dim=1).sqrt() / q).mean()


def perceptual_loss(
    pred: Image, target: Image, extractor: FeatureExtractor, squared: bool = False
) -> float:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"shapes differ: {pred.data.shape} vs {target.data.shape}")
    with torch.no_grad():
        return float(
            perceptual_loss_tensor(
                pred.to_tensor().unsqueeze(0), target.to_tensor().unsqueeze(0), extractor, squared
            )
        )


class Discriminator(nn.Module):
    """Four stride-2 conv blocks and a linear head; scores are logits."""

    def __init__(self, in_channels: int = 3, resolution: int = 64, base_channels: int = 16):
        super().__init__()
        chans = [base_channels, base_channels * 2, base_channels * 4, base_channels * 4]
        blocks = []
        ch = in_channels
        for out_ch in chans:
            blocks.append(nn.Conv2d(ch, out_ch, kernel_size=3, stride=2, padding=1))
            blocks.append(nn.LeakyReLU(0.2))
            ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        spatial = resolution // 16
        self.head = nn.Linear(ch * spatial * spatial, 1)

    def score_logits(self, x: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B] real/fake logits."""
        h = self.blocks(x)
        return self.head(h.flatten(start_dim=1)).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.score_logits(x))


def disc_loss_tensor(d: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))] in stable logit-space form."""
    return softplus(-d.score_logits(real)).mean() + softplus(d.score_logits(fake.detach())).mean()


def gen_adv_loss_tensor(d: Discriminator, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term: -E[log D(fake)]."""
    return softplus(-d.score_logits(fake)).mean()


def adversarial_losses(
    reals: list[Image], fakes: list[Image], d: Discriminator
) -> tuple[float, float]:
    """(generator loss, discriminator loss) over image batches."""
    if not reals or not fakes:
        raise ValueError("empty batch")
    real_t = torch.stack([im.to_tensor() for im in reals])
    fake_t = torch.stack([im.to_tensor() for im in fakes])
    with torch.no_grad():
        gen = float(gen_adv_loss_tensor(d, fake_t))
        disc = float(disc_loss_tensor(d, real_t, fake_t))
    return gen, disc


def total_deghost_loss(
    pred: Image,
    target: Image,
    extractor: FeatureExtractor,
    d: Discriminator,
    hp: DeghostHyperparams,
) -> float:
    """lambda_m * L_mse + lambda_p * L_percep + lambda_a * L_adv (generator side)."""
    total = hp.lambda_m * mse_loss(pred, target, hp.squared_mse)
    total += hp.lambda_p * perceptual_loss(pred, target, extractor, hp.squared_mse)
    with torch.no_grad():
        adv = float(gen_adv_loss_tensor(d, pred.to_tensor().unsqueeze(0)))
    return total + hp.lambda_a * adv


def _block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.LeakyReLU(0.2),
    )


class DeghostNet(nn.Module):
    """FCN-style encoder-decoder around a frozen generator prior.

    The encoder predicts a latent code from the fused input; the generator
    re-synthesizes a ghost-free prior from that code, and per-scale 1x1
    projections of the prior renders are added into the decoder, which also
    consumes encoder skip features.
    """

    SCALES = (8, 16, 32, 64)

    def __init__(self, generator: GeneratorHandle, base_channels: int = 16):
        super().__init__()
        if tuple(generator.prior_tap_resolutions) != self.SCALES:
            raise ValueError(
                f"generator taps {generator.prior_tap_resolutions} != {self.SCALES}"
            )
        self.generator = generator
        c = base_channels
        self.enc0 = _block(generator.channels, c)  # 64
        self.enc1 = _block(c, c * 2, stride=2)  # 32
        self.enc2 = _block(c * 2, c * 4, stride=2)  # 16
        self.enc3 = _block(c * 4, c * 6, stride=2)  # 8
        self.code_head = nn.Linear(c * 6, generator.latent_layers * generator.latent_dim)
        self.dec3 = _block(c * 6, c * 6)
        self.dec2 = _block(c * 6 + c * 4, c * 4)
        self.dec1 = _block(c * 4 + c * 2, c * 2)
        self.dec0 = nn.Sequential(_block(c * 2 + c, c), _block(c, c))
        self.out_conv = nn.Conv2d(c, generator.channels, kernel_size=3, padding=1)
        # Per-scale aggregation of generator prior features (8..64).
        self.aggregate = nn.ModuleList(
            [
                nn.Conv2d(generator.channels, c * 6, kernel_size=1),
                nn.Conv2d(generator.channels, c * 4, kernel_size=1),
                nn.Conv2d(generator.channels, c * 2, kernel_size=1),
                nn.Conv2d(generator.channels, c, kernel_size=1),
            ]
        )
        self.base_channels = base_channels

    def predict_code(self, x: torch.Tensor) -> torch.Tensor:
        s0 = self.enc0(x)
        s1 = self.enc1(s0)
        s2 = self.enc2(s1)
        s3 = self.enc3(s2)
        code = self.code_head(s3.mean(dim=(2, 3)))
        B = x.shape[0]
        return code.view(B, self.generator.latent_layers, self.generator.latent_dim)

    def forward(self, x: torch.Tensor, use_prior: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, C, 64, 64] -> (restored [B, C, 64, 64], predicted code [B, L, D])."""
        s0 = self.enc0(x)
        s1 = self.enc1(s0)
        s2 = self.enc2(s1)
        s3 = self.enc3(s2)
        code = self.code_head(s3.mean(dim=(2, 3))).view(
            x.shape[0], self.generator.latent_layers, self.generator.latent_dim
        )
        priors = self.generator.prior_features(code) if use_prior else None

        d = self.dec3(s3)
        if use_prior:
            d = d + self.aggregate[0](priors[0])
        d = interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
        d = self.dec2(torch.cat([d, s2], dim=1))
        if use_prior:
            d = d + self.aggregate[1](priors[1])
        d = interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
        d = self.dec1(torch.cat([d, s1], dim=1))
        if use_prior:
            d = d + self.aggregate[2](priors[2])
        d = interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
        d = self.dec0[0](torch.cat([d, s0], dim=1))
        if use_prior:
            d = d + self.aggregate[3](priors[3])
        d = self.dec0[1](d)
        # Linear head; the signed-unit clamp happens at inference so the
        # loss keeps full gradients near saturated values.
        out = self.out_conv(d)
        return out, code

    def trainable_parameters(self):
        """Encoder/decoder/aggregation weights; excludes the frozen prior."""
        return [p for p in self.parameters() if p.requires_grad]

    def save(self, path) -> None:
        torch.save(
            {
                "kind": "deghost_net",
                "base_channels": self.base_channels,
                "state": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path, generator: GeneratorHandle) -> "DeghostNet":
        payload = torch.load(path, weights_only=True)
        if payload.get("kind") != "deghost_net":
            raise ValueError("not a deghost checkpoint")
        net = cls(generator, payload["base_channels"])
        net.load_state_dict(payload["state"])
        return net


def deghost(fused: Image, net: DeghostNet) -> Image:
    """Restore a ghost-free image from a mask-blended composite."""
    expected = net.generator.output_resolution
    if fused.resolution != tuple(expected):
        raise ShapeError(f"net expects {tuple(expected)}, got {fused.resolution}")
    with torch.no_grad():
        out, _ = net(fused.to_tensor().unsqueeze(0))
    if not torch.isfinite(out).all():
        raise RuntimeError("deghost produced non-finite activations")
    return image_from_tensor(out.squeeze(0))


def train_deghost(
    triples: list[tuple[Image, Image, ActivationMask]],
    generator: GeneratorHandle,
    hp: DeghostHyperparams | None = None,
    extractor: FeatureExtractor | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> tuple[DeghostNet, Discriminator, list[dict]]:
    """Alternating optimization of the restoration net and discriminator.

    Each (original, edited, mask) triple becomes a synthetic pair via mask
    folding; the generator prior stays frozen throughout. Per-step losses
    are logged as {step, l_mse, l_percep, l_adv, total} records.
    """
    hp = hp or DeghostHyperparams()
    extractor = extractor or ToyFeatureExtractor()
    if not triples:
        raise ValueError("empty dataset")

    torch.manual_seed(hp.seed)
    net = DeghostNet(generator)
    disc = Discriminator(resolution=generator.output_resolution[0])
    opt_g = torch.optim.Adam(net.trainable_parameters(), lr=hp.lr, betas=hp.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=hp.lr, betas=hp.betas)

    res = generator.output_resolution
    originals = torch.stack([i.to_tensor() for i, _, _ in triples])
    ghosted = []
    for original, edited, mask in triples:
        pair = synth_train_pair(original, edited, mask)
        ghosted.append(pair.f_train.to_tensor())
    ghosted = torch.stack(ghosted)

    rng = np.random.default_rng(hp.seed)
    log: list[dict] = []
    last_good = None
    for step in range(hp.steps):
        idx = torch.from_numpy(rng.integers(0, len(triples), size=hp.batch_size))
        target = originals[idx]
        f_train = ghosted[idx]

        out, _ = net(f_train)
        l_mse = mse_loss_tensor(out, target, hp.squared_mse)
        l_percep = perceptual_loss_tensor(out, target, extractor, hp.squared_mse)
        l_adv = gen_adv_loss_tensor(disc, out)
        total = hp.lambda_m * l_mse + hp.lambda_p * l_percep + hp.lambda_a * l_adv
        if not torch.isfinite(total):
            if checkpoint_dir is not None and last_good is not None:
                net.load_state_dict(last_good[0])
                disc.load_state_dict(last_good[1])
                _save_pair(net, disc, checkpoint_dir)
            raise TrainingDiverged(f"non-finite deghost loss at step {step}")
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()

        d_loss = disc_loss_tensor(disc, target, out.detach())
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        log.append(
            {
                "step": step,
                "l_mse": float(l_mse.item()),
                "l_percep": float(l_percep.item()),
                "l_adv": float(l_adv.item()),
                "total": float(total.item()),
            }
        )
        if step % hp.log_every == 0:
            last_good = (
                copy.deepcopy(net.state_dict()),
                copy.deepcopy(disc.state_dict()),
            )

    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    if checkpoint_dir is not None:
        _save_pair(net, disc, checkpoint_dir)
    return net, disc, log


def _save_pair(net: DeghostNet, disc: Discriminator, directory) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    net.save(d / "deghost.pt")
    torch.save({"kind": "deghost_disc", "state": disc.state_dict()}, d / "deghost_disc.pt")
