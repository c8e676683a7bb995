"""Differential activation: pair encoder, attribute classifier, and the
gradient-weighted mask over differential features.

The mask is computed from the difference of encoded features of the two
reconstructions (unedited vs edited), classified into "which attribute
changed", with per-channel weights taken as globally averaged gradients of
the requested class score w.r.t. the classifier's last conv features.
All convolutions are bias-free so that an identical pair maps to an
all-zero mask.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import DAConfig
from .images import ActivationMask, Image, ShapeError, resize_image

MASK_NORM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when a training loss goes non-finite."""


@dataclass
class DifferentialFeatures:
    """Encoded-feature difference, [K0, h0, w0]."""

    data: torch.Tensor


@dataclass
class AttributeLabel:
    """One-hot attribute indicator, [N]."""

    one_hot: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.one_hot, dtype=np.float64)
        if arr.ndim != 1 or not np.isclose(arr.sum(), 1.0) or set(np.unique(arr)) - {0.0, 1.0}:
            raise ValueError("label must be one-hot")
        self.one_hot = arr

    @classmethod
    def from_index(cls, index: int, count: int) -> "AttributeLabel":
        arr = np.zeros(count)
        arr[index] = 1.0
        return cls(arr)

    @property
    def index(self) -> int:
        return int(np.argmax(self.one_hot))


@dataclass
class AttributeLogits:
    """Pre-softmax classifier scores, [N]; keeps the autograd graph."""

    scores: torch.Tensor


@dataclass
class ClassifierFeatureMap:
    """Last-conv features [K, h, w]; keeps the autograd graph."""

    data: torch.Tensor


@dataclass
class ChannelWeights:
    """Globally averaged score gradients per channel."""

    beta: np.ndarray  # [K]
    class_index: int
    z: int  # h * w


def _conv_block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.LeakyReLU(0.1),
    )


class PairEncoder(nn.Module):
    """Plain trainable encoder applied to each image of the pair."""

    def __init__(self, in_channels: int = 3, base_channels: int = 32, strides=(2, 1)):
        super().__init__()
        blocks = []
        ch = in_channels
        width = base_channels
        for s in strides:
            blocks.append(_conv_block(ch, width, s))
            ch = width
            width *= 2
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class AttributeClassifier(nn.Module):
    """Two conv blocks, global average pooling, one linear head."""

    def __init__(self, in_channels: int, hidden_channels: int, num_attributes: int):
        super().__init__()
        self.conv = nn.Sequential(
            _conv_block(in_channels, hidden_channels, 1),
            _conv_block(hidden_channels, hidden_channels, 1),
        )
        self.head = nn.Linear(hidden_channels, num_attributes, bias=False)

    def forward_with_features(self, delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, K0, h, w] -> (logits [B, N], last-conv features [B, K, h, w])."""
        feats = self.conv(delta)
        logits = self.head(feats.mean(dim=(2, 3)))
        return logits, feats

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(delta)[0]


class DAModule:
    """Bundled pair encoder + classifier with the attribute catalog."""

    def __init__(
        self,
        pair_encoder: PairEncoder,
        classifier: AttributeClassifier,
        attribute_names: list[str],
        working_resolution: int,
    ):
        if len(attribute_names) < 2:
            raise ValueError("need at least 2 attributes")
        if len(set(attribute_names)) != len(attribute_names):
            raise ValueError("attribute names must be unique")
        self.pair_encoder = pair_encoder
        self.classifier = classifier
        self.attribute_names = list(attribute_names)
        self.working_resolution = working_resolution

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def prepare(self, image: Image) -> torch.Tensor:
        """Resample to the working resolution, [C, r, r] tensor."""
        r = self.working_resolution
        if image.resolution != (r, r):
            image = resize_image(image, (r, r))
        return image.to_tensor()

    def featurize(self, image: Image) -> torch.Tensor:
        with torch.no_grad():
            return self.pair_encoder(self.prepare(image).unsqueeze(0)).squeeze(0)

    def compute_mask(self, unedited: Image, edited: Image, class_index: int) -> ActivationMask:
        """Full mask path at the classifier feature resolution."""
        delta = differential_features(unedited, edited, self)
        logits, fmap = classify(delta, self)
        weights = channel_weights(logits, fmap, class_index)
        return diff_cam_mask(fmap, weights)

    def save(self, path) -> None:
        torch.save(
            {
                "kind": "da_module",
                "attributes": self.attribute_names,
                "working_resolution": self.working_resolution,
                "encoder_config": {
                    "in_channels": self.pair_encoder.blocks[0][0].in_channels,
                    "base_channels": self.pair_encoder.blocks[0][0].out_channels,
                    "strides": [b[0].stride[0] for b in self.pair_encoder.blocks],
                },
                "classifier_hidden": self.classifier.head.in_features,
                "pair_encoder": self.pair_encoder.state_dict(),
                "classifier": self.classifier.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "DAModule":
        payload = torch.load(path, weights_only=True)
        if payload.get("kind") != "da_module":
            raise ValueError("not a DA checkpoint")
        enc_cfg = payload["encoder_config"]
        encoder = PairEncoder(
            enc_cfg["in_channels"], enc_cfg["base_channels"], tuple(enc_cfg["strides"])
        )
        classifier = AttributeClassifier(
            encoder.out_channels, payload["classifier_hidden"], len(payload["attributes"])
        )
        encoder.load_state_dict(payload["pair_encoder"])
        classifier.load_state_dict(payload["classifier"])
        return cls(encoder, classifier, payload["attributes"], payload["working_resolution"])


def differential_features(unedited: Image, edited: Image, da: DAModule) -> DifferentialFeatures:
    """Feature difference of the pair: featurize(unedited) - featurize(edited)."""
    if unedited.resolution != edited.resolution:
        raise ShapeError(
            f"pair resolution mismatch: {unedited.resolution} vs {edited.resolution}"
        )
    return DifferentialFeatures(da.featurize(unedited) - da.featurize(edited))


def classify(delta: DifferentialFeatures, da: DAModule) -> tuple[AttributeLogits, ClassifierFeatureMap]:
    """Logits plus the last-conv feature map retained for mask computation."""
    x = delta.data.detach().unsqueeze(0)
    expected = da.pair_encoder.out_channels
    if x.shape[1] != expected:
        raise ShapeError(f"classifier expects {expected} channels, got {x.shape[1]}")
    with torch.enable_grad():
        # Route the logits through the returned feature tensor so the
        # graph from H to s stays differentiable for channel_weights.
        feats = da.classifier.conv(x).squeeze(0)
        logits = da.classifier.head(feats.mean(dim=(1, 2)))
    return AttributeLogits(logits), ClassifierFeatureMap(feats)


def cross_entropy(logits: AttributeLogits, label: AttributeLabel) -> float:
    """-sum_c y_c * log softmax(s)_c, stabilized by max subtraction."""
    s = logits.scores.detach().numpy().astype(np.float64)
    y = label.one_hot
    if s.shape != y.shape:
        raise ShapeError(f"logits {s.shape} vs label {y.shape}")
    shifted = s - s.max()
    log_softmax = shifted - math.log(np.exp(shifted).sum())
    return float(-(y * log_softmax).sum())


def ce_loss_tensor(logits: torch.Tensor, target_index: torch.Tensor) -> torch.Tensor:
    """Differentiable batched form of the same objective."""
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs.gather(-1, target_index.unsqueeze(-1)).mean()


def channel_weights(
    logits: AttributeLogits, feature_map: ClassifierFeatureMap, class_index: int
) -> ChannelWeights:
    """Per-channel weights: global average pooling of d score_c / d features."""
    n = logits.scores.shape[0]
    if not 0 <= class_index < n:
        raise IndexError(f"class index {class_index} outside [0, {n})")
    grads = torch.autograd.grad(
        logits.scores[class_index], feature_map.data, retain_graph=True
    )[0]
    k, h, w = grads.shape
    beta = grads.mean(dim=(1, 2)).detach().numpy().astype(np.float64)
    return ChannelWeights(beta=beta, class_index=class_index, z=h * w)


def diff_cam_mask(feature_map: ClassifierFeatureMap, weights: ChannelWeights) -> ActivationMask:
    """ReLU of the weighted channel sum, max-normalized into [0, 1].

    A pre-normalization max at or below the epsilon guard means "no edit
    detected" and yields the all-zero mask.
    """
    fmap = feature_map.data.detach().numpy().astype(np.float64)
    if fmap.shape[0] != weights.beta.shape[0]:
        raise ShapeError(f"channels {fmap.shape[0]} vs weights {weights.beta.shape[0]}")
    raw = np.maximum(np.tensordot(weights.beta, fmap, axes=1), 0.0)
    peak = raw.max()
    if peak > MASK_NORM_EPS:
        raw = raw / peak
    else:
        raw = np.zeros_like(raw)
    return ActivationMask(raw[None].astype(np.float32))


def upsample_mask(mask: ActivationMask, target: tuple[int, int]) -> ActivationMask:
    """Bilinear upsample to (H, W)."""
    h, w = target
    if h < mask.data.shape[1] or w < mask.data.shape[2]:
        raise ValueError(f"target {target} smaller than mask {mask.resolution}")
    t = torch.from_numpy(mask.data).unsqueeze(0)
    out = torch.nn.functional.interpolate(
        t, size=(h, w), mode="bilinear", align_corners=False
    )
    return ActivationMask(out.squeeze(0).clamp(0.0, 1.0).numpy())


def train_da(
    samples: list[tuple[Image, Image, int]],
    config: DAConfig | None = None,
    attribute_names: list[str] | None = None,
    log_path=None,
) -> tuple[DAModule, list[dict]]:
    """Train pair encoder + classifier jointly on (unedited, edited, label).

    Returns the trained module and the per-step loss log; the log is also
    written as newline-delimited JSON when log_path is given.
    """
    cfg = config or DAConfig()
    if not samples:
        raise ValueError("empty dataset")
    labels = sorted({label for _, _, label in samples})
    n_attr = max(labels) + 1
    names = attribute_names or [f"attr_{i}" for i in range(n_attr)]
    if len(names) < n_attr:
        raise ValueError("attribute_names shorter than label range")

    torch.manual_seed(cfg.seed)
    encoder = PairEncoder(3, cfg.base_channels, cfg.encoder_strides)
    classifier = AttributeClassifier(
        encoder.out_channels, cfg.classifier_channels, len(names)
    )
    da = DAModule(encoder, classifier, names, cfg.working_resolution)

    # Pre-resample once; training then runs purely on tensors.
    pairs = torch.stack(
        [torch.stack([da.prepare(a), da.prepare(b)]) for a, b, _ in samples]
    )  # [S, 2, C, r, r]
    labels_t = torch.tensor([label for _, _, label in samples], dtype=torch.long)

    params = list(encoder.parameters()) + list(classifier.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(samples), size=cfg.batch_size))
        batch = pairs[idx]
        delta = encoder(batch[:, 0]) - encoder(batch[:, 1])
        logits = classifier(delta)
        loss = ce_loss_tensor(logits, labels_t[idx])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.append({"step": step, "loss": float(loss.item())})

    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    return da, log


def da_accuracy(da: DAModule, samples: list[tuple[Image, Image, int]]) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    hits = 0
    for unedited, edited, label in samples:
        delta = differential_features(unedited, edited, da)
        logits, _ = classify(delta, da)
        hits += int(int(logits.scores.argmax()) == label)
    return hits / len(samples)
