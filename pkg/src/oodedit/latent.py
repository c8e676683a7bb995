"""Latent codes, semantic directions, and pluggable encoder/generator handles.

Encoders and generators are consumed as frozen checkpoints behind small
handle interfaces; this module never trains them. Direction catalogs pair
named vectors with per-attribute alpha ranges and are interchangeable
regardless of how the directions were discovered.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .images import Image, ShapeError


@dataclass(frozen=True)
class LatentCode:
    """Per-layer latent matrix [L, D] in the generator's extended space."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected [L,D], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("latent code contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EditDirection:
    """Named semantic direction; vector is [D] (broadcast over layers) or [L, D]."""

    name: str
    vector: np.ndarray
    default_alpha: float = 1.0
    alpha_min: float = -3.0
    alpha_max: float = 3.0

    def __post_init__(self):
        arr = np.asarray(self.vector, dtype=np.float32)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"direction must be [D] or [L,D], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("direction contains non-finite values")
        object.__setattr__(self, "vector", arr)


class DirectionCatalog:
    """Unique-name collection of edit directions."""

    def __init__(self, directions: list[EditDirection]):
        names = [d.name for d in directions]
        if len(set(names)) != len(names):
            raise ValueError("direction names must be unique")
        self._by_name = {d.name: d for d in directions}

    @property
    def names(self) -> list[str]:
        return list(self._by_name)

    def __len__(self) -> int:
        return len(self._by_name)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> EditDirection:
        if name not in self._by_name:
            raise KeyError(f"unknown attribute: {name!r}")
        return self._by_name[name]

    def index_of(self, name: str) -> int:
        if name not in self._by_name:
            raise KeyError(f"unknown attribute: {name!r}")
        return self.names.index(name)

    def save(self, base_path) -> None:
        """Persist as <base>.npz (vectors) + <base>.json (index with alpha ranges)."""
        base = Path(base_path)
        arrays = {d.name: d.vector for d in self._by_name.values()}
        np.savez(base.with_suffix(".npz"), **arrays)
        index = [
            {
                "name": d.name,
                "alpha_min": d.alpha_min,
                "alpha_max": d.alpha_max,
                "default_alpha": d.default_alpha,
            }
            for d in self._by_name.values()
        ]
        base.with_suffix(".json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, base_path) -> "DirectionCatalog":
        base = Path(base_path)
        with np.load(base.with_suffix(".npz")) as arrays:
            vectors = {k: arrays[k] for k in arrays.files}
        index = json.loads(base.with_suffix(".json").read_text())
        directions = [
            EditDirection(
                name=entry["name"],
                vector=vectors[entry["name"]],
                default_alpha=entry["default_alpha"],
                alpha_min=entry["alpha_min"],
                alpha_max=entry["alpha_max"],
            )
            for entry in index
        ]
        return cls(directions)


@runtime_checkable
class EncoderHandle(Protocol):
    """Frozen inversion encoder: image -> latent code."""

    input_resolution: tuple[int, int]
    channels: int
    latent_layers: int
    latent_dim: int

    def encode(self, image: Image) -> LatentCode: ...


@runtime_checkable
class GeneratorHandle(Protocol):
    """Frozen generator: latent code -> image, plus per-scale prior taps."""

    output_resolution: tuple[int, int]
    channels: int
    latent_layers: int
    latent_dim: int
    prior_tap_resolutions: tuple[int, ...]

    def synthesize(self, code: LatentCode) -> Image: ...


def invert(image: Image, encoder: EncoderHandle) -> LatentCode:
    """w = E_fixed(I). Requires an exact resolution/channel match."""
    if image.resolution != tuple(encoder.input_resolution):
        raise ShapeError(
            f"encoder expects {tuple(encoder.input_resolution)}, got {image.resolution}"
        )
    if image.channels != encoder.channels:
        raise ShapeError(
            f"encoder expects {encoder.channels} channels, got {image.channels}"
        )
    return encoder.encode(image)


def generate(code: LatentCode, generator: GeneratorHandle) -> Image:
    """I' = G(w), clamped to signed-unit range."""
    if (code.layers, code.dim) != (generator.latent_layers, generator.latent_dim):
        raise ShapeError(
            f"generator expects [{generator.latent_layers},{generator.latent_dim}], "
            f"got [{code.layers},{code.dim}]"
        )
    return generator.synthesize(code)


def apply_direction(code: LatentCode, direction: EditDirection, alpha: float) -> LatentCode:
    """w + alpha * n, broadcasting [D] directions across layers."""
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    vec = direction.vector
    if vec.shape[-1] != code.dim:
        raise ShapeError(f"direction dim {vec.shape[-1]} != code dim {code.dim}")
    if vec.ndim == 2 and vec.shape[0] != code.layers:
        raise ShapeError(f"direction layers {vec.shape[0]} != code layers {code.layers}")
    shifted = code.values + np.float32(alpha) * vec
    return LatentCode(shifted)


class MeanEncoder:
    """Reference encoder: per-channel spatial mean replicated over [L, D].

    Only meaningful for D == channels; used as the simplest conforming
    EncoderHandle in tests.
    """

    def __init__(self, resolution: tuple[int, int], channels: int, layers: int):
        self.input_resolution = resolution
        self.channels = channels
        self.latent_layers = layers
        self.latent_dim = channels

    def encode(self, image: Image) -> LatentCode:
        means = image.to_signed().data.mean(axis=(1, 2))  # [C]
        values = np.tile(means, (self.latent_layers, 1))
        return LatentCode(values)


# Checkpoint registry: kind tag -> loader. Toy handles register themselves
# on import; real checkpoints plug in the same way.
_ENCODER_LOADERS: dict[str, callable] = {}
_GENERATOR_LOADERS: dict[str, callable] = {}


def register_encoder_kind(kind: str, loader) -> None:
    _ENCODER_LOADERS[kind] = loader


def register_generator_kind(kind: str, loader) -> None:
    _GENERATOR_LOADERS[kind] = loader


def load_encoder(path) -> EncoderHandle:
    import torch

    payload = torch.load(path, weights_only=True)
    kind = payload.get("kind")
    if kind not in _ENCODER_LOADERS:
        raise ValueError(f"unknown encoder checkpoint kind: {kind!r}")
    return _ENCODER_LOADERS[kind](payload)


def load_generator(path) -> GeneratorHandle:
    import torch

    payload = torch.load(path, weights_only=True)
    kind = payload.get("kind")
    if kind not in _GENERATOR_LOADERS:
        raise ValueError(f"unknown generator checkpoint kind: {kind!r}")
    return _GENERATOR_LOADERS[kind](payload)
