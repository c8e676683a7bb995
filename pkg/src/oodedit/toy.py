"""Desk-scale synthetic world: procedural scenes, an analytic generator,
and a least-squares inversion encoder.

Scenes are affine in their parameter vector (pre-clamp): every pixel is
``t0 + sum_j p_j * t_j`` over fixed soft region templates, so the
generator has a closed form, inversion is a linear solve, and ground-truth
changed-pixel masks come straight from rendering with/without a parameter
delta. An optional overlay sprite is composited outside this affine model,
which is exactly what makes it out-of-domain for the generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ToyConfig
from .images import ActivationMask, Image, image_from_tensor
from .latent import (
    DirectionCatalog,
    EditDirection,
    LatentCode,
    register_encoder_kind,
    register_generator_kind,
)

BASE_RESOLUTION = 64
EDGE_SOFTNESS = 0.35  # px at base resolution; near-hard edges

# Parameter layout: two base params then the editable attributes.
PARAM_NAMES = ("background", "face_shade", "brows", "glasses", "mouth", "sky")
ATTRIBUTE_NAMES = ("brows", "glasses", "mouth", "sky")
ATTRIBUTE_OFFSET = 2
PARAM_COUNT = len(PARAM_NAMES)

GT_PIXEL_THRESHOLD = 1.0 / 255.0

# Signed-unit color axes; chosen so in-domain scenes never clamp.
_BG_BASE = (-0.30, -0.25, -0.10)
_FACE_BASE = (0.45, 0.25, 0.05)
_AXES = {
    "background": (0.50, 0.50, 0.55),
    "face_shade": (-0.45, -0.30, -0.20),
    "brows": (-0.50, -0.42, -0.35),
    "glasses": (-0.55, -0.50, -0.45),
    "mouth": (0.15, -0.50, -0.45),
    "sky": (0.30, -0.05, -0.20),
}

# Geometry in base-resolution pixel units.
_FACE = dict(cx=32.0, cy=34.0, rx=20.0, ry=24.0)
_BROWS = dict(x0=17.0, x1=47.0, y0=13.0, y1=22.0)
_GLASS_LEFT = dict(cx=24.0, cy=30.0, r=6.0)
_GLASS_RIGHT = dict(cx=40.0, cy=30.0, r=6.0)
_MOUTH = dict(x0=22.0, x1=42.0, y0=42.0, y1=51.0)

_OVERLAY_BARS = (  # cross sprite in the top-right background corner
    dict(x0=45.0, x1=61.0, y0=8.0, y1=13.0),
    dict(x0=50.0, x1=55.0, y0=3.0, y1=18.0),
)
_OVERLAY_COLOR = (0.92, 0.80, 0.10)


@dataclass(frozen=True)
class OverlaySpec:
    """Out-of-domain sprite the generator cannot reproduce."""

    strength: float = 1.0


@dataclass(frozen=True)
class SyntheticScene:
    params: np.ndarray  # [PARAM_COUNT]
    overlay: OverlaySpec | None = None

    def __post_init__(self):
        arr = np.asarray(self.params, dtype=np.float32)
        if arr.shape != (PARAM_COUNT,):
            raise ValueError(f"expected {PARAM_COUNT} params, got {arr.shape}")
        object.__setattr__(self, "params", arr)

    def with_param(self, index: int, value: float) -> "SyntheticScene":
        params = self.params.copy()
        params[index] = value
        return SyntheticScene(params, self.overlay)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    # Pixel-center coordinates expressed in base-resolution units.
    scale = BASE_RESOLUTION / resolution
    u = (np.arange(resolution, dtype=np.float64) + 0.5) * scale
    return np.meshgrid(u, u, indexing="xy")  # xs[y,x], ys[y,x]


def _softness_for(resolution: int) -> float:
    # Soften minified templates so low-res prior taps stay alias-free.
    return max(EDGE_SOFTNESS, 0.5 * BASE_RESOLUTION / resolution)


def _soft_rect(xs, ys, spec, s) -> np.ndarray:
    wx = _sigmoid((xs - spec["x0"]) / s) * _sigmoid((spec["x1"] - xs) / s)
    wy = _sigmoid((ys - spec["y0"]) / s) * _sigmoid((spec["y1"] - ys) / s)
    return wx * wy


def _soft_disk(xs, ys, spec, s) -> np.ndarray:
    d = np.sqrt((xs - spec["cx"]) ** 2 + (ys - spec["cy"]) ** 2)
    return _sigmoid((spec["r"] - d) / s)


def _soft_ellipse(xs, ys, spec, s) -> np.ndarray:
    d = np.sqrt(((xs - spec["cx"]) / spec["rx"]) ** 2 + ((ys - spec["cy"]) / spec["ry"]) ** 2)
    # Convert the normalized radial distance to an approximate pixel
    # distance so edge softness stays resolution-independent.
    r_eff = np.sqrt(spec["rx"] * spec["ry"])
    return _sigmoid((1.0 - d) * r_eff / s)


class ToyWorld:
    """Closed-form scene renderer with cached per-resolution templates."""

    def __init__(self):
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def face_mask(self, resolution: int = BASE_RESOLUTION) -> np.ndarray:
        xs, ys = _grid(resolution)
        return _soft_ellipse(xs, ys, _FACE, _softness_for(resolution))

    def region_masks(self, resolution: int = BASE_RESOLUTION) -> dict[str, np.ndarray]:
        xs, ys = _grid(resolution)
        s = _softness_for(resolution)
        face = _soft_ellipse(xs, ys, _FACE, s)
        bg = 1.0 - face
        return {
            "background": bg,
            "face_shade": face,
            "brows": _soft_rect(xs, ys, _BROWS, s),
            "glasses": _soft_disk(xs, ys, _GLASS_LEFT, s)
            + _soft_disk(xs, ys, _GLASS_RIGHT, s),
            "mouth": _soft_rect(xs, ys, _MOUTH, s),
            "sky": bg,
        }

    def templates(self, resolution: int = BASE_RESOLUTION) -> tuple[torch.Tensor, torch.Tensor]:
        """(t0 [3,r,r], T [P,3,r,r]) float32 tensors."""
        if resolution not in self._cache:
            regions = self.region_masks(resolution)
            face = regions["face_shade"]
            bg = regions["background"]
            t0 = np.stack(
                [
                    np.float64(_BG_BASE[c]) * bg + np.float64(_FACE_BASE[c]) * face
                    for c in range(3)
                ]
            )
            t = np.stack(
                [
                    np.stack([np.float64(_AXES[name][c]) * regions[name] for c in range(3)])
                    for name in PARAM_NAMES
                ]
            )
            self._cache[resolution] = (
                torch.from_numpy(t0.astype(np.float32)),
                torch.from_numpy(t.astype(np.float32)),
            )
        return self._cache[resolution]

    def render_params_tensor(
        self, params: torch.Tensor, resolution: int = BASE_RESOLUTION
    ) -> torch.Tensor:
        """[.., P] params -> [.., 3, r, r] signed-unit render (differentiable)."""
        t0, t = self.templates(resolution)
        out = t0 + torch.einsum("...p,pchw->...chw", params, t)
        return out.clamp(-1.0, 1.0)

    def overlay_mask(self, resolution: int = BASE_RESOLUTION) -> np.ndarray:
        xs, ys = _grid(resolution)
        s = _softness_for(resolution)
        m = np.zeros_like(xs)
        for bar in _OVERLAY_BARS:
            m = np.maximum(m, _soft_rect(xs, ys, bar, s))
        return m

    def render(self, scene: SyntheticScene, resolution: int = BASE_RESOLUTION) -> Image:
        params = torch.from_numpy(scene.params)
        with torch.no_grad():
            out = self.render_params_tensor(params, resolution).numpy()
        if scene.overlay is not None:
            m = self.overlay_mask(resolution).astype(np.float32) * np.float32(
                scene.overlay.strength
            )
            sprite = np.asarray(_OVERLAY_COLOR, dtype=np.float32)[:, None, None]
            out = m[None] * sprite + (1.0 - m[None]) * out
        return Image(np.clip(out, -1.0, 1.0))

    def ground_truth_change_mask(
        self,
        scene: SyntheticScene,
        attribute: str | int,
        delta: float,
        resolution: int = BASE_RESOLUTION,
    ) -> ActivationMask:
        """Binary mask of pixels whose render moves by more than 1/255."""
        index = attribute if isinstance(attribute, int) else param_index(attribute)
        base = self.render(scene, resolution).data
        moved = self.render(scene.with_param(index, scene.params[index] + delta), resolution).data
        changed = np.abs(moved - base).max(axis=0) > GT_PIXEL_THRESHOLD
        return ActivationMask(changed[None].astype(np.float32))


def param_index(name: str) -> int:
    if name not in PARAM_NAMES:
        raise KeyError(f"unknown parameter: {name!r}")
    return PARAM_NAMES.index(name)


def attribute_param_index(name: str) -> int:
    if name not in ATTRIBUTE_NAMES:
        raise KeyError(f"unknown attribute: {name!r}")
    return param_index(name)


class ToyGenerator:
    """GeneratorHandle over the analytic world.

    Latent layout mirrors an extended per-layer space: [L, D] with the
    first PARAM_COUNT dims decoding to scene parameters by averaging over
    layers. Prior taps are clean renders at the pyramid resolutions.
    """

    def __init__(self, world: ToyWorld, layers: int, dim: int, resolution: int):
        if dim < PARAM_COUNT:
            raise ValueError(f"latent dim must be >= {PARAM_COUNT}")
        self.world = world
        self.latent_layers = layers
        self.latent_dim = dim
        self.output_resolution = (resolution, resolution)
        self.channels = 3
        taps = []
        r = 8
        while r <= resolution:
            taps.append(r)
            r *= 2
        self.prior_tap_resolutions = tuple(taps)

    def code_to_params(self, w: torch.Tensor) -> torch.Tensor:
        """[.., L, D] -> [.., P] by layer average of the leading dims."""
        return w[..., : PARAM_COUNT].mean(dim=-2)

    def render_codes(self, w: torch.Tensor, resolution: int | None = None) -> torch.Tensor:
        """Differentiable [B, L, D] -> [B, 3, r, r]."""
        res = resolution or self.output_resolution[0]
        return self.world.render_params_tensor(self.code_to_params(w), res)

    def prior_features(self, w: torch.Tensor) -> list[torch.Tensor]:
        return [self.render_codes(w, r) for r in self.prior_tap_resolutions]

    def synthesize(self, code: LatentCode) -> Image:
        w = torch.from_numpy(code.values)
        with torch.no_grad():
            out = self.render_codes(w.unsqueeze(0)).squeeze(0)
        return image_from_tensor(out)

    def weight_fingerprint(self) -> bytes:
        """Stable digest of the frozen prior; used to prove it never trains."""
        import hashlib

        h = hashlib.sha256()
        for res in self.prior_tap_resolutions:
            t0, t = self.world.templates(res)
            h.update(t0.numpy().tobytes())
            h.update(t.numpy().tobytes())
        return h.digest()

    def state_payload(self) -> dict:
        return {
            "kind": "toy_world_generator",
            "layers": self.latent_layers,
            "dim": self.latent_dim,
            "resolution": self.output_resolution[0],
        }


class ToyEncoder:
    """EncoderHandle: least-squares parameter readout over the templates.

    Exact (to float precision) on in-domain renders; overlay sprites
    perturb the estimate only slightly and are dropped by construction.
    """

    def __init__(self, world: ToyWorld, layers: int, dim: int, resolution: int):
        if dim < PARAM_COUNT:
            raise ValueError(f"latent dim must be >= {PARAM_COUNT}")
        self.world = world
        self.latent_layers = layers
        self.latent_dim = dim
        self.input_resolution = (resolution, resolution)
        self.channels = 3
        t0, t = world.templates(resolution)
        basis = t.numpy().astype(np.float64).reshape(PARAM_COUNT, -1)  # [P, M]
        self._t0_flat = t0.numpy().astype(np.float64).reshape(-1)
        self._readout = np.linalg.pinv(basis.T)  # [P, M]

    def estimate_params(self, image: Image) -> np.ndarray:
        flat = image.to_signed().data.astype(np.float64).reshape(-1)
        return self._readout @ (flat - self._t0_flat)

    def encode(self, image: Image) -> LatentCode:
        params = self.estimate_params(image)
        values = np.zeros((self.latent_layers, self.latent_dim), dtype=np.float32)
        values[:, : PARAM_COUNT] = params.astype(np.float32)
        return LatentCode(values)

    def state_payload(self) -> dict:
        return {
            "kind": "toy_affine_encoder",
            "layers": self.latent_layers,
            "dim": self.latent_dim,
            "resolution": self.input_resolution[0],
        }


def build_toy_pipeline(
    seed: int = 7, config: ToyConfig | None = None
) -> tuple[ToyEncoder, ToyGenerator, DirectionCatalog]:
    """Deterministic toy stand-ins plus axis-aligned direction catalog."""
    cfg = config or ToyConfig(seed=seed)
    world = ToyWorld()
    generator = ToyGenerator(world, cfg.latent_layers, cfg.latent_dim, cfg.resolution)
    encoder = ToyEncoder(world, cfg.latent_layers, cfg.latent_dim, cfg.resolution)
    directions = []
    for name in ATTRIBUTE_NAMES:
        vec = np.zeros(cfg.latent_dim, dtype=np.float32)
        vec[attribute_param_index(name)] = 1.0
        directions.append(
            EditDirection(
                name=name,
                vector=vec,
                default_alpha=cfg.default_alpha,
                alpha_min=cfg.alpha_min,
                alpha_max=cfg.alpha_max,
            )
        )
    return encoder, generator, DirectionCatalog(directions)


def _load_toy_generator(payload: dict) -> ToyGenerator:
    return ToyGenerator(ToyWorld(), payload["layers"], payload["dim"], payload["resolution"])


def _load_toy_encoder(payload: dict) -> ToyEncoder:
    return ToyEncoder(ToyWorld(), payload["layers"], payload["dim"], payload["resolution"])


register_generator_kind("toy_world_generator", _load_toy_generator)
register_encoder_kind("toy_affine_encoder", _load_toy_encoder)


# In-domain sampling ranges: base params roam widely, attribute params
# start low so catalog-strength edits stay clear of the clamp.
_BASE_RANGE = (0.10, 0.90)
_ATTR_RANGE = (0.05, 0.50)


def sample_scene(rng: np.random.Generator, overlay: bool = False) -> SyntheticScene:
    params = np.empty(PARAM_COUNT, dtype=np.float32)
    params[:ATTRIBUTE_OFFSET] = rng.uniform(*_BASE_RANGE, size=ATTRIBUTE_OFFSET)
    params[ATTRIBUTE_OFFSET:] = rng.uniform(
        *_ATTR_RANGE, size=PARAM_COUNT - ATTRIBUTE_OFFSET
    )
    spec = OverlaySpec(strength=float(rng.uniform(0.85, 1.0))) if overlay else None
    return SyntheticScene(params, spec)


def make_dataset(
    count: int, seed: int, overlay_fraction: float = 0.0
) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [
        sample_scene(rng, overlay=bool(rng.uniform() < overlay_fraction))
        for _ in range(count)
    ]


def save_manifest(scenes: list[SyntheticScene], path) -> None:
    doc = {
        "param_names": list(PARAM_NAMES),
        "scenes": [
            {
                "params": [float(v) for v in s.params],
                "overlay": None if s.overlay is None else {"strength": s.overlay.strength},
            }
            for s in scenes
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> list[SyntheticScene]:
    doc = json.loads(Path(path).read_text())
    scenes = []
    for entry in doc["scenes"]:
        overlay = entry.get("overlay")
        scenes.append(
            SyntheticScene(
                np.asarray(entry["params"], dtype=np.float32),
                None if overlay is None else OverlaySpec(strength=overlay["strength"]),
            )
        )
    return scenes
