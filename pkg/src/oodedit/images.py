"""Raster types and conversions.

Images live in channels-first float32 arrays. Internally everything is
signed_unit ([-1, 1]); unsigned_unit ([0, 1]) only appears at I/O
boundaries (PNG bytes, base64 payloads).
"""
from __future__ import annotations

import base64
import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image as PILImage

SIGNED_UNIT = "signed_unit"
UNSIGNED_UNIT = "unsigned_unit"


class ShapeError(ValueError):
    """Raised when an array does not match the expected layout."""


@dataclass(frozen=True)
class Image:
    """Floating-point raster, [C, H, W], C in {1, 3}."""

    data: np.ndarray
    value_range: str = SIGNED_UNIT

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ShapeError(f"expected [C,H,W] with C in {{1,3}}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        lo, hi = (-1.0, 1.0) if self.value_range == SIGNED_UNIT else (0.0, 1.0)
        if arr.min() < lo - 1e-6 or arr.max() > hi + 1e-6:
            raise ValueError(
                f"values outside {self.value_range} range: [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def to_signed(self) -> "Image":
        if self.value_range == SIGNED_UNIT:
            return self
        return Image(self.data * 2.0 - 1.0, SIGNED_UNIT)

    def to_unsigned(self) -> "Image":
        if self.value_range == UNSIGNED_UNIT:
            return self
        return Image((self.data + 1.0) / 2.0, UNSIGNED_UNIT)

    def to_tensor(self) -> torch.Tensor:
        """Signed-unit [C,H,W] float32 tensor."""
        return torch.from_numpy(self.to_signed().data.copy())


@dataclass(frozen=True)
class ActivationMask:
    """Single-channel map in [0, 1], [1, h, w]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ShapeError(f"expected [1,h,w], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"mask values outside [0,1]: [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "data", arr)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def image_from_tensor(t: torch.Tensor) -> Image:
    """[C,H,W] signed-unit tensor -> Image (clamped to [-1,1])."""
    arr = t.detach().cpu().float().clamp(-1.0, 1.0).numpy()
    return Image(arr, SIGNED_UNIT)


def resize_image(image: Image, target: tuple[int, int]) -> Image:
    """Bilinear resample to (H, W). Used for the 4:1 working-resolution hop."""
    t = image.to_tensor().unsqueeze(0)
    out = torch.nn.functional.interpolate(
        t, size=target, mode="bilinear", align_corners=False
    )
    return image_from_tensor(out.squeeze(0))


def load_png(path) -> Image:
    with PILImage.open(path) as im:
        return _from_pil(im)


def save_png(image: Image, path) -> None:
    _to_pil(image).save(path, format="PNG")


def image_to_base64(image: Image) -> str:
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_from_base64(payload: str) -> Image:
    raw = base64.b64decode(payload)
    with PILImage.open(io.BytesIO(raw)) as im:
        return _from_pil(im)


def mask_to_u8(mask: ActivationMask) -> np.ndarray:
    """[h,w] uint8 grayscale view of a mask."""
    return np.round(mask.data[0] * 255.0).astype(np.uint8)


def mask_to_base64(mask: ActivationMask) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(mask_to_u8(mask), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def save_mask_png(mask: ActivationMask, path) -> None:
    PILImage.fromarray(mask_to_u8(mask), mode="L").save(path, format="PNG")


def _from_pil(im: PILImage.Image) -> Image:
    if im.mode not in ("L", "RGB"):
        im = im.convert("RGB")
    arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return Image(arr, UNSIGNED_UNIT).to_signed()


def _to_pil(image: Image) -> PILImage.Image:
    arr = image.to_unsigned().data
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        return PILImage.fromarray(u8[0], mode="L")
    return PILImage.fromarray(u8.transpose(1, 2, 0), mode="RGB")
