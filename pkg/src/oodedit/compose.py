"""Mask-weighted blending and the multi-attribute editing chain."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffact import DAModule, upsample_mask
from .images import ActivationMask, Image, ShapeError
from .latent import DirectionCatalog, EncoderHandle, GeneratorHandle, apply_direction, generate, invert


@dataclass(frozen=True)
class EditRequest:
    attribute_name: str
    alpha: float

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")


@dataclass
class EditResult:
    fused: Image
    final_mask: ActivationMask
    per_step_masks: list[ActivationMask]
    edited_chain: list[Image]
    inversion: Image


def requests_from_json(doc: str | list) -> list[EditRequest]:
    """Parse a JSON array of {attribute, alpha} objects."""
    entries = json.loads(doc) if isinstance(doc, str) else doc
    return [EditRequest(e["attribute"], float(e["alpha"])) for e in entries]


def compose(edited: Image, original: Image, mask: ActivationMask) -> Image:
    """F = edited * M + original * (1 - M), mask broadcast over channels.

    Exact at the extremes: an all-zero mask returns the original bits, an
    all-one mask returns the edited bits.
    """
    if edited.data.shape != original.data.shape:
        raise ShapeError(f"image shapes differ: {edited.data.shape} vs {original.data.shape}")
    if mask.resolution != edited.resolution:
        raise ShapeError(f"mask {mask.resolution} vs image {edited.resolution}")
    t = edited.to_signed().data
    i = original.to_signed().data
    m = mask.data
    return Image(t * m + i * (1.0 - m))


def combine_masks(masks: list[ActivationMask]) -> ActivationMask:
    """Elementwise maximum over an equal-shape mask set."""
    if not masks:
        raise ValueError("empty mask list")
    shapes = {m.data.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError(f"mask shapes differ: {shapes}")
    out = masks[0].data
    for m in masks[1:]:
        out = np.maximum(out, m.data)
    return ActivationMask(out)


@dataclass
class EditingPipeline:
    """Frozen handles needed to run the composition stage."""

    encoder: EncoderHandle
    generator: GeneratorHandle
    catalog: DirectionCatalog
    da: DAModule

    def class_index(self, attribute_name: str) -> int:
        if attribute_name not in self.da.attribute_names:
            raise KeyError(f"unknown attribute: {attribute_name!r}")
        return self.da.attribute_names.index(attribute_name)


def multi_attribute_edit(
    original: Image, requests: list[EditRequest], pipeline: EditingPipeline
) -> EditResult:
    """Sequential single-attribute edits with a shared, maximized mask.

    The latent walk accumulates each step's direction. Step 1's mask comes
    from the (inversion, first edit) pair; later steps use consecutive
    edited pairs, each classified with the class of the attribute edited
    at that step. Per-step masks are upsampled to image resolution before
    the elementwise max.
    """
    if not requests:
        raise ValueError("need at least one edit request")
    code = invert(original, pipeline.encoder)
    inversion = generate(code, pipeline.generator)

    edited_chain: list[Image] = []
    step_masks: list[ActivationMask] = []
    previous = inversion
    current_code = code
    for request in requests:
        direction = pipeline.catalog.get(request.attribute_name)
        current_code = apply_direction(current_code, direction, request.alpha)
        edited = generate(current_code, pipeline.generator)
        mask = pipeline.da.compute_mask(
            previous, edited, pipeline.class_index(request.attribute_name)
        )
        step_masks.append(upsample_mask(mask, original.resolution))
        edited_chain.append(edited)
        previous = edited

    final_mask = combine_masks(step_masks)
    fused = compose(edited_chain[-1], original, final_mask)
    return EditResult(
        fused=fused,
        final_mask=final_mask,
        per_step_masks=step_masks,
        edited_chain=edited_chain,
        inversion=inversion,
    )


def single_attribute_edit(
    original: Image, attribute_name: str, alpha: float, pipeline: EditingPipeline
) -> EditResult:
    """Degenerate one-step chain; identical to multi_attribute_edit with r=1."""
    return multi_attribute_edit(original, [EditRequest(attribute_name, alpha)], pipeline)
