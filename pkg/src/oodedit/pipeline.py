"""Full editing pipeline: invert, edit, mask, compose, deghost."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .compose import EditingPipeline, EditRequest, EditResult, multi_attribute_edit
from .deghost import DeghostNet, deghost
from .diffact import DAModule
from .images import Image
from .latent import DirectionCatalog, load_encoder, load_generator


@dataclass
class FullPipeline:
    """Composition-stage handles plus the optional deghosting network."""

    editing: EditingPipeline
    deghost_net: DeghostNet | None = None

    @classmethod
    def load(cls, checkpoint_dir) -> "FullPipeline":
        """Load encoder.pt, generator.pt, da.pt, catalog.{npz,json} and,
        when present, deghost.pt from one directory."""
        d = Path(checkpoint_dir)
        encoder = load_encoder(d / "encoder.pt")
        generator = load_generator(d / "generator.pt")
        catalog = DirectionCatalog.load(d / "catalog")
        da = DAModule.load(d / "da.pt")
        editing = EditingPipeline(encoder, generator, catalog, da)
        net = None
        if (d / "deghost.pt").exists():
            net = DeghostNet.load(d / "deghost.pt", generator)
        return cls(editing, net)

    def run(
        self, original: Image, requests: list[EditRequest], skip_deghost: bool = False
    ) -> tuple[Image, EditResult, bool]:
        """Returns (final output, composition result, deghost_applied).

        Deghosting is skipped when requested, when no network is loaded,
        and when the final mask is all zero (nothing was composited, so the
        identity result must survive bit-exactly).
        """
        result = multi_attribute_edit(original, requests, self.editing)
        mask_is_zero = float(result.final_mask.data.max()) == 0.0
        apply_net = self.deghost_net is not None and not skip_deghost and not mask_is_zero
        output = deghost(result.fused, self.deghost_net) if apply_net else result.fused
        return output, result, apply_net
