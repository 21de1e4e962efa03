"""Seedable geometric augmentation applied jointly to image, parameters, and mask.

Each augmented replica is fully determined by (seed, source id, replica
index): the triple seeds an independent RNG stream, so workers can draw
specs in any order and materialized fixtures match on-the-fly generation
bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import AffineTransform, SimilarityParams
from .raster import BinaryMask, GrayImage, warp_image, warp_mask


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation ranges; defaults give rotation +-90 deg, scale 75-125%,
    and translation up to 25% of the smaller image dimension."""

    seed: int = 0
    multiplicity: int = 657
    rot_deg: float = 90.0
    scale_lo: float = 0.75
    scale_hi: float = 1.25
    trans_frac: float = 0.25

    def __post_init__(self) -> None:
        if self.multiplicity < 1:
            raise ValueError(f"multiplicity must be >= 1, got {self.multiplicity}")
        if not (0.0 < self.scale_lo <= self.scale_hi):
            raise ValueError(f"bad scale range [{self.scale_lo}, {self.scale_hi}]")
        if self.rot_deg < 0.0 or self.trans_frac < 0.0:
            raise ValueError("rotation range and translation fraction must be >= 0")


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float
    scale: float
    translate_x: float
    translate_y: float


@dataclass(frozen=True)
class Provenance:
    source_id: str
    seed: int
    index: int
    spec: AugmentSpec


@dataclass
class AugmentedSample:
    image: GrayImage
    params: SimilarityParams
    mask: BinaryMask
    provenance: Provenance | None = field(default=None)


def _id_key(source_id: str) -> int:
    digest = hashlib.sha256(source_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, source_id: str, index: int) -> np.random.Generator:
    """Independent, platform-stable RNG stream for one augmentation replica."""
    return np.random.default_rng(np.random.SeedSequence((seed, _id_key(source_id), index)))


def sample_spec(rng: np.random.Generator, image_w: int, image_h: int,
                cfg: AugmentConfig | None = None) -> AugmentSpec:
    """Draw each field independently and uniformly from its configured range."""
    cfg = cfg or AugmentConfig()
    bound = cfg.trans_frac * min(image_w, image_h)
    return AugmentSpec(
        rotation_deg=float(rng.uniform(-cfg.rot_deg, cfg.rot_deg)),
        scale=float(rng.uniform(cfg.scale_lo, cfg.scale_hi)),
        translate_x=float(rng.uniform(-bound, bound)),
        translate_y=float(rng.uniform(-bound, bound)),
    )


def spec_to_transform(spec: AugmentSpec, w: int, h: int) -> AffineTransform:
    """Rotation and scaling about the image center (w/2, h/2), then translation."""
    about_center = geometry.similarity_about(spec.scale, spec.rotation_deg, w / 2.0, h / 2.0)
    return geometry.compose(geometry.translation(spec.translate_x, spec.translate_y),
                            about_center)


def apply(image: GrayImage, params: SimilarityParams, mask: BinaryMask,
          spec: AugmentSpec, provenance: Provenance | None = None) -> AugmentedSample:
    """Warp the image and mask and push the parameters through one transform."""
    t = spec_to_transform(spec, image.width, image.height)
    return AugmentedSample(
        image=warp_image(image, t, image.width, image.height),
        params=geometry.push_forward_params(t, params),
        mask=warp_mask(mask, t, mask.width, mask.height),
        provenance=provenance,
    )


def augment_replica(source_id: str, image: GrayImage, params: SimilarityParams,
                    mask: BinaryMask, cfg: AugmentConfig, index: int) -> AugmentedSample:
    """Generate replica `index` of a labeled source under the configured ranges."""
    rng = rng_for(cfg.seed, source_id, index)
    spec = sample_spec(rng, image.width, image.height, cfg)
    prov = Provenance(source_id=source_id, seed=cfg.seed, index=index, spec=spec)
    return apply(image, params, mask, spec, prov)
