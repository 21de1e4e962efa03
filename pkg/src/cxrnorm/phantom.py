"""Deterministic chest-phantom renderer for desk-scale runs.

Each phantom is a soft-edged anatomical cartoon drawn in a randomly
placed, rotated, and sized chest frame: body ellipse, two lung fields,
mediastinal band, cardiac shadow, and a tilted diaphragm.  The cardiac
bulge and diaphragm tilt sit on one side of the chest axis, so
orientation is recoverable from pixels alone.  Bright glyph-textured
rectangles imitate burned-in radiographic annotations; about 30% of
phantoms carry none.  Ground truth (landmarks, similarity parameters,
annotation boxes) is exact by construction, and every draw is a pure
function of (seed, index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import LandmarkSet, Point2, SimilarityParams
from .raster import BinaryMask, Box, GrayImage, rasterize_boxes

BOX_FREE_FRACTION = 0.30   # phantoms with no annotation, the mask-control arm


@dataclass(frozen=True)
class PhantomSpec:
    """Exact ground truth for one rendered phantom."""

    image_id: str
    seed: int
    index: int
    canvas: int
    params: SimilarityParams
    landmarks: LandmarkSet
    chest_width: float          # lateral extent along the chest normal, < size
    boxes: tuple[Box, ...]


def _rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _smooth_inside(r: np.ndarray, edge: float) -> np.ndarray:
    """Smoothstep from 1 (deep inside, r << 1) to 0 (outside, r >= 1)."""
    t = np.clip((1.0 - r) / edge, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def sample_phantom(seed: int, index: int, canvas: int) -> PhantomSpec:
    """Draw the geometry and annotation layout for phantom `index`."""
    if canvas < 16:
        raise ValueError(f"canvas must be >= 16, got {canvas}")
    rng = _rng_for(seed, index)

    size = float(rng.uniform(0.50, 0.85) * canvas)
    width = float(size * rng.uniform(0.62, 0.92))
    theta = float(rng.uniform(-12.0, 12.0))
    cx = float(canvas / 2.0 + rng.uniform(-0.12, 0.12) * canvas)
    cy = float(canvas / 2.0 + rng.uniform(-0.12, 0.12) * canvas)

    rad = math.radians(theta)
    ax, ay = math.sin(rad), -math.cos(rad)    # unit vector from center toward top
    nx, ny = math.cos(rad), math.sin(rad)     # unit normal, toward patient's left
    jl = float(rng.uniform(-0.05, 0.05) * size)
    jr = float(rng.uniform(-0.05, 0.05) * size)
    landmarks = LandmarkSet(
        top=Point2(cx + ax * size / 2, cy + ay * size / 2),
        bottom=Point2(cx - ax * size / 2, cy - ay * size / 2),
        left=Point2(cx - nx * width / 2 + ax * jl, cy - ny * width / 2 + ay * jl),
        right=Point2(cx + nx * width / 2 + ax * jr, cy + ny * width / 2 + ay * jr),
    )
    params = SimilarityParams(cx=cx, cy=cy, theta=theta, size=size)

    n_boxes = 0
    u = rng.uniform()
    if u >= BOX_FREE_FRACTION:
        n_boxes = 1 if u < 0.75 else 2
    corners = rng.choice(4, size=n_boxes, replace=False) if n_boxes else []
    boxes = []
    for corner in corners:
        bw = float(rng.uniform(0.15, 0.30) * canvas)
        bh = float(rng.uniform(0.08, 0.14) * canvas)
        mx = float(rng.uniform(0.02, 0.06) * canvas)
        my = float(rng.uniform(0.02, 0.06) * canvas)
        x0 = mx if corner in (0, 2) else canvas - mx - bw
        y0 = my if corner in (0, 1) else canvas - my - bh
        boxes.append(Box(x0=x0, y0=y0, x1=x0 + bw, y1=y0 + bh))

    return PhantomSpec(image_id=f"ph{seed}-{index:05d}", seed=seed, index=index,
                       canvas=canvas, params=params, landmarks=landmarks,
                       chest_width=width, boxes=tuple(boxes))


def render_phantom(spec: PhantomSpec) -> tuple[GrayImage, BinaryMask]:
    """Rasterize a phantom and its annotation truth mask."""
    # a sibling stream: rendering draws never alias the sampling draws
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, spec.index, 1)))
    canvas = spec.canvas
    p = spec.params
    rad = math.radians(p.theta)
    ax, ay = math.sin(rad), -math.cos(rad)
    nx, ny = math.cos(rad), math.sin(rad)
    half_h = p.size / 2.0
    half_w = spec.chest_width / 2.0

    ii, jj = np.mgrid[0:canvas, 0:canvas]
    dx = jj - p.cx
    dy = ii - p.cy
    u = (dx * nx + dy * ny) / half_w     # +-1 at the lateral chest walls
    v = -(dx * ax + dy * ay) / half_h    # -1 at the top landmark, +1 at the bottom

    edge_body = 2.0 / min(half_w, half_h)
    img = 0.06 + 0.05 * (ii / canvas)

    def mix(value, alpha):
        nonlocal img
        img = img * (1.0 - alpha) + value * alpha

    body = _smooth_inside(np.hypot(u, v), edge_body)
    mix(0.48 + rng.uniform(-0.03, 0.03), body)

    def lobe(cu, cv, au, av, value):
        r = np.hypot((u - cu) / au, (v - cv) / av)
        mix(value, _smooth_inside(r, edge_body / min(au, av)) * body)

    def jit(lo, hi):
        return float(rng.uniform(lo, hi))

    # lungs: the one beside the cardiac shadow is smaller
    lobe(-0.52 + jit(-0.03, 0.03), -0.10 + jit(-0.03, 0.03),
         0.40 * jit(0.9, 1.1), 0.74 * jit(0.9, 1.1), 0.15)
    lobe(+0.48 + jit(-0.03, 0.03), -0.12 + jit(-0.03, 0.03),
         0.34 * jit(0.9, 1.1), 0.68 * jit(0.9, 1.1), 0.15)
    # mediastinal band
    band = _smooth_inside(np.abs(u) / 0.17, edge_body / 0.17)
    mix(0.60 + jit(-0.03, 0.03), band * body)
    # cardiac shadow, displaced to the +u side
    lobe(0.24 + jit(-0.03, 0.03), 0.34 + jit(-0.03, 0.03),
         0.36 * jit(0.9, 1.1), 0.28 * jit(0.9, 1.1), 0.66 + jit(-0.03, 0.03))
    # abdomen below a diaphragm line that rises on the cardiac side
    dome = v - (0.74 - 0.10 * u)
    below = _smooth_inside(1.0 - dome / edge_body, 1.0)
    mix(0.56 + jit(-0.03, 0.03), below * body)

    img = img + rng.normal(0.0, 0.015, size=img.shape)

    for box in spec.boxes:
        # same pixel-center rule as rasterize_boxes, so glyphs stay in the mask
        inside = (jj >= box.x0) & (jj < box.x1) & (ii >= box.y0) & (ii < box.y1)
        cell = ((jj // 2) + (ii // 2) * 131 + int(rng.integers(997))) % 7
        glyph = inside & (cell < 4)
        img = np.where(glyph, np.maximum(img, 0.92), img)

    image = GrayImage(np.clip(img, 0.0, 1.0).astype(np.float32))
    mask = rasterize_boxes(list(spec.boxes), canvas, canvas)
    return image, mask


def generate(count: int, seed: int, canvas: int):
    """Yield (spec, image, mask) for phantoms 0..count-1."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    for index in range(count):
        spec = sample_phantom(seed, index, canvas)
        image, mask = render_phantom(spec)
        yield spec, image, mask
