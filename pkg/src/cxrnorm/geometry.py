"""Pure 2-D similarity-transform math for chest geometry.

Coordinate convention used throughout the package: x grows rightward,
y grows downward, and the origin sits at the center of the top-left
pixel, so integer coordinates are pixel centers.  Rotation angles are in
degrees; a positive chest rotation means the "top" landmark is displaced
toward +x relative to the "bottom" landmark.  Angles are stored wrapped
to (-180, 180].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ToolkitError


class DegenerateLandmarks(ToolkitError):
    pass


class InvalidParams(ToolkitError):
    pass


class NonSquareCanvas(ToolkitError):
    pass


class SingularTransform(ToolkitError):
    pass


class NotASimilarity(ToolkitError):
    pass


def wrap_angle_deg(deg: float) -> float:
    """Wrap an angle in degrees to the interval (-180, 180]."""
    r = math.fmod(deg, 360.0)
    if r > 180.0:
        r -= 360.0
    elif r <= -180.0:
        r += 360.0
    return r


@dataclass(frozen=True)
class Point2:
    """A continuous pixel coordinate (x rightward, y downward)."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidParams(f"point coordinates must be finite, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class LandmarkSet:
    """The four expert-placed chest points.

    top: thoracic inlet; bottom: chest center at diaphragm level;
    left/right: lateral ribcage at the mid-thoracic level.  A usable set
    has top != bottom and left != right; violations are reported by
    :func:`params_from_landmarks` rather than at construction so callers
    can carry raw label data through validation.
    """

    top: Point2
    bottom: Point2
    left: Point2
    right: Point2


@dataclass(frozen=True)
class SimilarityParams:
    """The 4-parameter chest geometry: center, rotation, size.

    cx, cy are pixel coordinates of the chest center; theta is the signed
    rotation in degrees within (-180, 180]; size is the chest's larger
    dimension in pixels, strictly positive.
    """

    cx: float
    cy: float
    theta: float
    size: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.theta, self.size)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParams(f"non-finite similarity parameters: {vals}")
        if self.size <= 0.0:
            raise InvalidParams(f"size must be > 0, got {self.size}")
        if not (-180.0 < self.theta <= 180.0):
            raise InvalidParams(f"theta must lie in (-180, 180], got {self.theta}")

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)


@dataclass(frozen=True)
class AffineTransform:
    """2x3 affine map p' = (a*x + b*y + e, c*x + d*y + f).

    A similarity has a == d and b == -c; its scale is hypot(a, c) and its
    rotation angle is atan2(c, a) with the package's sign convention.
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def apply(self, p: Point2) -> Point2:
        return Point2(self.a * p.x + self.b * p.y + self.e,
                      self.c * p.x + self.d * p.y + self.f)

    def apply_xy(self, x: float, y: float) -> tuple[float, float]:
        return (self.a * x + self.b * y + self.e,
                self.c * x + self.d * y + self.f)

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    def is_similarity(self, rel_tol: float = 1e-9) -> bool:
        scale = math.hypot(self.a, self.c)
        if scale == 0.0:
            return False
        return (abs(self.a - self.d) <= rel_tol * scale
                and abs(self.b + self.c) <= rel_tol * scale)

    def similarity_parts(self, rel_tol: float = 1e-9) -> tuple[float, float]:
        """Return (scale, rotation_deg); raises NotASimilarity otherwise."""
        if not self.is_similarity(rel_tol):
            raise NotASimilarity(f"transform is not a similarity: {self}")
        return math.hypot(self.a, self.c), math.degrees(math.atan2(self.c, self.a))


def identity() -> AffineTransform:
    return AffineTransform(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def translation(dx: float, dy: float) -> AffineTransform:
    return AffineTransform(1.0, 0.0, 0.0, 1.0, dx, dy)


def similarity_about(scale: float, rot_deg: float, cx: float, cy: float) -> AffineTransform:
    """Rotation by rot_deg and isotropic scaling about the point (cx, cy)."""
    phi = math.radians(rot_deg)
    a = scale * math.cos(phi)
    c = scale * math.sin(phi)
    # q' = s R (q - c) + c
    return AffineTransform(a, -c, c, a,
                           cx - a * cx + c * cy,
                           cy - c * cx - a * cy)


def rotation_about(rot_deg: float, cx: float, cy: float) -> AffineTransform:
    return similarity_about(1.0, rot_deg, cx, cy)


def compose(first: AffineTransform, second: AffineTransform) -> AffineTransform:
    """Return the transform applying `second` then `first`: result(p) = first(second(p))."""
    return AffineTransform(
        first.a * second.a + first.b * second.c,
        first.a * second.b + first.b * second.d,
        first.c * second.a + first.d * second.c,
        first.c * second.b + first.d * second.d,
        first.a * second.e + first.b * second.f + first.e,
        first.c * second.e + first.d * second.f + first.f,
    )


def invert(t: AffineTransform) -> AffineTransform:
    det = t.det
    if det == 0.0:
        raise SingularTransform(f"cannot invert singular transform {t}")
    ia = t.d / det
    ib = -t.b / det
    ic = -t.c / det
    id_ = t.a / det
    return AffineTransform(ia, ib, ic, id_,
                           -(ia * t.e + ib * t.f),
                           -(ic * t.e + id_ * t.f))


def params_from_landmarks(lm: LandmarkSet) -> SimilarityParams:
    """Derive the 4-parameter chest geometry from the four labeled points.

    The center is the midpoint of top and bottom; theta is the angle of
    the chest's vertical axis against the image vertical; size is the
    larger of |top - bottom| and the left-right distance measured
    orthogonally to the chest's vertical axis.
    """
    dx = lm.top.x - lm.bottom.x
    dy = lm.bottom.y - lm.top.y  # positive when top is above bottom on screen
    h = math.hypot(dx, dy)
    if h == 0.0:
        raise DegenerateLandmarks("top and bottom landmarks coincide")
    if lm.left == lm.right:
        raise DegenerateLandmarks("left and right landmarks coincide")
    theta = math.degrees(math.atan2(dx, dy))
    # unit normal to the chest's vertical axis (points chest-right at theta = 0)
    nx, ny = dy / h, dx / h
    w = abs((lm.right.x - lm.left.x) * nx + (lm.right.y - lm.left.y) * ny)
    size = max(h, w)
    return SimilarityParams(cx=(lm.top.x + lm.bottom.x) / 2.0,
                            cy=(lm.top.y + lm.bottom.y) / 2.0,
                            theta=theta, size=size)


def alignment_from_params(p: SimilarityParams, canvas_w: int, canvas_h: int) -> AffineTransform:
    """Build the normalization transform for a square canvas.

    Maps the chest center to the canvas center, scales so the chest's
    larger dimension spans 90% of the canvas width, and rotates the chest
    vertical axis upright.
    """
    if canvas_w != canvas_h:
        raise NonSquareCanvas(f"alignment requires a square canvas, got {canvas_w}x{canvas_h}")
    if canvas_w <= 0:
        raise InvalidParams(f"canvas must be positive, got {canvas_w}")
    s = 0.9 * canvas_w / p.size
    t = similarity_about(s, -p.theta, p.cx, p.cy)
    # shift so the chest center lands on the canvas center
    return compose(translation(canvas_w / 2.0 - p.cx, canvas_h / 2.0 - p.cy), t)


def push_forward_params(t: AffineTransform, p: SimilarityParams) -> SimilarityParams:
    """Transform similarity parameters under a similarity transform.

    The center is mapped through t, theta is advanced by t's rotation and
    wrapped, and size is scaled by t's scale factor.
    """
    k, phi = t.similarity_parts()
    cx, cy = t.apply_xy(p.cx, p.cy)
    return SimilarityParams(cx=cx, cy=cy,
                            theta=wrap_angle_deg(p.theta + phi),
                            size=k * p.size)


def transform_landmarks(t: AffineTransform, lm: LandmarkSet) -> LandmarkSet:
    return LandmarkSet(top=t.apply(lm.top), bottom=t.apply(lm.bottom),
                       left=t.apply(lm.left), right=t.apply(lm.right))
