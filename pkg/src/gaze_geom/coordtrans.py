"""Calibration warp onto a standard square.

Five calibration gaze points are given: the center ``S`` and four anchors
``C, G, K, O``, one per quadrant around ``S``.  The anchor farthest from ``S``
fixes the half-diagonal of an axis-aligned target square; each anchor gets an
x and a y scale ratio that carries it onto its corner.  Every other point is
scaled by ratios interpolated between the anchor of its quadrant and the
neighbouring anchors, so different parts of the plane stretch by different
amounts instead of sharing one scale.

Each quadrant is split by its anchor ray into a *steep* half (between the ray
and the y axis) and a *flat* half (between the ray and the x axis):

* steep: x ratio is the anchor's own; y ratio is linear in ``x`` between the
  anchor and the neighbour across the y axis.
* flat: y ratio is the anchor's own; x ratio is linear in ``y`` between the
  anchor and the neighbour across the x axis.
* on the ray or on the y axis: the anchor's own ratios.

Interpolation weights are clamped to [0, 1].  The map is continuous across
both axes, but inside the anchor hull the steep and flat interpolants differ
along an anchor ray, so the output jumps there by ``|y| * |dy_ratio|`` or
``|x| * |dx_ratio|``; they agree at and beyond the anchor.  Ties go to the anchor branch;
points with ``x == 0`` count as left, ``y == 0`` as upper.  All computations
happen in S-centered coordinates; inputs are raw-frame points and outputs
stay S-centered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .conic import Point2
from .errors import InvalidLayout

ANCHORS = ("c", "g", "k", "o")

STEEP, FLAT, ANCHOR = "steep", "flat", "anchor"


def quadrant_of(x, y):
    """Quadrant number 1-4; ``x == 0`` is left, ``y == 0`` is upper."""
    left = np.asarray(x) <= 0
    upper = np.asarray(y) >= 0
    return np.where(upper, np.where(left, 2, 1), np.where(left, 3, 4))


@dataclass(frozen=True)
class CalibrationLayout:
    s: Point2
    c: Point2
    g: Point2
    k: Point2
    o: Point2

    def __post_init__(self):
        for name in ("s",) + ANCHORS:
            p = Point2(*map(float, getattr(self, name)))
            if not (math.isfinite(p.x) and math.isfinite(p.y)):
                raise InvalidLayout(f"{name} has non-finite coordinates")
            object.__setattr__(self, name, p)

    def centered(self, name: str) -> Point2:
        p = getattr(self, name)
        return Point2(p.x - self.s.x, p.y - self.s.y)

    @classmethod
    def from_dict(cls, d) -> CalibrationLayout:
        return cls(*(Point2(*d[k]) for k in ("s",) + ANCHORS))

    def to_dict(self) -> dict:
        return {k: [getattr(self, k).x, getattr(self, k).y] for k in ("s",) + ANCHORS}


class RegionId(NamedTuple):
    quadrant: int
    branch: str

    @property
    def tag(self) -> str:
        return f"Q{self.quadrant}-{self.branch}"


@dataclass(frozen=True)
class WarpModel:
    layout: CalibrationLayout
    ref_distance: float
    target_corners: dict
    ratios: dict
    quadrant_anchor: dict

    def anchor_for(self, quadrant: int) -> str:
        return self.quadrant_anchor[quadrant]


# Quadrant across the y axis (same y sign) and across the x axis (same x sign).
_ACROSS_Y = {1: 2, 2: 1, 3: 4, 4: 3}
_ACROSS_X = {1: 4, 4: 1, 2: 3, 3: 2}


def build_warp(layout: CalibrationLayout) -> WarpModel:
    """Target square and per-anchor transformation ratios for ``layout``."""
    quadrant_anchor = {}
    centered = {}
    for name in ANCHORS:
        p = layout.centered(name)
        if p.x == 0 and p.y == 0:
            raise InvalidLayout(f"anchor {name} coincides with s")
        if p.x == 0 or p.y == 0:
            raise InvalidLayout(f"anchor {name} lies on an axis through s; its ratio is undefined")
        q = int(quadrant_of(p.x, p.y))
        if q in quadrant_anchor:
            raise InvalidLayout(f"anchors {quadrant_anchor[q]} and {name} share quadrant {q}")
        quadrant_anchor[q] = name
        centered[name] = p

    ref = max(math.hypot(p.x, p.y) for p in centered.values())
    half = ref / math.sqrt(2.0)
    corners, ratios = {}, {}
    for name, p in centered.items():
        corners[name] = Point2(math.copysign(half, p.x), math.copysign(half, p.y))
        ratios[name] = (half / abs(p.x), half / abs(p.y))
    return WarpModel(layout, ref, corners, ratios, quadrant_anchor)


def _table(w: WarpModel):
    """Per-quadrant arrays indexed by quadrant number (index 0 unused)."""
    ax = np.zeros(5)
    ay = np.zeros(5)
    rx = np.zeros(5)
    ry = np.zeros(5)
    for q, name in w.quadrant_anchor.items():
        p = w.layout.centered(name)
        ax[q], ay[q] = p.x, p.y
        rx[q], ry[q] = w.ratios[name]
    return ax, ay, rx, ry


def _classify(w: WarpModel, x, y):
    ax, ay, _, _ = _table(w)
    q = quadrant_of(x, y)
    lhs = np.abs(y) * np.abs(ax[q])
    rhs = np.abs(x) * np.abs(ay[q])
    steep = (x != 0) & (lhs > rhs)
    flat = (x != 0) & (lhs < rhs)
    return q, steep, flat


def classify_region(w: WarpModel, p) -> RegionId:
    """Region of a raw-frame point (classified relative to ``s``)."""
    x, y = float(p[0]) - w.layout.s.x, float(p[1]) - w.layout.s.y
    q, steep, flat = _classify(w, np.array([x]), np.array([y]))
    branch = STEEP if steep[0] else FLAT if flat[0] else ANCHOR
    return RegionId(int(q[0]), branch)


def ratios_at(w: WarpModel, points) -> np.ndarray:
    """Interpolated (x, y) ratios for S-centered points, shape (n, 2)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    ax, ay, rx, ry = _table(w)
    q, steep, flat = _classify(w, x, y)
    h = np.array([0, *(_ACROSS_Y[i] for i in range(1, 5))])[q]
    v = np.array([0, *(_ACROSS_X[i] for i in range(1, 5))])[q]

    own_x, own_y = rx[q], ry[q]
    # steep: y ratio linear in x from the anchor to the neighbour across the y axis
    w_h = np.clip((x - ax[q]) / (ax[h] - ax[q]), 0.0, 1.0)
    steep_y = w_h * ry[h] + (1.0 - w_h) * own_y
    # flat: x ratio linear in y from the neighbour across the x axis to the anchor
    w_a = np.clip((y - ay[v]) / (ay[q] - ay[v]), 0.0, 1.0)
    flat_x = w_a * own_x + (1.0 - w_a) * rx[v]

    out_x = np.where(flat, flat_x, own_x)
    out_y = np.where(steep, steep_y, own_y)
    return np.column_stack([out_x, out_y])


def transform_points(w: WarpModel, points) -> np.ndarray:
    """Warp raw-frame points; the result is S-centered, shape (n, 2)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2))
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    pts = center_points(w.layout, pts)
    return pts * ratios_at(w, pts)


def transform_point(w: WarpModel, p) -> Point2:
    out = transform_points(w, np.array([p], dtype=float))[0]
    return Point2(float(out[0]), float(out[1]))


def center_points(layout: CalibrationLayout, raw_points) -> np.ndarray:
    """Raw-frame points shifted so that ``s`` is the origin."""
    return np.asarray(raw_points, dtype=float).reshape(-1, 2) - [layout.s.x, layout.s.y]
