"""Segmentation losses: binary cross-entropy and the Ellipse Fit Error.

Masks are plain 2-D numpy arrays indexed ``[row, col]``.  Boundary points are
pixel centers in ``(x, y) = (col, row)`` order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy import ndimage

from .conic import EllipseParams, conic_to_parametric, fit_ellipse, nearest_points
from .errors import DimensionMismatch, EmptyPredictionWarning, TooFewPoints

BCE_EPS = 1e-7

# Clockwise on screen (y grows downwards), starting north.
_DIRS = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)]
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}
_WEST = 6
_EIGHT = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class BoundaryContour:
    points: np.ndarray = field(repr=False)
    closed: bool = True

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


class EFEResult(NamedTuple):
    loss: float
    n_points: int
    empty: bool


class LossTerms(NamedTuple):
    bce: float
    efe: float
    total: float
    empty_prediction: bool


def as_prob_mask(values) -> np.ndarray:
    m = np.asarray(values, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise DimensionMismatch(f"probability mask must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all((m >= 0) & (m <= 1)):
        raise ValueError("probability mask values must lie in [0, 1]")
    return m


def as_binary_mask(values) -> np.ndarray:
    m = np.asarray(values)
    if m.ndim != 2 or m.size == 0:
        raise DimensionMismatch(f"binary mask must be a non-empty 2-D array, got shape {m.shape}")
    if m.dtype != bool and not np.all((m == 0) | (m == 1)):
        raise ValueError("binary mask values must be exactly 0 or 1")
    return m.astype(np.uint8)


def bce_loss(pred, gt, eps: float = BCE_EPS) -> float:
    """Pixel-summed binary cross-entropy of one image.

    ``pred`` is clamped to ``[eps, 1 - eps]`` before taking logs.
    """
    s = as_prob_mask(pred)
    y = as_binary_mask(gt)
    if s.shape != y.shape:
        raise DimensionMismatch(f"prediction shape {s.shape} != ground truth shape {y.shape}")
    s = np.clip(s, eps, 1.0 - eps)
    per_pixel = np.where(y == 1, -np.log(s), -np.log1p(-s))
    return float(np.sum(per_pixel))


def _moore_trace(comp: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Outer boundary of one 8-connected component, clockwise from ``start``.

    ``comp`` is padded by one pixel; ``start`` is its first raster pixel so its
    west neighbour is background.  Stops with Jacob's criterion: the trace
    re-enters ``start`` heading for the same pixel as the first move.
    """

    def step(p, back):
        for i in range(1, 9):
            d = (back + i) % 8
            dx, dy = _DIRS[d]
            nx, ny = p[0] + dx, p[1] + dy
            if comp[ny, nx]:
                px, py = _DIRS[(d - 1) % 8]
                # previous (background) cell seen from the new pixel
                return (nx, ny), _DIR_INDEX[(px - dx, py - dy)]
        return None, back

    pts = [start]
    nxt, back = step(start, _WEST)
    if nxt is None:
        return np.array(pts, dtype=float)
    first = nxt
    p = nxt
    while True:
        if p == start:
            cand, cand_back = step(p, back)
            if cand == first:
                break
        pts.append(p)
        p, back = step(p, back)
    return np.array(pts, dtype=float)


def _components(mask: np.ndarray):
    labels, n = ndimage.label(mask, structure=_EIGHT)
    return labels, n


def extract_boundary(mask) -> list[BoundaryContour]:
    """Closed outer contour of every 8-connected foreground component.

    Components are ordered by their first pixel in raster order; each contour
    starts at that pixel and runs clockwise.  Points are ``(x, y)`` pixel
    centers shifted back to image coordinates.  Boundaries of holes are not
    traced.
    """
    m = as_binary_mask(mask)
    labels, n = _components(m)
    out = []
    if n == 0:
        return out
    padded = np.pad(labels, 1)
    for lab, sl in enumerate(ndimage.find_objects(padded), start=1):
        rows, cols = sl
        sub = np.pad(padded[rows, cols] == lab, 1)
        ys, xs = np.nonzero(sub)
        k = np.lexsort((xs, ys))[0]
        start = (int(xs[k]), int(ys[k]))
        pts = _moore_trace(sub, start)
        # sub-array origin (incl. its own pad) back to image coordinates
        pts[:, 0] += cols.start - 2
        pts[:, 1] += rows.start - 2
        out.append(BoundaryContour(pts, closed=True))
    return out


BoundaryLike = Union[BoundaryContour, Sequence[BoundaryContour], np.ndarray]


def _gather_points(boundary: BoundaryLike) -> np.ndarray:
    if isinstance(boundary, BoundaryContour):
        return boundary.points
    if isinstance(boundary, np.ndarray):
        return boundary.reshape(-1, 2).astype(float)
    parts = [c.points if isinstance(c, BoundaryContour) else np.asarray(c, dtype=float).reshape(-1, 2) for c in boundary]
    if not parts:
        return np.zeros((0, 2))
    return np.concatenate(parts, axis=0)


def ellipse_fit_error(boundary: BoundaryLike, gt_ellipse: EllipseParams, mean: bool = False) -> EFEResult:
    """Sum (or mean) over boundary points of the distance to ``gt_ellipse``.

    All contours are pooled.  An empty boundary yields a zero loss with
    ``empty=True``.
    """
    q = _gather_points(boundary)
    if len(q) == 0:
        return EFEResult(0.0, 0, True)
    _, dist, _, _ = nearest_points(gt_ellipse, q)
    total = math.fsum(dist.tolist())
    if mean:
        total /= len(q)
    return EFEResult(total, len(q), False)


def efe_loss(boundary: BoundaryLike, gt_ellipse: EllipseParams, mean: bool = False) -> float:
    """Ellipse Fit Error; emits :class:`EmptyPredictionWarning` on an empty boundary."""
    res = ellipse_fit_error(boundary, gt_ellipse, mean)
    if res.empty:
        warnings.warn("prediction has no boundary pixels; EFE set to 0", EmptyPredictionWarning, stacklevel=2)
    return res.loss


def efe_gradient(points, gt_ellipse: EllipseParams) -> np.ndarray:
    """d(EFE)/dq for every boundary point: the unit vector from the nearest
    ellipse point towards q (zero where q lies on the ellipse)."""
    q = _gather_points(points)
    if len(q) == 0:
        return np.zeros((0, 2))
    p, dist, _, _ = nearest_points(gt_ellipse, q)
    grad = np.zeros_like(q)
    ok = dist > 0
    grad[ok] = (q[ok] - p[ok]) / dist[ok, None]
    return grad


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (as_prob_mask(pred) > threshold).astype(np.uint8)


def loss_terms(pred, gt, gt_ellipse: EllipseParams, weights: LossWeights = LossWeights(), threshold: float = 0.5, mean_efe: bool = False) -> LossTerms:
    """Both loss components and their weighted sum."""
    bce = bce_loss(pred, gt)
    efe = ellipse_fit_error(extract_boundary(binarize(pred, threshold)), gt_ellipse, mean_efe)
    total = weights.alpha * bce + weights.beta * efe.loss
    return LossTerms(bce, efe.loss, total, efe.empty)


def combined_loss(pred, gt, gt_ellipse: EllipseParams, weights: LossWeights = LossWeights(), threshold: float = 0.5) -> float:
    """``alpha * BCE + beta * EFE`` with the prediction binarized at ``threshold``."""
    return loss_terms(pred, gt, gt_ellipse, weights, threshold).total


def fit_gt_ellipse(gt) -> EllipseParams:
    """Ellipse fitted to the boundary of the largest ground-truth component."""
    m = as_binary_mask(gt)
    labels, n = _components(m)
    if n == 0:
        raise TooFewPoints("ground truth mask is empty")
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    contour = extract_boundary(labels == keep)[0]
    pts = np.unique(contour.points, axis=0)
    return conic_to_parametric(fit_ellipse(pts))


def rasterize_ellipse(e: EllipseParams, width: int, height: int) -> np.ndarray:
    """Binary mask of pixels whose centers lie inside or on ``e``."""
    ys, xs = np.mgrid[0:height, 0:width]
    local = e.to_local(np.stack([xs, ys], axis=-1).astype(float))
    r = (local[..., 0] / e.semi_major) ** 2 + (local[..., 1] / e.semi_minor) ** 2
    return (r <= 1.0).astype(np.uint8)
