"""Ellipse representations, direct least-squares fitting and point distance.

Two representations are used throughout:

* :class:`ConicCoeffs` -- the implicit form ``Ax^2 + Bxy + Cy^2 + Dx + Ey + F = 0``
  stored with the scale fixed by ``4AC - B^2 = 1``.
* :class:`EllipseParams` -- center, semi-axes and rotation of the major axis.

Fitting minimises the algebraic residual ``||D W||^2`` subject to
``W^T H W = 1`` where ``H`` is :data:`CONSTRAINT_MATRIX`.  The generalized
eigenproblem is solved with the block decomposition of Halir and Flusser,
which keeps working when the scatter matrix is singular (noise-free data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, NotAnEllipse, TooFewPoints

CONSTRAINT_MATRIX = np.array(
    [
        [0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        [2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)

# Inverse of the upper-left 3x3 block of CONSTRAINT_MATRIX.
_C1_INV = np.array([[0.0, 0.0, 0.5], [0.0, -1.0, 0.0], [0.5, 0.0, 0.0]])

CENTER_EPS = 1e-9


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class ConicCoeffs:
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError("conic coefficients must be finite")
        if not np.any(vals):
            raise ValueError("conic coefficients are all zero")

    @classmethod
    def from_array(cls, w) -> ConicCoeffs:
        w = np.asarray(w, dtype=float).ravel()
        if w.size != 6:
            raise ValueError(f"expected 6 coefficients, got {w.size}")
        return cls(*(float(v) for v in w))

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    @property
    def discriminant(self) -> float:
        """``4AC - B^2``, equal to ``W^T H W``."""
        return 4.0 * self.a * self.c - self.b * self.b

    def normalized(self) -> ConicCoeffs:
        """Rescale to ``4AC - B^2 = 1`` with ``A + C > 0``."""
        disc = self.discriminant
        if not disc > 0:
            raise NotAnEllipse(f"4AC - B^2 = {disc!r} is not positive")
        w = self.as_array() / math.sqrt(disc)
        if w[0] + w[2] < 0:
            w = -w
        return ConicCoeffs.from_array(w)

    def evaluate(self, points) -> np.ndarray:
        """Algebraic residual ``W^T X`` at each point."""
        return design_matrix(points) @ self.as_array()


@dataclass(frozen=True)
class EllipseParams:
    """Geometric ellipse; ``theta`` is the major-axis angle, wrapped to [0, pi)."""

    cx: float
    cy: float
    semi_major: float
    semi_minor: float
    theta: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "semi_major", "semi_minor", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.semi_minor > 0:
            raise ValueError("semi_minor must be positive")
        if self.semi_major < self.semi_minor:
            raise ValueError("semi_major must be >= semi_minor")
        theta = math.fmod(self.theta, math.pi)
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:
            theta = 0.0
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_axes(cls, cx, cy, axis_1, axis_2, theta=0.0) -> EllipseParams:
        """Build from semi-axes in either order; ``axis_1`` lies along ``theta``."""
        if axis_1 >= axis_2:
            return cls(cx, cy, axis_1, axis_2, theta)
        return cls(cx, cy, axis_2, axis_1, theta + math.pi / 2)

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)

    def sample(self, n: int, phase: float = 0.0) -> np.ndarray:
        """``n`` points equally spaced in the eccentric angle, shape (n, 2)."""
        t = phase + 2.0 * math.pi * np.arange(n) / n
        return self.points_at(t)

    def points_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u = self.semi_major * np.cos(t)
        v = self.semi_minor * np.sin(t)
        return np.stack([self.cx + ct * u - st * v, self.cy + st * u + ct * v], axis=-1)

    def to_local(self, points) -> np.ndarray:
        """Coordinates of ``points`` in the axis-aligned frame of the ellipse."""
        p = np.asarray(points, dtype=float)
        ct, st = math.cos(self.theta), math.sin(self.theta)
        dx = p[..., 0] - self.cx
        dy = p[..., 1] - self.cy
        return np.stack([ct * dx + st * dy, -st * dx + ct * dy], axis=-1)

    def to_world(self, local) -> np.ndarray:
        q = np.asarray(local, dtype=float)
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u, v = q[..., 0], q[..., 1]
        return np.stack([self.cx + ct * u - st * v, self.cy + st * u + ct * v], axis=-1)

    @property
    def eccentricity(self) -> float:
        return math.sqrt(max(0.0, 1.0 - (self.semi_minor / self.semi_major) ** 2))


class NearestPointResult(NamedTuple):
    point: Point2
    distance: float
    iterations: int
    converged: bool


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of points, got shape {p.shape}")
    return p


def design_matrix(points) -> np.ndarray:
    """Rows ``[x^2, xy, y^2, x, y, 1]``, one per point."""
    p = _as_points(points)
    x, y = p[:, 0], p[:, 1]
    return np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])


def fit_ellipse(points) -> ConicCoeffs:
    """Direct least-squares ellipse fit.

    Parameters
    ----------
    points : array_like, shape (n, 2)
        Boundary samples, ``n >= 6``.

    Returns
    -------
    ConicCoeffs
        Coefficients normalised so that ``W^T H W = 4AC - B^2 = 1``.

    Raises
    ------
    TooFewPoints
        Fewer than six points.
    DegenerateInput
        Non-finite, collinear or coincident points, or no eigenvector
        satisfying the ellipse constraint.
    """
    p = _as_points(points)
    if len(p) < 6:
        raise TooFewPoints(f"need at least 6 points, got {len(p)}")
    if not np.all(np.isfinite(p)):
        raise DegenerateInput("points contain non-finite coordinates")

    # Precondition: zero mean, RMS radius sqrt(2).
    mean = p.mean(axis=0)
    centered = p - mean
    rms = math.sqrt(float(np.mean(np.sum(centered**2, axis=1))))
    if rms == 0.0:
        raise DegenerateInput("all points coincide")
    scale = rms / math.sqrt(2.0)
    dn = design_matrix(centered / scale)

    sv = np.linalg.svd(dn, compute_uv=False)
    if sv[4] <= 1e-10 * sv[0]:
        raise DegenerateInput("design matrix is rank deficient; points are collinear or too few distinct")

    d1, d2 = dn[:, :3], dn[:, 3:]
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput("points are collinear") from exc
    m = _C1_INV @ (s1 + s2 @ t)
    _, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)

    best, best_res = None, math.inf
    for k in range(3):
        a1 = evecs[:, k]
        cond = 4.0 * a1[0] * a1[2] - a1[1] ** 2
        if cond <= 0:
            continue
        w = np.concatenate([a1, t @ a1])
        res = float(np.sum((dn @ w) ** 2)) / cond
        if res < best_res:
            best, best_res = w, res
    if best is None:
        raise DegenerateInput("no eigenvector satisfies 4AC - B^2 > 0")

    an, bn, cn, dn_, en, fn = best
    mx, my = mean
    s2_ = scale * scale
    w = np.array(
        [
            an / s2_,
            bn / s2_,
            cn / s2_,
            (-2.0 * an * mx - bn * my) / s2_ + dn_ / scale,
            (-2.0 * cn * my - bn * mx) / s2_ + en / scale,
            (an * mx * mx + bn * mx * my + cn * my * my) / s2_ - (dn_ * mx + en * my) / scale + fn,
        ]
    )
    return ConicCoeffs.from_array(w).normalized()


def conic_to_parametric(c: ConicCoeffs) -> EllipseParams:
    """Center, semi-axes and major-axis angle of an implicit ellipse.

    Raises NotAnEllipse for non-elliptic or imaginary conics.
    """
    a, b, cc, d, e, f = c.as_array()
    disc = 4.0 * a * cc - b * b
    if not disc > 0:
        raise NotAnEllipse(f"4AC - B^2 = {disc!r} is not positive")
    if a + cc < 0:
        a, b, cc, d, e, f = -a, -b, -cc, -d, -e, -f
    x0 = (b * e - 2.0 * cc * d) / disc
    y0 = (b * d - 2.0 * a * e) / disc
    # value of the conic at the center
    f0 = f + 0.5 * (d * x0 + e * y0)
    if not f0 < 0:
        raise NotAnEllipse("imaginary or point ellipse")
    mean = 0.5 * (a + cc)
    rad = math.hypot(0.5 * (a - cc), 0.5 * b)
    lam_small, lam_big = mean - rad, mean + rad
    semi_major = math.sqrt(-f0 / lam_small)
    semi_minor = math.sqrt(-f0 / lam_big)
    if rad == 0.0:
        theta = 0.0
    else:
        theta = 0.5 * math.atan2(b, a - cc) + math.pi / 2
    return EllipseParams(x0, y0, semi_major, semi_minor, theta)


def parametric_to_conic(e: EllipseParams) -> ConicCoeffs:
    """Implicit coefficients of ``e`` normalised to ``4AC - B^2 = 1``."""
    ra, rb = e.semi_major, e.semi_minor
    s, c = math.sin(e.theta), math.cos(e.theta)
    # Divide by 2ab up front so that 4AC - B^2 = 1.
    k = 2.0 * ra * rb
    a2, b2 = ra * ra / k, rb * rb / k
    A = a2 * s * s + b2 * c * c
    B = 2.0 * (b2 - a2) * s * c
    C = a2 * c * c + b2 * s * s
    D = -2.0 * A * e.cx - B * e.cy
    E = -B * e.cx - 2.0 * C * e.cy
    F = A * e.cx * e.cx + B * e.cx * e.cy + C * e.cy * e.cy - ra * rb / 2.0
    return ConicCoeffs(A, B, C, D, E, F)


def _quadrant_solve(a, b, x, y, tol, max_iter):
    """Eccentric angle in [0, pi/2] of the nearest point to (x, y) >= 0.

    Safeguarded Newton on ``g(t) = (q - p(t)) . p'(t)`` started from
    ``atan2(a y, b x)``.  Returns ``(t, iterations, converged)`` arrays.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), x.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), x.shape)
    c2 = a * a - b * b
    scale = a * (a + np.hypot(x, y))

    t = np.arctan2(a * y, b * x)
    iters = np.zeros(x.shape, dtype=int)
    done = np.zeros(x.shape, dtype=bool)

    near = np.hypot(x, y) < CENTER_EPS
    t = np.where(near, np.pi / 2, t)
    # On the major axis the Newton start is a stationary point; solve directly.
    axis = (~near) & (y == 0)
    inside = axis & (a * x < c2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axis = np.where(inside, np.arccos(np.clip(a * x / np.where(c2 > 0, c2, 1.0), -1.0, 1.0)), 0.0)
    t = np.where(axis, t_axis, t)
    done |= near | axis

    lo = np.zeros(x.shape)
    hi = np.full(x.shape, np.pi / 2)
    for _ in range(max_iter + 1):
        st, ct = np.sin(t), np.cos(t)
        g = c2 * st * ct - a * x * st + b * y * ct
        ok = np.abs(g) <= tol * scale
        done |= ok
        active = ~done
        if not active.any():
            break
        over = active & (iters >= max_iter)
        active &= ~over
        if not active.any():
            break
        gp = c2 * (ct * ct - st * st) - a * x * ct - b * y * st
        lo = np.where(active & (g > 0), t, lo)
        hi = np.where(active & (g < 0), t, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - g / gp
        bad = (gp >= 0) | ~(t_new > lo) | ~(t_new < hi)
        t_new = np.where(bad, 0.5 * (lo + hi), t_new)
        t = np.where(active, t_new, t)
        iters = np.where(active, iters + 1, iters)
        # Bracket collapsed to float resolution: nothing left to improve.
        done |= active & (hi - lo <= 4 * np.finfo(float).eps)

    st, ct = np.sin(t), np.cos(t)
    g = c2 * st * ct - a * x * st + b * y * ct
    converged = near | axis | (np.abs(g) <= tol * scale) | (hi - lo <= 4 * np.finfo(float).eps)
    return t, iters, converged


def nearest_points(e: EllipseParams, queries, tol: float = 1e-10, max_iter: int = 16):
    """Vectorised :func:`nearest_point`.

    Returns ``(points, distances, iterations, converged)`` with shapes
    (n, 2), (n,), (n,), (n,).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    q = _as_points(queries)
    if not np.all(np.isfinite(q)):
        raise ValueError("query coordinates must be finite")
    local = e.to_local(q)
    u, v = local[:, 0], local[:, 1]
    t, iters, conv = _quadrant_solve(e.semi_major, e.semi_minor, np.abs(u), np.abs(v), tol, max_iter)
    sx = np.where(u < 0, -1.0, 1.0)
    sy = np.where(v < 0, -1.0, 1.0)
    p_local = np.column_stack([sx * e.semi_major * np.cos(t), sy * e.semi_minor * np.sin(t)])
    p = e.to_world(p_local)
    dist = np.hypot(q[:, 0] - p[:, 0], q[:, 1] - p[:, 1])
    return p, dist, iters, conv


def nearest_point(e: EllipseParams, q, tol: float = 1e-10, max_iter: int = 16) -> NearestPointResult:
    """Closest point on the boundary of ``e`` to ``q``.

    The query is moved into the ellipse frame and reflected into the first
    quadrant before solving.  ``tol`` bounds the orthogonality residual
    relative to ``a * (a + |q|)`` (``a`` the semi-major axis).  When the
    iteration budget runs out the best iterate is returned with
    ``converged=False``.
    """
    p, dist, iters, conv = nearest_points(e, np.asarray([q], dtype=float), tol, max_iter)
    return NearestPointResult(Point2(float(p[0, 0]), float(p[0, 1])), float(dist[0]), int(iters[0]), bool(conv[0]))


def point_ellipse_distance(e: EllipseParams, q) -> float:
    return nearest_point(e, q, tol=1e-10, max_iter=16).distance
