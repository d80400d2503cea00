"""Synthetic eye generator with exact ground truth.

Geometry (camera frame, millimetres; image in pixels, y down):

* pinhole camera at the origin looking along +z with focal length ``f`` and
  principal point ``(px, py)``;
* eyeball sphere of radius ``R`` centred at ``eyeball_center``;
* the pupil is a disk of radius ``r`` whose rim lies on the sphere, centred at
  ``E + sqrt(R^2 - r^2) * g`` and facing along the gaze ``g``.

The defaults describe a remote desk-scale tracker: eye 600 mm from a
1500 px camera, a 2 mm pupil about 5 px in radius, and roughly half a pixel of
pupil motion per degree of gaze.

Looking straight into the camera is ``g = (0, 0, -1)``.  A gaze with yaw
``u`` and pitch ``v`` is ``(sin u cos v, sin v, -cos u cos v)``, so positive
yaw moves the pupil right in the image and positive pitch moves it down.

The rim maps to the image through the plane homography ``H = K [e1 | e2 | P]``
and the image conic is ``H^-T diag(1, 1, -r^2) H^-1``; ground-truth ellipses
are exact, not fitted.  The 2-D ground-truth center is the projection of the
3-D pupil center, which differs slightly from the ellipse center under
perspective.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .conic import ConicCoeffs, EllipseParams, conic_to_parametric, fit_ellipse
from .efe import rasterize_ellipse
from .errors import InvalidConfig
from . import io

SPLITS = ("train", "val", "test")

FRAME_COLUMNS = [
    "frame",
    "split",
    "gt_cx",
    "gt_cy",
    "gt_semi_major",
    "gt_semi_minor",
    "gt_theta",
    "gaze_x",
    "gaze_y",
    "gaze_z",
    "center_x",
    "center_y",
]


@dataclass
class SyntheticEyeConfig:
    eyeball_center: tuple = (0.0, 0.0, 600.0)
    eyeball_radius: float = 12.0
    pupil_radius: float = 2.0
    focal_length: float = 1500.0
    principal_point: tuple = (192.0, 144.0)
    image_size: tuple = (384, 288)
    n_frames: int = 600
    n_boundary_points: int = 16
    noise_px: float = 0.0
    seed: int = 0
    gaze_amplitude_deg: float = 20.0
    gaze_period_frames: float = 300.0
    gaze_path: list = None
    calibration_deg: float = 15.0
    split_fractions: tuple = (0.7, 0.15, 0.15)
    write_masks: bool = True

    def __post_init__(self):
        self.eyeball_center = tuple(float(v) for v in self.eyeball_center)
        self.principal_point = tuple(float(v) for v in self.principal_point)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        if len(self.eyeball_center) != 3 or len(self.principal_point) != 2 or len(self.image_size) != 2:
            raise InvalidConfig("eyeball_center needs 3 values, principal_point and image_size 2")
        if not self.eyeball_radius > 0 or not self.pupil_radius > 0:
            raise InvalidConfig("eyeball_radius and pupil_radius must be positive")
        if not self.pupil_radius < self.eyeball_radius:
            raise InvalidConfig("pupil_radius must be smaller than eyeball_radius")
        if not self.focal_length > 0 or min(self.image_size) < 1:
            raise InvalidConfig("focal_length and image_size must be positive")
        if self.eyeball_center[2] <= self.eyeball_radius:
            raise InvalidConfig("the eyeball must lie in front of the camera")
        if self.n_boundary_points < 6:
            raise InvalidConfig("n_boundary_points must be >= 6")
        if self.noise_px < 0 or self.seed < 0:
            raise InvalidConfig("noise_px and seed must be non-negative")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or sum(self.split_fractions) <= 0:
            raise InvalidConfig("split_fractions needs three non-negative values")
        if self.gaze_path is not None:
            g = np.asarray(self.gaze_path, dtype=float)
            if g.ndim != 2 or g.shape[1] != 3 or len(g) == 0:
                raise InvalidConfig("gaze_path must be a non-empty list of 3-vectors")
            if np.any(np.abs(np.linalg.norm(g, axis=1) - 1.0) > 1e-9):
                raise InvalidConfig("gaze_path vectors must be unit length")
            if np.any(g[:, 2] >= 0):
                raise InvalidConfig("gaze_path vectors must point toward the camera (negative z)")
            self.gaze_path = g.tolist()
            self.n_frames = len(g)
        if self.n_frames < 1:
            raise InvalidConfig("n_frames must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticEyeConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known - {"schema_version"}
        if extra:
            raise InvalidConfig(f"unknown synth config keys: {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("eyeball_center", "principal_point", "image_size", "split_fractions"):
            d[k] = list(d[k])
        return d

    def camera_matrix(self) -> np.ndarray:
        f = self.focal_length
        px, py = self.principal_point
        return np.array([[f, 0.0, px], [0.0, f, py], [0.0, 0.0, 1.0]])


def gaze_from_angles(yaw, pitch) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    return np.stack([np.sin(yaw) * np.cos(pitch), np.sin(pitch), -np.cos(yaw) * np.cos(pitch)], axis=-1)


def pupil_frame(cfg: SyntheticEyeConfig, gaze):
    """3-D pupil center and an orthonormal basis of the pupil plane."""
    g = np.asarray(gaze, dtype=float)
    g = g / np.linalg.norm(g)
    depth = math.sqrt(cfg.eyeball_radius**2 - cfg.pupil_radius**2)
    center = np.asarray(cfg.eyeball_center) + depth * g
    helper = np.array([0.0, 1.0, 0.0]) if abs(g[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, g)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(g, e1)
    return center, e1, e2


def project(cfg: SyntheticEyeConfig, points3) -> np.ndarray:
    p = np.asarray(points3, dtype=float).reshape(-1, 3)
    if np.any(p[:, 2] <= 0):
        raise InvalidConfig("a pupil point lies behind the camera")
    h = p @ cfg.camera_matrix().T
    return h[:, :2] / h[:, 2:3]


def projected_ellipse(cfg: SyntheticEyeConfig, gaze) -> EllipseParams:
    """Exact image ellipse of the pupil rim for one gaze direction."""
    center, e1, e2 = pupil_frame(cfg, gaze)
    h = cfg.camera_matrix() @ np.column_stack([e1, e2, center])
    h_inv = np.linalg.inv(h)
    m = h_inv.T @ np.diag([1.0, 1.0, -cfg.pupil_radius**2]) @ h_inv
    m = 0.5 * (m + m.T)
    coeffs = ConicCoeffs(m[0, 0], 2 * m[0, 1], m[1, 1], 2 * m[0, 2], 2 * m[1, 2], m[2, 2])
    return conic_to_parametric(coeffs)


def rim_points(cfg: SyntheticEyeConfig, gaze, n: int, phase: float = 0.0) -> np.ndarray:
    center, e1, e2 = pupil_frame(cfg, gaze)
    t = phase + 2 * math.pi * np.arange(n) / n
    rim = center + cfg.pupil_radius * (np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2)
    return project(cfg, rim)


def gaze_path(cfg: SyntheticEyeConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth seeded gaze trajectory: a few random low-frequency harmonics
    per angle, scaled to the configured amplitude."""
    if cfg.gaze_path is not None:
        return np.asarray(cfg.gaze_path, dtype=float)
    t = np.arange(cfg.n_frames, dtype=float)
    amp = math.radians(cfg.gaze_amplitude_deg)
    angles = []
    for _ in range(2):
        freqs = rng.uniform(0.5, 2.0, 3) / cfg.gaze_period_frames
        phases = rng.uniform(0, 2 * math.pi, 3)
        weights = rng.uniform(0.3, 1.0, 3)
        sig = (weights[:, None] * np.sin(2 * math.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
        angles.append(amp * sig / weights.sum())
    return gaze_from_angles(angles[0], angles[1])


def split_labels(n: int, fractions) -> list:
    """Contiguous train / val / test blocks in frame order."""
    f = np.asarray(fractions, dtype=float)
    f = f / f.sum()
    n_train = int(round(f[0] * n))
    n_val = int(round(f[1] * n))
    n_val = min(n_val, n - n_train)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def calibration_gazes(cfg: SyntheticEyeConfig) -> dict:
    """Center gaze plus four diagonal gazes, keyed s, c, g, k, o."""
    c = math.radians(cfg.calibration_deg)
    angles = {"s": (0, 0), "c": (-c, -c), "g": (c, -c), "k": (c, c), "o": (-c, c)}
    return {k: gaze_from_angles(*v) for k, v in angles.items()}


@dataclass
class SynthResult:
    config: SyntheticEyeConfig
    gazes: np.ndarray
    ellipses: list
    centers: np.ndarray
    boundaries: list
    splits: list
    calibration: dict
    files: list = field(default_factory=list)


def generate(cfg: SyntheticEyeConfig) -> SynthResult:
    """All frames and the calibration layout, in memory.

    Path, rim sampling phase and pixel noise draw from independent streams of
    the seed, so changing ``noise_px`` leaves the path and phases unchanged.
    """
    path_rng, phase_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    gazes = gaze_path(cfg, path_rng)

    def observe(g):
        pts = rim_points(cfg, g, cfg.n_boundary_points, phase_rng.uniform(0, 2 * math.pi))
        noise = noise_rng.normal(0.0, 1.0, pts.shape)
        return pts + cfg.noise_px * noise if cfg.noise_px > 0 else pts

    ellipses, centers, boundaries = [], [], []
    for g in gazes:
        ellipses.append(projected_ellipse(cfg, g))
        centers.append(project(cfg, pupil_frame(cfg, g)[0])[0])
        boundaries.append(observe(g))
    calibration = {}
    for name, g in calibration_gazes(cfg).items():
        e = conic_to_parametric(fit_ellipse(observe(g)))
        calibration[name] = [float(e.cx), float(e.cy)]
    return SynthResult(
        cfg, gazes, ellipses, np.array(centers), boundaries, split_labels(len(gazes), cfg.split_fractions), calibration
    )


def boundary_name(frame: int) -> str:
    return f"boundary/frame_{frame:05d}.csv"


def mask_name(frame: int) -> str:
    return f"masks/frame_{frame:05d}.pgm"


def write_dataset(result: SynthResult, out_dir) -> list:
    """Write a dataset directory; returns the created paths."""
    cfg = result.config
    out = io.ensure_dir(out_dir)
    io.ensure_dir(out / "boundary")
    if cfg.write_masks:
        io.ensure_dir(out / "masks")
    files = []
    rows = []
    for i, (e, g, c, pts, split) in enumerate(
        zip(result.ellipses, result.gazes, result.centers, result.boundaries, result.splits)
    ):
        rows.append([i, split, e.cx, e.cy, e.semi_major, e.semi_minor, e.theta, g[0], g[1], g[2], c[0], c[1]])
        io.write_points(out / boundary_name(i), pts)
        files.append(out / boundary_name(i))
        if cfg.write_masks:
            w, h = cfg.image_size
            io.write_pgm(out / mask_name(i), rasterize_ellipse(e, w, h) * 255)
            files.append(out / mask_name(i))
    io.write_table(out / "frames.csv", FRAME_COLUMNS, rows)
    files.append(out / "frames.csv")
    io.write_json(out / "calibration.json", {"schema_version": io.SCHEMA_VERSION, **result.calibration})
    files.append(out / "calibration.json")
    meta = {
        "schema_version": io.SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "n_frames": len(rows),
        "split_counts": {s: result.splits.count(s) for s in SPLITS},
        "masks": cfg.write_masks,
    }
    io.write_json(out / "meta.json", meta)
    files.append(out / "meta.json")
    result.files = files
    return files


def synth(cfg: SyntheticEyeConfig, out_dir) -> SynthResult:
    result = generate(cfg)
    write_dataset(result, out_dir)
    return result


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# -- reading back ---------------------------------------------------------------


@dataclass
class FrameTable:
    frame: np.ndarray
    split: list
    ellipses: list
    gazes: np.ndarray
    centers: np.ndarray


def read_frames(dataset_dir) -> FrameTable:
    path = Path(dataset_dir) / "frames.csv"
    cols = io.read_table(path, required=FRAME_COLUMNS)
    col = lambda n: io.float_column(cols, n, path)  # noqa: E731
    frames = io.int_column(cols, "frame", path)
    bad = [s for s in cols["split"] if s not in SPLITS]
    if bad:
        raise io.ParseError(f"unknown split label {bad[0]!r}", path=path, field="split")
    ellipses = [
        EllipseParams(*v)
        for v in zip(col("gt_cx"), col("gt_cy"), col("gt_semi_major"), col("gt_semi_minor"), col("gt_theta"))
    ]
    gazes = np.column_stack([col("gaze_x"), col("gaze_y"), col("gaze_z")])
    centers = np.column_stack([col("center_x"), col("center_y")])
    return FrameTable(frames, list(cols["split"]), ellipses, gazes, centers)
