"""Command-line entry point: ``gaze-geom <command> [--config PATH] [--seed N] [--out DIR]``.

Every command reads a JSON config (``schema_version`` 1), writes its outputs
into ``--out`` and finishes with a ``manifest.json`` listing the command,
config hash, seed, inputs, outputs, tool version and wall time.  Relative
paths inside a config resolve against the config file's directory.  Failures
print one JSON object on stderr and exit with status 1.

Commands and their config keys:

synth     SyntheticEyeConfig fields
fit       ``points`` (x,y CSV -> ellipse.json) or ``dataset`` (-> fits.csv)
efe       ``pred``, ``gt`` (PGM); optional ``alpha``, ``beta``, ``threshold``
warp      ``layout`` and ``points`` (-> warped.csv) or ``fits`` (-> warped_fits.csv)
train     ``dataset``, ``fits``, optional ``model`` (ModelConfig fields)
eval      ``dataset``, ``fits``, ``checkpoint``; optional ``raw_fits``, ``split``
bench     optional ``checkpoint``, ``n``, ``window_sizes``, ``model``
pipeline  ``dataset``, optional ``model``, ``split``: fit, warp, train, eval

The environment variable GAZE_GEOM_THREADS caps the worker threads used for
per-frame fitting (default 1); results are merged in frame order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, io
from .conic import EllipseParams, conic_to_parametric, fit_ellipse
from .coordtrans import CalibrationLayout, build_warp, transform_points
from .efe import LossWeights, fit_gt_ellipse, loss_terms
from .errors import ArtifactError, GazeGeomError, InvalidConfig, SchemaMismatch
from .gvnet import (
    GazeSample,
    GazeVector,
    GVNet,
    ModelConfig,
    bench_throughput,
    load_checkpoint,
    mae_degree,
    mae_pixel,
    make_windows,
    save_checkpoint,
    train,
    windows_to_arrays,
)
from .synth import SPLITS, SyntheticEyeConfig, boundary_name, config_hash, read_frames, synth

COMMANDS = ("synth", "fit", "efe", "warp", "train", "eval", "bench", "pipeline")
FIT_COLUMNS = ["frame", "cx", "cy", "semi_major", "semi_minor", "theta"]

# Single-thread wall times for 1000 inferences reported with the original
# model; different hardware, shown for context only.
REFERENCE_SECONDS = {1: 3.93, 10: 1.01, 20: 0.75}


class StageError(Exception):
    """Wraps an error with the pipeline stage it came from."""

    def __init__(self, stage, error):
        super().__init__(str(error))
        self.stage = stage
        self.error = error


class Run:
    """Collects inputs and outputs of one command for its manifest."""

    def __init__(self, command: str, config: dict, seed, out: Path):
        self.command = command
        self.config = config
        self.seed = seed
        self.out = io.ensure_dir(out)
        self.inputs: list = []
        self.outputs: list = []
        self.start = time.perf_counter()

    def read(self, path) -> Path:
        p = Path(path)
        self.inputs.append(str(p))
        return p

    def wrote(self, path) -> Path:
        p = Path(path)
        self.outputs.append(str(p))
        return p

    def finish(self) -> dict:
        path = self.out / "manifest.json"
        manifest = {
            "schema_version": io.SCHEMA_VERSION,
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "inputs": sorted(set(self.inputs)),
            "outputs": sorted(set(self.outputs) | {str(path)}),
            "tool_version": __version__,
            "wall_time_s": time.perf_counter() - self.start,
        }
        io.write_json(path, manifest)
        return manifest


def thread_count() -> int:
    raw = os.environ.get("GAZE_GEOM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"GAZE_GEOM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidConfig("GAZE_GEOM_THREADS must be >= 1")
    return n


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _path_field(cfg: dict, key: str, base: Path, source=None) -> Path:
    v = io.get_field(cfg, key, source)
    if not isinstance(v, str):
        raise SchemaMismatch(f"field {key!r} must be a path string", path=source, field=key)
    return _resolve(base, v)


def _model_config(cfg: dict, seed) -> ModelConfig:
    d = dict(cfg.get("model", {}))
    if seed is not None:
        d["seed"] = seed
    return ModelConfig.from_dict(d)


# -- fit ----------------------------------------------------------------------


def fit_points(points) -> EllipseParams:
    return conic_to_parametric(fit_ellipse(points))


def fit_dataset(dataset: Path, run: Run, threads: int) -> list:
    run.read(dataset / "frames.csv")
    frames = read_frames(dataset).frame
    paths = [run.read(dataset / boundary_name(int(i))) for i in frames]

    def one(path):
        try:
            return fit_points(io.read_points(path))
        except GazeGeomError as exc:
            if isinstance(exc, ArtifactError):
                raise
            raise type(exc)(f"{path}: {exc}") from exc

    if threads == 1:
        return [one(p) for p in paths]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, paths))


def write_fits(path, frames, ellipses) -> None:
    rows = [[int(f), e.cx, e.cy, e.semi_major, e.semi_minor, e.theta] for f, e in zip(frames, ellipses)]
    io.write_table(path, FIT_COLUMNS, rows)


def read_fits(path):
    cols = io.read_table(path, required=FIT_COLUMNS)
    frames = io.int_column(cols, "frame", path)
    vals = [io.float_column(cols, c, path) for c in FIT_COLUMNS[1:]]
    return frames, [EllipseParams(*v) for v in zip(*vals)]


def ellipse_dict(e: EllipseParams) -> dict:
    return {"cx": e.cx, "cy": e.cy, "semi_major": e.semi_major, "semi_minor": e.semi_minor, "theta": e.theta}


def run_fit(cfg: dict, base: Path, run: Run) -> dict:
    if "points" in cfg:
        path = run.read(_path_field(cfg, "points", base))
        e = fit_points(io.read_points(path))
        out = {"schema_version": io.SCHEMA_VERSION, "ellipse": ellipse_dict(e)}
        io.write_json(run.wrote(run.out / "ellipse.json"), out)
        return out
    dataset = io.require_dir(_path_field(cfg, "dataset", base))
    ellipses = fit_dataset(dataset, run, thread_count())
    frames = read_frames(dataset).frame
    write_fits(run.wrote(run.out / "fits.csv"), frames, ellipses)
    return {"n_frames": len(ellipses)}


# -- efe ----------------------------------------------------------------------


def run_efe(cfg: dict, base: Path, run: Run) -> dict:
    pred = io.read_prob(run.read(_path_field(cfg, "pred", base)))
    gt = io.read_mask(run.read(_path_field(cfg, "gt", base)))
    if pred.shape != gt.shape:
        raise SchemaMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}", field="pred")
    weights = LossWeights(float(cfg.get("alpha", 1.0)), float(cfg.get("beta", 1.0)))
    threshold = float(cfg.get("threshold", 0.5))
    e = fit_gt_ellipse(gt)
    terms = loss_terms(pred, gt, e, weights, threshold)
    out = {
        "schema_version": io.SCHEMA_VERSION,
        "bce": terms.bce,
        "efe": terms.efe,
        "total": terms.total,
        "empty_prediction": bool(terms.empty_prediction),
        "alpha": weights.alpha,
        "beta": weights.beta,
        "threshold": threshold,
        "gt_ellipse": ellipse_dict(e),
    }
    io.write_json(run.wrote(run.out / "efe.json"), out)
    return out


# -- warp ---------------------------------------------------------------------


def read_layout(path) -> CalibrationLayout:
    d = io.read_json(path)
    for k in ("s", "c", "g", "k", "o"):
        v = io.get_field(d, k, path, list)
        if len(v) != 2:
            raise SchemaMismatch(f"field {k!r} must hold two numbers", path=path, field=k)
    return CalibrationLayout.from_dict(d)


def warp_fits(layout: CalibrationLayout, ellipses) -> list:
    w = build_warp(layout)
    centers = transform_points(w, [(e.cx, e.cy) for e in ellipses])
    return [EllipseParams(x, y, e.semi_major, e.semi_minor, e.theta) for (x, y), e in zip(centers, ellipses)]


def run_warp(cfg: dict, base: Path, run: Run) -> dict:
    layout = read_layout(run.read(_path_field(cfg, "layout", base)))
    if "fits" in cfg:
        frames, ellipses = read_fits(run.read(_path_field(cfg, "fits", base)))
        write_fits(run.wrote(run.out / "warped_fits.csv"), frames, warp_fits(layout, ellipses))
        return {"n_frames": len(frames)}
    pts = io.read_points(run.read(_path_field(cfg, "points", base)))
    io.write_points(run.wrote(run.out / "warped.csv"), transform_points(build_warp(layout), pts))
    return {"n_points": len(pts)}


# -- train / eval ---------------------------------------------------------------


def split_windows(dataset: Path, fits_path: Path, split: str, window_size: int, run: Run):
    """Windows of one split plus the frame index of each window's label."""
    run.read(dataset / "frames.csv")
    table = read_frames(dataset)
    frames, ellipses = read_fits(run.read(fits_path))
    if not np.array_equal(frames, table.frame):
        raise SchemaMismatch("fits frames do not match frames.csv", path=fits_path, field="frame")
    idx = [i for i, s in enumerate(table.split) if s == split]
    if not idx:
        raise SchemaMismatch(f"split {split!r} has no frames", path=dataset / "frames.csv", field="split")
    samples = [GazeSample(int(table.frame[i]), ellipses[i], GazeVector(*table.gazes[i])) for i in idx]
    pairs = make_windows(samples, window_size)
    return pairs, idx[window_size - 1 :], table


def run_train(cfg: dict, base: Path, run: Run, seed=None) -> dict:
    dataset = io.require_dir(_path_field(cfg, "dataset", base))
    fits = _path_field(cfg, "fits", base)
    mc = _model_config(cfg, seed)
    tr, _, _ = split_windows(dataset, fits, "train", mc.window_size, run)
    va, _, _ = split_windows(dataset, fits, "val", mc.window_size, run)
    model, report = train(mc, windows_to_arrays(tr), windows_to_arrays(va))
    save_checkpoint(model, run.wrote(run.out / "model.ckpt"))
    out = {"schema_version": io.SCHEMA_VERSION, "model": mc.to_dict(), **report.to_dict()}
    io.write_json(run.wrote(run.out / "train_report.json"), out)
    return out


def evaluate(model: GVNet, dataset: Path, fits: Path, split: str, run: Run, raw_fits=None) -> dict:
    pairs, idx, table = split_windows(dataset, fits, split, model.config.window_size, run)
    x, y = windows_to_arrays(pairs)
    preds, fallback = model.predict(x)
    out = {
        "schema_version": io.SCHEMA_VERSION,
        "split": split,
        "window_size": model.config.window_size,
        "n_windows": len(pairs),
        "mae_degree": mae_degree(preds, y),
        "fallback_count": int(fallback.sum()),
    }
    if raw_fits is not None:
        _, raw = read_fits(run.read(raw_fits))
        centers = [(raw[i].cx, raw[i].cy) for i in idx]
        out["mae_pixel"] = mae_pixel(centers, table.centers[idx])
    return out


def run_eval(cfg: dict, base: Path, run: Run) -> dict:
    dataset = io.require_dir(_path_field(cfg, "dataset", base))
    model = load_checkpoint(io.require_file(run.read(_path_field(cfg, "checkpoint", base))))
    split = cfg.get("split", "test")
    if split not in SPLITS:
        raise SchemaMismatch(f"unknown split {split!r}", field="split")
    raw = _path_field(cfg, "raw_fits", base) if "raw_fits" in cfg else None
    out = evaluate(model, dataset, _path_field(cfg, "fits", base), split, run, raw)
    io.write_json(run.wrote(run.out / "metrics.json"), out)
    return out


# -- bench --------------------------------------------------------------------


def run_bench(cfg: dict, base: Path, run: Run, seed=None) -> dict:
    n = int(cfg.get("n", 1000))
    rows = []
    if "checkpoint" in cfg:
        models = [load_checkpoint(io.require_file(run.read(_path_field(cfg, "checkpoint", base))))]
    else:
        sizes = cfg.get("window_sizes", [1, 10, 20])
        models = [GVNet(_model_config({"model": {**cfg.get("model", {}), "window_size": w}}, seed)) for w in sizes]
    for m in models:
        w = m.config.window_size
        rows.append(
            {
                "window_size": w,
                "n": n,
                "seconds": bench_throughput(m, n, seed or 0),
                "reference_seconds": REFERENCE_SECONDS.get(w),
            }
        )
    out = {
        "schema_version": io.SCHEMA_VERSION,
        "threads": 1,
        "rows": rows,
        "reference": {
            "label": "paper hardware, not asserted",
            "model": "GVnet",
            "seconds": {f"W{w}": s for w, s in REFERENCE_SECONDS.items()},
        },
    }
    io.write_json(run.wrote(run.out / "bench.json"), out)
    return out


# -- pipeline -----------------------------------------------------------------


def _stage(name, fn):
    try:
        return fn()
    except (GazeGeomError, OSError) as exc:
        if isinstance(exc, ArtifactError) and exc.stage is None:
            exc.stage = name
        raise StageError(name, exc) from exc


def run_pipeline(cfg: dict, base: Path, run: Run, seed=None) -> dict:
    """fit -> warp -> train -> eval, each stage in its own sub-directory with
    its own config and manifest, exactly as the single commands would run."""
    dataset = _path_field(cfg, "dataset", base).resolve()
    split = cfg.get("split", "test")
    model = dict(cfg.get("model", {}))
    if seed is not None:
        model["seed"] = seed
    out = run.out.resolve()
    stage_cfgs = {
        "fit": {"dataset": str(dataset)},
        "warp": {"layout": str(dataset / "calibration.json"), "fits": str(out / "fit" / "fits.csv")},
        "train": {"dataset": str(dataset), "fits": str(out / "warp" / "warped_fits.csv"), "model": model},
        "eval": {
            "dataset": str(dataset),
            "fits": str(out / "warp" / "warped_fits.csv"),
            "raw_fits": str(out / "fit" / "fits.csv"),
            "checkpoint": str(out / "train" / "model.ckpt"),
            "split": split,
        },
    }
    results = {}
    for name, stage_cfg in stage_cfgs.items():
        stage_cfg = {"schema_version": io.SCHEMA_VERSION, **stage_cfg}
        stage_dir = io.ensure_dir(out / name)
        cfg_path = stage_dir / "config.json"
        io.write_json(run.wrote(cfg_path), stage_cfg)
        results[name] = _stage(name, lambda: execute(name, cfg_path, None, stage_dir))
        run.outputs.extend(results[name]["manifest"]["outputs"])
        run.inputs.extend(results[name]["manifest"]["inputs"])
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "metrics": results["eval"]["result"],
        "train": {k: results["train"]["result"][k] for k in ("epochs_run", "best_val_loss")},
        "stages": {k: str(out / k) for k in stage_cfgs},
    }
    io.write_json(run.wrote(out / "pipeline.json"), report)
    return report


# -- dispatch -----------------------------------------------------------------


def execute(command: str, config_path, seed, out) -> dict:
    """Run one command; returns its result and manifest."""
    if command not in COMMANDS:
        raise InvalidConfig(f"unknown command {command!r}")
    if config_path is None:
        if command not in ("synth", "bench"):
            raise InvalidConfig(f"{command} needs --config")
        cfg, base = {"schema_version": io.SCHEMA_VERSION}, Path.cwd()
    else:
        cfg = io.read_json(config_path)
        base = Path(config_path).resolve().parent
    effective = dict(cfg)
    if seed is not None:
        effective["seed_override"] = seed
    run = Run(command, effective, seed, Path(out))
    if config_path is not None:
        run.read(config_path)
    if command == "synth":
        d = {k: v for k, v in cfg.items() if k != "schema_version"}
        if seed is not None:
            d["seed"] = seed
        sc = SyntheticEyeConfig.from_dict(d)
        run.seed = sc.seed
        res = synth(sc, run.out)
        run.outputs.extend(str(p) for p in res.files)
        result = {"n_frames": len(res.gazes)}
    elif command == "fit":
        result = run_fit(cfg, base, run)
    elif command == "efe":
        result = run_efe(cfg, base, run)
    elif command == "warp":
        result = run_warp(cfg, base, run)
    elif command == "train":
        result = run_train(cfg, base, run, seed)
    elif command == "eval":
        result = run_eval(cfg, base, run)
    elif command == "bench":
        result = run_bench(cfg, base, run, seed)
    else:
        result = run_pipeline(cfg, base, run, seed)
    return {"result": result, "manifest": run.finish()}


def error_payload(exc) -> dict:
    stage = None
    if isinstance(exc, StageError):
        stage, exc = exc.stage, exc.error
    if isinstance(exc, ArtifactError):
        d = exc.to_dict()
    elif isinstance(exc, FileNotFoundError):
        d = {"error": "FileNotFound", "message": str(exc), "path": exc.filename}
    else:
        d = {"error": type(exc).__name__, "message": str(exc)}
    if stage is not None:
        d["stage"] = stage
    return d


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaze-geom", description="Pupil-ellipse gaze toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=str, default=None, help="JSON config for the command")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--out", type=str, default="gaze_geom_out", help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print(json.dumps({"error": "InvalidConfig", "message": "--seed must be non-negative"}), file=sys.stderr)
        return 1
    try:
        res = execute(args.command, args.config, args.seed, args.out)
    except (GazeGeomError, StageError, OSError) as exc:
        print(json.dumps(error_payload(exc), sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(Path(args.out)), "outputs": len(res["manifest"]["outputs"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
