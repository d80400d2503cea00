import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gaze_geom import io
from gaze_geom.cli import execute, main, read_fits
from gaze_geom.efe import bce_loss, rasterize_ellipse
from gaze_geom.synth import SyntheticEyeConfig, synth

SMALL_MODEL = {"hidden_sizes": [16], "attention_dim": 8, "batch_size": 8, "patience": 10, "dropout_p": 0.0, "max_epochs": 60}


def write_cfg(path: Path, **kw) -> Path:
    io.write_json(path, {"schema_version": 1, **kw})
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    # short period so the contiguous test split stays inside the trained range
    synth(SyntheticEyeConfig(n_frames=200, noise_px=0.0, seed=3, gaze_period_frames=40, write_masks=False), d / "data")
    return d / "data"


def run_cli(args, env=None):
    e = dict(os.environ)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "gaze_geom.cli", *args], capture_output=True, text=True, env=e)


class TestFit:
    def test_recovers_ground_truth(self, dataset, tmp_path):
        cfg = write_cfg(tmp_path / "fit.json", points=str(dataset / "boundary" / "frame_00007.csv"))
        assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        got = io.read_json(tmp_path / "o" / "ellipse.json")["ellipse"]
        frames = io.read_table(dataset / "frames.csv")
        for k in ("cx", "cy", "semi_major", "semi_minor", "theta"):
            ref = float(frames[f"gt_{k}"][7])
            assert got[k] == pytest.approx(ref, rel=1e-6, abs=1e-6 * 5)

    def test_dataset_threads_are_order_deterministic(self, dataset, tmp_path):
        cfg = write_cfg(tmp_path / "fit.json", dataset=str(dataset))
        r1 = run_cli(["fit", "--config", str(cfg), "--out", str(tmp_path / "t1")], {"GAZE_GEOM_THREADS": "1"})
        r4 = run_cli(["fit", "--config", str(cfg), "--out", str(tmp_path / "t4")], {"GAZE_GEOM_THREADS": "4"})
        assert r1.returncode == 0 and r4.returncode == 0, r1.stderr + r4.stderr
        assert (tmp_path / "t1" / "fits.csv").read_bytes() == (tmp_path / "t4" / "fits.csv").read_bytes()

    def test_bad_thread_env(self, dataset, tmp_path):
        cfg = write_cfg(tmp_path / "fit.json", dataset=str(dataset))
        r = run_cli(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")], {"GAZE_GEOM_THREADS": "zero"})
        assert r.returncode != 0
        assert json.loads(r.stderr)["error"] == "InvalidConfig"

    def test_relative_paths(self, dataset, tmp_path):
        pts = tmp_path / "in" / "p.csv"
        pts.parent.mkdir()
        pts.write_bytes((dataset / "boundary" / "frame_00000.csv").read_bytes())
        cfg = write_cfg(tmp_path / "in" / "fit.json", points="p.csv")
        assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


class TestWarp:
    def test_square_layout_is_identity(self, tmp_path):
        layout = write_cfg(tmp_path / "lay.json", s=[0, 0], c=[-3, -3], g=[3, -3], k=[3, 3], o=[-3, 3])
        pts = np.random.default_rng(0).uniform(-10, 10, (200, 2))
        io.write_points(tmp_path / "p.csv", pts)
        cfg = write_cfg(tmp_path / "w.json", layout=str(layout), points=str(tmp_path / "p.csv"))
        assert main(["warp", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert np.max(np.abs(io.read_points(tmp_path / "o" / "warped.csv") - pts)) < 1e-9

    def test_bad_layout(self, tmp_path):
        layout = write_cfg(tmp_path / "lay.json", s=[0, 0], c=[-3, -3], g=[3, -3], k=[3, 3])
        io.write_points(tmp_path / "p.csv", [[1, 1]])
        cfg = write_cfg(tmp_path / "w.json", layout=str(layout), points=str(tmp_path / "p.csv"))
        r = run_cli(["warp", "--config", str(cfg), "--out", str(tmp_path / "o")])
        err = json.loads(r.stderr)
        assert r.returncode == 1 and err["error"] == "SchemaMismatch" and err["field"] == "o"


class TestEfe:
    def test_bce_only_and_self_match(self, tmp_path):
        from gaze_geom.conic import EllipseParams

        e = EllipseParams(40.3, 30.7, 18.0, 11.0, 0.4)
        gt = rasterize_ellipse(e, 80, 64)
        io.write_pgm(tmp_path / "gt.pgm", gt * 255)
        prob = np.clip(gt * 0.8 + 0.1, 0, 1)
        io.write_pgm(tmp_path / "pred.pgm", np.round(prob * 255).astype(np.uint8))
        cfg = write_cfg(tmp_path / "e.json", pred="pred.pgm", gt="gt.pgm", alpha=1.0, beta=0.0)
        assert main(["efe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        out = io.read_json(tmp_path / "o" / "efe.json")
        assert out["total"] == out["bce"] == bce_loss(io.read_prob(tmp_path / "pred.pgm"), gt)
        # boundary pixels sit within about a pixel of the fitted ellipse
        assert out["efe"] / (2 * np.pi * 15) < 1.0
        assert not out["empty_prediction"]

    def test_empty_prediction_flag(self, tmp_path):
        gt = np.zeros((20, 20), np.uint8)
        gt[5:15, 4:16] = 255
        io.write_pgm(tmp_path / "gt.pgm", gt)
        io.write_pgm(tmp_path / "pred.pgm", np.zeros((20, 20), np.uint8))
        cfg = write_cfg(tmp_path / "e.json", pred="pred.pgm", gt="gt.pgm")
        assert main(["efe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        out = io.read_json(tmp_path / "o" / "efe.json")
        assert out["empty_prediction"] and out["efe"] == 0

    def test_shape_mismatch(self, tmp_path):
        io.write_pgm(tmp_path / "gt.pgm", np.zeros((4, 4), np.uint8))
        io.write_pgm(tmp_path / "pred.pgm", np.zeros((4, 5), np.uint8))
        cfg = write_cfg(tmp_path / "e.json", pred="pred.pgm", gt="gt.pgm")
        assert main(["efe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def compose_by_hand(dataset, work, model, seed=None):
    """fit -> warp -> train -> eval with one config file per command."""
    seed_args = [] if seed is None else ["--seed", str(seed)]
    work.mkdir()
    fit = write_cfg(work / "fit.json", dataset=str(dataset))
    assert main(["fit", "--config", str(fit), "--out", str(work / "fit")]) == 0
    warp = write_cfg(work / "warp.json", layout=str(dataset / "calibration.json"), fits=str(work / "fit" / "fits.csv"))
    assert main(["warp", "--config", str(warp), "--out", str(work / "warp")]) == 0
    tr = write_cfg(work / "train.json", dataset=str(dataset), fits=str(work / "warp" / "warped_fits.csv"), model=model)
    assert main(["train", "--config", str(tr), "--out", str(work / "train"), *seed_args]) == 0
    ev = write_cfg(
        work / "eval.json",
        dataset=str(dataset),
        fits=str(work / "warp" / "warped_fits.csv"),
        raw_fits=str(work / "fit" / "fits.csv"),
        checkpoint=str(work / "train" / "model.ckpt"),
    )
    assert main(["eval", "--config", str(ev), "--out", str(work / "eval")]) == 0
    return io.read_json(work / "eval" / "metrics.json")


class TestPipeline:
    def test_equals_composition(self, dataset, tmp_path):
        manual = compose_by_hand(dataset, tmp_path / "manual", SMALL_MODEL, seed=5)
        cfg = write_cfg(tmp_path / "p.json", dataset=str(dataset), model=SMALL_MODEL)
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "auto"), "--seed", "5"]) == 0
        report = io.read_json(tmp_path / "auto" / "pipeline.json")
        assert report["metrics"] == manual
        assert io.read_json(tmp_path / "auto" / "eval" / "metrics.json") == manual
        assert report["metrics"]["mae_pixel"] < 0.05

    def test_reproducible(self, dataset, tmp_path):
        cfg = write_cfg(tmp_path / "p.json", dataset=str(dataset), model=SMALL_MODEL)
        for name in ("a", "b"):
            assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "eval" / "metrics.json").read_bytes() == (tmp_path / "b" / "eval" / "metrics.json").read_bytes()
        ra = io.read_json(tmp_path / "a" / "train" / "train_report.json")
        rb = io.read_json(tmp_path / "b" / "train" / "train_report.json")
        ra.pop("wall_time_s"), rb.pop("wall_time_s")
        assert ra == rb

    def test_manifest_lists_every_file(self, dataset, tmp_path):
        cfg = write_cfg(tmp_path / "p.json", dataset=str(dataset), model={**SMALL_MODEL, "max_epochs": 2})
        out = tmp_path / "run"
        assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
        listed = {str(Path(p).resolve()) for p in io.read_json(out / "manifest.json")["outputs"]}
        created = {str(p.resolve()) for p in out.rglob("*") if p.is_file()}
        assert created <= listed
        for stage in ("fit", "warp", "train", "eval"):
            m = io.read_json(out / stage / "manifest.json")
            own = {str(Path(p).resolve()) for p in m["outputs"]}
            assert {str(p.resolve()) for p in (out / stage).iterdir() if p.name != "config.json"} <= own

    def test_missing_calibration_is_stage_labelled(self, dataset, tmp_path):
        broken = tmp_path / "broken"
        broken.mkdir()
        for name in ("frames.csv", "meta.json"):
            (broken / name).write_bytes((dataset / name).read_bytes())
        (broken / "boundary").symlink_to(dataset / "boundary")
        cfg = write_cfg(tmp_path / "p.json", dataset=str(broken))
        r = run_cli(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert r.returncode == 1
        err = json.loads(r.stderr)
        assert err["error"] == "FileNotFound" and err["stage"] == "warp"
        assert err["path"].endswith("calibration.json")

    def test_trained_beats_untrained(self, dataset, tmp_path):
        from gaze_geom.gvnet import GVNet, ModelConfig, save_checkpoint

        cfg = write_cfg(tmp_path / "p.json", dataset=str(dataset), model=SMALL_MODEL)
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        trained = io.read_json(tmp_path / "run" / "eval" / "metrics.json")
        save_checkpoint(GVNet(ModelConfig(**{**SMALL_MODEL, "seed": 0})), tmp_path / "rand.ckpt")
        ev = write_cfg(
            tmp_path / "ev.json",
            dataset=str(dataset),
            fits=str(tmp_path / "run" / "warp" / "warped_fits.csv"),
            checkpoint=str(tmp_path / "rand.ckpt"),
        )
        assert main(["eval", "--config", str(ev), "--out", str(tmp_path / "rand")]) == 0
        untrained = io.read_json(tmp_path / "rand" / "metrics.json")
        assert trained["mae_degree"] < untrained["mae_degree"]
        assert "mae_pixel" not in untrained


class TestErrors:
    def test_missing_config(self, tmp_path):
        r = run_cli(["fit", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)])
        err = json.loads(r.stderr)
        assert r.returncode == 1 and err["error"] == "FileNotFound" and err["path"].endswith("none.json")

    def test_schema_version(self, tmp_path):
        (tmp_path / "c.json").write_text('{"schema_version": 7, "points": "x.csv"}')
        r = run_cli(["fit", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)])
        err = json.loads(r.stderr)
        assert err["error"] == "SchemaMismatch" and err["field"] == "schema_version"

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "p.csv").write_text("x,y\n1,2\nfoo,3\n")
        cfg = write_cfg(tmp_path / "c.json", points="p.csv")
        r = run_cli(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")])
        err = json.loads(r.stderr)
        assert err["error"] == "ParseError" and err["field"] == "x"

    def test_config_required(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["dance"])

    def test_degenerate_points(self, tmp_path):
        io.write_points(tmp_path / "p.csv", [[i, 2 * i] for i in range(10)])
        cfg = write_cfg(tmp_path / "c.json", points="p.csv")
        r = run_cli(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert r.returncode == 1 and json.loads(r.stderr)["error"] == "DegenerateInput"


class TestSynthAndBench:
    def test_synth_seed_override(self, tmp_path):
        cfg = write_cfg(tmp_path / "s.json", n_frames=5, write_masks=False)
        assert main(["synth", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "a")]) == 0
        meta = io.read_json(tmp_path / "a" / "meta.json")
        assert meta["config"]["seed"] == 9
        assert io.read_json(tmp_path / "a" / "manifest.json")["seed"] == 9
        listed = {Path(p).resolve() for p in io.read_json(tmp_path / "a" / "manifest.json")["outputs"]}
        assert {p.resolve() for p in (tmp_path / "a").rglob("*") if p.is_file()} <= listed

    def test_synth_invalid(self, tmp_path):
        cfg = write_cfg(tmp_path / "s.json", pupil_radius=50)
        r = run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
        assert r.returncode == 1 and json.loads(r.stderr)["error"] == "InvalidConfig"

    def test_bench_report(self, tmp_path):
        cfg = write_cfg(tmp_path / "b.json", n=20, window_sizes=[1, 10])
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rep = io.read_json(tmp_path / "o" / "bench.json")
        assert [r["window_size"] for r in rep["rows"]] == [1, 10]
        assert rep["reference"]["label"] == "paper hardware, not asserted"
        assert rep["reference"]["seconds"] == {"W1": 3.93, "W10": 1.01, "W20": 0.75}
        assert all(r["seconds"] > 0 for r in rep["rows"])

    def test_bench_checkpoint(self, dataset, tmp_path):
        from gaze_geom.gvnet import GVNet, ModelConfig, save_checkpoint

        save_checkpoint(GVNet(ModelConfig(window_size=20)), tmp_path / "m.ckpt")
        cfg = write_cfg(tmp_path / "b.json", n=10, checkpoint="m.ckpt")
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rows = io.read_json(tmp_path / "o" / "bench.json")["rows"]
        assert rows[0]["window_size"] == 20 and rows[0]["reference_seconds"] == 0.75


def test_fits_csv_roundtrip(dataset, tmp_path):
    cfg = write_cfg(tmp_path / "fit.json", dataset=str(dataset))
    res = execute("fit", cfg, None, tmp_path / "o")
    frames, ellipses = read_fits(tmp_path / "o" / "fits.csv")
    assert res["result"]["n_frames"] == len(frames) == 200
    assert frames.tolist() == list(range(200))
