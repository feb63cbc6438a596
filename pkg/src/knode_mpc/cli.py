"""Command-line pipeline: generate data, train models, evaluate, or all three.

Exit codes: 0 success, 2 configuration or file error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dynamics import DragPlant, GimbalLockError, NominalModel, NumericalError
from .evaluation import fly_reference, prediction_experiment, summarize, tracking_experiment, write_table
from .models import GpCorrectedModel, gp_fit, load_model, save_model, translational_mask, velocity_features
from .trajectory import Trajectory
from .training import gp_training_set, make_hybrid, train_knode

log = logging.getLogger("knode_mpc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MODEL_FILES = {"knode": "knode.json", "gp": "gp.json", "nominal": "nominal.json"}


class _Run:
    """Output directory bookkeeping: manifest, resolved config and timings."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(self.out)
        self.written = []

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def write_json(self, obj, *parts) -> Path:
        p = self.path(*parts)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def timed(self, label, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        dt = time.perf_counter() - t0
        with open(self.out / "timings.log", "a") as fh:
            fh.write(f"{self.command} {label} {dt:.3f} s\n")
        log.info("%s: %.1f s", label, dt)
        return out

    def finish(self):
        """Merge this command's artifacts into the directory manifest."""
        mpath = self.out / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.is_file() else {"artifacts": {}}
        for p in self.written:
            rel = p.relative_to(self.out).as_posix()
            manifest["artifacts"][rel] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest.update({
            "config_hash": self.cfg.config_hash(),
            "config": "config.resolved.yaml",
            "seed": self.cfg.seed,
            "train_seed": self.cfg.train.seed,
            "versions": _versions(),
        })
        manifest.setdefault("commands", [])
        if self.command not in manifest["commands"]:
            manifest["commands"].append(self.command)
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pyyaml", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _write_positions(traj: Trajectory, path: Path) -> None:
    data = np.column_stack([traj.times, traj.positions])
    np.savetxt(path, data, delimiter=",", header="t,x,y,z", comments="", fmt="%.12g")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, run: _Run) -> None:
    """Fly the drag plant with nominal MPC along every training and validation spec."""
    pilot, plant = NominalModel(cfg.quad), DragPlant(cfg.quad, cfg.drag)
    for name, spec in {**cfg.train_specs, **cfg.val_specs}.items():
        tr, _ = run.timed(f"fly {name}", fly_reference, pilot, plant, spec, cfg.duration, cfg.mpc,
                          cfg.plant_dt)
        tr.to_csv(run.path("data", f"{name}.csv"), metadata={"spec": spec.to_dict(), "controller": "nominal-mpc"})
        run.written.append(run.out / "data" / f"{name}.json")


def _load_data(cfg: RunConfig, data_dir: Path):
    train = [Trajectory.from_csv(data_dir / f"{n}.csv") for n in cfg.train_specs]
    (val_name,) = cfg.val_specs
    return train, Trajectory.from_csv(data_dir / f"{val_name}.csv")


def cmd_train(cfg: RunConfig, run: _Run, model: str, data_dir: Path) -> None:
    train, val = _load_data(cfg, data_dir)
    if model == "knode":
        m = cfg.doc["model"]
        h0 = make_hybrid(cfg.quad, train, cfg.layers, seed=cfg.seed,
                         residual_mask=translational_mask() if m["residual"] == "translational" else None,
                         input_mask=velocity_features() if m["features"] == "velocity" else None)
        h, report = run.timed("train knode", train_knode, h0, train, val, cfg.train)
        save_model(h, run.path("models", MODEL_FILES["knode"]))
        run.write_json(report.to_dict(), "models", "knode_report.json")
        log.info("validation loss %.3e -> %.3e", report.initial_val_loss, report.final_val_loss)
    elif model == "gp":
        g = cfg.doc["gp"]
        X, Y = gp_training_set(cfg.quad, train, int(g["n_points"]))
        gp = run.timed("fit gp", gp_fit, X, Y, g["c"], g["length_scale"], float(g["noise"]))
        save_model(GpCorrectedModel(cfg.quad, gp), run.path("models", MODEL_FILES["gp"]))
    else:
        save_model(NominalModel(cfg.quad), run.path("models", MODEL_FILES["nominal"]))


def _prediction_summary(rows) -> dict:
    out = {}
    for family in ("circle", "lemniscate"):
        fam = [r for r in rows if r["spec"].startswith(family)]
        if not fam:
            continue
        means = {m: float(np.mean([r["dtw_raw"] for r in fam if r["model"] == m]))
                 for m in dict.fromkeys(r["model"] for r in fam)}
        entry = {"mean_dtw": means}
        if "knode" in means:
            entry["knode_vs"] = {m: 1.0 - means["knode"] / v for m, v in means.items() if m != "knode"}
        out[family] = entry
    return out


def cmd_evaluate(cfg: RunConfig, run: _Run, models_dir: Path) -> None:
    models = {"nominal": NominalModel(cfg.quad)}
    for name in ("gp", "knode"):
        models[name] = load_model(models_dir / MODEL_FILES[name])
    plant = DragPlant(cfg.quad, cfg.drag)
    stride = int(cfg.doc["eval"]["stride"])

    pred = run.timed("prediction experiment", prediction_experiment, models, plant, cfg.prediction_specs,
                     cfg.duration, cfg.mpc, stride=stride, plant_dt=cfg.plant_dt)
    write_table(pred.rows, run.path("tables", "prediction.csv"))
    write_table(pred.extra_rows, run.path("tables", "prediction_one_step.csv"),
                columns=("spec", "model", "one_step_pos_rmse", "one_step_vel_rmse"))

    controllers = {"nominal": models["nominal"], "knode": models["knode"]}
    track = run.timed("tracking experiment", tracking_experiment, controllers, plant, cfg.tracking_specs,
                      cfg.duration, cfg.mpc, stride=stride, plant_dt=cfg.plant_dt)
    write_table(track.rows, run.path("tables", "tracking.csv"))
    solver = [{"spec": s, "model": m, **lg.to_dict()} for (s, m), lg in track.logs.items()]
    run.write_json(solver, "tables", "tracking_solver.json")

    for kind, res in (("prediction", pred), ("tracking", track)):
        for (spec, name), tr in res.trajectories.items():
            _write_positions(tr, run.path("trajectories", kind, f"{spec}__{name}.csv"))

    summary = {"prediction": _prediction_summary(pred.rows),
               "tracking": summarize(track.rows, "nominal", "knode")}
    run.write_json(summary, "tables", "summary.json")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    common.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. train.epochs=500 (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (network init and batching)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="knode-mpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="fly training/validation data")
    t = sub.add_parser("train", parents=[common], help="train or fit one model")
    t.add_argument("--model", choices=("knode", "gp", "nominal"), default="knode")
    t.add_argument("--data", type=Path, help="directory with trajectory CSVs (default OUT/data)")
    e = sub.add_parser("evaluate", parents=[common], help="prediction and tracking experiments")
    e.add_argument("--models", type=Path, help="directory with model JSON files (default OUT/models)")
    sub.add_parser("run-all", parents=[common], help="generate, train knode and gp, evaluate")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.set, seed=args.seed, out=args.out)
        r = _Run(cfg, args.command)
        if args.command == "generate":
            cmd_generate(cfg, r)
        elif args.command == "train":
            cmd_train(cfg, r, args.model, args.data or cfg.out / "data")
        elif args.command == "evaluate":
            cmd_evaluate(cfg, r, args.models or cfg.out / "models")
        else:
            cmd_generate(cfg, r)
            for model in ("nominal", "gp", "knode"):
                cmd_train(cfg, r, model, cfg.out / "data")
            cmd_evaluate(cfg, r, cfg.out / "models")
        r.finish()
    except (ConfigError, FileNotFoundError, OSError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (NumericalError, GimbalLockError, ArithmeticError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
