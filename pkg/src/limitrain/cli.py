"""Command-line pipeline: data, imitators, controllers, LQR and evaluation.

Every command reads a YAML config (``--config``) and a seed (``--seed``);
all randomness flows from the seed and no output carries timestamps, so a
rerun with the same inputs rewrites identical files.

Exit status: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import yaml

from . import baseline, controller, dataset, evaluate, imitator
from .net import Mlp, NumericalError
from .plant import HydraulicDrive, LinearDifferenceModel, PlantError, SimulationError, plant_from_dict, simulate

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


DEFAULT_HYDRAULIC = {
    "plant": {"type": "hydraulic"},
    "imitator": {"scale": [0.3, 2.0e7, 50.0, 1.0]},
    "controller": {
        "feedback": "state",
        "hidden": [24, 8],
        "activations": ["leaky_relu", "leaky_relu", "identity"],
        "reg_index": 3,
        "output_scale": 0.05,
    },
    "rollout": {
        "horizon": 200,
        "batch": 16,
        "loss": "state",
        "x0_low": [-0.5, -0.5, -1.5, -1.5],
        "x0_high": [0.5, 0.5, 1.5, 1.5],
    },
    "training": {"iterations": 500, "lr": 3.0e-3, "lr_final": 1.0e-4, "clip_norm": 10.0},
    "lqr": {"scale": [0.3, 2.0e7, 50.0, 1.0]},
    "evaluate": {"x0": [0.0, 0.0, 50.0, 1.0], "reference": 0.0, "steps": 500, "band": 0.02},
}


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        raise UsageError("--config is required")
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a mapping")
    return cfg


def _section(cfg, name) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _plant(cfg):
    if "plant" not in cfg:
        raise UsageError("config needs a 'plant' section")
    return plant_from_dict(_section(cfg, "plant"))


def _out_dir(cfg, args) -> str:
    out = args.out or cfg.get("output_dir") or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _sidecar(path) -> str:
    root, _ = os.path.splitext(path)
    return root + ".meta.json"


def _history_csv(path, history) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{float(v)!r}\n")


def _scale(value, plant):
    if value is None:
        return None
    s = np.asarray(value, dtype=float)
    if s.shape != (plant.state_dim,) or np.any(s <= 0):
        raise UsageError(f"scale must list {plant.state_dim} positive numbers")
    return s


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, args) -> int:
    plant = _plant(cfg)
    sim = _section(cfg, "simulate")
    sig = dict(sim.get("signal") or {"kind": "sine", "amplitude": 1.0, "frequency": 1.0, "duration": 1.0})
    sig.setdefault("dt", float(getattr(plant, "dt", 1.0)))
    u = dataset.SignalSpec(**sig).sample()
    x0 = sim.get("x0")
    traj = simulate(plant, u, x0=x0)
    path = os.path.join(_out_dir(cfg, args), "trajectory.csv")
    traj.to_csv(path)
    print(f"wrote {path} ({len(traj)} rows)")
    return 0


def _gen_dataset(cfg, plant, seed):
    data = _section(cfg, "data")
    mode = data.get("feedback_mode", "state_vector")
    grid = dataset.default_grid(
        plant,
        kinds=tuple(data.get("kinds", ("sine", "meander"))),
        periods=float(data.get("periods", 1.0)),
        min_duration=float(data.get("min_duration", 0.0)),
    )
    ds = dataset.record_and_extract(plant, grid, mode, seed)
    ds = dataset.balance(ds, float(data.get("balance_tolerance", 0.1)), seed)
    train, test = dataset.split(ds, float(data.get("split_ratio", 0.9)), seed)
    return ds, train, test


def cmd_gen_data(cfg, args) -> int:
    plant = _plant(cfg)
    ds, train, test = _gen_dataset(cfg, plant, args.seed)
    out = _out_dir(cfg, args)
    ds.to_csv(os.path.join(out, "dataset.csv"))
    train.to_csv(os.path.join(out, "train.csv"))
    test.to_csv(os.path.join(out, "test.csv"))
    print(f"wrote {len(ds)} pairs ({ds.category_counts()}) to {out}: train {len(train)}, test {len(test)}")
    return 0


def _imitator_hyper(cfg, seed) -> imitator.ImitatorHyper:
    sec = _section(cfg, "imitator")
    keys = {k: sec[k] for k in ("epochs", "batch_size", "lr", "lr_final", "loss_target", "restarts", "normalize") if k in sec}
    return imitator.ImitatorHyper(seed=seed, **keys)


def _save_imitator(out, net, spec, plant, **extra) -> str:
    path = os.path.join(out, "imitator.json")
    net.save(path)
    imitator.write_sidecar(_sidecar(path), spec, plant, plant_config=plant.to_dict(), **extra)
    return path


def _train_and_save(cfg, args, plant, train, test) -> int:
    mode = _section(cfg, "data").get("feedback_mode", "state_vector")
    spec = imitator.ImitatorSpec.for_plant(plant, mode)
    hyper = _imitator_hyper(cfg, args.seed)
    net, report = imitator.train_imitator(spec, train, test, hyper)
    out = _out_dir(cfg, args)
    path = _save_imitator(out, net, spec, plant, train_mse=report.train_mse, test_mse=report.test_mse, scale=None)
    _history_csv(os.path.join(out, "imitator_history.csv"), report.history)
    print(f"wrote {path}: train MSE {report.train_mse:.3e}, held-out MSE {report.test_mse:.3e} (normalized)")
    return 0


def cmd_build_imitator(cfg, args) -> int:
    plant = _plant(cfg)
    if args.train:
        _, train, test = _gen_dataset(cfg, plant, args.seed)
        return _train_and_save(cfg, args, plant, train, test)
    out = _out_dir(cfg, args)
    if isinstance(plant, LinearDifferenceModel):
        net = imitator.linear_imitator(plant)
        n = controller.model_order(plant)
        spec = imitator.ImitatorSpec(0, n, "delayed_output")
        path = _save_imitator(out, net, spec, plant, exact=True, scale=None)
    else:
        scale = _scale(_section(cfg, "imitator").get("scale"), plant)
        net = imitator.construct_exact(plant, scale=scale)
        spec = imitator.ImitatorSpec.for_plant(plant)
        path = _save_imitator(out, net, spec, plant, exact=True, scale=None if scale is None else scale.tolist())
    print(f"wrote {path}: exact imitator, dims {net.dims}")
    return 0


def cmd_train_imitator(cfg, args) -> int:
    plant = _plant(cfg)
    data = _section(cfg, "data")
    out = _out_dir(cfg, args)
    train_path = data.get("train", os.path.join(out, "train.csv"))
    test_path = data.get("test", os.path.join(out, "test.csv"))
    for p in (train_path, test_path):
        if not os.path.exists(p):
            raise UsageError(f"dataset file not found: {p} (run gen-data first)")
    train = dataset.Dataset.from_csv(train_path)
    test = dataset.Dataset.from_csv(test_path)
    return _train_and_save(cfg, args, plant, train, test)


def _load_imitator(path):
    if not os.path.exists(path):
        raise UsageError(f"imitator not found: {path}")
    net = Mlp.load(path)
    meta = _read_json(_sidecar(path)) if os.path.exists(_sidecar(path)) else {}
    return net, meta


def _controller_spec(cfg, plant) -> tuple[controller.ControllerSpec, float]:
    sec = _section(cfg, "controller")
    output_scale = float(sec.pop("output_scale", 1.0))
    sec.pop("path", None)
    sec.pop("imitator", None)
    if isinstance(plant, LinearDifferenceModel):
        sec.setdefault("feedback", "delayed")
        n = controller.model_order(plant)
    else:
        n = plant.state_dim
        sec.setdefault("reg_index", getattr(plant, "output_index", 0))
    return controller.ControllerSpec(n=n, **sec), output_scale


def _check_dt(plant, meta) -> None:
    if "dt" in meta and float(meta["dt"]) != float(getattr(plant, "dt", 1.0)):
        raise UsageError(f"artifact dt {meta['dt']} does not match plant dt {plant.dt}")


def train_controller_artifacts(cfg, plant, seed, out) -> str:
    spec, output_scale = _controller_spec(cfg, plant)
    imit_path = _section(cfg, "controller").get("imitator", os.path.join(out, "imitator.json"))
    imit, meta = _load_imitator(imit_path)
    _check_dt(plant, meta)
    rollout = controller.RolloutConfig(**_section(cfg, "rollout"))
    hyper = controller.ControllerHyper(seed=seed, **_section(cfg, "training"))
    net = controller.build_controller_structure(spec, seed, output_scale)
    history = controller.train_controller(net, imit.copy(frozen=True), spec, rollout, hyper)
    scale = meta.get("scale")
    if scale is not None:
        net = imitator.fold_scaling(net, scale, [1.0])
    path = os.path.join(out, "controller.json")
    net.save(path)
    controller.write_sidecar(
        _sidecar(path),
        spec,
        rollout,
        hyper=asdict(hyper),
        imitator=os.path.basename(imit_path),
        imitator_scale=scale,
        dt=float(getattr(plant, "dt", 1.0)),
        final_loss=history[-1],
    )
    _history_csv(os.path.join(out, "controller_history.csv"), history)
    return path


def cmd_train_controller(cfg, args) -> int:
    plant = _plant(cfg)
    out = _out_dir(cfg, args)
    path = train_controller_artifacts(cfg, plant, args.seed, out)
    print(f"wrote {path}")
    return 0


def lqr_artifacts(cfg, plant, out):
    if not isinstance(plant, HydraulicDrive):
        raise UsageError("lqr needs a hydraulic plant")
    sec = _section(cfg, "lqr")
    sys_ = baseline.linearize_hydraulic(plant.params, plant.candidate_mode)
    scale = _scale(sec.get("scale"), plant)
    work = sys_ if scale is None else baseline.scaled(sys_, scale)
    Q = np.diag(sec["Q"]) if "Q" in sec else None
    R = np.atleast_2d(sec["R"]) if "R" in sec else None
    sol = baseline.solve_lqr(work, Q, R, tol=float(sec.get("tol", 1e-12)))
    if scale is not None:
        # back to physical units: u = -K_z (x / s) = -(K_z / s) x
        sol = baseline.LqrSolution(sol.P, sol.K / scale[None, :], sol.residual, sol.iterations)
    gain = os.path.join(out, "lqr_gain.csv")
    baseline.export_gain(sol, gain, os.path.join(out, "lqr.json"))
    return gain, sol


def cmd_lqr(cfg, args) -> int:
    plant = _plant(cfg)
    gain, sol = lqr_artifacts(cfg, plant, _out_dir(cfg, args))
    print(f"wrote {gain}: K = {sol.K.ravel().tolist()}, residual {sol.residual:.2e}")
    return 0


def _policy(kind, path, plant):
    if kind == "lqr":
        if not os.path.exists(path):
            raise UsageError(f"gain file not found: {path}")
        return baseline.LqrController(baseline.load_gain(path), plant.output_index)
    if not os.path.exists(path) or not os.path.exists(_sidecar(path)):
        raise UsageError(f"controller or its sidecar not found: {path}")
    spec, _, meta = controller.read_sidecar(_sidecar(path))
    _check_dt(plant, meta)
    return evaluate.nn_policy(Mlp.load(path), spec)


def _loop_dim(plant) -> int:
    # difference models run on the delayed register of the controller layout
    if isinstance(plant, LinearDifferenceModel):
        return 2 * controller.model_order(plant) - 1
    return plant.state_dim


def _scenario(cfg, plant):
    sec = _section(cfg, "evaluate")
    x0 = sec.get("x0")
    dim = _loop_dim(plant)
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (dim,):
        raise UsageError(f"evaluate.x0 must have {dim} entries")
    return x0, float(sec.get("reference", 0.0)), int(sec.get("steps", 500)), float(sec.get("band", 0.02))


def _deviation_signal(plant, cfg) -> np.ndarray:
    sig = _section(cfg, "evaluate").get("signal")
    dt = float(getattr(plant, "dt", 1.0))
    if sig is not None:
        sig = dict(sig)
        sig.setdefault("dt", dt)
        return dataset.SignalSpec(**sig).sample()
    if isinstance(plant, LinearDifferenceModel):
        return dataset.SignalSpec("sine", 1.0, 1.0 / (50.0 * dt), 1000.0 * dt, dt).sample()
    # strongest meander of the default grid, repeated to 1000 samples
    spec = max(dataset.default_grid(plant), key=lambda s: (s.kind == "meander", s.amplitude))
    u = spec.sample()
    return np.tile(u, int(np.ceil(1000 / len(u))))[:1000]


def _imitator_deviation(net, meta, plant, cfg) -> dict:
    u = _deviation_signal(plant, cfg)
    if meta.get("feedback_mode") == "delayed_output":
        n = controller.model_order(plant)
        reg = np.zeros(2 * n - 1)
        worst = 0.0
        for uk in u:
            imit_in = np.concatenate(([uk], reg[n:], reg[:n]))
            y_hat = float(net(imit_in)[0])
            reg = controller.step_register(plant, reg, uk)
            worst = max(worst, abs(y_hat - reg[0]))
        return {"max_deviation": worst}
    scale = meta.get("scale")
    out = {"max_deviation": evaluate.max_deviation(net, plant, u, scale=scale)}
    if scale is not None:
        out["max_deviation_scaled"] = evaluate.max_deviation(net, plant, u, scale=scale, scaled=True)
    return out


def cmd_evaluate(cfg, args) -> int:
    plant = _plant(cfg)
    out = _out_dir(cfg, args)
    sec = _section(cfg, "evaluate")
    path = args.artifact or sec.get("artifact") or os.path.join(out, "controller.json")
    kind = "lqr" if path.endswith(".csv") else None
    if kind is None:
        if not os.path.exists(path):
            raise UsageError(f"artifact not found: {path}")
        meta = _read_json(_sidecar(path)) if os.path.exists(_sidecar(path)) else {}
        kind = meta.get("kind", "controller")
    if kind == "imitator":
        net, meta = _load_imitator(path)
        _check_dt(plant, meta)
        dev = _imitator_deviation(net, meta, plant, cfg)
        _write_json(os.path.join(out, "imitator_deviation.json"), {"artifact": os.path.basename(path), **dev})
        for key, value in dev.items():
            print(f"{key} = {value:.3e}")
        return 0
    policy = _policy(kind, path, plant)
    x0, ref, steps, band = _scenario(cfg, plant)
    try:
        _, metrics = evaluate.run_closed_loop(plant, policy, x0, steps, ref, band, os.path.join(out, "closed_loop.csv"))
    except evaluate.ClosedLoopError as exc:
        exc.trajectory.to_csv(os.path.join(out, "closed_loop.csv"))
        raise
    _write_json(os.path.join(out, "metrics.json"), metrics.to_dict())
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def compare_artifacts(cfg, plant, out, a=None, b=None):
    sec = _section(cfg, "compare")
    a = a or sec.get("a") or {"kind": "controller", "path": os.path.join(out, "controller.json"), "label": "nn"}
    b = b or sec.get("b") or {"kind": "lqr", "path": os.path.join(out, "lqr_gain.csv"), "label": "lqr"}
    x0, ref, steps, band = _scenario(cfg, plant)
    runs = []
    for side in (a, b):
        policy = _policy(side.get("kind", "controller"), side["path"], plant)
        csv = os.path.join(out, f"closed_loop_{side['label']}.csv")
        runs.append(evaluate.safe_run(plant, policy, x0, steps, ref, band, csv))
    rows = evaluate.compare(runs[0], runs[1], (a["label"], b["label"]))
    evaluate.write_table(rows, os.path.join(out, "comparison.csv"))
    return rows, runs


def cmd_compare(cfg, args) -> int:
    plant = _plant(cfg)
    rows, _ = compare_artifacts(cfg, plant, _out_dir(cfg, args))
    print(evaluate.format_table(rows))
    return 0


def cmd_demo_hydraulic(cfg, args) -> int:
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_HYDRAULIC.items()}
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    cfg = merged
    plant = _plant(cfg)
    if not isinstance(plant, HydraulicDrive):
        raise UsageError("demo-hydraulic needs a hydraulic plant")
    out = _out_dir(cfg, args)
    scale = _scale(cfg["imitator"].get("scale"), plant)
    net = imitator.construct_exact(plant, scale=scale)
    _save_imitator(out, net, imitator.ImitatorSpec.for_plant(plant), plant, exact=True, scale=scale.tolist())
    train_controller_artifacts(cfg, plant, args.seed, out)
    lqr_artifacts(cfg, plant, out)
    rows, _ = compare_artifacts(cfg, plant, out)
    print(evaluate.format_table(rows))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "build-imitator": cmd_build_imitator,
    "train-imitator": cmd_train_imitator,
    "train-controller": cmd_train_controller,
    "lqr": cmd_lqr,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "demo-hydraulic": cmd_demo_hydraulic,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="limitrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "demo-hydraulic", help="YAML config file")
        p.add_argument("--seed", type=_seed, default=0, help="unsigned 64-bit seed")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        if name == "build-imitator":
            group = p.add_mutually_exclusive_group(required=True)
            group.add_argument("--exact", action="store_true", help="analytic ReLU construction")
            group.add_argument("--train", action="store_true", help="generate data and train")
        if name == "evaluate":
            p.add_argument("--artifact", default=None, help="imitator, controller or LQR gain file")
    return parser


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config is None and args.command == "demo-hydraulic":
            cfg = {}
        else:
            cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (NumericalError, baseline.LqrError, SimulationError, evaluate.ClosedLoopError, FloatingPointError) as exc:
        print(f"limitrain: numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (UsageError, PlantError, dataset.DatasetError, ValueError, TypeError, KeyError) as exc:
        parser.print_usage(sys.stderr)
        print(f"limitrain: error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
