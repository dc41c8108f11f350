"""Command-line interface: ``ipmdiff {simulate,train,gradcheck,metrics,convert,scenarios}``.

Exit codes: 0 ok, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import autodiff as ad
from . import scenarios as lib
from . import simulator as sim
from . import skeleton_metrics as skm
from . import training as tr
from . import verification

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ipmdiff")


class NumericalFailure(RuntimeError):
    pass


# helpers ---------------------------------------------------------------------


def parse_override(text: str):
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ValueError(f"override {text!r} has an empty key")
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(config: dict, overrides) -> dict:
    """Set dotted keys (``pushes.0.force=[100,0,0]``) in a nested dict/list tree."""
    out = json.loads(json.dumps(config))
    for item in overrides or []:
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_json_atomic(path, obj):
    sim.write_csv_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_scenario(ref: str) -> sim.Scenario:
    """A bundled scenario name or a YAML file path."""
    if ref in lib.LIBRARY or ref in lib.ALIASES:
        return lib.get(ref)
    return sim.load_scenario(ref)


def load_model(weights, seed: int) -> sim.PhysicsModel:
    if weights:
        return sim.PhysicsModel.load(weights)
    return sim.PhysicsModel.build(seed)


# simulate --------------------------------------------------------------------


def _simulate_one(job):
    config, weights, seed, out_dir = job
    scn = sim.Scenario.from_dict(config)
    model = load_model(weights, seed)
    traj = sim.simulate(scn, model)
    csv_path = Path(out_dir) / f"{scn.name}.csv"
    sim.write_csv_atomic(csv_path, sim.trajectory_to_csv(traj))
    manifest = {
        "command": "simulate",
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "weights": str(weights) if weights else None,
        "weights_hash": model.weights_hash(),
        "output": csv_path.name,
        "rows": traj.n_frames * traj.n_agents,
        "propagation_profile": sim.propagation_profile(traj),
        "failed": traj.failed,
        "failure": None if not traj.failed else {
            "message": traj.failure, "agent": traj.failure_agent, "frame": traj.failure_frame},
    }
    write_json_atomic(Path(out_dir) / f"{scn.name}.manifest.json", manifest)
    return manifest


def run_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for ref in args.scenario:
        config = apply_overrides(resolve_scenario(ref).to_dict(), args.set)
        sim.Scenario.from_dict(config)  # validate before any work starts
        jobs.append((config, args.weights, args.seed, str(out)))
    names = [j[0]["name"] for j in jobs]
    if len(set(names)) != len(names):
        raise ValueError("scenario names must be unique within one run")
    workers = max(1, min(args.workers or os.cpu_count() or 1, len(jobs)))
    if workers == 1:
        manifests = [_simulate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            manifests = list(pool.map(_simulate_one, jobs))
    failed = False
    for m in manifests:
        if m["failed"]:
            f = m["failure"]
            print(f"{m['config']['name']}: FAILED at frame {f['frame']} (agent {f['agent']}): {f['message']}")
            failed = True
        else:
            print(f"{m['config']['name']}: {m['rows']} rows -> {out / m['output']}")
    return EXIT_NUMERICAL if failed else EXIT_OK


# train -----------------------------------------------------------------------


def _train_config(args) -> dict:
    base = tr.TrainConfig(seed=args.seed).to_dict()
    if args.config:
        base.update(yaml.safe_load(Path(args.config).read_text()) or {})
    return apply_overrides(base, args.set)


def run_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = _train_config(args)
    cfg_dict.setdefault("checkpoint_dir", None)
    cfg_dict["checkpoint_dir"] = cfg_dict["checkpoint_dir"] or str(out / "checkpoints")
    config = tr.TrainConfig(**{**cfg_dict, "freeze": tuple(cfg_dict.get("freeze") or ())})
    if args.data:
        dataset = tr.load_dataset(args.data)
    else:
        templates = tr.random_single_scenarios(args.synthetic, config.seed, horizon=args.horizon, sagittal=True)
        dataset = tr.synth_dataset(tr.oracle_model(args.oracle_mu, seed=config.seed), templates, config.seed)
        tr.write_dataset(dataset, out / "dataset")
    model = load_model(args.weights, config.seed)
    initial_hash = model.weights_hash()
    try:
        result = tr.train(dataset, model, config, log_path=out / "train_log.csv")
    except tr.TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.checkpoint}")
        return EXIT_NUMERICAL
    weights_path = out / "weights.ipmw"
    result.model.save(weights_path, {"train_config": config.to_dict()})
    manifest = {
        "command": "train",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "dataset": dataset.manifest,
        "initial_weights": str(args.weights) if args.weights else None,
        "initial_weights_hash": initial_hash,
        "weights_hash": result.model.weights_hash(),
        "steps": result.steps,
        "final_loss": result.losses[-1] if result.losses else None,
        "mu": result.model.mu,
        "skipped": [list(map(str, s)) for s in result.skipped],
    }
    write_json_atomic(out / "manifest.json", manifest)
    print(f"trained {result.steps} steps; mu = {result.model.mu:.6g}; weights -> {weights_path}")
    return EXIT_OK


# gradcheck -------------------------------------------------------------------


def run_gradcheck(args) -> int:
    report = verification.run_gradcheck(args.depth, seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        sim.write_csv_atomic(args.out, text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_NUMERICAL


# metrics ---------------------------------------------------------------------


def run_metrics(args) -> int:
    pred = skm.read_pose_csv(args.pred)
    gt = skm.read_pose_csv(args.gt)
    topo = skm.load_topology(args.topology)
    metrics = skm.evaluate_metrics(pred, gt, topo, H=args.H)
    report = {**metrics, "units": {"MPJPE": "m", "hipADE": "m", "hipFDE": "m", "MBLE": "m", "FSE": "cm"},
              "H": args.H}
    print(json.dumps(report, indent=2))
    return EXIT_OK


# convert ---------------------------------------------------------------------


def run_convert(args) -> int:
    if args.joint_map:
        poses = skm.convert_pose_file(args.src, args.joint_map, scale=args.scale)
    else:
        poses = skm.read_pose_csv(args.src)
    if args.out:
        sim.write_csv_atomic(args.out, skm.poses_to_csv(poses))
        print(f"{poses.shape[0]} frames x {poses.shape[1]} agents -> {args.out}")
    if args.ipm:
        q, l = skm.ipm_states(poses, args.yaw)
        qd = skm.ipm_velocity_estimate(poses, args.dt, args.yaw)
        zeros = np.zeros(q.shape)
        traj = sim.Trajectory(q=q, qd=qd, l=l, forces={k: zeros for k in sim.FORCE_TERMS}, dt=args.dt)
        sim.write_csv_atomic(args.ipm, sim.trajectory_to_csv(traj))
        print(f"pendulum states -> {args.ipm}")
    return EXIT_OK


# scenarios -------------------------------------------------------------------


def run_scenarios(args) -> int:
    if args.export:
        d = Path(args.export)
        d.mkdir(parents=True, exist_ok=True)
        for name in lib.LIBRARY:
            sim.write_csv_atomic(d / f"{name}.yaml", lib.get(name).to_yaml())
    for name, make in lib.LIBRARY.items():
        scn = make()
        doc = (make.__doc__ or "").strip().splitlines()
        print(f"{name:16s} agents={scn.n_agents:<3d} horizon={scn.horizon:<4d} {doc[0] if doc else ''}")
    return EXIT_OK


# entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipmdiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, may repeat")
        if out_default is not None:
            sp.add_argument("--out", default=out_default, help="output directory")

    s = sub.add_parser("simulate", help="roll out scenarios and write trajectory CSVs")
    s.add_argument("scenario", nargs="+", help="bundled scenario name or YAML file")
    s.add_argument("--weights", help="weight checkpoint (default: untrained PD+friction model)")
    s.add_argument("--workers", type=int, default=None, help="parallel scenarios (default: all cores)")
    common(s, "runs")
    s.set_defaults(func=run_simulate)

    t = sub.add_parser("train", help="fit parameters through the simulator")
    t.add_argument("--data", help="dataset manifest.yaml")
    t.add_argument("--synthetic", type=int, default=8, help="synthetic sequences when --data is absent")
    t.add_argument("--oracle-mu", type=float, default=2.0)
    t.add_argument("--horizon", type=int, default=30)
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--weights", help="initial weights")
    common(t, "train_run")
    t.set_defaults(func=run_train)

    g = sub.add_parser("gradcheck", help="compare autodiff gradients to finite differences")
    g.add_argument("--depth", default="all", choices=[*verification.DEPTHS, "all"])
    g.add_argument("--out", help="write the JSON report here")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=run_gradcheck)

    m = sub.add_parser("metrics", help="evaluate predicted against ground-truth pose CSVs")
    m.add_argument("pred")
    m.add_argument("gt")
    m.add_argument("--topology", help="skeleton topology YAML (default: bundled 22-joint tree)")
    m.add_argument("--H", type=float, default=skm.DEFAULT_FOOT_HEIGHT, help="foot height threshold in m")
    m.set_defaults(func=run_metrics)

    c = sub.add_parser("convert", help="convert external pose data; optionally map to pendulum states")
    c.add_argument("src")
    c.add_argument("--joint-map", help="YAML mapping source joint names to internal joints")
    c.add_argument("--scale", type=float, default=1.0, help="multiply coordinates (e.g. 0.001 for mm)")
    c.add_argument("--out", help="pose CSV output")
    c.add_argument("--ipm", help="pendulum trajectory CSV output")
    c.add_argument("--yaw", type=float, default=0.0)
    c.add_argument("--dt", type=float, default=sim.ic.DT)
    c.set_defaults(func=run_convert)

    sc = sub.add_parser("scenarios", help="list (and optionally export) the bundled scenarios")
    sc.add_argument("--export", help="write every bundled scenario as YAML into this directory")
    sc.set_defaults(func=run_scenarios)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ad.DomainError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (sim.ScenarioError, skm.PoseError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
