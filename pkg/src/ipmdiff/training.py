"""Fitting friction and the residual networks by backpropagating through rollouts."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from . import controllers as ctl
from . import nn
from . import simulator as sim
from .autodiff import Tape, Var, value_of

log = logging.getLogger(__name__)

GROUPS = {
    "mu": lambda n: n == ctl.MU_PARAM,
    "self_nn": lambda n: n.startswith("self_nn."),
    "rod": lambda n: n.startswith("rod."),
    "inta": lambda n: n.startswith("inta."),
}
STAGE_GROUPS = {1: ("mu", "self_nn", "rod"), 2: ("mu", "self_nn", "rod", "inta")}
LOG_HEADER = ["step", "loss", "grad_norm", "mu"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# losses ----------------------------------------------------------------------


def l_ipm_loss(pred_q, pred_qd, target_q, target_qd, lam: float = 1.0):
    """Per-frame L1 tracking loss averaged over the given frames (and agents).

    Tracks ``x, y, theta, phi, xdot, ydot, thetadot``; the roll rate enters
    only as ``lam * |phidot_pred|``, which penalises the prediction itself.
    Inputs have shape ``(T, ..., 4)``; predictions may be Vars or sequences of Vars.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(pred_q, (list, tuple)):
        pred_q, pred_qd = ad.stack(list(pred_q), axis=0), ad.stack(list(pred_qd), axis=0)
    pred_q, pred_qd = ad.lift(pred_q), ad.lift(pred_qd)
    tq, tqd = np.asarray(target_q, float), np.asarray(target_qd, float)
    if np.shape(value_of(pred_q)) != tq.shape or np.shape(value_of(pred_qd)) != tqd.shape:
        raise ValueError(f"length mismatch: prediction {np.shape(value_of(pred_q))} vs target {tq.shape}")
    if tq.shape[0] == 0:
        raise ValueError("loss needs at least one frame")
    pos = ad.vsum(ad.vabs(pred_q - tq), axis=-1)
    vel = ad.vsum(ad.vabs(pred_qd[..., 0:3] - tqd[..., 0:3]), axis=-1)
    smooth = lam * ad.vabs(pred_qd[..., 3])
    per = pos + vel + smooth
    return ad.vsum(per) * (1.0 / tq.shape[0] / (per.value.size // tq.shape[0]))


def trajectory_loss(pred: sim.Trajectory, target: sim.Trajectory, lam: float = 1.0):
    """:func:`l_ipm_loss` over frames ``1..T`` (frame 0 is the shared initial state)."""
    if pred.failed:
        raise ValueError(f"cannot score a failed rollout: {pred.failure}")
    if target.n_frames != pred.n_frames:
        raise ValueError(f"length mismatch: {pred.n_frames} vs {target.n_frames} frames")
    if pred.q_vars:
        pq, pqd = pred.q_vars[1:], pred.qd_vars[1:]
    else:
        pq, pqd = pred.q[1:], pred.qd[1:]
    return l_ipm_loss(pq, pqd, target.q[1:], target.qd[1:], lam)


def mse_pose_loss(pred, gt):
    """Mean squared error over every coordinate of aligned pose trajectories."""
    if np.shape(value_of(pred)) != np.shape(value_of(gt)):
        raise ValueError(f"shape mismatch: {np.shape(value_of(pred))} vs {np.shape(value_of(gt))}")
    d = ad.lift(pred) - gt
    return ad.mean(d * d)


# datasets --------------------------------------------------------------------


@dataclass
class IPMDataset:
    items: list = field(default_factory=list)  # (Scenario, Trajectory)
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def random_single_scenarios(n: int, seed: int, horizon: int = 60, force=(40.0, 250.0),
                            sagittal: bool = False) -> list[sim.Scenario]:
    """Lone agents pushed at the rod end with random magnitude, direction and duration.

    ``sagittal`` restricts pushes to the agent's forward/backward axis.
    """
    rng = nn.stream(seed, "scenarios")
    out = []
    for k in range(n):
        mag = rng.uniform(*force)
        ang = rng.uniform(-math.pi, math.pi)
        f = (mag * math.cos(ang), mag * math.sin(ang), 0.0)
        if sagittal:
            f = (math.copysign(mag, ang), 0.0, 0.0)  # exactly zero lateral component
        push = sim.PushEvent(0, int(rng.integers(0, 5)), int(rng.integers(6, 16)), f)
        agent = sim.AgentInit(l0=float(rng.uniform(0.85, 1.0)), mass=float(rng.uniform(55, 90)))
        out.append(sim.Scenario(agents=[agent], pushes=[push], horizon=horizon, mode="single", name=f"synth_{k}"))
    return out


def oracle_model(mu: float = 2.0, seed: int = 0, perturb: float = 0.0, **build_kw) -> sim.PhysicsModel:
    """Fixed generator model: friction ``mu``; with ``perturb > 0`` the net heads get small random weights."""
    m = sim.PhysicsModel.build(seed, mu0=mu, **build_kw)
    if perturb > 0:
        rng = nn.stream(seed, "oracle")
        for name in m.params:
            if ".head." in name or (name.startswith(("rod.", "inta.")) and _is_last_layer(m, name)):
                m.params[name] = rng.uniform(-perturb, perturb, size=m.params[name].shape)
    return m


def _is_last_layer(model, name):
    nets = [model.self_models.rod_net.mlp, model.inta_net.mlp]
    return any(name in (net.layers[-1].weight, net.layers[-1].bias) for net in nets)


def synth_dataset(oracle: sim.PhysicsModel, templates, seed: int = 0) -> IPMDataset:
    """Simulate every template with the oracle; failed rollouts are dropped and logged."""
    items, dropped = [], []
    for scn in templates:
        traj = sim.simulate(scn, oracle)
        if traj.failed:
            log.warning("dropping %s: %s", scn.name, traj.failure)
            dropped.append(scn.name)
            continue
        items.append((scn, traj))
    manifest = {
        "seed": int(seed),
        "oracle": {"mu": oracle.mu, "weights_hash": oracle.weights_hash()},
        "scenarios": [s.name for s, _ in items],
        "dropped": dropped,
    }
    return IPMDataset(items, manifest)


def write_dataset(ds: IPMDataset, directory) -> Path:
    """Scenario YAML and target CSV per item plus ``manifest.yaml``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (scn, traj) in enumerate(ds.items):
        sf, tf = f"scenario_{k:03d}.yaml", f"target_{k:03d}.csv"
        sim.write_csv_atomic(d / sf, scn.to_yaml())
        sim.write_csv_atomic(d / tf, sim.trajectory_to_csv(traj))
        entries.append({"scenario": sf, "target": tf})
    manifest = dict(ds.manifest, items=entries)
    path = d / "manifest.yaml"
    sim.write_csv_atomic(path, yaml.safe_dump(manifest, sort_keys=False))
    return path


def load_dataset(manifest_path) -> IPMDataset:
    path = Path(manifest_path)
    manifest = yaml.safe_load(path.read_text())
    items = []
    for e in manifest.get("items", []):
        scn = sim.load_scenario(path.parent / e["scenario"])
        traj = sim.read_trajectory_csv(path.parent / e["target"], dt=scn.dt)
        if traj.n_frames != scn.horizon + 1 or traj.n_agents != scn.n_agents:
            raise ValueError(f"{e['target']}: target not aligned with scenario horizon/agents")
        items.append((scn, traj))
    return IPMDataset(items, manifest)


# training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 1
    max_steps: int | None = None
    lam: float = 1.0
    clip_norm: float = 10.0
    accumulate: int = 4
    max_len: int | None = None
    seed: int = 0
    stage: int = 1
    freeze: tuple = ()
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.accumulate < 1 or self.epochs < 0:
            raise ValueError("accumulate must be >= 1 and epochs >= 0")
        if self.stage not in STAGE_GROUPS:
            raise ValueError(f"stage must be one of {sorted(STAGE_GROUPS)}")
        unknown = set(self.freeze) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        self.freeze = tuple(self.freeze)

    def trainable(self):
        active = [GROUPS[g] for g in STAGE_GROUPS[self.stage] if g not in self.freeze]
        return lambda name: any(pred(name) for pred in active)

    def to_dict(self):
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


@dataclass
class TrainResult:
    model: sim.PhysicsModel
    losses: list
    smoothed: list
    log: list
    steps: int
    skipped: list = field(default_factory=list)


def _truncate(scn: sim.Scenario, traj: sim.Trajectory, max_len):
    if max_len is None or scn.horizon <= max_len:
        return scn, traj
    k = max_len + 1
    t = replace(traj, q=traj.q[:k], qd=traj.qd[:k], l=traj.l[:k],
                forces={n: v[:k] for n, v in traj.forces.items()})
    return replace(scn, horizon=max_len), t


def _merge(batch):
    """Fuse single-mode scenarios of equal timing into one rollout of independent agents."""
    first = batch[0][0]
    agents, pushes = [], []
    for scn, _ in batch:
        offset = len(agents)
        agents += scn.agents
        pushes += [replace(p, agent=p.agent + offset) for p in scn.pushes]
    scn = replace(first, agents=agents, pushes=pushes, name="batch")
    q = np.concatenate([t.q for _, t in batch], axis=1)
    qd = np.concatenate([t.qd for _, t in batch], axis=1)
    return scn, sim.Trajectory(q=q, qd=qd, l=np.concatenate([t.l for _, t in batch], axis=1), forces={}, dt=first.dt)


def _groups(chunk):
    """Split a chunk into fusable groups; each group contributes its sequence count."""
    fusable, rest = {}, []
    for scn, traj in chunk:
        if scn.mode == "single":
            fusable.setdefault((scn.horizon, scn.dt, scn.substeps), []).append((scn, traj))
        else:
            rest.append([(scn, traj)])
    return list(fusable.values()) + rest


def sequence_loss_and_grad(model, scn, target, trainable, lam):
    """Loss and gradient for one (possibly fused) sequence on a fresh tape."""
    tape = Tape()
    traj = sim.simulate(scn, model, tape=tape, trainable=trainable, keep_vars=True)
    if traj.failed:
        return None, None, traj.failure
    loss = trajectory_loss(traj, target, lam)
    if loss.tape is None:
        return float(value_of(loss)), {}, None
    return float(value_of(loss)), tape.backward(loss), None


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def evaluate(model, dataset, lam: float = 1.0) -> float:
    """Mean trajectory loss over a dataset without recording a tape."""
    vals = []
    for scn, target in dataset:
        traj = sim.simulate(scn, model)
        vals.append(float(value_of(trajectory_loss(traj, target, lam))))
    return float(np.mean(vals)) if vals else float("nan")


def train(dataset: IPMDataset, model: sim.PhysicsModel, config: TrainConfig = TrainConfig(), log_path=None,
          callback=None) -> TrainResult:
    """Adam over full-sequence rollouts, ``config.accumulate`` sequences per step.

    Single-mode sequences with equal timing are fused into one rollout; their
    agents never interact so the averaged gradient is unchanged. A non-finite
    loss or gradient aborts after restoring the last good checkpoint.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = model.copy()
    trainable = config.trainable()
    opt = nn.Adam(lr=config.lr)
    items = [_truncate(s, t, config.max_len) for s, t in dataset]
    order_rng = nn.stream(config.seed, "shuffle")
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good = model.params.copy()
    last_ckpt = None
    losses, rows, skipped = [], [], []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(items))
        for start in range(0, len(order), config.accumulate):
            if config.max_steps is not None and step >= config.max_steps:
                break
            chunk = [items[i] for i in order[start : start + config.accumulate]]
            total, count, acc = 0.0, 0, {}
            for group in _groups(chunk):
                scn, target = _merge(group) if len(group) > 1 else group[0]
                try:
                    loss, grads, failure = sequence_loss_and_grad(model, scn, target, trainable, config.lam)
                except ad.DomainError as exc:
                    model.params = last_good.copy()
                    raise TrainingDiverged(f"step {step}: {exc}", last_ckpt) from exc
                if failure is not None:
                    log.warning("skipping %s: %s", scn.name, failure)
                    skipped.append((step, scn.name, failure))
                    continue
                w = len(group)
                total += loss * w
                count += w
                for k, g in grads.items():
                    acc[k] = acc.get(k, 0.0) + g * w
            if count == 0:
                continue
            mean_loss = total / count
            grads = {k: g / count for k, g in acc.items()}
            grads, norm = clip_grads(grads, config.clip_norm)
            if not (math.isfinite(mean_loss) and math.isfinite(norm)):
                model.params = last_good.copy()
                raise TrainingDiverged(f"non-finite loss or gradient at step {step}", last_ckpt)
            opt.step(model.params, grads)
            step += 1
            losses.append(mean_loss)
            rows.append((step, mean_loss, norm, model.mu))
            if callback is not None:
                callback(step, mean_loss, norm, model)
        last_good = model.params.copy()
        if ckpt_dir:
            last_ckpt = ckpt_dir / f"epoch_{epoch:04d}.ipmw"
            model.save(last_ckpt, {"epoch": epoch, "step": step, "train_config": config.to_dict()})
        if config.max_steps is not None and step >= config.max_steps:
            break
    if log_path is not None:
        write_log(log_path, rows)
    return TrainResult(model, losses, list(np.minimum.accumulate(losses)) if losses else [], rows, step, skipped)


def write_log(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for step, loss, norm, mu in rows:
        w.writerow([step, repr(float(loss)), repr(float(norm)), repr(float(mu))])
    sim.write_csv_atomic(path, buf.getvalue())
