"""Multi-agent rollouts with snapshot semantics.

Each frame: every agent's generalized forces are computed from the same frozen
world state, then the rod lengths are updated and all agents are integrated.
Forces are expressed in each agent's local frame (world frame rotated by the
agent's yaw); cart positions and velocities are stored in the world frame.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from . import controllers as ctl
from . import interaction as inta
from . import ipm_core as ic
from . import nn
from .autodiff import Tape, Var, value_of

FORCE_TERMS = ("net", "pd", "nn", "fric", "inta", "input")
CSV_FORCE_PREFIX = {"net": "fnet", "pd": "fpd", "nn": "fnn", "fric": "ffric", "inta": "finta", "input": "finput"}


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


# scenario --------------------------------------------------------------------


@dataclass
class PushEvent:
    agent: int
    start_frame: int
    duration: int
    force: tuple
    apply_at: str = "rod-end"

    def active(self, frame: int) -> bool:
        return self.start_frame <= frame < self.start_frame + self.duration


@dataclass
class AgentInit:
    state: tuple = (0.0, 0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0, 0.0)
    l0: float = 0.9
    mass: float = ic.DEFAULT_MASS
    yaw: float = 0.0


@dataclass
class Scenario:
    agents: list
    pushes: list = field(default_factory=list)
    horizon: int = 60
    dt: float = ic.DT
    mode: str = "single"
    name: str = "scenario"
    substeps: int = 1

    def validate(self):
        if not self.agents:
            raise ScenarioError("at least one agent required", "agents")
        if self.horizon < 0:
            raise ScenarioError("horizon must be non-negative", "horizon")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive", "dt")
        if self.mode not in ("single", "multi"):
            raise ScenarioError(f"unknown mode {self.mode!r}", "mode")
        if int(self.substeps) < 1:
            raise ScenarioError("substeps must be >= 1", "substeps")
        for i, a in enumerate(self.agents):
            f = f"agents[{i}]"
            if len(a.state) != 4 or len(a.velocity) != 4:
                raise ScenarioError("state and velocity need 4 components", f)
            if not all(math.isfinite(v) for v in (*a.state, *a.velocity, a.l0, a.mass, a.yaw)):
                raise ScenarioError("non-finite value", f)
            if a.mass <= 0:
                raise ScenarioError("mass must be positive", f + ".mass")
            if not ic.L_MIN <= a.l0 <= ic.L_MAX:
                raise ScenarioError(f"l0 outside [{ic.L_MIN}, {ic.L_MAX}]", f + ".l0")
            if max(abs(a.state[2]), abs(a.state[3])) >= ic.ANGLE_LIMIT:
                raise ScenarioError("initial angle beyond singularity guard", f + ".state")
        for k, p in enumerate(self.pushes):
            f = f"pushes[{k}]"
            if not 0 <= p.agent < len(self.agents):
                raise ScenarioError(f"unknown agent id {p.agent}", f + ".agent")
            if p.duration < 1:
                raise ScenarioError("duration must be >= 1", f + ".duration")
            if p.start_frame < 0:
                raise ScenarioError("start_frame must be >= 0", f + ".start_frame")
            if len(p.force) != 3 or not all(math.isfinite(v) for v in p.force):
                raise ScenarioError("force must be 3 finite numbers", f + ".force")
            if p.apply_at not in ("rod-end", "cart"):
                raise ScenarioError(f"unknown application point {p.apply_at!r}", f + ".apply_at")
        return self

    @property
    def n_agents(self):
        return len(self.agents)

    def to_dict(self):
        d = asdict(self)
        for a in d["agents"]:
            a["state"], a["velocity"] = list(a["state"]), list(a["velocity"])
        for p in d["pushes"]:
            p["force"] = list(p["force"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario must be a mapping")
        known = {"agents", "pushes", "horizon", "dt", "mode", "name", "substeps"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown keys {sorted(extra)}")
        try:
            agents = [AgentInit(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in a.items()})
                      for a in d.get("agents", [])]
            pushes = [PushEvent(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items()})
                      for p in d.get("pushes", []) or []]
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc
        kw = {k: d[k] for k in ("horizon", "dt", "mode", "name", "substeps") if k in d}
        return cls(agents=agents, pushes=pushes, **kw).validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ScenarioError(f"cannot parse {path}{where}: {exc}") from exc
    return Scenario.from_dict(data)


def mirror_scenario(scn: Scenario) -> Scenario:
    """Reflect through the x-z plane: negate y, phi, their rates, yaw and push y."""

    def flip4(v):
        return (v[0], -v[1], v[2], -v[3])

    agents = [replace(a, state=flip4(a.state), velocity=flip4(a.velocity), yaw=-a.yaw) for a in scn.agents]
    pushes = [replace(p, force=(p.force[0], -p.force[1], p.force[2])) for p in scn.pushes]
    return replace(scn, agents=agents, pushes=pushes, name=scn.name + "_mirror")


def permute_scenario(scn: Scenario, perm) -> Scenario:
    """Agent ``k`` of the result is agent ``perm[k]`` of ``scn``."""
    perm = list(perm)
    inv = {old: new for new, old in enumerate(perm)}
    agents = [scn.agents[i] for i in perm]
    pushes = [replace(p, agent=inv[p.agent]) for p in scn.pushes]
    return replace(scn, agents=agents, pushes=pushes)


# models ----------------------------------------------------------------------


@dataclass
class PhysicsModel:
    """All learnable and fixed pieces of the differentiable pendulum."""

    params: nn.ParamStore
    self_models: ctl.SelfModels
    inta_net: inta.InteractionNet | None
    inta_params: inta.InteractionParams = field(default_factory=inta.InteractionParams)
    g: float = ic.GRAVITY
    seed: int = 0

    @classmethod
    def build(cls, seed: int = 0, mu0: float = 1.0, lstm_hidden=ctl.SELF_NN_HIDDEN, rod_hidden=ctl.ROD_HIDDEN,
              inta_hidden=inta.INTERACTION_HIDDEN, inta_params=None, g=ic.GRAVITY) -> "PhysicsModel":
        store = nn.ParamStore()
        selfm = ctl.build_self_models(store, seed, mu0=mu0, lstm_hidden=lstm_hidden, rod_hidden=rod_hidden)
        net = inta.build_interaction_net(store, seed, hidden=inta_hidden)
        return cls(store, selfm, net, inta_params or inta.InteractionParams(), g, seed)

    @property
    def architecture(self) -> dict:
        cell = self.self_models.self_net.cell
        rod = self.self_models.rod_net.mlp.layers
        ia = self.inta_net.mlp.layers
        return {
            "lstm_hidden": cell.hidden,
            "rod_hidden": [int(self.params[l.weight].shape[0]) for l in rod[:-1]],
            "inta_hidden": [int(self.params[l.weight].shape[0]) for l in ia[:-1]],
        }

    @classmethod
    def from_params(cls, params: nn.ParamStore, meta: dict | None = None) -> "PhysicsModel":
        meta = meta or {}
        arch = meta.get("architecture", {})
        m = cls.build(
            seed=meta.get("seed", 0),
            lstm_hidden=arch.get("lstm_hidden", ctl.SELF_NN_HIDDEN),
            rod_hidden=tuple(arch.get("rod_hidden", ctl.ROD_HIDDEN)),
            inta_hidden=tuple(arch.get("inta_hidden", inta.INTERACTION_HIDDEN)),
        )
        for k in m.params:
            if k not in params:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if params[k].shape != m.params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {params[k].shape} vs {m.params[k].shape}")
            m.params[k] = params[k].copy()
        return m

    @property
    def mu(self) -> float:
        return float(np.logaddexp(0.0, self.params[ctl.MU_PARAM]))

    def set_mu(self, mu: float):
        self.params[ctl.MU_PARAM] = np.array(ctl.softplus_inverse(mu))

    def copy(self) -> "PhysicsModel":
        return replace(self, params=self.params.copy())

    def save(self, path, extra: dict | None = None):
        meta = {"seed": self.seed, "architecture": self.architecture}
        meta.update(extra or {})
        nn.save_weights(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "PhysicsModel":
        params, meta = nn.load_weights(path)
        return cls.from_params(params, meta)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


# rollout ---------------------------------------------------------------------


@dataclass
class Snapshot:
    q: Var
    qd: Var
    l: Var
    prev_acc: Var
    lstm: tuple


@dataclass
class Trajectory:
    """Frame-major arrays: ``q[t, n]`` etc.; ``forces[term][t, n]`` in agent-local frames."""

    q: np.ndarray
    qd: np.ndarray
    l: np.ndarray
    forces: dict
    dt: float
    failed: bool = False
    failure: str | None = None
    failure_agent: int | None = None
    failure_frame: int | None = None
    q_vars: list = field(default_factory=list, repr=False)
    qd_vars: list = field(default_factory=list, repr=False)

    @property
    def n_frames(self):
        return self.q.shape[0]

    @property
    def n_agents(self):
        return self.q.shape[1]


def input_forces(scn: Scenario, frame: int, q, l) -> Var:
    """Generalized push forces on every agent at ``frame`` (local frames)."""
    n = scn.n_agents
    active = [p for p in scn.pushes if p.active(frame)]
    if not active:
        return Var(np.zeros((n, 4)))
    total = Var(np.zeros((n, 4)))
    q, l = ad.lift(q), ad.lift(l)
    for p in active:
        onehot = np.zeros((n, 1))
        onehot[p.agent] = 1.0
        Q = ic.cartesian_to_generalized(q[p.agent], l[p.agent], np.asarray(p.force, float), p.apply_at)
        total = total + onehot * ad.reshape(Q, (1, 4))
    return total


def net_force(scn: Scenario, model: PhysicsModel, snap: Snapshot, frame: int, bound, mass, cos_y, sin_y,
              diagnostics=None):
    """All force terms for every agent from one snapshot. Returns ``(terms, new_lstm_state)``."""
    q, qd = snap.q, snap.qd
    qd_loc = inta.rotate_xy(qd, cos_y, sin_y, inverse=True)
    sm = model.self_models
    f_pd = ctl.pd_force(ctl.pd_state(q, qd_loc), ctl.pd_state_rate(qd_loc, snap.prev_acc), sm.gains)
    f_nn, lstm = ctl.self_nn_force(sm.self_net, bound, ctl.self_nn_features(q, qd_loc, mass), snap.lstm)
    f_fric = ctl.friction_force(qd_loc, sm.friction.mu(bound))
    f_in = input_forces(scn, frame, q, snap.l)
    terms = {"pd": f_pd, "nn": f_nn, "fric": f_fric, "input": f_in}
    if scn.mode == "multi":
        yaw = np.arctan2(sin_y, cos_y)
        f_inta = inta.interaction_forces(q, qd, yaw, model.inta_net, bound, model.inta_params, scn.dt, diagnostics)
        terms["inta"] = f_inta
        terms["net"] = f_pd + f_nn + f_inta + f_fric + f_in
    else:
        terms["inta"] = Var(np.zeros(np.shape(value_of(q))))
        terms["net"] = f_pd + f_nn + f_fric + f_in
    return terms, lstm


def simulate(scn: Scenario, model: PhysicsModel, tape: Tape | None = None, trainable=None, bound=None,
             keep_vars: bool = False, diagnostics=None) -> Trajectory:
    """Roll the scenario forward ``horizon`` frames.

    A singular configuration does not raise: the returned trajectory is cut at
    the last good frame and flagged ``failed``.
    """
    scn.validate()
    if bound is None:
        bound = model.params.bind(tape, trainable)
    n = scn.n_agents
    mass = np.array([a.mass for a in scn.agents], float)
    yaw = np.array([a.yaw for a in scn.agents], float)
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    body = ic.BodyParams(mass, model.g)
    snap = Snapshot(
        q=Var(np.array([a.state for a in scn.agents], float)),
        qd=Var(np.array([a.velocity for a in scn.agents], float)),
        l=Var(np.array([a.l0 for a in scn.agents], float)),
        prev_acc=Var(np.zeros((n, 4))),
        lstm=model.self_models.self_net.initial_state(n),
    )
    qs, qds, ls = [], [], []
    forces = {k: [] for k in FORCE_TERMS}
    q_vars, qd_vars = [], []
    failure = None
    sub_dt = scn.dt / int(scn.substeps)
    for t in range(scn.horizon + 1):
        qs.append(np.array(value_of(snap.q)))
        qds.append(np.array(value_of(snap.qd)))
        ls.append(np.array(value_of(snap.l)))
        if keep_vars:
            q_vars.append(snap.q)
            qd_vars.append(snap.qd)
        try:
            for k in range(int(scn.substeps)):
                terms, lstm = net_force(scn, model, snap, t, bound, mass, cos_y, sin_y, diagnostics)
                if k == 0:
                    for name in FORCE_TERMS:
                        forces[name].append(np.array(value_of(terms[name])))
                if t == scn.horizon:
                    break
                f_self = terms["pd"] + terms["nn"]
                feats = ctl.rod_features(snap.q, inta.rotate_xy(snap.qd, cos_y, sin_y, inverse=True), f_self,
                                         mass, snap.l)
                l_next = ctl.rod_length_update(model.self_models.rod_net, bound, feats, snap.l)
                acc_loc = ic.forward_accel(snap.q, snap.qd, snap.l, body, terms["net"])
                acc = inta.rotate_xy(acc_loc, cos_y, sin_y)
                q_new, qd_new = ic.semi_implicit_step(snap.q, snap.qd, acc, sub_dt, step=t + 1)
                snap = Snapshot(q_new, qd_new, l_next, acc_loc, lstm)
        except (ic.SingularityError, inta.AgentOverlapError) as exc:
            agent = getattr(exc, "agent", None)
            failure = (str(exc), agent, t + 1)
            if len(forces["net"]) < len(qs):
                for name in FORCE_TERMS:
                    forces[name].append(np.full((n, 4), np.nan))
            break
    traj = Trajectory(
        q=np.array(qs),
        qd=np.array(qds),
        l=np.array(ls),
        forces={k: np.array(v) for k, v in forces.items()},
        dt=scn.dt,
        q_vars=q_vars,
        qd_vars=qd_vars,
    )
    if failure is not None:
        traj.failed = True
        traj.failure, traj.failure_agent, traj.failure_frame = failure
    return traj


def propagation_profile(traj: Trajectory) -> list[int]:
    """Frame of peak |xdot| for each agent."""
    return [int(i) for i in np.argmax(np.abs(traj.qd[:, :, 0]), axis=0)]


# csv export ------------------------------------------------------------------


def csv_header() -> list[str]:
    cols = ["frame", "agent", "x", "y", "theta", "phi", "xdot", "ydot", "thetadot", "phidot", "l"]
    for term in FORCE_TERMS:
        cols += [f"{CSV_FORCE_PREFIX[term]}_{k}" for k in range(4)]
    return cols


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_to_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header())
    for t in range(traj.n_frames):
        for n in range(traj.n_agents):
            row = [t, n, *map(_fmt, traj.q[t, n]), *map(_fmt, traj.qd[t, n]), _fmt(traj.l[t, n])]
            for term in FORCE_TERMS:
                row += [_fmt(v) for v in traj.forces[term][t, n]]
            w.writerow(row)
    return buf.getvalue()


def write_csv_atomic(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_trajectory_csv(path, dt: float = ic.DT) -> Trajectory:
    """Inverse of :func:`trajectory_to_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != csv_header():
            raise ValueError(f"{path}: unexpected trajectory header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([int(row[0]), int(row[1]), *map(float, row[2:])])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: malformed row {lineno}: {exc}") from exc
    frames = max(r[0] for r in rows) + 1
    agents = max(r[1] for r in rows) + 1
    data = np.full((frames, agents, len(header) - 2), np.nan)
    for r in rows:
        data[r[0], r[1]] = r[2:]
    forces = {term: data[:, :, 9 + 4 * k : 13 + 4 * k] for k, term in enumerate(FORCE_TERMS)}
    return Trajectory(q=data[:, :, 0:4], qd=data[:, :, 4:8], l=data[:, :, 8], forces=forces, dt=dt)
