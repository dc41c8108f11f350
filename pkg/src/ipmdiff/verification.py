"""Gradient-fidelity suites: tape gradients against central finite differences.

Three depths, each with its own tolerance on ``|g_ad - g_fd| / max(1, |g_fd|)``:

* ``primitives``: every differentiable tape operation, 1e-6
* ``modules``: force laws and the equation-of-motion solve, 1e-5
* ``end-to-end``: tracking loss of a 2-agent, 30-frame rollout, 1e-4
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import controllers as ctl
from . import interaction as inta
from . import ipm_core as ic
from . import nn
from . import simulator as sim
from . import training as tr
from .autodiff import Var

THRESHOLDS = {"primitives": 1e-6, "modules": 1e-5, "end-to-end": 1e-4}
DEPTHS = tuple(THRESHOLDS)


def _contract(out, w):
    """Scalar ``sum(w * out)`` so every output component is exercised."""
    return ad.vsum(out * w)


def _weights(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _elementwise(rng):
    x = rng.uniform(0.3, 1.2, size=5) * rng.choice([-1.0, 1.0], size=5)
    pos = rng.uniform(0.3, 2.0, size=5)
    unit = rng.uniform(-0.8, 0.8, size=5)
    cases = {
        "add": (lambda p: p[:5] + p[5:], np.concatenate([x, pos])),
        "sub": (lambda p: p[:5] - p[5:], np.concatenate([x, pos])),
        "mul": (lambda p: p[:5] * p[5:], np.concatenate([x, pos])),
        "div": (lambda p: p[:5] / p[5:], np.concatenate([x, pos])),
        "neg": (lambda p: -p, x),
        "power": (lambda p: ad.power(p, 3), x),
        "sin": (ad.sin, x),
        "cos": (ad.cos, x),
        "exp": (ad.exp, x),
        "log": (ad.log, pos),
        "sqrt": (ad.sqrt, pos),
        "asin": (ad.asin, unit),
        "atan2": (lambda p: ad.atan2(p[:5], p[5:]), np.concatenate([x, x[::-1]])),
        "tanh": (ad.tanh, x),
        "sigmoid": (ad.sigmoid, x),
        "elu": (ad.elu, x),
        "softplus": (ad.softplus, x),
        "abs": (ad.vabs, x),
        "clip": (lambda p: ad.clip(p, -0.5, 0.5), np.array([0.1, -0.2, 0.9, -0.9, 0.3])),
    }
    return cases


def _structural(rng):
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=3)
    M = rng.normal(size=(2, 3))
    v = rng.normal(size=6)
    return {
        "matmul": (lambda p: ad.matmul(ad.reshape(p[:6], (2, 3)), ad.reshape(p[6:], (3, 2))),
                   np.concatenate([M.ravel(), rng.normal(size=6)])),
        "solve": (lambda p: ad.solve(ad.reshape(p[:9], (3, 3)), p[9:]), np.concatenate([A.ravel(), b])),
        "getitem": (lambda p: p[np.array([0, 2, 2, 5])], v),
        "reshape": (lambda p: ad.reshape(p, (2, 3)), v),
        "transpose": (lambda p: ad.transpose(ad.reshape(p, (2, 3))), v),
        "stack": (lambda p: ad.stack([p[:3], p[3:]], axis=0), v),
        "concat": (lambda p: ad.concat([p[:2], p[2:] * p[2:]], axis=0), v),
        "sum": (lambda p: ad.vsum(ad.reshape(p, (2, 3)), axis=0), v),
        "mean": (lambda p: ad.mean(p * p), v),
        "segment_sum": (lambda p: ad.segment_sum(ad.reshape(p, (3, 2)), np.array([1, 0, 1]), 2), v),
        "where": (lambda p: ad.where(np.array([1, 0, 1, 0, 1, 0], bool), p * p, p), v),
    }


def _check(fn, x0, rng, h=1e-6):
    w = _weights(rng, np.shape(np.asarray(fn(Var(np.asarray(x0))).value)))
    return ad.grad_check(lambda p: _contract(fn(p), w), x0, h=h)


def primitive_checks(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cases = {**_elementwise(rng), **_structural(rng)}
    return {name: _check(fn, x0, rng) for name, (fn, x0) in cases.items()}


def _state(rng, n=None):
    shape = (4,) if n is None else (n, 4)
    q = rng.uniform(-0.3, 0.3, size=shape)
    qd = rng.uniform(-1.0, 1.0, size=shape)
    return q, qd


def module_checks(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed + 1)
    body = ic.BodyParams(70.0)
    prm = inta.InteractionParams()
    dt = ic.DT
    q, qd = _state(rng)
    l = 0.9
    out = {}

    out["repulsive_force_xy"] = _check(
        lambda p: inta.repulsive_force_xy(p[:2], p[2:], prm, dt), np.array([0.32, -0.11, 0.8, 0.4]), rng)
    out["repulsive_force_xy_batch"] = _check(
        lambda p: inta.repulsive_force_xy(ad.reshape(p[:6], (3, 2)), ad.reshape(p[6:], (3, 2)), prm, dt),
        np.concatenate([rng.uniform(0.2, 0.45, 6) * rng.choice([-1, 1], 6), rng.normal(size=6)]), rng)
    out["potential"] = _check(lambda p: inta.potential(p[:2], p[2:], prm, dt), np.array([0.3, 0.1, -0.5, 1.0]), rng)
    out["pd_force"] = _check(lambda p: ctl.pd_force(ctl.pd_state(p[:4], p[4:]), ctl.pd_state_rate(p[4:], p[:4] * 2)),
                             np.concatenate([q, qd]), rng)
    out["friction_force"] = _check(lambda p: ctl.friction_force(p[:4], ad.softplus(p[4])),
                                   np.concatenate([qd, [0.3]]), rng)
    out["inertia_matrix"] = _check(lambda p: ic.inertia_matrix(p[:4], p[4], body), np.concatenate([q, [l]]), rng)
    out["coriolis_vector"] = _check(lambda p: ic.coriolis_vector(p[:4], p[4:8], p[8], body),
                                    np.concatenate([q, qd, [l]]), rng)
    out["gravity_vector"] = _check(lambda p: ic.gravity_vector(p[:4], p[4], body), np.concatenate([q, [l]]), rng)
    F = rng.normal(scale=50.0, size=4)
    out["solve_accel"] = _check(lambda p: ic.forward_accel(p[:4], p[4:8], p[8], body, p[9:]),
                                np.concatenate([q, qd, [l], F]), rng)
    out["cartesian_to_generalized"] = _check(
        lambda p: ic.cartesian_to_generalized(p[:4], p[4], p[5:]), np.concatenate([q, [l], [80.0, -30.0, 5.0]]), rng)

    # interaction with learned residual; positions chosen so every pair is a neighbour
    store = nn.ParamStore()
    net = inta.build_interaction_net(store, seed, hidden=(16, 16))
    store["inta.2.W"] = rng.normal(scale=0.1, size=store["inta.2.W"].shape)
    bound = store.bind()
    q3 = np.array([[0.0, 0.0, 0.05, 0.02], [0.3, 0.1, 0.03, -0.04], [0.1, 0.3, -0.05, 0.0]])
    qd3 = rng.normal(scale=0.5, size=(3, 4))
    yaw = np.array([0.0, 0.4, -0.3])
    out["interaction_forces"] = _check(
        lambda p: inta.interaction_forces(ad.reshape(p[:12], (3, 4)), ad.reshape(p[12:], (3, 4)), yaw, net, bound,
                                          prm, dt),
        np.concatenate([q3.ravel(), qd3.ravel()]), rng)

    lstm_store = nn.ParamStore()
    cell = nn.build_lstm(lstm_store, "c", 3, 8, 2, rng, init_scale=0.5, zero_head=False)
    b2 = lstm_store.bind()
    out["lstm_step"] = _check(lambda p: cell(b2, ad.reshape(p, (2, 3)), cell.initial_state(2))[0],
                              rng.normal(size=6), rng)
    rod_store = nn.ParamStore()
    rod = ctl.RodNet(nn.build_mlp(rod_store, "rod", [ctl.ROD_FEATURES, 8, 8, 1], rng, zero_head=False))
    b3 = rod_store.bind()
    feats = np.concatenate([q[2:], qd, rng.normal(scale=50, size=4), [70.0, 0.9]])
    out["rod_length_update"] = _check(lambda p: ctl.rod_length_update(rod, b3, p, 0.9), feats, rng)
    return out


def e2e_scenario() -> sim.Scenario:
    agents = [sim.AgentInit(state=(0.0, 0.0, 0.0, 0.0)), sim.AgentInit(state=(0.35, 0.05, 0.0, 0.0), yaw=0.2)]
    push = sim.PushEvent(0, 0, 10, (250.0, 40.0, 0.0))
    return sim.Scenario(agents=agents, pushes=[push], horizon=30, mode="multi", name="gradcheck_pair")


def e2e_check(seed: int = 0, n_weights: int = 20, h: float = 1e-6):
    """Rollout loss gradient w.r.t. ``rho`` (friction) and ``n_weights`` sampled net weights."""
    scn = e2e_scenario()
    target_model = tr.oracle_model(2.0, seed=seed + 1, perturb=0.02)
    target = sim.simulate(scn, target_model)
    model = tr.oracle_model(1.0, seed=seed, perturb=0.02)
    rng = nn.stream(seed, "gradcheck")
    names = [n for n in model.params if n != ctl.MU_PARAM]
    picks = set()
    while len(picks) < n_weights:
        name = names[int(rng.integers(len(names)))]
        picks.add((name, tuple(int(rng.integers(s)) for s in model.params[name].shape)))
    chosen = [(ctl.MU_PARAM, ())] + sorted(picks)
    x0 = np.array([model.params[n][i] for n, i in chosen])
    by_name = {}
    for k, (name, idx) in enumerate(chosen):
        by_name.setdefault(name, []).append((k, idx))

    def f(p):
        bound = model.params.bind()
        for name, entries in by_name.items():
            base = np.array(model.params[name], dtype=float)
            if base.ndim == 0:
                bound[name] = p[entries[0][0]]
                continue
            for _, idx in entries:
                base[idx] = 0.0
            v = Var(base)
            for k, idx in entries:
                onehot = np.zeros_like(base)
                onehot[idx] = 1.0
                v = v + p[k] * onehot
            bound[name] = v
        traj = sim.simulate(scn, model, bound=bound, keep_vars=True)
        if traj.failed:
            raise ad.DomainError(traj.failure)
        return tr.trajectory_loss(traj, target)

    return ad.grad_check(f, x0, h=h), chosen


def run_gradcheck(depth: str = "all", seed: int = 0) -> dict:
    """Machine-readable report ``{check: {max_error, threshold, passed, depth}}`` plus a summary."""
    depths = DEPTHS if depth == "all" else (depth,)
    for d in depths:
        if d not in THRESHOLDS:
            raise ValueError(f"unknown depth {d!r}; choose from {', '.join(DEPTHS)} or all")
    checks = {}
    t0 = time.perf_counter()
    for d in depths:
        if d == "primitives":
            results = primitive_checks(seed)
        elif d == "modules":
            results = module_checks(seed)
        else:
            results = {"rollout_loss": e2e_check(seed)[0]}
        for name, res in results.items():
            checks[f"{d}/{name}"] = {
                "depth": d,
                "max_error": res.max_error,
                "threshold": THRESHOLDS[d],
                "passed": bool(res.max_error < THRESHOLDS[d]),
                "nonsmooth": list(map(int, res.nonsmooth)),
            }
    return {
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
        "seconds": time.perf_counter() - t0,
    }
