"""Pairwise interaction forces between neighbouring pendulums.

The force that agent ``j`` exerts on agent ``n`` has three parts:

* an elliptical repulsive potential on the cart coordinates,
* constant-magnitude pushes on ``theta``/``phi`` whose direction comes from a
  lookup table over the sign classes of both agents' angles and whether ``n``
  stands before (BE) or behind (BA) ``j`` along its own facing axis,
* a learned MLP residual.

Neighbourhood membership and the table lookup are treated as constants for
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Var, value_of

POS, ZERO, NEG = "Pos", "Zero", "Neg"
BE, BA = 0, 1
OVERLAP_TOL = 1e-6
INTERACTION_FEATURES = 10
INTERACTION_HIDDEN = (512, 512)

# (class of agent n, class of agent j) -> (sign if BE, sign if BA)
THETA_TABLE = {
    (POS, POS): (1, -1),
    (POS, ZERO): (0, -1),
    (POS, NEG): (0, -1),
    (ZERO, POS): (1, 0),
    (ZERO, ZERO): (0, 0),
    (ZERO, NEG): (0, -1),
    (NEG, POS): (1, 0),
    (NEG, ZERO): (1, 0),
    (NEG, NEG): (1, -1),
}
PHI_TABLE = {
    (POS, POS): (-1, 1),
    (POS, ZERO): (-1, 0),
    (POS, NEG): (-1, 0),
    (ZERO, POS): (0, 1),
    (ZERO, ZERO): (0, 0),
    (ZERO, NEG): (-1, 0),
    (NEG, POS): (0, 1),
    (NEG, ZERO): (0, 1),
    (NEG, NEG): (-1, 1),
}


class AgentOverlapError(ArithmeticError):
    pass


@dataclass(frozen=True)
class InteractionParams:
    u: float = 150.0
    sigma: float = 0.5
    k_theta: float = 100.0
    k_phi: float = 50.0
    r_neigh: float = 0.5
    eps_angle: float = 0.01

    def __post_init__(self):
        for name in ("u", "sigma", "k_theta", "k_phi", "r_neigh", "eps_angle"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Diagnostics:
    radicand_clamps: int = 0
    events: list = field(default_factory=list)


# neighbourhood ---------------------------------------------------------------


def neighborhood(positions, n: int, r_neigh: float = 0.5) -> set[int]:
    pos = np.asarray(value_of(positions), dtype=float)
    d = np.linalg.norm(pos - pos[n], axis=-1)
    return {int(j) for j in np.flatnonzero(d < r_neigh) if j != n}


def neighbor_pairs(positions, r_neigh: float = 0.5):
    """All ordered pairs ``(n, j)`` with ``j`` in the neighbourhood of ``n``."""
    pos = np.asarray(value_of(positions), dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    mask = d < r_neigh
    np.fill_diagonal(mask, False)
    n_idx, j_idx = np.nonzero(mask)
    return n_idx, j_idx


# repulsive potential ---------------------------------------------------------


def _norm(v):
    return ad.sqrt(ad.vsum(v * v, axis=-1))


def _ellipse(r_nj, rdot_jn, dt, diagnostics):
    """Shared terms of the semi-minor axis; degenerate pairs get ``d = 0``."""
    r = ad.lift(r_nj)
    d = dt * ad.lift(rdot_jn)
    rv, dv = np.asarray(value_of(r)), np.asarray(value_of(d))
    Av = np.sqrt((rv**2).sum(-1))
    Bv = np.sqrt(((rv - dv) ** 2).sum(-1))
    clamped = ((Av + Bv) ** 2 - (dv**2).sum(-1) <= 0) | (Bv == 0)
    if np.any(clamped):
        if diagnostics is not None:
            diagnostics.radicand_clamps += int(np.sum(clamped))
        d = ad.where(np.broadcast_to(clamped[..., None], dv.shape), 0.0, d)
    A = _norm(r)
    rd = r - d
    B = _norm(rd)
    S = A + B
    b = 0.5 * ad.sqrt(S * S - ad.vsum(d * d, axis=-1))
    return r, rd, A, B, S, b, clamped


def semi_minor_axis(r_nj, rdot_jn, dt: float, diagnostics: Diagnostics | None = None):
    """Semi-minor axis of the velocity-skewed ellipse through ``r_nj``.

    Returns ``(b, clamped)``; ``clamped`` marks pairs whose radicand was not
    positive and whose ``b`` was set to zero.
    """
    *_, b, clamped = _ellipse(r_nj, rdot_jn, dt, diagnostics)
    if np.any(clamped):
        b = ad.where(clamped, 0.0, b)
    return b, clamped


def potential(r_nj, rdot_jn, params: InteractionParams, dt: float) -> Var:
    """``u exp(-b / sigma)``."""
    b, _ = semi_minor_axis(r_nj, rdot_jn, dt)
    return params.u * ad.exp(-b * (1.0 / params.sigma))


def _col(v):
    return ad.reshape(v, np.shape(value_of(v)) + (1,))


def repulsive_force_xy(r_nj, rdot_jn, params: InteractionParams, dt: float,
                       diagnostics: Diagnostics | None = None) -> Var:
    """Negative gradient of the potential with respect to ``r_nj``.

    The gradient of ``b`` is written out in closed form so the force itself
    stays differentiable on the tape::

        grad b = S / (4 b) * (r / |r| + (r - d) / |r - d|),  S = |r| + |r - d|,  d = dt * rdot

    Pairs whose radicand degenerates fall back to the circular potential
    (``d`` treated as zero) and are counted in ``diagnostics``.
    """
    rv = np.asarray(value_of(r_nj))
    if np.any(np.sqrt((rv**2).sum(-1)) < OVERLAP_TOL):
        raise AgentOverlapError("agent overlap")
    r, rd, A, B, S, b, _ = _ellipse(r_nj, rdot_jn, dt, diagnostics)
    coef = (params.u / params.sigma) * ad.exp(-b * (1.0 / params.sigma)) * S / (4.0 * b)
    return _col(coef) * (r / _col(A) + rd / _col(B))


# angular sign table ----------------------------------------------------------


def classify(angle, eps: float) -> str:
    if angle > eps:
        return POS
    if angle < -eps:
        return NEG
    return ZERO


def angular_sign(angle_n, angle_j, x_nj, eps_angle: float = 0.01, which: str = "theta") -> int:
    table = {"theta": THETA_TABLE, "phi": PHI_TABLE}[which]
    side = BE if x_nj > 0 else BA
    return table[(classify(float(angle_n), eps_angle), classify(float(angle_j), eps_angle))][side]


# learned residual ------------------------------------------------------------


@dataclass
class InteractionNet:
    mlp: nn.MLP


def build_interaction_net(store: nn.ParamStore, seed: int, hidden=INTERACTION_HIDDEN) -> InteractionNet:
    return InteractionNet(nn.build_mlp(store, "inta", [INTERACTION_FEATURES, *hidden, 4], nn.stream(seed, "inta")))


def rotate_xy(v, cos_psi, sin_psi, inverse: bool = False):
    """Rotate the first two components of ``v`` by ``psi`` (or ``-psi``)."""
    v = ad.lift(v)
    x, y = v[..., 0], v[..., 1]
    s = -sin_psi if inverse else sin_psi
    rx = cos_psi * x - s * y
    ry = s * x + cos_psi * y
    parts = [rx, ry]
    if np.shape(value_of(v))[-1] > 2:
        return ad.concat([ad.stack(parts, axis=-1), v[..., 2:]], axis=-1)
    return ad.stack(parts, axis=-1)


def pair_features(r_loc, vel_rel_loc, q_n, q_j, qd_n, qd_j):
    """``[x_nj, y_nj, theta_n, phi_n, theta_j, phi_j, xdot_nj, ydot_nj, thetadot_nj, phidot_nj]``."""
    q_n, q_j, qd_n, qd_j = map(ad.lift, (q_n, q_j, qd_n, qd_j))
    return ad.concat(
        [ad.lift(r_loc), q_n[..., 2:4], q_j[..., 2:4], ad.lift(vel_rel_loc), qd_n[..., 2:4] - qd_j[..., 2:4]],
        axis=-1,
    )


def _pair_forces(q, qd, yaw, n_idx, j_idx, net, bound, params, dt, diagnostics):
    q, qd = ad.lift(q), ad.lift(qd)
    yaw = np.broadcast_to(np.asarray(yaw, float), np.shape(value_of(q))[:-1])
    c, s = np.cos(yaw[n_idx]), np.sin(yaw[n_idx])
    q_n, q_j = q[n_idx], q[j_idx]
    qd_n, qd_j = qd[n_idx], qd[j_idx]
    r_nj = q_n[..., 0:2] - q_j[..., 0:2]
    rdot_jn = qd_j[..., 0:2] - qd_n[..., 0:2]
    f_xy_world = repulsive_force_xy(r_nj, rdot_jn, params, dt, diagnostics)
    f_xy = rotate_xy(f_xy_world, c, s, inverse=True)
    r_loc = rotate_xy(r_nj, c, s, inverse=True)
    x_loc = np.asarray(value_of(r_loc))[..., 0]
    qv = np.asarray(value_of(q))
    signs = np.array(
        [
            [
                params.k_theta * angular_sign(qv[n, 2], qv[j, 2], x, params.eps_angle, "theta"),
                params.k_phi * angular_sign(qv[n, 3], qv[j, 3], x, params.eps_angle, "phi"),
            ]
            for n, j, x in zip(n_idx, j_idx, x_loc)
        ]
    ).reshape(len(n_idx), 2)
    f_bs = ad.concat([f_xy, Var(signs)], axis=-1)
    if net is None:
        return f_bs
    vel_loc = rotate_xy(-rdot_jn, c, s, inverse=True)
    feats = pair_features(r_loc, vel_loc, q_n, q_j, qd_n, qd_j)
    return f_bs + net.mlp(bound, feats)


def interaction_force(q_n, qd_n, q_j, qd_j, net, bound, params: InteractionParams = InteractionParams(),
                      dt: float = 1.0 / 60.0, yaw_n: float = 0.0, diagnostics=None) -> Var:
    """Force on agent ``n`` from neighbour ``j``, expressed in ``n``'s local frame."""
    q = ad.stack([ad.lift(q_n), ad.lift(q_j)], axis=0)
    qd = ad.stack([ad.lift(qd_n), ad.lift(qd_j)], axis=0)
    f = _pair_forces(q, qd, np.array([yaw_n, 0.0]), np.array([0]), np.array([1]), net, bound, params, dt,
                     diagnostics)
    return f[0]


def interaction_forces(q, qd, yaw, net, bound, params: InteractionParams = InteractionParams(),
                       dt: float = 1.0 / 60.0, diagnostics=None) -> Var:
    """Total interaction force on every agent, shape ``(N, 4)``, local frames.

    Per-agent sums are exactly rounded so the result does not depend on agent
    ordering.
    """
    qv = np.asarray(value_of(q))
    n_agents = qv.shape[0]
    n_idx, j_idx = neighbor_pairs(qv[:, 0:2], params.r_neigh)
    if len(n_idx) == 0:
        return Var(np.zeros((n_agents, 4)))
    f = _pair_forces(q, qd, yaw, n_idx, j_idx, net, bound, params, dt, diagnostics)
    return ad.segment_sum(f, n_idx, n_agents)
