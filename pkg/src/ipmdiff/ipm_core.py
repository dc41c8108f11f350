"""Inverted pendulum on a cart in generalized coordinates ``q = [x, y, theta, phi]``.

All functions are batched over leading axes: ``q`` has shape ``(..., 4)``, the
rod length ``l`` and the body mass have shape ``(...)``. Inputs may be plain
arrays or :class:`~ipmdiff.autodiff.Var`; outputs are ``Var``.

Forward kinematics of the point mass (rod end) relative to the world origin::

    p = [x + l sin(theta), y - l cos(theta) sin(phi), l cos(theta) cos(phi)]

``theta`` tilts the rod toward +x, ``phi`` toward -y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of

GRAVITY = 9.81
DEFAULT_MASS = 70.0
DT = 1.0 / 60.0
EPS_SING = 0.05
ANGLE_LIMIT = math.pi / 2 - EPS_SING
L_MIN, L_MAX = 0.3, 1.5
COND_MAX = 1e12


class SingularityError(ArithmeticError):
    """The pendulum reached a configuration where the inertia matrix degenerates."""

    def __init__(self, message, agent=None, frame=None):
        super().__init__(message)
        self.agent = agent
        self.frame = frame

    def __str__(self):
        where = []
        if self.agent is not None:
            where.append(f"agent {self.agent}")
        if self.frame is not None:
            where.append(f"frame {self.frame}")
        base = super().__str__()
        return f"{base} ({', '.join(where)})" if where else base


class IPMState(NamedTuple):
    x: float
    y: float
    theta: float
    phi: float


class IPMVelocity(NamedTuple):
    xdot: float
    ydot: float
    thetadot: float
    phidot: float


class IPMAcceleration(NamedTuple):
    xddot: float
    yddot: float
    thetaddot: float
    phiddot: float


@dataclass(frozen=True)
class BodyParams:
    """Total mass ``M`` split 10/90 between cart and pendulum."""

    mass: object = DEFAULT_MASS
    g: float = GRAVITY

    def __post_init__(self):
        if np.any(np.asarray(value_of(self.mass)) <= 0):
            raise ValueError("mass must be positive")

    @property
    def cart_mass(self):
        # M - 0.9 M is exact, so cart + pendulum reproduces M bit for bit
        return self.mass - self.pendulum_mass

    @property
    def pendulum_mass(self):
        return 0.9 * self.mass


def _comp(v, i):
    return ad.getitem(ad.lift(v), (Ellipsis, i))


def check_angles(q, agent=None, frame=None):
    """Raise :class:`SingularityError` if any |theta| or |phi| crosses the guard band."""
    a = np.abs(np.asarray(value_of(q))[..., 2:4])
    bad = a >= ANGLE_LIMIT
    if np.any(bad):
        if agent is None and bad.ndim > 1:
            agent = int(np.argwhere(bad.any(axis=-1))[0][0])
        raise SingularityError(
            f"rod angle {a.max():.4f} rad beyond limit {ANGLE_LIMIT:.4f}", agent=agent, frame=frame
        )


def _trig(q):
    th, ph = _comp(q, 2), _comp(q, 3)
    return ad.sin(th), ad.cos(th), ad.sin(ph), ad.cos(ph)


def inertia_matrix(q, l, body: BodyParams) -> Var:
    check_angles(q)
    st, ct, sp, cp = _trig(q)
    mtot = ad.lift(body.mass)
    mp = body.pendulum_mass
    mpl = mp * l
    a02 = mpl * ct
    a12 = mpl * st * sp
    a13 = -(mpl * ct * cp)
    a22 = mpl * l
    a33 = a22 * ct * ct
    zero = 0.0 * a02
    mt = mtot + zero
    rows = [
        [mt, zero, a02, zero],
        [zero, mt, a12, a13],
        [a02, a12, a22, zero],
        [zero, a13, zero, a33],
    ]
    flat = ad.stack([e for row in rows for e in row], axis=-1)
    shape = np.shape(value_of(flat))[:-1] + (4, 4)
    return ad.reshape(flat, shape)


def coriolis_vector(q, qd, l, body: BodyParams) -> Var:
    st, ct, sp, cp = _trig(q)
    td, pd = _comp(qd, 2), _comp(qd, 3)
    mpl = body.pendulum_mass * l
    c0 = -(mpl * st * td * td)
    c1 = mpl * (2.0 * st * cp * td * pd + ct * sp * (td * td + pd * pd))
    c2 = mpl * l * st * cp * pd * pd
    c3 = -2.0 * mpl * l * st * ct * td * pd
    return ad.stack([c0, c1, c2, c3], axis=-1)


def gravity_vector(q, l, body: BodyParams) -> Var:
    st, ct, sp, cp = _trig(q)
    mgl = body.pendulum_mass * body.g * l
    g2 = -(mgl * st * cp)
    g3 = -(mgl * ct * sp)
    zero = 0.0 * g2
    return ad.stack([zero, zero, g2, g3], axis=-1)


def solve_accel(Mmat, C, G, F_net, pinned_cart: bool = False, cond_max: float = COND_MAX) -> Var:
    """Accelerations from ``M qdd + C + G = F``.

    With ``pinned_cart`` the cart is held fixed by an ideal constraint: only
    the angular rows are solved and the cart accelerations are zero.
    """
    Mv = np.asarray(value_of(Mmat))
    if not np.all(np.isfinite(Mv)) or np.any(np.linalg.cond(Mv) > cond_max):
        raise SingularityError("inertia matrix ill-conditioned")
    rhs = ad.lift(F_net) - C - G
    if not pinned_cart:
        return ad.solve(Mmat, rhs)
    sub = ad.getitem(Mmat, (Ellipsis, slice(2, 4), slice(2, 4)))
    ang = ad.solve(sub, ad.getitem(rhs, (Ellipsis, slice(2, 4))))
    return ad.concat([0.0 * ad.getitem(rhs, (Ellipsis, slice(0, 2))), ang], axis=-1)


def semi_implicit_step(q, qd, qdd, dt: float, step=None, agent=None):
    """Velocity first, then position with the new velocity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    qd_new = ad.lift(qd) + dt * ad.lift(qdd)
    q_new = ad.lift(q) + dt * qd_new
    check_angles(q_new, agent=agent, frame=step)
    return q_new, qd_new


def rod_end_position(q, l) -> Var:
    st, ct, sp, cp = _trig(q)
    return ad.stack([_comp(q, 0) + l * st, _comp(q, 1) - l * ct * sp, l * ct * cp], axis=-1)


def rod_end_jacobian(q, l) -> Var:
    """d(rod end)/dq, shape (..., 3, 4)."""
    st, ct, sp, cp = _trig(q)
    one = 1.0 + 0.0 * st
    zero = 0.0 * st
    rows = [
        [one, zero, l * ct, zero],
        [zero, one, l * st * sp, -(l * ct * cp)],
        [zero, zero, -(l * st * cp), -(l * ct * sp)],
    ]
    flat = ad.stack([e for row in rows for e in row], axis=-1)
    shape = np.shape(value_of(flat))[:-1] + (3, 4)
    return ad.reshape(flat, shape)


def cartesian_to_generalized(q, l, F_cart, apply_at: str = "rod-end") -> Var:
    """Generalized force ``J^T F`` for a Cartesian force at the rod end or the cart."""
    F = ad.lift(F_cart)
    fx, fy, fz = _comp(F, 0), _comp(F, 1), _comp(F, 2)
    if apply_at == "cart":
        zero = 0.0 * fx
        return ad.stack([fx, fy, zero, zero], axis=-1)
    if apply_at != "rod-end":
        raise ValueError(f"unknown application point {apply_at!r}")
    st, ct, sp, cp = _trig(q)
    qth = l * (ct * fx + st * sp * fy - st * cp * fz)
    qph = -(l * (ct * cp * fy + ct * sp * fz))
    return ad.stack([fx, fy, qth, qph], axis=-1)


def kinetic_energy(q, qd, l, body: BodyParams) -> Var:
    Mm = inertia_matrix(q, l, body)
    qd = ad.lift(qd)
    Mq = ad.matmul(Mm, ad.reshape(qd, np.shape(value_of(qd)) + (1,)))
    return 0.5 * ad.vsum(qd * ad.reshape(Mq, np.shape(value_of(qd))), axis=-1)


def potential_energy(q, l, body: BodyParams) -> Var:
    st, ct, sp, cp = _trig(q)
    return body.pendulum_mass * body.g * l * ct * cp


def total_energy(q, qd, l, body: BodyParams) -> Var:
    return kinetic_energy(q, qd, l, body) + potential_energy(q, l, body)


def forward_accel(q, qd, l, body: BodyParams, F_net, pinned_cart: bool = False) -> Var:
    return solve_accel(
        inertia_matrix(q, l, body),
        coriolis_vector(q, qd, l, body),
        gravity_vector(q, l, body),
        F_net,
        pinned_cart=pinned_cart,
    )


def passive_rollout(q0, qd0, l, body: BodyParams, dt: float, steps: int, F_net=None, pinned_cart=False):
    """Integrate with a constant (default zero) generalized force; returns value arrays."""
    q, qd = ad.lift(np.asarray(q0, float)), ad.lift(np.asarray(qd0, float))
    F = np.zeros(4) if F_net is None else F_net
    qs, qds = [np.asarray(q.value)], [np.asarray(qd.value)]
    for k in range(steps):
        acc = forward_accel(q, qd, l, body, F, pinned_cart=pinned_cart)
        q, qd = semi_implicit_step(q, qd, acc, dt, step=k + 1)
        qs.append(np.asarray(value_of(q)))
        qds.append(np.asarray(value_of(qd)))
    return np.array(qs), np.array(qds)
