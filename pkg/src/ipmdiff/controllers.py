"""Per-agent self forces: PD balance recovery, LSTM residual, ground friction, rod length."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Var, value_of
from .ipm_core import DEFAULT_MASS, DT, L_MAX, L_MIN

SELF_NN_FEATURES = 7
ROD_FEATURES = 12
SELF_NN_HIDDEN = 256
ROD_HIDDEN = (128, 128)

MU_PARAM = "friction.rho"

# Fixed, non-learnable input scaling so every network input is O(1):
# angles and rates as-is, generalized forces per 100 N, mass per 70 kg.
FORCE_SCALE = 100.0
SELF_NN_SCALE = np.array([1, 1, 1, 1, 1, 1, 1 / DEFAULT_MASS])
ROD_SCALE = np.array([1, 1, 1, 1, 1, 1, *(4 * [1 / FORCE_SCALE]), 1 / DEFAULT_MASS, 1])


@dataclass(frozen=True)
class PDGains:
    kp: tuple = (30.0, 30.0, 1500.0, 1500.0)
    kd: tuple = (4.0, 4.0, 200.0, 200.0)

    def __post_init__(self):
        if min(self.kp) < 0 or min(self.kd) < 0:
            raise ValueError("PD gains must be non-negative")


def pd_state(q, qd):
    """``s = [xdot, ydot, theta, phi]``."""
    q, qd = ad.lift(q), ad.lift(qd)
    return ad.concat([qd[..., 0:2], q[..., 2:4]], axis=-1)


def pd_state_rate(qd, prev_accel):
    """``[xddot, yddot]`` from the previous step, ``[thetadot, phidot]`` from now."""
    qd = ad.lift(qd)
    return ad.concat([ad.lift(prev_accel)[..., 0:2], qd[..., 2:4]], axis=-1)


def pd_force(s, s_rate, gains: PDGains = PDGains()) -> Var:
    """``K_p e + K_d e_dot`` with target zero, i.e. ``-(K_p s + K_d s_rate)``."""
    kp = np.asarray(gains.kp)
    kd = np.asarray(gains.kd)
    return -(ad.lift(s) * kp) - ad.lift(s_rate) * kd


def softplus_inverse(mu: float) -> float:
    if mu <= 0:
        raise ValueError("friction coefficient must be positive")
    return mu + math.log(-math.expm1(-mu))


@dataclass
class FrictionParam:
    """Positive friction ``mu = log(1 + exp(rho))``; ``rho`` is the stored parameter."""

    name: str = MU_PARAM

    def mu(self, bound) -> Var:
        return ad.softplus(bound[self.name])


def friction_force(qd, mu) -> Var:
    qd = ad.lift(qd)
    v = qd[..., 0:2]
    zero = 0.0 * v
    return ad.concat([-(v * ad.lift(mu)), zero], axis=-1)


@dataclass
class SelfForceNet:
    cell: nn.LSTMCell

    def initial_state(self, n_agents: int):
        return self.cell.initial_state(n_agents)


def _column(v, batch):
    """Broadcast a per-agent scalar (or a shared one) to shape ``batch + (1,)``."""
    v = ad.lift(v)
    if np.shape(value_of(v)) != tuple(batch):
        v = v + np.zeros(batch)
    return ad.reshape(v, tuple(batch) + (1,))


def self_nn_features(q, qd, mass):
    """``[theta, phi, xdot, ydot, thetadot, phidot, M]``."""
    q, qd = ad.lift(q), ad.lift(qd)
    m = _column(mass, np.shape(value_of(q))[:-1])
    return ad.concat([q[..., 2:4], qd[..., 0:2], qd[..., 2:4], m], axis=-1)


def self_nn_force(net: SelfForceNet, bound, features, state):
    """One LSTM step. Returns ``(force, new_state)``."""
    if np.shape(value_of(features))[-1] != SELF_NN_FEATURES:
        raise ValueError(f"self-force features must have length {SELF_NN_FEATURES}")
    return net.cell(bound, ad.lift(features) * SELF_NN_SCALE, state)


@dataclass
class RodNet:
    """MLP whose scalar output is a length rate; ``dl = rate_scale * output``."""

    mlp: nn.MLP
    l_min: float = L_MIN
    l_max: float = L_MAX
    rate_scale: float = DT


def rod_features(q, qd, f_self, mass, l):
    """``[theta, phi, xdot, ydot, thetadot, phidot, F_self(4), M, l]``."""
    q, qd = ad.lift(q), ad.lift(qd)
    batch = np.shape(value_of(q))[:-1]
    m, lv = _column(mass, batch), _column(l, batch)
    return ad.concat([q[..., 2:4], qd[..., 0:2], qd[..., 2:4], ad.lift(f_self), m, lv], axis=-1)


def rod_length_update(net: RodNet, bound, features, l) -> Var:
    if np.shape(value_of(features))[-1] != ROD_FEATURES:
        raise ValueError(f"rod features must have length {ROD_FEATURES}")
    dl = net.rate_scale * net.mlp(bound, ad.lift(features) * ROD_SCALE)[..., 0]
    return ad.clip(ad.lift(l) + dl, net.l_min, net.l_max)


@dataclass
class SelfModels:
    """Learnable self-force pieces shared by every agent."""

    gains: PDGains = field(default_factory=PDGains)
    friction: FrictionParam = field(default_factory=FrictionParam)
    self_net: SelfForceNet | None = None
    rod_net: RodNet | None = None


def build_self_models(store: nn.ParamStore, seed: int, mu0: float = 1.0, lstm_hidden=SELF_NN_HIDDEN,
                      rod_hidden=ROD_HIDDEN) -> SelfModels:
    store.add(MU_PARAM, softplus_inverse(mu0))
    cell = nn.build_lstm(store, "self_nn", SELF_NN_FEATURES, lstm_hidden, 4, nn.stream(seed, "self_nn"))
    rod = nn.build_mlp(store, "rod", [ROD_FEATURES, *rod_hidden, 1], nn.stream(seed, "rod"))
    return SelfModels(self_net=SelfForceNet(cell), rod_net=RodNet(rod))
