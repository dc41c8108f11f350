"""scikit-learn style wrappers around the simulator and the skeleton mapping.

``IPMSimulator`` treats a list of scenarios as ``X`` and their observed
pendulum trajectories as ``y``. ``SkeletonToIPM`` turns pose trajectories into
pendulum states and rates.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import controllers as ctl
from . import interaction as inta
from . import skeleton_metrics as skm
from . import simulator as sim
from . import training as tr
from .autodiff import value_of


def check_scenarios(X) -> list[sim.Scenario]:
    """Accept one scenario, a list of scenarios or a list of scenario dicts; validate each."""
    if isinstance(X, (sim.Scenario, dict)):
        X = [X]
    out = []
    for k, s in enumerate(X):
        if isinstance(s, dict):
            s = sim.Scenario.from_dict(s)
        if not isinstance(s, sim.Scenario):
            raise TypeError(f"X[{k}] is not a Scenario")
        out.append(s.validate())
    if not out:
        raise ValueError("X is empty")
    return out


def check_targets(X: list[sim.Scenario], y) -> list[sim.Trajectory]:
    """Targets may be Trajectories or ``(q, qd)`` array pairs of shape ``(horizon + 1, agents, 4)``."""
    if isinstance(y, (sim.Trajectory, tuple)):
        y = [y]
    if len(y) != len(X):
        raise ValueError(f"{len(X)} scenarios but {len(y)} targets")
    out = []
    for k, (scn, t) in enumerate(zip(X, y)):
        if not isinstance(t, sim.Trajectory):
            q, qd = (np.asarray(a, dtype=float) for a in t)
            t = sim.Trajectory(q=q, qd=qd, l=np.full(q.shape[:2], np.nan), forces={}, dt=scn.dt)
        want = (scn.horizon + 1, scn.n_agents, 4)
        if t.q.shape != want or t.qd.shape != want:
            raise ValueError(f"y[{k}] has shape {t.q.shape}, expected {want}")
        if not (np.isfinite(t.q).all() and np.isfinite(t.qd).all()):
            raise ValueError(f"y[{k}] contains non-finite values")
        out.append(t)
    return out


class IPMSimulator(RegressorMixin, BaseEstimator):
    """Differentiable pendulum simulator fitted to observed trajectories.

    ``fit`` runs gradient descent through full rollouts; ``predict`` returns
    one :class:`Trajectory` per scenario; ``score`` is the negated mean
    tracking loss, so larger is better.
    """

    def __init__(self, mu0=1.0, lr=3e-4, epochs=1, max_steps=None, lam=1.0, clip_norm=10.0, accumulate=4,
                 max_len=None, stage=1, freeze=(), seed=0, lstm_hidden=ctl.SELF_NN_HIDDEN,
                 rod_hidden=ctl.ROD_HIDDEN, inta_hidden=inta.INTERACTION_HIDDEN, warm_start=False):
        self.mu0 = mu0
        self.lr = lr
        self.epochs = epochs
        self.max_steps = max_steps
        self.lam = lam
        self.clip_norm = clip_norm
        self.accumulate = accumulate
        self.max_len = max_len
        self.stage = stage
        self.freeze = freeze
        self.seed = seed
        self.lstm_hidden = lstm_hidden
        self.rod_hidden = rod_hidden
        self.inta_hidden = inta_hidden
        self.warm_start = warm_start

    def _config(self):
        return tr.TrainConfig(lr=self.lr, epochs=self.epochs, max_steps=self.max_steps, lam=self.lam,
                              clip_norm=self.clip_norm, accumulate=self.accumulate, max_len=self.max_len,
                              seed=self.seed, stage=self.stage, freeze=tuple(self.freeze))

    def _initial_model(self):
        if self.warm_start and hasattr(self, "model_"):
            return self.model_
        return sim.PhysicsModel.build(self.seed, mu0=self.mu0, lstm_hidden=self.lstm_hidden,
                                      rod_hidden=tuple(self.rod_hidden), inta_hidden=tuple(self.inta_hidden))

    def fit(self, X, y):
        X = check_scenarios(X)
        y = check_targets(X, y)
        result = tr.train(tr.IPMDataset(list(zip(X, y))), self._initial_model(), self._config())
        self.model_ = result.model
        self.loss_curve_ = result.losses
        self.smoothed_loss_curve_ = result.smoothed
        self.n_steps_ = result.steps
        self.mu_ = result.model.mu
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return [sim.simulate(s, self.model_) for s in check_scenarios(X)]

    def score(self, X, y, sample_weight=None):
        check_is_fitted(self, "model_")
        X = check_scenarios(X)
        y = check_targets(X, y)
        losses = [float(value_of(tr.trajectory_loss(p, t, self.lam))) for p, t in zip(self.predict(X), y)]
        return -float(np.average(losses, weights=sample_weight))


class SkeletonToIPM(TransformerMixin, BaseEstimator):
    """Pose trajectories ``(T, N, 22, 3)`` to ``(T, N, 9)`` rows ``[x, y, theta, phi, rates(4), l]``."""

    def __init__(self, yaw=0.0, topology_path=None, dt=sim.ic.DT):
        self.yaw = yaw
        self.topology_path = topology_path
        self.dt = dt

    def fit(self, X, y=None):
        self.topology_ = skm.load_topology(self.topology_path)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self._check(X)
        return self

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 4 or X.shape[2:] != (skm.N_JOINTS, 3):
            raise ValueError(f"expected poses of shape (frames, agents, {skm.N_JOINTS}, 3), got {X.shape}")
        return X

    def transform(self, X):
        check_is_fitted(self, "topology_")
        X = self._check(X)
        q, l = skm.ipm_states(X, self.yaw, self.topology_)
        qd = skm.ipm_velocity_estimate(X, self.dt, self.yaw, self.topology_)
        return np.concatenate([q, qd, l[..., None]], axis=-1)
