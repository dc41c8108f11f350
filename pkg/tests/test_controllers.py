import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipmdiff import autodiff as ad
from ipmdiff import controllers as ctl
from ipmdiff import nn
from ipmdiff import simulator as sim
from ipmdiff.autodiff import Tape, Var

vec4 = st.lists(st.floats(-5, 5), min_size=4, max_size=4)


def val(x):
    return np.asarray(ad.value_of(x))


@pytest.mark.parametrize(
    "s, sdot, expected",
    [
        ([0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]),
        ([0.5, 0, 0.1, 0], [0, 0, 0, 0], [-15, 0, -150, 0]),
        ([0, 0, 0, 0], [1, 0, 0, 0], [-4, 0, 0, 0]),
    ],
)
def test_pd_force_examples(s, sdot, expected):
    assert val(ctl.pd_force(np.array(s, float), np.array(sdot, float))) == pytest.approx(expected, abs=1e-12)


def test_pd_state_uses_previous_cart_acceleration():
    q = np.array([1.0, 2.0, 0.1, -0.2])
    qd = np.array([0.3, -0.4, 0.5, 0.6])
    prev = np.array([7.0, 8.0, 9.0, 10.0])
    assert np.array_equal(val(ctl.pd_state(q, qd)), [0.3, -0.4, 0.1, -0.2])
    assert np.array_equal(val(ctl.pd_state_rate(qd, prev)), [7.0, 8.0, 0.5, 0.6])


def test_negative_gains_rejected():
    with pytest.raises(ValueError):
        ctl.PDGains(kp=(1, 1, -1, 1))


@settings(max_examples=50, deadline=None)
@given(vec4, vec4, st.floats(-3, 3))
def test_pd_force_is_linear(e, edot, alpha):
    e, edot = np.array(e), np.array(edot)
    lhs = val(ctl.pd_force(alpha * e, alpha * edot))
    assert np.allclose(lhs, alpha * val(ctl.pd_force(e, edot)), rtol=1e-12, atol=1e-9)


def test_friction_examples():
    assert np.array_equal(val(ctl.friction_force(np.zeros(4), 1.0)), np.zeros(4))
    assert val(ctl.friction_force(np.array([2.0, -1.0, 5.0, 5.0]), 1.0)) == pytest.approx([-2, 1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(vec4, st.floats(-5, 5))
def test_friction_is_dissipative(qd, rho):
    qd = np.array(qd)
    f = val(ctl.friction_force(qd, ad.softplus(Var(rho))))
    assert float(f[:2] @ qd[:2]) <= 0.0


def test_friction_gradient_wrt_rho():
    rho, xdot = 0.3, 1.7
    tape = Tape()
    r = tape.parameter("rho", rho)
    f = ctl.friction_force(np.array([xdot, 0.0, 0.0, 0.0]), ad.softplus(r))
    g = tape.backward(f[0])["rho"]
    dmu = 1.0 / (1.0 + np.exp(-rho))
    assert g == pytest.approx(-dmu * xdot, rel=1e-14)


@pytest.mark.parametrize("mu", [1e-6, 0.5, 1.0, 2.0, 37.0])
def test_softplus_inverse_round_trip(mu):
    assert float(np.logaddexp(0.0, ctl.softplus_inverse(mu))) == pytest.approx(mu, rel=1e-12)
    with pytest.raises(ValueError):
        ctl.softplus_inverse(0.0)


def test_initial_mu_is_one(full_model):
    assert full_model.mu == pytest.approx(1.0, rel=1e-14)


def _self_net(hidden=16, zero_head=True, seed=3):
    store = nn.ParamStore()
    cell = nn.build_lstm(store, "s", ctl.SELF_NN_FEATURES, hidden, 4, np.random.default_rng(seed),
                         init_scale=0.3, zero_head=zero_head)
    return ctl.SelfForceNet(cell), store.bind()


def test_zero_head_self_net_outputs_zero():
    net, bound = _self_net()
    feats = np.array([0.1, -0.2, 1.0, 2.0, 3.0, -1.0, 70.0])
    out, _ = ctl.self_nn_force(net, bound, feats[None], net.initial_state(1))
    assert np.array_equal(val(out), np.zeros((1, 4)))


def test_all_zero_weights_output_zero():
    net, bound = _self_net(zero_head=False)
    zeros = {n: Var(np.zeros_like(v.value)) for n, v in bound.items()}
    out, _ = ctl.self_nn_force(net, zeros, np.ones((1, 7)) * 5, net.initial_state(1))
    assert np.array_equal(val(out), np.zeros((1, 4)))


def test_self_net_is_deterministic_and_state_dependent():
    net, bound = _self_net(zero_head=False)
    a = np.array([[0.1, 0.0, 0.5, 0.0, 0.2, 0.0, 70.0]])
    b = np.array([[-0.2, 0.1, -0.3, 0.4, 0.0, 0.3, 60.0]])

    def run(seq):
        state = net.initial_state(1)
        for x in seq:
            out, state = ctl.self_nn_force(net, bound, x, state)
        return val(out)

    assert np.array_equal(run([a]), run([a]))
    assert not np.allclose(run([a, b]), run([b, a]))
    assert not np.allclose(run([a, a]), run([a]))  # same input, different history


def test_self_net_rejects_wrong_feature_length():
    net, bound = _self_net()
    with pytest.raises(ValueError, match="length 7"):
        ctl.self_nn_force(net, bound, np.zeros((1, 6)), net.initial_state(1))


def test_feature_builders_order():
    q = np.array([[1.0, 2.0, 0.1, 0.2]])
    qd = np.array([[0.3, 0.4, 0.5, 0.6]])
    assert np.array_equal(val(ctl.self_nn_features(q, qd, 70.0)), [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 70.0]])
    f = val(ctl.rod_features(q, qd, np.array([[7.0, 8.0, 9.0, 10.0]]), 70.0, 0.9))
    assert f.shape == (1, ctl.ROD_FEATURES)
    assert np.array_equal(f, [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 7, 8, 9, 10, 70, 0.9]])


def _rod(zero_head=True, hidden=(8, 8), seed=0):
    store = nn.ParamStore()
    mlp = nn.build_mlp(store, "rod", [ctl.ROD_FEATURES, *hidden, 1], np.random.default_rng(seed),
                       zero_head=zero_head)
    return ctl.RodNet(mlp), store


def test_zero_rod_net_keeps_length():
    rod, store = _rod()
    feats = np.random.default_rng(1).normal(size=(3, ctl.ROD_FEATURES))
    l = np.array([0.5, 0.9, 1.2])
    assert np.array_equal(val(ctl.rod_length_update(rod, store.bind(), feats, l)), l)


def test_rod_length_is_clamped():
    rod, store = _rod()
    store["rod.2.b"] = np.array([1e4])
    assert val(ctl.rod_length_update(rod, store.bind(), np.zeros(ctl.ROD_FEATURES), 1.4)) == ctl.RodNet.l_max
    store["rod.2.b"] = np.array([-1e4])
    assert val(ctl.rod_length_update(rod, store.bind(), np.zeros(ctl.ROD_FEATURES), 0.4)) == ctl.RodNet.l_min
    with pytest.raises(ValueError, match="length 12"):
        ctl.rod_length_update(rod, store.bind(), np.zeros(13), 1.0)


def test_rod_net_recovers_sign_of_length_rate():
    """Supervised fit of an oracle rule dl* = -0.001 * thetadot."""
    rod, store = _rod(zero_head=False, hidden=(16, 16), seed=2)
    rng = np.random.default_rng(5)
    feats = rng.normal(scale=0.5, size=(64, ctl.ROD_FEATURES))
    feats[:, 10], feats[:, 11] = 70.0, 0.9
    l = np.full(64, 0.9)
    target = l - 0.001 * feats[:, 4]
    opt = nn.Adam(lr=1e-2)
    for _ in range(300):
        tape = Tape()
        bound = store.bind(tape)
        pred = ctl.rod_length_update(rod, bound, feats, l)
        loss = ad.mean((pred - target) ** 2) * 1e6
        opt.step(store, tape.backward(loss))
    dl = val(ctl.rod_length_update(rod, store.bind(), feats, l)) - l
    assert np.corrcoef(dl, feats[:, 4])[0, 1] < -0.9


def test_pd_only_upright_recovery():
    # negligible friction, zero-head nets: pure PD balance control
    model = sim.PhysicsModel.build(0, lstm_hidden=8, rod_hidden=(8, 8), inta_hidden=(8, 8))
    model.set_mu(1e-9)
    scn = sim.Scenario([sim.AgentInit(state=(0.0, 0.0, 0.05, 0.0))], horizon=180)
    traj = sim.simulate(scn, model)
    assert not traj.failed
    assert np.all(np.abs(traj.q[-30:, 0, 2]) < 0.01)
    assert np.abs(traj.q[-1, 0, 2]) < 0.01
