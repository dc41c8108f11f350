import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipmdiff import autodiff as ad
from ipmdiff import interaction as inta
from ipmdiff import nn
from ipmdiff.autodiff import Tape

from oracles import semi_minor_axis as b_oracle

PRM = inta.InteractionParams()
DT = 1 / 60

# reference sign tables, row = class of n, column = class of j, entry = "BE/BA"
THETA_ROWS = {
    "Pos": ["1/-1", "0/-1", "0/-1"],
    "Zero": ["1/0", "0/0", "0/-1"],
    "Neg": ["1/0", "1/0", "1/-1"],
}
PHI_ROWS = {
    "Pos": ["-1/1", "-1/0", "-1/0"],
    "Zero": ["0/1", "0/0", "-1/0"],
    "Neg": ["0/1", "0/1", "-1/1"],
}
COLS = ["Pos", "Zero", "Neg"]
SAMPLE = {"Pos": 0.2, "Zero": 0.004, "Neg": -0.2}


def _cases():
    for which, rows in (("theta", THETA_ROWS), ("phi", PHI_ROWS)):
        for rn, entries in rows.items():
            for cj, entry in zip(COLS, entries):
                be, ba = (int(v) for v in entry.split("/"))
                yield which, rn, cj, "BE", be
                yield which, rn, cj, "BA", ba


CASES = list(_cases())


def test_table_has_36_cases():
    assert len(CASES) == 36


@pytest.mark.parametrize("which, cls_n, cls_j, side, expected", CASES)
def test_sign_table(which, cls_n, cls_j, side, expected):
    x = 0.3 if side == "BE" else -0.3
    assert inta.angular_sign(SAMPLE[cls_n], SAMPLE[cls_j], x, 0.01, which) == expected


def test_classification_band_edges():
    assert inta.classify(0.01, 0.01) == "Zero" and inta.classify(-0.01, 0.01) == "Zero"
    assert inta.classify(0.0100001, 0.01) == "Pos" and inta.classify(-0.0100001, 0.01) == "Neg"


# neighbourhood -------------------------------------------------------------------


def test_neighbourhood_examples():
    assert inta.neighborhood(np.array([[0, 0], [0.4, 0]]), 0) == {1}
    assert inta.neighborhood(np.array([[0, 0], [0.4, 0]]), 1) == {0}
    assert inta.neighborhood(np.array([[0, 0], [0.6, 0]]), 0) == set()
    line = np.column_stack([np.arange(10) * 0.4, np.zeros(10)])
    for n in range(1, 9):
        assert inta.neighborhood(line, n) == {n - 1, n + 1}
    assert inta.neighborhood(line, 0) == {1}


# semi-minor axis -----------------------------------------------------------------


def test_b_equals_distance_at_rest():
    b, clamped = inta.semi_minor_axis(np.array([0.3, 0.4]), np.zeros(2), DT)
    assert float(b.value) == pytest.approx(0.5, abs=1e-15) and not clamped.any()


def test_b_against_high_precision_value():
    b, _ = inta.semi_minor_axis(np.array([0.4, 0.0]), np.array([1.0, 0.0]), DT)
    exact = float(b_oracle([0.4, 0.0], [1.0, 0.0], DT))
    assert float(b.value) == pytest.approx(exact, abs=1e-12)
    assert float(b.value) == pytest.approx(0.391577, abs=1e-5)  # quoted value is truncated


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(-math.pi, math.pi), st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_b_rotation_invariant(r, ang, vx, vy, rot):
    rv = np.array([r * math.cos(ang), r * math.sin(ang)])
    vv = np.array([vx, vy])
    R = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    b1, _ = inta.semi_minor_axis(rv, vv, DT)
    b2, _ = inta.semi_minor_axis(R @ rv, R @ vv, DT)
    assert float(b1.value) == pytest.approx(float(b2.value), rel=1e-12, abs=1e-14)


def test_degenerate_radicand_is_clamped_and_counted():
    diag = inta.Diagnostics()
    # closing speed so large that r - dt * rdot lands on the origin
    b, clamped = inta.semi_minor_axis(np.array([0.3, 0.0]), np.array([18.0, 0.0]), DT, diag)
    assert clamped.all() and float(b.value) == 0.0 and diag.radicand_clamps == 1
    f = inta.repulsive_force_xy(np.array([0.3, 0.0]), np.array([18.0, 0.0]), PRM, DT)
    assert np.all(np.isfinite(f.value))


# repulsive force --------------------------------------------------------------------


def test_repulsive_example():
    f = inta.repulsive_force_xy(np.array([0.3, 0.0]), np.zeros(2), PRM, DT).value
    assert f == pytest.approx([150 / 0.5 * math.exp(-0.6), 0.0], abs=1e-12)
    assert f[0] == pytest.approx(164.64, abs=5e-3)


def test_repulsive_force_is_negative_potential_gradient():
    for r, v in [([0.4, 0.0], [1.0, 0.0]), ([0.2, -0.3], [0.5, 2.0]), ([-0.1, 0.35], [-1.5, 0.4])]:
        tape = Tape()
        rv = tape.parameter("r", np.array(r))
        grad = tape.backward(inta.potential(rv, np.array(v), PRM, DT))["r"]
        f = inta.repulsive_force_xy(np.array(r), np.array(v), PRM, DT).value
        assert np.allclose(f, -grad, rtol=1e-12, atol=1e-12)


def test_repulsive_force_matches_finite_difference_of_potential():
    r0, v = np.array([0.4, 0.0]), np.array([1.0, 0.0])
    h = 1e-6
    fd = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        up = float(inta.potential(r0 + e, v, PRM, DT).value)
        dn = float(inta.potential(r0 - e, v, PRM, DT).value)
        fd.append(-(up - dn) / (2 * h))
    f = inta.repulsive_force_xy(r0, v, PRM, DT).value
    assert np.all(np.abs(f - fd) / np.maximum(1, np.abs(fd)) < 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.02, 1.0), st.floats(-math.pi, math.pi))
def test_static_repulsion_is_radial_with_closed_form_magnitude(r, ang):
    rv = np.array([r * math.cos(ang), r * math.sin(ang)])
    f = inta.repulsive_force_xy(rv, np.zeros(2), PRM, DT).value
    mag = PRM.u / PRM.sigma * math.exp(-r / PRM.sigma)
    assert np.allclose(f, mag * rv / r, rtol=1e-12, atol=1e-12)


def test_static_repulsion_decreases_with_distance():
    rs = np.linspace(0.05, 1.0, 40)
    mags = [np.linalg.norm(inta.repulsive_force_xy(np.array([r, 0.0]), np.zeros(2), PRM, DT).value) for r in rs]
    assert np.all(np.diff(mags) < 0)


def test_overlap_raises():
    with pytest.raises(inta.AgentOverlapError, match="agent overlap"):
        inta.repulsive_force_xy(np.array([1e-8, 0.0]), np.zeros(2), PRM, DT)


# assembled force ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def zero_net():
    store = nn.ParamStore()
    net = inta.build_interaction_net(store, 0, hidden=(8, 8))
    return net, store


def test_upright_pair_example(zero_net):
    net, store = zero_net
    f = inta.interaction_force(np.array([0.3, 0, 0, 0.0]), np.zeros(4), np.zeros(4), np.zeros(4), net,
                               store.bind()).value
    assert f == pytest.approx([164.64, 0, 0, 0], abs=5e-3)


def test_theta_push_example(zero_net):
    net, store = zero_net
    f = inta.interaction_force(np.array([0.3, 0, 0.2, 0.0]), np.zeros(4), np.array([0, 0, 0.2, 0.0]), np.zeros(4),
                               net, store.bind()).value
    assert f[2] == 100.0 and f[3] == 0.0


def test_empty_neighbourhood_gives_zero(zero_net):
    net, store = zero_net
    q = np.array([[0, 0, 0.1, 0], [2.0, 0, -0.1, 0.1]])
    f = inta.interaction_forces(q, np.ones((2, 4)), np.zeros(2), net, store.bind())
    assert np.array_equal(f.value, np.zeros((2, 4)))


def test_scene_force_is_sum_of_pair_forces():
    store = nn.ParamStore()
    net = inta.build_interaction_net(store, 0, hidden=(8, 8))
    store["inta.2.W"] = np.random.default_rng(0).normal(size=store["inta.2.W"].shape)
    bound = store.bind()
    rng = np.random.default_rng(1)
    q = np.array([[0, 0, 0.1, 0.0], [0.3, 0.1, -0.1, 0.05], [0.1, 0.35, 0.0, -0.2], [0.4, 0.4, 0.2, 0.0]])
    qd = rng.normal(size=(4, 4))
    yaw = np.array([0.0, 0.3, -0.2, 0.1])
    total = inta.interaction_forces(q, qd, yaw, net, bound).value
    for n in range(4):
        expected = np.zeros(4)
        for j in inta.neighborhood(q[:, :2], n):
            expected += inta.interaction_force(q[n], qd[n], q[j], qd[j], net, bound, yaw_n=yaw[n]).value
        assert np.allclose(total[n], expected, atol=1e-12)


def test_translation_invariance(zero_net):
    net, store = zero_net
    q = np.array([[0, 0, 0.1, 0.0], [0.3, 0.1, -0.1, 0.05], [0.1, 0.35, 0.0, -0.2]])
    qd = np.random.default_rng(2).normal(size=(3, 4))
    shifted = q.copy()
    shifted[:, :2] += [5.0, -3.0]
    a = inta.interaction_forces(q, qd, np.zeros(3), net, store.bind()).value
    b = inta.interaction_forces(shifted, qd, np.zeros(3), net, store.bind()).value
    assert np.allclose(a, b, atol=1e-10)


def test_sign_terms_carry_no_gradient(zero_net):
    net, store = zero_net
    tape = Tape()
    qj = tape.parameter("qj", np.array([0.0, 0.0, 0.2, 0.3]))
    f = inta.interaction_force(np.array([0.3, 0, 0.2, 0.1]), np.zeros(4), qj, np.zeros(4), net, store.bind())
    g = tape.backward(f[2] + f[3])["qj"]
    assert np.array_equal(g[2:], [0.0, 0.0])
    # perturbing theta_j inside its band leaves the angular term unchanged
    f2 = inta.interaction_force(np.array([0.3, 0, 0.2, 0.1]), np.zeros(4), np.array([0.0, 0.0, 0.25, 0.3]),
                                np.zeros(4), net, store.bind())
    assert f.value[2] == f2.value[2]


def test_before_behind_uses_local_frame(zero_net):
    net, store = zero_net
    # j is behind n in world x, but n faces -x so j is in front in n's frame
    qn = np.array([0.0, 0.0, 0.2, 0.0])
    qj = np.array([0.3, 0.0, 0.2, 0.0])
    f_world = inta.interaction_force(qn, np.zeros(4), qj, np.zeros(4), net, store.bind(), yaw_n=0.0).value
    f_turned = inta.interaction_force(qn, np.zeros(4), qj, np.zeros(4), net, store.bind(), yaw_n=math.pi).value
    assert f_world[2] == -100.0 and f_turned[2] == 100.0
    # repulsion pushes n away from j: world -x is local +x when facing -x
    assert f_world[0] < 0 < f_turned[0]


def test_invalid_params_rejected():
    with pytest.raises(ValueError, match="sigma"):
        inta.InteractionParams(sigma=0.0)


def test_gradients_reach_the_net_weights():
    store = nn.ParamStore()
    net = inta.build_interaction_net(store, 0, hidden=(8, 8))
    tape = Tape()
    bound = store.bind(tape)
    f = inta.interaction_force(np.array([0.3, 0, 0.1, 0]), np.array([0.5, 0, 0, 0]), np.zeros(4), np.zeros(4), net,
                               bound)
    grads = tape.backward(ad.vsum(f * np.array([1.0, 2.0, 3.0, 4.0])))
    assert np.any(grads["inta.2.W"]) and np.any(grads["inta.2.b"])
    assert not np.any(grads["inta.0.W"])  # zero head blocks hidden-layer gradients at init
