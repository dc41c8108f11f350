import numpy as np
import pytest

from ipmdiff import autodiff as ad
from ipmdiff import nn
from ipmdiff.autodiff import Tape


def test_streams_are_independent_and_reproducible():
    a = nn.stream(3, "rod").normal(size=5)
    assert np.array_equal(a, nn.stream(3, "rod").normal(size=5))
    assert not np.array_equal(a, nn.stream(3, "self_nn").normal(size=5))
    assert not np.array_equal(a, nn.stream(4, "rod").normal(size=5))


def test_hidden_init_bounds_and_zero_head():
    store = nn.ParamStore()
    nn.build_mlp(store, "m", [12, 128, 128, 1], np.random.default_rng(0))
    assert np.abs(store["m.0.W"]).max() <= 1 / np.sqrt(12)
    assert np.abs(store["m.1.W"]).max() <= 1 / np.sqrt(128)
    assert not np.any(store["m.2.W"]) and not np.any(store["m.2.b"])
    store2 = nn.ParamStore()
    nn.build_lstm(store2, "c", 7, 256, 4, np.random.default_rng(0))
    assert store2["c.W"].shape == (1024, 263)
    assert np.abs(store2["c.W"]).max() <= 0.01
    assert not np.any(store2["c.head.W"])


def test_duplicate_parameter_rejected():
    store = nn.ParamStore()
    store.add("a", 1.0)
    with pytest.raises(KeyError):
        store.add("a", 2.0)


def test_dense_layer_width_check():
    store = nn.ParamStore()
    mlp = nn.build_mlp(store, "m", [3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError, match="expecting 3"):
        mlp(store.bind(), np.zeros(5))


def test_lstm_matches_reference_equations():
    rng = np.random.default_rng(1)
    store = nn.ParamStore()
    cell = nn.build_lstm(store, "c", 3, 5, 2, rng, init_scale=0.5, zero_head=False)
    x = rng.normal(size=(2, 3))
    h0, c0 = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    out, (h, c) = cell(store.bind(), x, (ad.Var(h0), ad.Var(c0)))

    def sig(z):
        return 1 / (1 + np.exp(-z))

    z = np.concatenate([x, h0], axis=1) @ store["c.W"].T + store["c.b"]
    i, f, g, o = sig(z[:, :5]), sig(z[:, 5:10]), np.tanh(z[:, 10:15]), sig(z[:, 15:])
    c_ref = f * c0 + i * g
    h_ref = o * np.tanh(c_ref)
    assert np.allclose(c.value, c_ref, atol=1e-14) and np.allclose(h.value, h_ref, atol=1e-14)
    assert np.allclose(out.value, h_ref @ store["c.head.W"].T + store["c.head.b"], atol=1e-14)


def test_adam_first_step_moves_by_lr_times_sign():
    store = nn.ParamStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    nn.Adam(lr=0.1).step(store, {"w": np.array([5.0, -0.01, 0.0])})
    assert store["w"] == pytest.approx([0.9, -1.9, 3.0], abs=1e-6)


def test_adam_minimises_quadratic():
    store = nn.ParamStore()
    store.add("w", np.array([3.0, -4.0]))
    opt = nn.Adam(lr=0.05)
    for _ in range(500):
        tape = Tape()
        w = store.bind(tape)["w"]
        opt.step(store, tape.backward(ad.vsum((w - np.array([1.0, 2.0])) ** 2)))
    assert store["w"] == pytest.approx([1.0, 2.0], abs=1e-3)


def test_adam_rejects_non_finite_gradient():
    store = nn.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(FloatingPointError, match="'w'"):
        nn.Adam().step(store, {"w": np.array([np.nan, 0.0])})
    assert np.array_equal(store["w"], np.zeros(2))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    store = nn.ParamStore()
    nn.build_mlp(store, "m", [4, 6, 1], np.random.default_rng(0), zero_head=False)
    store.add("scalar", 0.123456789)
    path = tmp_path / "w.ipmw"
    nn.save_weights(path, store, {"seed": 7})
    loaded, meta = nn.load_weights(path)
    assert meta == {"seed": 7}
    assert list(loaded) == list(store)
    for k in store:
        assert loaded[k].shape == store[k].shape
        assert np.array_equal(loaded[k], store[k])
    # header is JSON, data little-endian float64
    raw = path.read_bytes()
    assert raw[:8] == nn.CHECKPOINT_MAGIC


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ipmw"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a weight checkpoint"):
        nn.load_weights(p)


def test_bind_watches_only_trainable():
    store = nn.ParamStore()
    store.add("a", 1.0)
    store.add("b", 2.0)
    tape = Tape()
    bound = store.bind(tape, trainable=lambda n: n == "a")
    assert bound["a"].tape is tape and bound["b"].tape is None
    assert set(tape.backward(bound["a"] * bound["b"])) == {"a"}
