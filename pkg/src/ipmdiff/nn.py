"""Dense layers, an LSTM cell and Adam, all on the autodiff tape.

Parameters live in a :class:`ParamStore` (name -> float64 array). A forward
pass receives a *bound* mapping name -> Var produced by :meth:`ParamStore.bind`,
which decides per tape which parameters are watched.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, value_of

CHECKPOINT_MAGIC = b"IPMW0001"


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the global seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class ParamStore(OrderedDict):
    """Ordered mapping of parameter name to float64 array."""

    def add(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        self[name] = np.array(value, dtype=float)
        return name

    def bind(self, tape: Tape | None = None, trainable=None) -> dict[str, Var]:
        """Wrap every parameter as a Var; watched on ``tape`` if trainable."""
        out = {}
        for name, value in self.items():
            if tape is not None and (trainable is None or trainable(name)):
                out[name] = tape.parameter(name, value)
            else:
                out[name] = Var(value)
        return out

    def copy(self):
        return ParamStore((k, v.copy()) for k, v in self.items())

    def size(self):
        return int(sum(v.size for v in self.values()))


@dataclass
class DenseLayer:
    weight: str
    bias: str
    activation: str = "identity"

    def __call__(self, bound, x):
        W, b = bound[self.weight], bound[self.bias]
        if np.shape(value_of(x))[-1] != np.shape(value_of(W))[1]:
            raise ValueError(
                f"input width {np.shape(value_of(x))[-1]} does not match layer {self.weight} "
                f"expecting {np.shape(value_of(W))[1]}"
            )
        z = ad.matmul(ad.lift(x), ad.transpose(W)) + b
        if self.activation == "elu":
            return ad.elu(z)
        if self.activation == "identity":
            return z
        raise ValueError(f"unknown activation {self.activation!r}")


def add_dense(store: ParamStore, prefix, n_in, n_out, activation, rng, zero=False) -> DenseLayer:
    if zero:
        W = np.zeros((n_out, n_in))
        b = np.zeros(n_out)
    else:
        bound = 1.0 / math.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
    return DenseLayer(store.add(f"{prefix}.W", W), store.add(f"{prefix}.b", b), activation)


@dataclass
class MLP:
    layers: list[DenseLayer]

    def __call__(self, bound, x):
        for layer in self.layers:
            x = layer(bound, x)
        return x


def build_mlp(store, prefix, sizes, rng, activation="elu", zero_head=True) -> MLP:
    """``sizes = [in, h1, ..., out]``; hidden layers use ``activation``, the head is linear."""
    layers = []
    for k in range(len(sizes) - 1):
        last = k == len(sizes) - 2
        layers.append(
            add_dense(
                store,
                f"{prefix}.{k}",
                sizes[k],
                sizes[k + 1],
                "identity" if last else activation,
                rng,
                zero=last and zero_head,
            )
        )
    return MLP(layers)


def mlp_forward(layers, bound, x):
    return MLP(list(layers))(bound, x)


@dataclass
class LSTMCell:
    """Single-layer LSTM (gate order i, f, g, o) with a linear output head."""

    prefix: str
    n_in: int
    hidden: int
    n_out: int

    @property
    def names(self):
        p = self.prefix
        return f"{p}.W", f"{p}.b", f"{p}.head.W", f"{p}.head.b"

    def initial_state(self, batch: int):
        z = np.zeros((batch, self.hidden))
        return Var(z), Var(z.copy())

    def __call__(self, bound, x, state):
        W, b, Wh, bh = (bound[n] for n in self.names)
        h, c = state
        xv = np.shape(value_of(x))
        if xv[-1] != self.n_in:
            raise ValueError(f"LSTM input width {xv[-1]} != {self.n_in}")
        if np.shape(value_of(h))[-1] != self.hidden or np.shape(value_of(c))[-1] != self.hidden:
            raise ValueError("LSTM state width mismatch")
        z = ad.matmul(ad.concat([ad.lift(x), ad.lift(h)], axis=-1), ad.transpose(W)) + b
        H = self.hidden
        i = ad.sigmoid(z[..., 0:H])
        f = ad.sigmoid(z[..., H : 2 * H])
        g = ad.tanh(z[..., 2 * H : 3 * H])
        o = ad.sigmoid(z[..., 3 * H : 4 * H])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        out = ad.matmul(h_new, ad.transpose(Wh)) + bh
        return out, (h_new, c_new)


def build_lstm(store, prefix, n_in, hidden, n_out, rng, init_scale=0.01, zero_head=True) -> LSTMCell:
    cell = LSTMCell(prefix, n_in, hidden, n_out)
    W, b, Wh, bh = cell.names
    store.add(W, rng.uniform(-init_scale, init_scale, size=(4 * hidden, n_in + hidden)))
    store.add(b, rng.uniform(-init_scale, init_scale, size=4 * hidden))
    if zero_head:
        store.add(Wh, np.zeros((n_out, hidden)))
        store.add(bh, np.zeros(n_out))
    else:
        bound = 1.0 / math.sqrt(hidden)
        store.add(Wh, rng.uniform(-bound, bound, size=(n_out, hidden)))
        store.add(bh, rng.uniform(-bound, bound, size=n_out))
    return cell


def lstm_step(cell: LSTMCell, bound, x, state):
    return cell(bound, x, state)


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ParamStore, grads: dict, lr: float | None = None):
        """Apply one bias-corrected Adam update in place to ``params[name]`` for each grad."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            g = np.asarray(g, dtype=float)
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_update(params, grads, state: Adam, lr=None):
    return state.step(params, grads, lr)


# checkpoint file ------------------------------------------------------------
#
# layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then the
# concatenated little-endian float64 data. Header offsets are byte offsets
# into the data section.


def save_weights(path, params: ParamStore, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_weights(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    data = raw[16 + hlen :]
    store = ParamStore()
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=int))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        store[e["name"]] = arr.astype(float)
    return store, header.get("meta", {})
