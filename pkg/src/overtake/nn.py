"""Minimal dense network engine: MLP forward/backward, Adam, checkpoints.

Parameters and activations are float32. Hidden layers are ReLU, outputs are
linear. Backward passes are exact reverse-mode gradients computed against the
cached forward activations, which keeps the whole stack free of framework
dependencies and bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigurationError

CHECKPOINT_MAGIC = b"OVTCKPT1"


class Mlp:
    """Fully connected ReLU network with linear outputs.

    sizes = [in, h1, ..., out]; weights[i] has shape (sizes[i], sizes[i+1]).
    Production networks are float32; float64 exists for numerical checks.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.sizes = list(int(s) for s in sizes)
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            if rng is None:
                w = np.zeros((fan_in, fan_out), dtype=self.dtype)
            else:
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(self.dtype)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        clone = Mlp(self.sizes, rng=None, dtype=self.dtype)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def forward(self, x: np.ndarray):
        """Returns (outputs, cache); cache feeds backward()."""
        a = np.ascontiguousarray(x, dtype=self.dtype)
        if a.ndim != 2 or a.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input shape (n, {self.sizes[0]}), got {x.shape}")
        inputs = [a]
        for i in range(self.n_layers):
            z = a @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                a = np.maximum(z, 0.0)
            else:
                a = z
            inputs.append(a)
        return a, inputs

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_output: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(outputs).

        Returns (param_grads, input_grad) with param_grads matching
        parameters() order.
        """
        if len(cache) != self.n_layers + 1:
            raise ValueError("forward cache does not match this network")
        delta = np.ascontiguousarray(grad_output, dtype=self.dtype)
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                delta = delta * (cache[i + 1] > 0.0)
            grads_w[i] = cache[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        return out, delta


class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update; returns (params, state)."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("parameter/gradient/state lengths differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """target <- (1 - tau) * target + tau * online, element-wise."""
    if target.sizes != online.sizes:
        raise ValueError("shape mismatch between target and online networks")
    for tp, op in zip(target.parameters(), online.parameters()):
        tp += tau * (op - tp)
    return target


# -- checkpoint serialization ----------------------------------------------------


def _write_str(f, s: str) -> None:
    raw = s.encode()
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode()


def _write_array(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(f) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, networks: dict, adam_states: dict, scalars: dict,
                    layout_hash: int) -> None:
    """Persist named networks, Adam states and scalars with the layout hash."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(networks)))
        for name, net in networks.items():
            _write_str(f, name)
            f.write(struct.pack("<I", len(net.sizes)))
            f.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
            for p in net.parameters():
                f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(adam_states)))
        for name, st in adam_states.items():
            _write_str(f, name)
            f.write(struct.pack("<Qdddd", st.t, st.lr, st.beta1, st.beta2, st.eps))
            f.write(struct.pack("<I", len(st.m)))
            for arr in st.m:
                _write_array(f, arr)
            for arr in st.v:
                _write_array(f, arr)
        f.write(struct.pack("<I", len(scalars)))
        for name, value in scalars.items():
            _write_str(f, name)
            f.write(struct.pack("<d", float(value)))
        f.write(struct.pack("<Q", layout_hash))


def load_checkpoint(path):
    """Returns (networks, adam_states, scalars, layout_hash)."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint file")
        networks: dict[str, Mlp] = {}
        (n_nets,) = struct.unpack("<I", f.read(4))
        for _ in range(n_nets):
            name = _read_str(f)
            (n_sizes,) = struct.unpack("<I", f.read(4))
            sizes = struct.unpack(f"<{n_sizes}I", f.read(4 * n_sizes))
            net = Mlp(sizes, rng=None)
            for p in net.parameters():
                data = np.frombuffer(f.read(4 * p.size), dtype="<f4")
                p[...] = data.reshape(p.shape)
            networks[name] = net
        adam_states: dict[str, AdamState] = {}
        (n_adam,) = struct.unpack("<I", f.read(4))
        for _ in range(n_adam):
            name = _read_str(f)
            t, lr, b1, b2, eps = struct.unpack("<Qdddd", f.read(40))
            (n_tensors,) = struct.unpack("<I", f.read(4))
            m = [_read_array(f) for _ in range(n_tensors)]
            v = [_read_array(f) for _ in range(n_tensors)]
            st = AdamState(m, lr=lr, beta1=b1, beta2=b2, eps=eps)
            st.t = t
            st.m, st.v = m, v
            adam_states[name] = st
        scalars: dict[str, float] = {}
        (n_scalars,) = struct.unpack("<I", f.read(4))
        for _ in range(n_scalars):
            name = _read_str(f)
            (value,) = struct.unpack("<d", f.read(8))
            scalars[name] = value
        (layout_hash,) = struct.unpack("<Q", f.read(8))
    return networks, adam_states, scalars, layout_hash
