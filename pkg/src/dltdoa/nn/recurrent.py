"""LSTM layer and the encoder-decoder sequence model built from it."""

from __future__ import annotations

import numpy as np

from .layers import Dense, Layer, LayerSpec, Tanh, sigmoid


def _orthogonal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if n >= m else q.T


class LSTM(Layer):
    """Single LSTM layer over (B, T, D) inputs, returning all hidden states.

    Gate order in the fused weights is input, forget, cell, output. The
    final state of the last ``forward`` is kept in ``final_state`` and the
    gradient w.r.t. the initial state in ``initial_state_grad``.
    """

    kind = "lstm"

    def __init__(self, input_dim: int, units: int, rng: np.random.Generator, dtype=np.float64,
                 forget_bias: float = 1.0):
        super().__init__()
        self.input_dim, self.units = input_dim, units
        H = units
        limit = np.sqrt(6.0 / (input_dim + 4 * H))
        self.params["W"] = rng.uniform(-limit, limit, (input_dim, 4 * H)).astype(dtype)
        self.params["U"] = np.concatenate([_orthogonal(rng, H, H) for _ in range(4)], axis=1).astype(dtype)
        b = np.zeros(4 * H, dtype=dtype)
        b[H : 2 * H] = forget_bias
        self.params["b"] = b
        self.final_state: tuple[np.ndarray, np.ndarray] | None = None
        self.initial_state_grad: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x, training=False, initial_state=None):
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ValueError(f"lstm expects (B, T, {self.input_dim}), got {x.shape}")
        B, T, _ = x.shape
        H = self.units
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if initial_state is None:
            h = np.zeros((B, H), dtype=W.dtype)
            c = np.zeros((B, H), dtype=W.dtype)
        else:
            h, c = initial_state
        xw = x @ W + b
        hs = np.empty((B, T, H), dtype=W.dtype)
        steps = []
        for t in range(T):
            z = xw[:, t] + h @ U
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((h, c, i, f, g, o, tc))
            h, c = h_new, c_new
            hs[:, t] = h
        self.final_state = (h, c)
        self._cache = (x, steps)
        return hs

    def step(self, x_t, state):
        """One cell update; returns the new (h, c)."""
        H = self.units
        h, c = state
        z = x_t @ self.params["W"] + self.params["b"] + h @ self.params["U"]
        i, f = sigmoid(z[:, :H]), sigmoid(z[:, H : 2 * H])
        g, o = np.tanh(z[:, 2 * H : 3 * H]), sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        return o * np.tanh(c), c

    def backward(self, grad, final_state_grad=None):
        x, steps = self._cached()
        B, T, _ = x.shape
        H = self.units
        U = self.params["U"]
        dz_all = np.empty((B, T, 4 * H), dtype=grad.dtype)
        if final_state_grad is None:
            dh_next = np.zeros((B, H), dtype=grad.dtype)
            dc_next = np.zeros((B, H), dtype=grad.dtype)
        else:
            dh_next, dc_next = final_state_grad
        dU = np.zeros_like(U)
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            dh = grad[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), do * o * (1.0 - o)],
                axis=1,
            )
            dz_all[:, t] = dz
            dU += h_prev.T @ dz
            dh_next = dz @ U.T
            dc_next = dc * f
        self.grads["W"] = x.reshape(B * T, -1).T @ dz_all.reshape(B * T, -1)
        self.grads["U"] = dU
        self.grads["b"] = dz_all.sum(axis=(0, 1))
        self.initial_state_grad = (dh_next, dc_next)
        return dz_all @ self.params["W"].T

    def output_shape(self, shape):
        return (shape[0], self.units)

    def spec(self):
        return LayerSpec(self.kind, {"input_dim": self.input_dim, "units": self.units})


class EncoderDecoder:
    """Stacked LSTM encoder-decoder with a time-distributed dense head.

    encoder: LSTM(e1) -> LSTM(e2); the decoder input is the encoder's last
    hidden vector repeated ``n_out`` times. Decoder LSTM(d1) starts from the
    second encoder layer's final state (so d1 == e2), followed by LSTM(d2),
    then dense(head) -> tanh -> dense(out_dim) at every output step.
    """

    def __init__(self, input_dim: int, n_out: int, seed: int, units=(32, 32, 32, 64), head: int = 64,
                 out_dim: int = 2, dtype=np.float64):
        e1, e2, d1, d2 = units
        if d1 != e2:
            raise ValueError("the first decoder layer must match the encoder state size")
        rng = np.random.default_rng(seed)
        self.input_dim, self.n_out, self.units, self.head_units, self.out_dim = input_dim, n_out, tuple(units), head, out_dim
        self.enc1 = LSTM(input_dim, e1, rng, dtype)
        self.enc2 = LSTM(e1, e2, rng, dtype)
        self.dec1 = LSTM(e2, d1, rng, dtype)
        self.dec2 = LSTM(d1, d2, rng, dtype)
        self.fc1 = Dense(d2, head, rng, dtype)
        self.act = Tanh()
        self.fc2 = Dense(head, out_dim, rng, dtype)

    @property
    def _named_layers(self):
        return [("enc1", self.enc1), ("enc2", self.enc2), ("dec1", self.dec1), ("dec2", self.dec2),
                ("fc1", self.fc1), ("fc2", self.fc2)]

    def forward(self, x, training: bool = False):
        h1 = self.enc1.forward(x)
        h2 = self.enc2.forward(h1)
        state = self.enc2.final_state
        rep = np.repeat(h2[:, -1:, :], self.n_out, axis=1)
        d1 = self.dec1.forward(rep, initial_state=state)
        d2 = self.dec2.forward(d1)
        return self.fc2.forward(self.act.forward(self.fc1.forward(d2)))

    __call__ = forward

    def backward(self, grad):
        g = self.fc2.backward(grad)
        g = self.act.backward(g)
        g = self.fc1.backward(g)
        g = self.dec2.backward(g)
        g_rep = self.dec1.backward(g)
        dh0, dc0 = self.dec1.initial_state_grad
        g_h2 = np.zeros(self.enc2._cached()[0].shape[:2] + (self.units[1],), dtype=grad.dtype)
        g_h2[:, -1] += g_rep.sum(axis=1)
        g = self.enc2.backward(g_h2, final_state_grad=(dh0, dc0))
        return self.enc1.backward(g)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self._named_layers for k, v in layer.params.items()}

    def named_gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self._named_layers for k, v in layer.grads.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())
