"""Multiplicative LSTM sequence regressor in plain numpy.

One recurrent layer over scalar inputs followed by a linear read-out of the
last hidden state. Per step::

    m   = (W_mx x) * (h_prev @ W_mh)
    z   = x W_x + m @ W_m + b            (split into i, f, o, g)
    c   = sigmoid(f) * c_prev + sigmoid(i) * tanh(g)
    h   = sigmoid(o) * tanh(c)
    y   = h_T @ w_y + b_y

Gradients are computed by backpropagation through time and the model is
trained full-batch with Adam on mean squared error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

PARAM_NAMES = ("W_mx", "W_mh", "W_x", "W_m", "b", "w_y", "b_y")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MLSTM:
    hidden: int = 32
    seed: int = 0
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = self.init_params(self.hidden, self.seed)

    @staticmethod
    def init_params(hidden: int, seed: int) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        H = hidden
        s = 1.0 / np.sqrt(H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate starts open
        return {
            "W_mx": rng.normal(0, 1.0, H),
            "W_mh": rng.normal(0, s, (H, H)),
            "W_x": rng.normal(0, 1.0, 4 * H),
            "W_m": rng.normal(0, s, (H, 4 * H)),
            "b": b,
            "w_y": rng.normal(0, s, H),
            "b_y": np.zeros(1),
        }

    # -- forward / backward ---------------------------------------------------

    def forward(self, X: np.ndarray, keep: bool = False):
        """``X`` has shape (batch, steps). Returns predictions (batch,) and the tape if ``keep``."""
        p = self.params
        H = self.hidden
        B, T = X.shape
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        tape = []
        for t in range(T):
            x = X[:, t:t + 1]
            xw = x * p["W_mx"]
            hm = h @ p["W_mh"]
            m = xw * hm
            z = x * p["W_x"] + m @ p["W_m"] + p["b"]
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            o = _sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            if keep:
                tape.append((x, h, c, xw, hm, m, i, f, o, g, tc))
            h, c = h_new, c_new
        y = h @ p["w_y"] + p["b_y"][0]
        return (y, (tape, h)) if keep else y

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray):
        p = self.params
        H = self.hidden
        y, (tape, h_last) = self.forward(X, keep=True)
        B = X.shape[0]
        err = y - Y
        loss = float(np.mean(err ** 2))
        dy = 2.0 * err / B
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["w_y"] = h_last.T @ dy
        grads["b_y"] = np.array([dy.sum()])
        dh = np.outer(dy, p["w_y"])
        dc = np.zeros((B, H))
        W_m_T = p["W_m"].T
        W_mh_T = p["W_mh"].T
        for x, h_prev, c_prev, xw, hm, m, i, f, o, g, tc in reversed(tape):
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc ** 2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g ** 2)], axis=1
            )
            grads["W_x"] += (dz * x).sum(0)
            grads["W_m"] += m.T @ dz
            grads["b"] += dz.sum(0)
            dm = dz @ W_m_T
            dxw = dm * hm
            dhm = dm * xw
            grads["W_mx"] += (dxw * x).sum(0)
            grads["W_mh"] += h_prev.T @ dhm
            dh = dhm @ W_mh_T
            dc = dc * f
        return loss, grads

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.forward(X)

    # -- training -----------------------------------------------------------------

    def fit(self, X, Y, epochs: int = 600, lr: float = 0.01, clip: float = 5.0,
            X_val=None, Y_val=None, tol: float = 0.0) -> List[float]:
        """Full-batch Adam. Returns the per-epoch training loss history."""
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        b1, b2, eps = 0.9, 0.999, 1e-8
        mom = {k: np.zeros_like(v) for k, v in self.params.items()}
        vel = {k: np.zeros_like(v) for k, v in self.params.items()}
        history = []
        for step in range(1, epochs + 1):
            loss, grads = self.loss_and_grad(X, Y)
            history.append(loss)
            if loss <= tol:
                break
            norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
            scale = clip / norm if norm > clip else 1.0
            for k, g in grads.items():
                g = g * scale
                mom[k] = b1 * mom[k] + (1 - b1) * g
                vel[k] = b2 * vel[k] + (1 - b2) * g * g
                mhat = mom[k] / (1 - b1 ** step)
                vhat = vel[k] / (1 - b2 ** step)
                self.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
        return history

    def copy(self) -> "MLSTM":
        return MLSTM(self.hidden, self.seed, {k: v.copy() for k, v in self.params.items()})
