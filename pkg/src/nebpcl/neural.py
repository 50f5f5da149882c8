"""Dense MLPs and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch

OUTPUT_ACTIVATIONS = {
    "identity": lambda x: x,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "softplus-positive": ad.softplus,
}


@dataclass(frozen=True)
class Mlp:
    """Fully connected network ``affine -> leaky-ReLU -> ... -> affine -> head``.

    ``output_scale`` is a fixed (non-trainable) factor applied after the head.
    """

    weights: tuple
    biases: tuple
    output_activation: str = "identity"
    output_scale: float = 1.0
    hidden_activation: str = "leaky-relu"

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "leaky-relu":
            raise ValueError("only leaky-relu hidden units are supported")
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape}, bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {k} input width {w.shape[0]} != {self.weights[k - 1].shape[1]}")

    @classmethod
    def init(cls, widths, output_activation="identity", rng=None, *, output_scale=1.0,
             output_gain=1.0, output_bias=0.0) -> Mlp:
        """Glorot-uniform weights, zero biases.

        ``output_gain`` multiplies the last weight matrix (0 gives a constant
        network) and ``output_bias`` fills the last bias.
        """
        rng = np.random.default_rng(rng)
        ws, bs = [], []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if k == len(widths) - 2:
                w = w * output_gain
                b = b + output_bias
            ws.append(w)
            bs.append(b)
        return cls(tuple(ws), tuple(bs), output_activation, output_scale)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params) -> Mlp:
        params = list(params)
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "output_activation": self.output_activation,
            "output_scale": self.output_scale,
            "hidden_activation": self.hidden_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> Mlp:
        net = cls(
            tuple(np.array(w, dtype=float) for w in d["weights"]),
            tuple(np.array(b, dtype=float) for b in d["biases"]),
            d["output_activation"],
            float(d["output_scale"]),
            d.get("hidden_activation", "leaky-relu"),
        )
        if net.widths != list(d["widths"]):
            raise ShapeMismatch(f"stored widths {d['widths']} do not match parameters {net.widths}")
        return net


def bind(net: Mlp, tape: ad.Tape) -> list:
    """Parameter leaves of ``net`` on ``tape`` (created once per tape)."""
    cache = tape._bound
    key = id(net)
    if key not in cache:
        cache[key] = (net, [tape.param(p) for p in net.params])
    return cache[key][1]


def mlp_forward(net: Mlp, x, tape: ad.Tape | None = None):
    """Apply ``net`` to ``x`` of shape ``(in,)`` or ``(batch, in)``.

    With a tape the parameters are recorded as leaves; ``x`` may be an array
    or a ``Var``.
    """
    width = np.shape(ad.value(x))[-1]
    if width != net.widths[0]:
        raise ShapeMismatch(f"input width {width} != {net.widths[0]}")
    params = bind(net, tape) if tape is not None else net.params
    h = x
    last = len(net.weights) - 1
    for k in range(len(net.weights)):
        h = ad.matmul(h, params[2 * k]) + params[2 * k + 1]
        h = ad.leaky_relu(h) if k < last else OUTPUT_ACTIVATIONS[net.output_activation](h)
    if net.output_scale != 1.0:
        h = h * net.output_scale
    return h


def mlp_gradients(net: Mlp, tape: ad.Tape, grads: dict) -> list[np.ndarray]:
    """Gradient arrays aligned with ``net.params``; zeros if ``net`` never ran on ``tape``."""
    cache = tape._bound
    if id(net) not in cache:
        return [np.zeros_like(p) for p in net.params]
    return [grads[v] for v in cache[id(net)][1]]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step": self.step, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, d) -> AdamState:
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
                   [np.array(a, dtype=float) for a in d["m"]], [np.array(a, dtype=float) for a in d["v"]])


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    if len(m) != len(params):
        raise ShapeMismatch("optimizer state does not match parameter list")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, mk, vk in zip(params, grads, m, v):
        if p.shape != g.shape or p.shape != mk.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        mk = state.beta1 * mk + (1 - state.beta1) * g
        vk = state.beta2 * vk + (1 - state.beta2) * g * g
        m_hat = mk / (1 - state.beta1**t)
        v_hat = vk / (1 - state.beta2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(mk)
        new_v.append(vk)
    return new_params, replace(state, step=t, m=new_m, v=new_v)
