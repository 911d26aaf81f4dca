"""MLPs and the Adam optimizer on top of the tape.

Networks are plain parameter containers; `forward` records on the tape,
`forward_np` is a tape-free replay of the same affine chain for hot
inner loops (root finding, ray marching) where no gradients are needed.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Tensor

_HIDDEN_ACTS = ("softplus", "relu", "none")
_OUT_ACTS = ("sigmoid", "tanh", "none")


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


class Mlp:
    """Fully-connected stack with one hidden activation and one output activation.

    widths chains layer sizes: widths[0] is the input dim, widths[-1] the
    output dim. Parameter count is fixed at construction.
    """

    def __init__(self, widths: list[int], hidden_act: str = "softplus",
                 out_act: str = "none", rng: np.random.Generator | None = None,
                 zero_init_last: bool = False):
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"bad layer widths {widths}")
        if hidden_act not in _HIDDEN_ACTS:
            raise ValueError(f"hidden_act must be one of {_HIDDEN_ACTS}")
        if out_act not in _OUT_ACTS:
            raise ValueError(f"out_act must be one of {_OUT_ACTS}")
        self.widths = list(widths)
        self.hidden_act = hidden_act
        self.out_act = out_act
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if rng is None:
                w = np.zeros((n_in, n_out), dtype=np.float32)
            elif zero_init_last and i == len(widths) - 2:
                w = np.zeros((n_in, n_out), dtype=np.float32)
            else:
                w = glorot_init(rng, n_in, n_out)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"layer{i}/w", w))
            out.append((f"layer{i}/b", b))
        return out

    def set_trainable(self, flag: bool):
        for _, p in self.parameters():
            p.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != first layer width {self.in_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tape.dense(h, w, b)
            if i < last:
                if self.hidden_act == "softplus":
                    h = tape.softplus(h)
                elif self.hidden_act == "relu":
                    h = tape.relu(h)
            else:
                if self.out_act == "sigmoid":
                    h = tape.sigmoid(h)
                elif self.out_act == "tanh":
                    h = tape.tanh(h)
        return h

    __call__ = forward

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != first layer width {self.in_dim}")
        h = np.asarray(x, dtype=np.float32)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                if self.hidden_act == "softplus":
                    h = tape.softplus_np(h)
                elif self.hidden_act == "relu":
                    h = np.maximum(h, 0)
            else:
                if self.out_act == "sigmoid":
                    h = tape.sigmoid_np(h).astype(np.float32)
                elif self.out_act == "tanh":
                    h = np.tanh(h)
        return h


def mlp_forward(net: Mlp, x: Tensor) -> Tensor:
    return net.forward(x)


class AdamState:
    """Per-parameter-block Adam moments. Blocks step independently, so a
    block that receives no gradient in a step keeps its parameters and
    moments untouched (autodecoder codebooks rely on this)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps: dict[str, int] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState):
    """One Adam update over every block with a populated gradient.

    Raises on NaN/Inf gradients, naming the offending block. Gradients
    are zeroed after a successful update.
    """
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block '{name}'")
        if name not in state.steps:
            state.steps[name] = 0
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.steps[name] += 1
        t = state.steps[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
        p.grad = None
