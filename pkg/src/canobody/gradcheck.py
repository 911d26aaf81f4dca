"""Central finite-difference gradient verification.

The analytic gradient of a scalar-valued tape function is compared with
a 64-bit central-difference replay of the same function. Comparison is
per input array, on the max norm of the gradient vectors:

    err = |analytic - numeric|_inf / max(|analytic|_inf, |numeric|_inf, floor)
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from . import tape
from .tape import Tensor


def finite_difference_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                            h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of fn w.r.t. each input, replayed in float64."""
    base = [np.asarray(x, dtype=np.float64) for x in inputs]

    def eval_at(arrs):
        with tape.no_grad():
            out = fn(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float(out.data)

    grads = []
    for i, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = eval_at(base)
            flat[j] = orig - h
            f_minus = eval_at(base)
            flat[j] = orig
            gflat[j] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    rel_tol: float = 1e-4, h: float = 1e-3,
                    floor: float = 1e-6) -> float:
    """Run fn in float64 on the tape, backprop, compare with differences.

    Returns the worst relative error over all inputs; raises AssertionError
    when it exceeds rel_tol.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = finite_difference_grads(fn, inputs, h=h)
    worst = 0.0
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
        err = float(np.abs(a - n).max(initial=0.0) / denom)
        worst = max(worst, err)
        if err > rel_tol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel err {err:.3e} > {rel_tol:.1e}")
    return worst
