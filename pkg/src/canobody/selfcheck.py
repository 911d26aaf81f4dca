"""Built-in property suites: gradient checks and the skinning round trip.

These run without any training so a fresh build can be validated in
seconds (`canobody selfcheck`).
"""

from __future__ import annotations

import numpy as np

from . import rng, tape
from .gradcheck import check_gradients
from .nn import Mlp
from .skinning import (SkeletonRig, canonical_correspondence, deform_points,
                       forward_kinematics, rig_weights)
from .synth import make_subject, sample_pose
from .tape import Tensor


def _op_cases(seed: int):
    g = rng.stream(seed, "selfcheck", "ops")

    def r(*shape):
        return g.normal(size=shape)

    vol = g.normal(size=(4, 4, 4, 3))
    pts = g.uniform(-0.9, 0.9, size=(5, 3))
    probs = g.uniform(0.05, 0.95, size=(6, 1))
    targets = g.uniform(0.0, 1.0, size=(6, 1))
    idx = g.integers(0, 5, size=7)

    cases = {
        "add": (lambda a, b: tape.ssum(tape.mul(tape.add(a, b), a)), [r(4, 3), r(4, 3)]),
        "sub": (lambda a, b: tape.ssum(tape.square(tape.sub(a, b))), [r(4, 3), r(4, 3)]),
        "mul_broadcast": (lambda a, b: tape.ssum(tape.mul(a, b)), [r(5, 4), r(5, 1)]),
        "matmul": (lambda a, b: tape.ssum(tape.matmul(a, b)), [r(3, 4), r(4, 2)]),
        "dense": (lambda x, w, b: tape.ssum(tape.dense(x, w, b)), [r(5, 3), r(3, 2), r(2)]),
        "relu": (lambda x: tape.ssum(tape.relu(x)), [r(4, 4) + 0.3]),
        "softplus": (lambda x: tape.ssum(tape.softplus(x)), [r(4, 4)]),
        "sigmoid": (lambda x: tape.ssum(tape.sigmoid(x)), [r(4, 4)]),
        "tanh": (lambda x: tape.ssum(tape.tanh(x)), [r(4, 4)]),
        "exp": (lambda x: tape.ssum(tape.exp(x)), [r(3, 3)]),
        "log": (lambda x: tape.ssum(tape.log(x)), [np.abs(r(3, 3)) + 0.5]),
        "sqrt": (lambda x: tape.ssum(tape.sqrt(x)), [np.abs(r(3, 3)) + 0.5]),
        "square": (lambda x: tape.ssum(tape.square(x)), [r(3, 3)]),
        "absolute": (lambda x: tape.ssum(tape.absolute(x)), [r(3, 3) + 0.2]),
        "reciprocal": (lambda x: tape.ssum(tape.reciprocal(x)), [np.abs(r(3, 3)) + 0.5]),
        "mean_axis": (lambda x: tape.ssum(tape.mean(x, axis=1)), [r(4, 5)]),
        "softmax": (lambda x: tape.ssum(tape.mul(tape.softmax(x), x)), [r(4, 5)]),
        "log_softmax": (lambda x: tape.ssum(tape.mul(tape.log_softmax(x), x)), [r(4, 5)]),
        "concat": (lambda a, b: tape.ssum(tape.square(tape.concat([a, b], axis=-1))),
                   [r(4, 2), r(4, 3)]),
        "slice_cols": (lambda x: tape.ssum(tape.slice_cols(x, 1, 3)), [r(4, 5)]),
        "gather_rows": (lambda x: tape.ssum(tape.square(tape.gather_rows(x, idx))), [r(5, 3)]),
        "reshape": (lambda x: tape.ssum(tape.square(tape.reshape(x, (6, 2)))), [r(3, 4)]),
        "repeat_rows": (lambda x: tape.ssum(tape.square(tape.repeat_rows(x, 6))), [r(4)]),
        "avg_pool2": (lambda x: tape.ssum(tape.square(tape.avg_pool2(x))), [r(4, 6, 2)]),
        "trilinear_vol": (lambda v: tape.ssum(tape.square(tape.trilinear(v, Tensor(pts, dtype=np.float64)))), [vol]),
        "trilinear_pts": (lambda p: tape.ssum(tape.square(tape.trilinear(Tensor(vol, dtype=np.float64), p))), [pts]),
        "bce": (lambda p: tape.ssum(tape.bce(p, targets)), [probs]),
        "cross_entropy": (lambda x: tape.cross_entropy_logits(x, np.array([0, 2, 1])), [r(3, 4)]),
    }
    return cases


def gradient_suite(seed: int = 0, rel_tol: float = 1e-4) -> list[tuple[str, bool, str]]:
    """Finite-difference check of every op; returns (name, ok, detail) rows."""
    rows = []
    for name, (fn, inputs) in _op_cases(seed).items():
        try:
            worst = check_gradients(fn, inputs, rel_tol=rel_tol)
            rows.append((f"grad/{name}", True, f"rel err {worst:.2e}"))
        except AssertionError as exc:
            rows.append((f"grad/{name}", False, str(exc)))

    # end-to-end: a small MLP loss against all parameters and the input
    g = rng.stream(seed, "selfcheck", "mlp")
    net = Mlp([3, 8, 2], hidden_act="softplus", out_act="sigmoid", rng=g)
    x0 = g.normal(size=(6, 3))

    def mlp_loss(x, w0, b0, w1, b1):
        m = Mlp([3, 8, 2], hidden_act="softplus", out_act="sigmoid")
        m.weights = [w0, w1]
        m.biases = [b0, b1]
        return tape.ssum(tape.square(m.forward(x)))

    try:
        worst = check_gradients(mlp_loss, [x0, net.weights[0].data, net.biases[0].data,
                                           net.weights[1].data, net.biases[1].data],
                                rel_tol=rel_tol)
        rows.append(("grad/mlp_end_to_end", True, f"rel err {worst:.2e}"))
    except AssertionError as exc:
        rows.append(("grad/mlp_end_to_end", False, str(exc)))
    return rows


def roundtrip_suite(seed: int = 0, n_points: int = 2000,
                    pose_cap: float = 1.0) -> list[tuple[str, bool, str]]:
    """Deform-then-invert on a synthetic rig with analytic weights."""
    subject = make_subject(seed, 0, n_bones=3)
    rig = subject.rig
    g = rng.stream(seed, "selfcheck", "roundtrip")
    theta = sample_pose(g, rig, "challenging")
    theta *= pose_cap / max(np.linalg.norm(theta, axis=1).max(), 1e-9)
    bones = forward_kinematics(rig, theta)
    weight_fn = lambda p: rig_weights(rig, p)

    x = g.uniform(-0.8, 0.8, size=(n_points, 3))
    x_prime = deform_points(weight_fn, bones, x)

    from .synth import canonical_occupancy_fns
    _, o2_fn, _ = canonical_occupancy_fns(subject, 0)
    x_hat, ok = canonical_correspondence(weight_fn, bones, x_prime, tol=1e-5,
                                         max_iter=30, occupancy_fn=o2_fn)
    resid = np.linalg.norm(deform_points(weight_fn, bones, x_hat) - x_prime, axis=1)
    good = ok & (resid < 1e-4) & (np.linalg.norm(x_hat - x, axis=1) < 1e-3)
    frac = good.mean()
    rows = [("skin/round_trip", bool(frac >= 0.99), f"success {frac:.4f}")]

    ident, ok_i = canonical_correspondence(weight_fn, np.tile(np.eye(4), (rig.n_bones, 1, 1)),
                                           x[:50])
    rows.append(("skin/identity_pose", bool(np.array_equal(ident, x[:50]) and ok_i.all()),
                 "exact passthrough"))

    w = rig_weights(rig, x[:200])
    ok_w = np.all(w >= 0) and np.allclose(w.sum(axis=1), 1.0, atol=1e-6)
    rows.append(("skin/weights_simplex", bool(ok_w), "nonneg, sums to 1"))
    return rows


def run_all(seed: int = 0) -> tuple[list[tuple[str, bool, str]], bool]:
    rows = gradient_suite(seed) + roundtrip_suite(seed)
    return rows, all(ok for _, ok, _ in rows)
