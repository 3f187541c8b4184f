"""Central finite-difference checking of analytic gradients.

Used both by the test suite and by the ``grad-check`` CLI subcommand.
All checks run in float64 with h=1e-5, where the finite-difference noise
floor sits far below the 1e-4 relative tolerance used throughout.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Array, Tape, Tensor, backward
from . import ops

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def numerical_gradient(f: Callable[[Array], float], x: Array, h: float = DEFAULT_H) -> Array:
    """Central differences of a scalar function, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: Array, numeric: Array, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_scalar_fn(
    build: Callable[[Tape, list[Tensor]], Tensor],
    arrays: list[Array],
    h: float = DEFAULT_H,
) -> float:
    """Compare tape gradients of ``build`` against finite differences.

    ``build`` receives a tape plus one Tensor per input array and must
    return a scalar loss Tensor. Returns the worst relative error across
    all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    loss = build(tape, tensors)
    grads = backward(tape, loss)

    worst = 0.0
    for pos, t in enumerate(tensors):
        def f(values, pos=pos):
            probe = [Tensor(values if j == pos else arrays[j]) for j in range(len(arrays))]
            for p in probe:
                p.requires_grad = False
            return float(build(None, probe).data)

        numeric = numerical_gradient(f, arrays[pos].copy(), h=h)
        analytic = grads.get(t.tid)
        if analytic is None:
            analytic = np.zeros_like(arrays[pos])
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def operator_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference every operator on small random tensors."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    def run(name: str, build, arrays):
        results.append((name, check_scalar_fn(build, arrays)))

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    run("matmul", lambda tp, ts: ops.sum_all(tp, ops.mul(tp, ops.matmul(tp, ts[0], ts[1]),
                                                         ops.matmul(tp, ts[0], ts[1]))), [a, b])

    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    bias = rng.normal(size=4) * 0.1
    run("conv2d(stride1,pad1)",
        lambda tp, ts: ops.sum_all(tp, ops.relu(tp, ops.conv2d(tp, ts[0], ts[1], ts[2], 1, 1))),
        [x, w, bias])
    run("conv2d(stride2,pad0)",
        lambda tp, ts: ops.sum_all(tp, ops.conv2d(tp, ts[0], ts[1], ts[2], 2, 0)),
        [rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])

    xg = rng.normal(size=(2, 6, 4, 4))
    gamma = 1.0 + 0.1 * rng.normal(size=6)
    beta = 0.1 * rng.normal(size=6)
    active_all = np.ones(6, dtype=bool)
    run("group_norm(all-active)",
        lambda tp, ts: ops.sum_all(tp, ops.mul(tp,
                                               ops.group_norm(tp, ts[0], 2, ts[1], ts[2], active_all),
                                               ops.group_norm(tp, ts[0], 2, ts[1], ts[2], active_all))),
        [xg, gamma, beta])
    active_half = np.array([True, False, True, True, True, False])
    run("group_norm(masked)",
        lambda tp, ts: ops.sum_all(tp, ops.relu(tp, ops.group_norm(tp, ts[0], 2, ts[1], ts[2], active_half))),
        [xg, gamma, beta])

    run("linear", lambda tp, ts: ops.sum_all(tp, ops.relu(tp, ops.linear(tp, ts[0], ts[1], ts[2]))),
        [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)])
    run("relu", lambda tp, ts: ops.sum_all(tp, ops.mul(tp, ops.relu(tp, ts[0]), ops.relu(tp, ts[0]))),
        [rng.normal(size=(4, 4)) + 0.05])
    run("add/mul/scale",
        lambda tp, ts: ops.sum_all(tp, ops.scale(tp, ops.mul(tp, ops.add(tp, ts[0], ts[1]), ts[0]), 0.7)),
        [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))])
    run("bias_add", lambda tp, ts: ops.sum_all(tp, ops.bias_add(tp, ts[0], ts[1])),
        [rng.normal(size=(3, 4)), rng.normal(size=4)])
    run("global_avg_pool",
        lambda tp, ts: ops.sum_all(tp, ops.mul(tp, ops.global_avg_pool(tp, ts[0]),
                                               ops.global_avg_pool(tp, ts[0]))),
        [rng.normal(size=(2, 3, 4, 4))])
    run("flatten", lambda tp, ts: ops.sum_all(tp, ops.mul(tp, ops.flatten(tp, ts[0]), ops.flatten(tp, ts[0]))),
        [rng.normal(size=(2, 2, 3, 3))])

    labels = rng.integers(0, 5, size=6)
    run("softmax_cross_entropy",
        lambda tp, ts: ops.softmax_cross_entropy(tp, ts[0], labels),
        [rng.normal(size=(6, 5))])
    return results


def model_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference every parameter of the desk-scale model shapes."""
    from .models import build_mini_resnet, build_residual_mlp, masked_forward

    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    def check_model(name, model, xs, ys):
        loss, tape, params = masked_forward(model, None, xs, ys)
        grads = backward(tape, loss)
        analytic = np.zeros_like(model.theta)
        for spec in model.topology.params:
            g = grads.get(params[spec.name].tid)
            if g is not None:
                analytic[spec.offset : spec.offset + spec.size] = g.reshape(-1)

        def f(theta_flat):
            saved = model.theta
            model.theta = theta_flat
            try:
                loss2, _, _ = masked_forward(model, None, xs, ys, record=False)
            finally:
                model.theta = saved
            return float(loss2.data)

        numeric = numerical_gradient(f, model.theta.copy())
        results.append((name, max_rel_error(analytic, numeric)))

    model = build_mini_resnet(channels=4, blocks=2, classes=3, norm_groups=2,
                              in_channels=2, image_hw=(4, 4), seed=seed)
    xs = rng.normal(size=(2, 2, 4, 4))
    ys = rng.integers(0, 3, size=2)
    check_model("mini_resnet(tiny)", model, xs, ys)

    mlp = build_residual_mlp(width=6, blocks=2, classes=3, in_dim=5, seed=seed)
    check_model("residual_mlp(tiny)", mlp, rng.normal(size=(3, 5)), rng.integers(0, 3, size=3))
    return results


def run_all(seed: int = 0, tol: float = DEFAULT_TOL) -> tuple[bool, list[tuple[str, float]]]:
    results = operator_checks(seed) + model_checks(seed)
    ok = all(err < tol for _, err in results)
    return ok, results
