"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops,
no shared code with the production paths) so that agreement between the
two is meaningful.
"""

from __future__ import annotations

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, w, b, stride=1, pad=0):
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def group_norm_reference(x, groups, gamma, beta, active, eps=1e-5):
    """Recompute on the sliced-down tensor, then scatter back."""
    bsz, c, h, w = x.shape
    gsize = c // groups
    out = np.zeros_like(x)
    for gi in range(groups):
        chans = [ch for ch in range(gi * gsize, (gi + 1) * gsize) if active[ch]]
        sub = x[:, chans]
        for n in range(bsz):
            mu = sub[n].mean()
            var = sub[n].var()
            norm = (sub[n] - mu) / np.sqrt(var + eps)
            for local, ch in enumerate(chans):
                out[n, ch] = norm[local] * gamma[ch] + beta[ch]
    return out


def aggregate_loops(grads, masks):
    """Per-parameter brute-force masked averaging, skipping masked workers."""
    n, d = masks.shape
    out = np.zeros(d)
    for j in range(d):
        acc = 0.0
        count = 0
        for i in range(n):
            if masks[i, j]:
                acc += grads[i][j]
                count += 1
        out[j] = acc / count if count else 0.0
    return out


def induced_mask_loops(topology, channel_active):
    """Per-parameter re-derivation of the channel mask induction rule.

    A parameter coordinate is active unless some (layer, channel) flag
    turns it off through an own-slice or consumer-slice relationship.
    """
    n_workers = next(iter(channel_active.values())).shape[0]
    masks = np.ones((n_workers, topology.total), dtype=bool)
    for worker in range(n_workers):
        for layer in topology.channel_layers:
            flags = channel_active.get(layer.layer_id)
            if flags is None:
                continue
            for pname, axis in list(layer.own_slices) + list(layer.consumer_slices):
                spec = topology.index[pname]
                for coord in np.ndindex(spec.shape):
                    if not flags[worker, coord[axis]]:
                        flat = int(np.ravel_multi_index(coord, spec.shape))
                        masks[worker, spec.offset + flat] = False
    return masks


def nesterov_reference(theta0, grads, lrs, momentum=0.9):
    """Scalar-friendly recurrence: v <- mu v + g; theta <- theta - lr (g + mu v)."""
    theta = np.array(theta0, dtype=np.float64)
    v = np.zeros_like(theta)
    for g, lr in zip(grads, lrs):
        v = momentum * v + g
        theta = theta - lr * (g + momentum * v)
    return theta


def dp_reference_trajectory(model, dataset, n_workers, batch_per_worker, steps,
                            schedule, total_steps, seed, momentum=0.9):
    """Single-loop synchronous data parallelism on the full model.

    Every worker computes a full-model gradient on its own batch (drawn
    from the same per-worker streams the engine uses), gradients are
    plainly averaged in worker order, and one Nesterov update is applied.
    """
    from subnetdp.models import flat_gradient, masked_forward
    from subnetdp.optim import lr_at

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_workers)]
    theta = model.theta.copy()
    velocity = np.zeros_like(theta)
    saved = model.theta
    try:
        for t in range(steps):
            total = np.zeros_like(theta)
            for i in range(n_workers):
                idx = streams[i].integers(0, len(dataset.train_x), size=batch_per_worker)
                model.theta = theta
                loss, tape, params = masked_forward(
                    model, None, dataset.train_x[idx], dataset.train_y[idx]
                )
                total += flat_gradient(model, tape, loss, params)
            gbar = total / n_workers
            lr = lr_at(schedule, t, total_steps)
            velocity = momentum * velocity + gbar
            theta = theta - lr * (gbar + momentum * velocity)
    finally:
        model.theta = saved
    return theta
