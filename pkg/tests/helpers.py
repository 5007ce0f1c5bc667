"""Shared test oracles, independent of the implementation paths they check."""

import numpy as np

from cachefed import cache_model as cm


def fd_gradient_check(model, text_head, batch, labels, rng, coords=20, step=1e-5, tol=1e-4):
    """Compare the analytic key gradient to central finite differences.

    Checks `coords` randomly chosen key entries; returns the worst
    relative error seen. The loss used for differencing goes through an
    independent evaluation path (fresh model per perturbation).
    """
    _, analytic = cm.loss_and_grad_w1(model, text_head, batch, labels)
    worst = 0.0
    c, m = model.keys.shape
    for _ in range(coords):
        i = int(rng.integers(0, c))
        j = int(rng.integers(0, m))
        up_keys = model.keys.copy()
        up_keys[i, j] += step
        down_keys = model.keys.copy()
        down_keys[i, j] -= step
        up = cm.CacheModel(up_keys, model.values, model.alpha, model.beta)
        down = cm.CacheModel(down_keys, model.values, model.alpha, model.beta)
        loss_up, _ = cm.loss_and_grad_w1(up, text_head, batch, labels)
        loss_down, _ = cm.loss_and_grad_w1(down, text_head, batch, labels)
        fd = (loss_up - loss_down) / (2 * step)
        denom = max(abs(fd), abs(analytic[i, j]), 1e-8)
        worst = max(worst, abs(fd - analytic[i, j]) / denom)
    assert worst <= tol, f"finite-difference mismatch: relative error {worst}"
    return worst


def random_model_and_batch(rng, num_classes=None, shots=None, dim=None, batch=None):
    """A random well-formed (model, text head, batch, labels) quadruple."""
    num_classes = num_classes or int(rng.integers(2, 6))
    shots = shots or int(rng.integers(1, 4))
    dim = dim or int(rng.integers(3, 10))
    batch = batch or int(rng.integers(1, 6))

    def unit_rows(n):
        rows = rng.standard_normal((n, dim))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    keys = unit_rows(num_classes * shots).T.copy()
    labels_cache = np.repeat(np.arange(num_classes), shots)
    model = cm.CacheModel(
        keys=keys,
        values=cm.one_hot(labels_cache, num_classes),
        alpha=float(rng.uniform(0.0, 2.0)),
        beta=float(rng.uniform(0.0, 2.0)),
    )
    from cachefed.features import TextHead

    head = TextHead(unit_rows(num_classes))
    x = unit_rows(batch)
    y = rng.integers(0, num_classes, size=batch)
    return model, head, x, y


def scalar_weighted_sum(updates, n_k):
    """Pure-Python weighted sum oracle for the aggregation step."""
    total = sum(n_k[k] for k, _ in updates)
    rows, cols = updates[0][1].shape
    out = [[0.0] * cols for _ in range(rows)]
    for k, keys in sorted(updates, key=lambda u: u[0]):
        w = n_k[k] / total
        for i in range(rows):
            for j in range(cols):
                out[i][j] += w * float(keys[i, j])
    return np.array(out)
