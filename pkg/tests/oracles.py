"""Independent reference implementations used as test oracles."""

import numpy as np


def forward_one(spec, weights, x):
    """Direct-summation forward pass of a single input.

    Returns the embedding and the activation pattern (relu masks and max-pool
    winners) that determines which smooth piece of the network is active.
    """
    a = np.asarray(x, dtype=np.float64).reshape(spec.input_shape)
    pattern = []
    p = 0
    for layer in spec.layers:
        if layer.kind == "dense":
            if a.ndim == 3:
                a = a.transpose(1, 2, 0).ravel()  # height, width, channel order
            a = weights[p] @ a + weights[p + 1]
            p += 2
        elif layer.kind == "conv":
            w, b = weights[p], weights[p + 1]
            f, c, k, _ = w.shape
            h, wd = a.shape[1] - k + 1, a.shape[2] - k + 1
            out = np.zeros((f, h, wd))
            for di in range(k):
                for dj in range(k):
                    out += np.einsum("fc,chw->fhw", w[:, :, di, dj], a[:, di:di + h, dj:dj + wd])
            a = out + b[:, None, None]
            p += 2
        elif layer.kind == "relu":
            pattern.append(a > 0)
            a = np.maximum(a, 0.0)
        elif layer.kind == "maxpool":
            c, h, wd = a.shape
            blocks = a[:, :h // 2 * 2, :wd // 2 * 2].reshape(c, h // 2, 2, wd // 2, 2)
            blocks = blocks.transpose(0, 1, 3, 2, 4).reshape(c, h // 2, wd // 2, 4)
            pattern.append(blocks.argmax(axis=-1))
            a = blocks.max(axis=-1)
    return a, pattern


def triplet_loss_oracle(spec, weights, xa, xb, xc, margin):
    """Mean hinge loss over triplets and the full piecewise-smoothness pattern."""
    losses = []
    pattern = []
    for a, b, c in zip(xa, xb, xc):
        ea, pa = forward_one(spec, weights, a)
        eb, pb = forward_one(spec, weights, b)
        ec, pc = forward_one(spec, weights, c)
        hinge = np.linalg.norm(ea - eb) - np.linalg.norm(ea - ec) + margin
        losses.append(max(0.0, hinge))
        pattern += pa + pb + pc + [np.array(hinge > 0)]
    return float(np.mean(losses)), pattern


def _same(p, q):
    return all(np.array_equal(x, y) for x, y in zip(p, q))


def finite_difference_check(spec, weights, analytic, xa, xb, xc, margin, h=1e-4, floor=1e-6):
    """Max relative error of ``analytic`` against central differences.

    A coordinate is skipped when the activation pattern at ``w + h`` or
    ``w - h`` differs from the one at ``w`` (a kink lies inside the stencil).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Returns ``(max_rel_err, n_checked, n_skipped)``.
    """
    weights = [w.copy() for w in weights]
    _, base = triplet_loss_oracle(spec, weights, xa, xb, xc, margin)
    worst, checked, skipped = 0.0, 0, 0
    for w, g in zip(weights, analytic):
        flat, gflat = w.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, pp = triplet_loss_oracle(spec, weights, xa, xb, xc, margin)
            flat[i] = orig - h
            lm, pm = triplet_loss_oracle(spec, weights, xa, xb, xc, margin)
            flat[i] = orig
            if not (_same(pp, base) and _same(pm, base)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped
