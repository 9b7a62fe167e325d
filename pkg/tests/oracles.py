"""Independent reference implementations used as test oracles.

Nothing in here calls back into the code paths being checked except the
forward (data-only) evaluation needed for finite differences.
"""

import itertools

import numpy as np


def numerical_grads(fn, arrays, delta=1e-3):
    """Central finite differences of the scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + delta
            hi = fn(*arrays)
            a[idx] = orig - delta
            lo = fn(*arrays)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * delta)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Norm-wise relative error ||a - n|| / max(||a|| + ||n||, tiny)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def projected_grad_errors(op, arrays, rng, delta=1e-3):
    """Relative error of each input gradient of ``sum(op(*arrays) * P)`` for a random P."""
    from mcseg.tensor import Tensor

    proj = rng.normal(size=op(*arrays).shape)

    def f(*arrs):
        return float((op(*arrs).data * proj).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    op(*tensors).backward(proj)
    numeric = numerical_grads(f, [a.copy() for a in arrays], delta)
    return [rel_error(t.grad, n) for t, n in zip(tensors, numeric)]


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for i0, o, i, j in itertools.product(range(n), range(co), range(oh), range(ow)):
        patch = xp[i0, :, i * stride:i * stride + k, j * stride:j * stride + k]
        out[i0, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def iou_sets(m, g):
    ms = {tuple(p) for p in np.argwhere(m)}
    gs = {tuple(p) for p in np.argwhere(g)}
    union = ms | gs
    return 1.0 if not union else len(ms & gs) / len(union)


def boundary_pixels_brute(mask):
    h, w = mask.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    out.append((y, x))
                    break
    return out


def boundary_f_brute(m, g, tol):
    """All-pairs distance matching of boundary pixels."""
    bm, bg = boundary_pixels_brute(m), boundary_pixels_brute(g)
    if not bm and not bg:
        return 1.0
    if not bm or not bg:
        return 0.0
    pm = np.array(bm, dtype=float)
    pg = np.array(bg, dtype=float)
    d2 = ((pm[:, None, :] - pg[None, :, :]) ** 2).sum(-1)
    precision = float((d2.min(axis=1) <= tol * tol).mean())
    recall = float((d2.min(axis=0) <= tol * tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
