"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The active backend is chosen once at import time from the environment
variable ``KGT5LAB_BACKEND`` (``"numba"`` or ``"numpy"``).  Default is numba
when importable, numpy otherwise.  Both backends are deterministic given the
same inputs; they are numerically equivalent but not bit-identical for
reductions (summation order differs), so a given run should stick to one
backend.  ``benchmarks/bench_backends.py`` compares their speed.

Everything else in the package (the transformer forward/backward in
particular) is plain numpy: those paths are dominated by BLAS matmuls, where
numba has nothing to add.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _pick_backend() -> str:
    requested = os.environ.get("KGT5LAB_BACKEND", "").strip().lower()
    if requested in ("numba", "numpy"):
        if requested == "numba" and not HAS_NUMBA:
            raise RuntimeError("KGT5LAB_BACKEND=numba but numba is not importable")
        return requested
    if requested:
        raise RuntimeError(f"unknown KGT5LAB_BACKEND {requested!r} (use 'numba' or 'numpy')")
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = _pick_backend()


# ---------------------------------------------------------------------------
# scatter-add of gradient rows into an embedding-gradient table
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """out[ids[i]] += rows[i], accumulating over repeated ids."""
    np.add.at(out, ids, rows)


@njit(cache=True)
def _scatter_add_rows_numba(out, ids, rows):  # pragma: no cover - numba path
    for i in range(ids.shape[0]):
        r = ids[i]
        for j in range(out.shape[1]):
            out[r, j] += rows[i, j]


def scatter_add_rows_numba(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    _scatter_add_rows_numba(out, np.ascontiguousarray(ids, dtype=np.int64), rows)


# ---------------------------------------------------------------------------
# fused Adam update (elementwise; bit-identical across backends)
# ---------------------------------------------------------------------------

def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, bc1, bc2, eps, weight_decay):
    """One Adam step on flat float64 views, in place.

    ``bc1``/``bc2`` are the bias corrections ``1 - beta^t`` computed by the
    caller so both backends consume identical scalars.  Decoupled weight
    decay is applied to the post-update parameter.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if weight_decay != 0.0:
        param -= lr * weight_decay * param


@njit(cache=True)
def _adam_update_numba(param, grad, m, v, lr, beta1, beta2, bc1, bc2, eps, weight_decay):  # pragma: no cover
    for i in range(param.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        param[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
        if weight_decay != 0.0:
            param[i] -= lr * weight_decay * param[i]


def adam_update_numba(param, grad, m, v, lr, beta1, beta2, bc1, bc2, eps, weight_decay):
    _adam_update_numba(param, grad, m, v, lr, beta1, beta2, bc1, bc2, eps, weight_decay)


# ---------------------------------------------------------------------------
# one epoch of margin-ranking SGD over triples (translational scoring)
# ---------------------------------------------------------------------------

def transe_epoch_numpy(ent, rel, heads, rels, tails, order, neg_sides, neg_entities,
                       margin, lr, batch_size):
    """Run one shuffled epoch of hinge-loss SGD; returns the summed loss.

    ``order`` is the visiting permutation; ``neg_sides``/``neg_entities`` are
    [T, K] arrays aligned to positions in ``order`` (side 0 corrupts the
    head, 1 the tail).  Each active pair contributes a full lr-scaled subgradient;
    updates are accumulated within a batch and applied at its end.
    """
    n = order.shape[0]
    k = neg_sides.shape[1]
    tiny = 1e-12
    loss_sum = 0.0
    for b0 in range(0, n, batch_size):
        idx = order[b0:b0 + batch_size]
        b = idx.shape[0]
        h, r, t = heads[idx], rels[idx], tails[idx]
        pos_diff = ent[h] + rel[r] - ent[t]
        d_pos = np.sqrt(np.sum(pos_diff * pos_diff, axis=1))
        u_pos = pos_diff / np.maximum(d_pos, tiny)[:, None]
        g_ent = np.zeros_like(ent)
        g_rel = np.zeros_like(rel)
        for kk in range(k):
            side = neg_sides[b0:b0 + b, kk]
            corrupt = neg_entities[b0:b0 + b, kk]
            h_neg = np.where(side == 0, corrupt, h)
            t_neg = np.where(side == 0, t, corrupt)
            neg_diff = ent[h_neg] + rel[r] - ent[t_neg]
            d_neg = np.sqrt(np.sum(neg_diff * neg_diff, axis=1))
            hinge = margin + d_pos - d_neg
            active = hinge > 0.0
            if not np.any(active):
                continue
            loss_sum += float(np.sum(hinge[active]))
            u_neg = neg_diff / np.maximum(d_neg, tiny)[:, None]
            up = u_pos[active]
            un = u_neg[active]
            np.add.at(g_ent, h[active], up)
            np.add.at(g_rel, r[active], up - un)
            np.add.at(g_ent, t[active], -up)
            np.add.at(g_ent, h_neg[active], -un)
            np.add.at(g_ent, t_neg[active], un)
        ent -= lr * g_ent
        rel -= lr * g_rel
    return loss_sum


@njit(cache=True)
def _transe_epoch_numba(ent, rel, heads, rels, tails, order, neg_sides, neg_entities,
                        margin, lr, batch_size):  # pragma: no cover - numba path
    n = order.shape[0]
    k = neg_sides.shape[1]
    dim = ent.shape[1]
    tiny = 1e-12
    loss_sum = 0.0
    g_ent = np.zeros_like(ent)
    g_rel = np.zeros_like(rel)
    touched_ent = np.zeros(ent.shape[0], dtype=np.bool_)
    touched_rel = np.zeros(rel.shape[0], dtype=np.bool_)
    pos_diff = np.empty(dim)
    neg_diff = np.empty(dim)
    for b0 in range(0, n, batch_size):
        b1 = min(b0 + batch_size, n)
        for p in range(b0, b1):
            i = order[p]
            h, r, t = heads[i], rels[i], tails[i]
            d_pos = 0.0
            for j in range(dim):
                pos_diff[j] = ent[h, j] + rel[r, j] - ent[t, j]
                d_pos += pos_diff[j] * pos_diff[j]
            d_pos = math.sqrt(d_pos)
            for kk in range(k):
                if neg_sides[p, kk] == 0:
                    h_neg, t_neg = neg_entities[p, kk], t
                else:
                    h_neg, t_neg = h, neg_entities[p, kk]
                d_neg = 0.0
                for j in range(dim):
                    neg_diff[j] = ent[h_neg, j] + rel[r, j] - ent[t_neg, j]
                    d_neg += neg_diff[j] * neg_diff[j]
                d_neg = math.sqrt(d_neg)
                hinge = margin + d_pos - d_neg
                if hinge <= 0.0:
                    continue
                loss_sum += hinge
                inv_pos = 1.0 / max(d_pos, tiny)
                inv_neg = 1.0 / max(d_neg, tiny)
                touched_ent[h] = touched_ent[t] = True
                touched_ent[h_neg] = touched_ent[t_neg] = True
                touched_rel[r] = True
                for j in range(dim):
                    up = pos_diff[j] * inv_pos
                    un = neg_diff[j] * inv_neg
                    g_ent[h, j] += up
                    g_ent[t, j] -= up
                    g_rel[r, j] += up - un
                    g_ent[h_neg, j] -= un
                    g_ent[t_neg, j] += un
        for e in range(ent.shape[0]):
            if touched_ent[e]:
                for j in range(dim):
                    ent[e, j] -= lr * g_ent[e, j]
                    g_ent[e, j] = 0.0
                touched_ent[e] = False
        for rr in range(rel.shape[0]):
            if touched_rel[rr]:
                for j in range(dim):
                    rel[rr, j] -= lr * g_rel[rr, j]
                    g_rel[rr, j] = 0.0
                touched_rel[rr] = False
    return loss_sum


def transe_epoch_numba(ent, rel, heads, rels, tails, order, neg_sides, neg_entities,
                       margin, lr, batch_size):
    return _transe_epoch_numba(ent, rel, heads, rels, tails, order, neg_sides,
                               neg_entities, margin, lr, batch_size)


if BACKEND == "numba":
    scatter_add_rows = scatter_add_rows_numba
    adam_update = adam_update_numba
    transe_epoch = transe_epoch_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    adam_update = adam_update_numpy
    transe_epoch = transe_epoch_numpy
