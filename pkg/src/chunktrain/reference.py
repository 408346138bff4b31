"""Monolithic single-device trainer used to verify the partitioned loop.

Everything here works on whole-graph arrays: one forward pass per layer
over the global in-edge structure, store-all backward (every
intermediate retained), no partitioning, no chunking, no staged
communication and no recomputation.  The attention layer is written as
an explicit per-destination loop so the code path shares nothing with
the vectorized chunk kernels beyond elementary numpy arithmetic.

A partitioned run and a monolithic run that start from the same seeded
model must agree on per-epoch losses and final parameters to float64
rounding.
"""

from __future__ import annotations

import numpy as np

from .engine import ModelConfig
from .graph import Graph

# ----------------------------------------------------------------------
# loss (independent formulation via logsumexp)
# ----------------------------------------------------------------------


def _masked_cross_entropy(z_all: np.ndarray, labels: np.ndarray,
                          mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(z_all)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    z = z_all[mask]
    y = np.asarray(labels, dtype=np.int64)[mask]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float((lse - z[np.arange(count), y]).mean())
    p = np.exp(z - lse[:, None])
    p[np.arange(count), y] -= 1.0
    grad[mask] = p / count
    return loss, grad


# ----------------------------------------------------------------------
# layers on global arrays
# ----------------------------------------------------------------------


def _gcn_forward(g: Graph, h: np.ndarray, W: np.ndarray):
    agg = np.zeros((g.num_vertices, h.shape[1]))
    np.add.at(agg, g.edge_destinations(),
              g.edge_weights[:, None] * h[g.csc_sources])
    z = agg @ W
    return np.maximum(z, 0.0), (agg, z)


def _gcn_backward(g: Graph, stored, grad_out: np.ndarray, W: np.ndarray):
    agg, z = stored
    grad_z = grad_out * (z > 0.0)
    grad_W = agg.T @ grad_z
    grad_agg = grad_z @ W.T
    grad_h = np.zeros((g.num_vertices, W.shape[0]))
    np.add.at(grad_h, g.csc_sources,
              g.edge_weights[:, None] * grad_agg[g.edge_destinations()])
    return grad_h, grad_W


def _gat_forward(g: Graph, h: np.ndarray, W: np.ndarray, a: np.ndarray,
                 slope: float):
    d_out = W.shape[1]
    q = h @ W  # every vertex plays both roles, projected once
    a_dst, a_src = a[:d_out], a[d_out:]
    dst_score = q @ a_dst
    src_score = q @ a_src
    s = np.zeros((g.num_vertices, d_out))
    per_vertex = []
    off = g.csc_offsets
    for v in range(g.num_vertices):
        lo, hi = int(off[v]), int(off[v + 1])
        if lo == hi:
            per_vertex.append(None)  # no in-edges: zero row
            continue
        srcs = g.csc_sources[lo:hi]
        t = dst_score[v] + src_score[srcs]
        logit = np.where(t > 0.0, t, slope * t)
        e = np.exp(logit - logit.max())
        alpha = e / e.sum()
        s[v] = alpha @ q[srcs]
        per_vertex.append((srcs, t, alpha))
    return np.maximum(s, 0.0), (q, s, per_vertex)


def _gat_backward(g: Graph, stored, grad_out: np.ndarray, W: np.ndarray,
                  a: np.ndarray, slope: float, h: np.ndarray):
    d_out = W.shape[1]
    q, s, per_vertex = stored
    a_dst, a_src = a[:d_out], a[d_out:]
    grad_s = grad_out * (s > 0.0)
    grad_q = np.zeros_like(q)
    grad_a = np.zeros_like(a)
    for v in range(g.num_vertices):
        if per_vertex[v] is None:
            continue
        srcs, t, alpha = per_vertex[v]
        g_alpha = q[srcs] @ grad_s[v]
        grad_q[srcs] += alpha[:, None] * grad_s[v][None, :]
        g_logit = alpha * (g_alpha - alpha @ g_alpha)
        g_t = g_logit * np.where(t > 0.0, 1.0, slope)
        gt_sum = g_t.sum()
        grad_a[:d_out] += gt_sum * q[v]
        grad_a[d_out:] += g_t @ q[srcs]
        grad_q[v] += gt_sum * a_dst
        grad_q[srcs] += np.outer(g_t, a_src)
    # q = h @ W covered both roles, so grad_q already merges them
    grad_W = h.T @ grad_q
    grad_h = grad_q @ W.T
    return grad_h, grad_W, grad_a


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def reference_train_epoch(g: Graph, model: ModelConfig,
                          features: np.ndarray, labels: np.ndarray,
                          mask: np.ndarray) -> float:
    """One store-all epoch on global arrays; updates model in place."""
    L = model.num_layers
    h = [np.asarray(features, dtype=np.float64)]
    stored = []
    for l in range(L):
        if model.kind == "gcn":
            out, st = _gcn_forward(g, h[l], model.weights[l])
        else:
            out, st = _gat_forward(g, h[l], model.weights[l],
                                   model.attn[l], model.leaky_slope)
        h.append(out)
        stored.append(st)

    loss, grad = _masked_cross_entropy(h[L], labels, mask)

    grad_w = [None] * L
    grad_a = [None] * L
    for l in reversed(range(L)):
        if model.kind == "gcn":
            grad, grad_w[l] = _gcn_backward(g, stored[l], grad,
                                            model.weights[l])
        else:
            grad, grad_w[l], grad_a[l] = _gat_backward(
                g, stored[l], grad, model.weights[l], model.attn[l],
                model.leaky_slope, h[l])

    for l in range(L):
        model.weights[l] -= model.lr * grad_w[l]
        if model.kind == "gat":
            model.attn[l] -= model.lr * grad_a[l]
    return loss


def reference_train(g: Graph, model: ModelConfig, features: np.ndarray,
                    labels: np.ndarray, mask: np.ndarray,
                    epochs: int | None = None) -> list:
    """Run several epochs; returns the per-epoch loss list."""
    if epochs is None:
        epochs = model.epochs
    return [reference_train_epoch(g, model, features, labels, mask)
            for _ in range(epochs)]
