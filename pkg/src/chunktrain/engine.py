"""Chunk-level GNN layer math and the partitioned training loop.

All arithmetic is float64.  Two layer families are supported:

  gcn   h_v = ReLU(sum_u d_uv h_u  @ W); the weighted aggregate is cached
        host-side as a recomputation checkpoint, so the backward pass
        skips aggregation entirely (hybrid backward).
  gat   h_v = ReLU(sum_u alpha_uv (W h_u)) with per-destination softmax
        attention; nothing is cached, the backward pass reloads the layer
        inputs and recomputes every edge intermediate.

Both backward variants are also provided in store-all form (using
intermediates retained from the forward call); hybrid/recompute must
match store-all bitwise because they recompute identical values from
identical inputs.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphFormatError, SimulationError
from .partition import ChunkSubgraph, TwoLevelPartition
from .devices import DeviceFleet, HostStore

# ======================================================================
# Model
# ======================================================================

KINDS = ("gcn", "gat")


@dataclass(eq=False)
class ModelConfig:
    """Layer dimensions plus the (shared, replicated) parameters.

    dims has length L+1: feature width, hidden widths, class count.
    weights[l] is (dims[l], dims[l+1]); attn[l] (gat only) has length
    2*dims[l+1], destination half first.
    """

    kind: str
    dims: list
    weights: list
    attn: list | None
    leaky_slope: float = 0.2
    lr: float = 0.1
    epochs: int = 1
    seed: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def copy(self) -> "ModelConfig":
        return ModelConfig(
            kind=self.kind,
            dims=list(self.dims),
            weights=[w.copy() for w in self.weights],
            attn=None if self.attn is None else [a.copy() for a in self.attn],
            leaky_slope=self.leaky_slope,
            lr=self.lr,
            epochs=self.epochs,
            seed=self.seed,
        )


def init_model(kind: str, dims: list, seed: int, *, lr: float = 0.1,
               epochs: int = 1, leaky_slope: float = 0.2,
               dtype=np.float64) -> ModelConfig:
    """Seeded uniform init with Glorot-style scale sqrt(6/(fan_in+fan_out)).

    The draw order is fixed (W then attention vector, layer by layer) so
    any consumer seeded identically sees identical parameters.  Parameters
    are drawn in float64 and then cast, so a float32 model is the rounded
    image of the float64 one.
    """
    if kind not in KINDS:
        raise SimulationError(f"unknown model kind {kind!r}")
    if len(dims) < 2:
        raise SimulationError("dims needs at least an input and output width")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    weights = []
    attn = [] if kind == "gat" else None
    for l in range(len(dims) - 1):
        s = np.sqrt(6.0 / (dims[l] + dims[l + 1]))
        weights.append(
            rng.uniform(-s, s, size=(dims[l], dims[l + 1])).astype(dtype))
        if kind == "gat":
            sa = np.sqrt(6.0 / (2 * dims[l + 1] + 1))
            attn.append(
                rng.uniform(-sa, sa, size=2 * dims[l + 1]).astype(dtype))
    return ModelConfig(kind=kind, dims=list(dims), weights=weights, attn=attn,
                       leaky_slope=leaky_slope, lr=lr, epochs=epochs, seed=seed)


# ======================================================================
# Segment helpers (per-destination reductions over chunk CSC runs)
# ======================================================================


def _edge_destinations_local(chunk: ChunkSubgraph) -> np.ndarray:
    return np.repeat(np.arange(chunk.num_vertices, dtype=np.int64),
                     np.diff(chunk.csc_offsets))


def _nonempty_starts(offsets: np.ndarray):
    """Start indices of non-empty CSC segments, for ufunc.reduceat.

    Zero-width segments vanish when their start is dropped, so reduceat
    over the surviving starts yields exactly the non-empty segments.
    """
    counts = np.diff(offsets)
    nonempty = np.flatnonzero(counts > 0)
    return nonempty, offsets[nonempty]


# ======================================================================
# GCN layer
# ======================================================================


def gcn_layer_forward(chunk: ChunkSubgraph, h_nbr: np.ndarray,
                      W: np.ndarray):
    """Returns (h_out, agg, z): ReLU((sum_u d_uv h_u) @ W) per destination.

    agg is the aggregation checkpoint; z the pre-activation (store-all
    backward input).  Edges are accumulated in ascending (destination,
    source) order.
    """
    agg = np.zeros((chunk.num_vertices, h_nbr.shape[1]), dtype=h_nbr.dtype)
    if chunk.num_edges:
        w = chunk.edge_weights.astype(h_nbr.dtype, copy=False)
        np.add.at(agg, _edge_destinations_local(chunk),
                  w[:, None] * h_nbr[chunk.csc_local_src])
    z = agg @ W
    return np.maximum(z, 0.0), agg, z


def _gcn_backward_from(chunk: ChunkSubgraph, agg: np.ndarray, z: np.ndarray,
                       grad_out: np.ndarray, W: np.ndarray):
    grad_z = grad_out * (z > 0.0)
    grad_W = agg.T @ grad_z
    grad_agg = grad_z @ W.T
    grad_nbr = np.zeros((chunk.sources.size, W.shape[0]), dtype=grad_out.dtype)
    if chunk.num_edges:
        # scatter along the transpose (CSR) view: each source sums its
        # out-edges' d_uv-weighted destination gradients
        w = chunk.edge_weights.astype(grad_out.dtype, copy=False)
        dst_local = _edge_destinations_local(chunk)
        vals = (w[chunk.csr_edge_perm][:, None]
                * grad_agg[dst_local[chunk.csr_edge_perm]])
        nonempty, starts = _nonempty_starts(chunk.csr_offsets)
        grad_nbr[nonempty] = np.add.reduceat(vals, starts, axis=0)
    return grad_nbr, grad_W


def gcn_layer_backward_hybrid(chunk: ChunkSubgraph, agg: np.ndarray,
                              grad_out: np.ndarray, W: np.ndarray):
    """Backward from the aggregation checkpoint alone.

    Recomputes z = agg @ W (bitwise identical to the forward product) and
    never touches neighbor representations: aggregation is skipped.
    """
    z = agg @ W
    return _gcn_backward_from(chunk, agg, z, grad_out, W)


def gcn_layer_backward_storeall(chunk: ChunkSubgraph, agg: np.ndarray,
                                z: np.ndarray, grad_out: np.ndarray,
                                W: np.ndarray):
    return _gcn_backward_from(chunk, agg, z, grad_out, W)


# ======================================================================
# GAT layer
# ======================================================================


@dataclass(eq=False)
class GatStored:
    """Forward intermediates retained for the store-all backward."""

    p: np.ndarray        # W-projected destination inputs
    q: np.ndarray        # W-projected neighbor inputs
    t: np.ndarray        # per-edge raw attention input
    alpha: np.ndarray    # per-edge softmax weight
    s: np.ndarray        # pre-activation aggregate


def gat_layer_forward(chunk: ChunkSubgraph, h_nbr: np.ndarray,
                      h_dst: np.ndarray, W: np.ndarray, a: np.ndarray,
                      slope: float = 0.2):
    """Attention layer: softmax over each destination's full in-edge set.

    Per edge e=(u,v): t_e = a_dst.(W h_v) + a_src.(W h_u),
    logit = LeakyReLU(t_e), alpha = softmax over in(v) (max-subtracted),
    h_v = ReLU(sum alpha_e W h_u).  Destinations without in-edges yield
    zero rows.  Returns (h_out, GatStored).
    """
    d_out = W.shape[1]
    p = h_dst @ W
    q = h_nbr @ W
    a_dst, a_src = a[:d_out], a[d_out:]

    nv = chunk.num_vertices
    s = np.zeros((nv, d_out), dtype=q.dtype)
    if chunk.num_edges == 0:
        stored = GatStored(p=p, q=q, t=np.empty(0, dtype=q.dtype),
                           alpha=np.empty(0, dtype=q.dtype), s=s)
        return np.maximum(s, 0.0), stored

    dst_e = _edge_destinations_local(chunk)
    src_e = chunk.csc_local_src
    t = (p @ a_dst)[dst_e] + (q @ a_src)[src_e]
    logit = np.where(t > 0.0, t, slope * t)

    nonempty, starts = _nonempty_starts(chunk.csc_offsets)
    counts = np.diff(chunk.csc_offsets)[nonempty]
    seg_max = np.maximum.reduceat(logit, starts)
    shifted = np.exp(logit - np.repeat(seg_max, counts))
    denom = np.add.reduceat(shifted, starts)
    alpha = shifted / np.repeat(denom, counts)

    np.add.at(s, dst_e, alpha[:, None] * q[src_e])
    return np.maximum(s, 0.0), GatStored(p=p, q=q, t=t, alpha=alpha, s=s)


def gat_layer_backward_storeall(chunk: ChunkSubgraph, stored: GatStored,
                                h_nbr: np.ndarray, h_dst: np.ndarray,
                                grad_out: np.ndarray, W: np.ndarray,
                                a: np.ndarray, slope: float = 0.2):
    """Differentiate the whole layer from retained intermediates.

    Returns (grad_h_nbr, grad_h_dst, grad_W, grad_a).
    """
    d_out = W.shape[1]
    a_dst, a_src = a[:d_out], a[d_out:]
    p, q, t, alpha, s = stored.p, stored.q, stored.t, stored.alpha, stored.s

    grad_s = grad_out * (s > 0.0)
    grad_q = np.zeros_like(q)
    grad_p = np.zeros_like(p)
    grad_a = np.zeros_like(a)

    if chunk.num_edges:
        dst_e = _edge_destinations_local(chunk)
        src_e = chunk.csc_local_src
        nonempty, starts = _nonempty_starts(chunk.csc_offsets)
        counts = np.diff(chunk.csc_offsets)[nonempty]

        # aggregation term: s_v = sum alpha_e q_src(e)
        grad_alpha = (grad_s[dst_e] * q[src_e]).sum(axis=1)
        np.add.at(grad_q, src_e, alpha[:, None] * grad_s[dst_e])

        # softmax: dL/dlogit_e = alpha_e (g_e - sum_e' alpha_e' g_e')
        seg_dot = np.add.reduceat(alpha * grad_alpha, starts)
        grad_logit = alpha * (grad_alpha - np.repeat(seg_dot, counts))
        grad_t = grad_logit * np.where(
            t > 0.0, 1.0, slope).astype(t.dtype, copy=False)

        # attention input t_e = a_dst.p_dst(e) + a_src.q_src(e)
        grad_a[:d_out] = grad_t @ p[dst_e]
        grad_a[d_out:] = grad_t @ q[src_e]
        seg_gt = np.add.reduceat(grad_t, starts)
        grad_p[nonempty] += seg_gt[:, None] * a_dst[None, :]
        np.add.at(grad_q, src_e, grad_t[:, None] * a_src[None, :])

    grad_W = h_dst.T @ grad_p + h_nbr.T @ grad_q
    grad_h_dst = grad_p @ W.T
    grad_h_nbr = grad_q @ W.T
    return grad_h_nbr, grad_h_dst, grad_W, grad_a


def gat_layer_backward_recompute(chunk: ChunkSubgraph, h_nbr: np.ndarray,
                                 h_dst: np.ndarray, grad_out: np.ndarray,
                                 W: np.ndarray, a: np.ndarray,
                                 slope: float = 0.2):
    """Pure-recomputation backward: re-run the forward on the reloaded
    inputs, then differentiate.  Bitwise equal to store-all because the
    regenerated intermediates are the same arrays."""
    _, stored = gat_layer_forward(chunk, h_nbr, h_dst, W, a, slope)
    return gat_layer_backward_storeall(chunk, stored, h_nbr, h_dst,
                                       grad_out, W, a, slope)


# ======================================================================
# Loss
# ======================================================================


def downstream_loss(h_last: np.ndarray, labels: np.ndarray,
                    mask: np.ndarray):
    """Mean softmax cross-entropy over the masked vertices.

    Returns (loss, grad) with grad zero outside the mask.  An empty mask
    yields (0.0, zeros) and a warning.
    """
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(h_last)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("training mask is empty; loss is 0", stacklevel=2)
        return 0.0, grad

    z = h_last[mask]
    y = np.asarray(labels, dtype=np.int64)[mask]
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    loss = float(-np.log(p[np.arange(count), y]).mean())
    g = p
    g[np.arange(count), y] -= 1.0
    grad[mask] = g / count
    return loss, grad


# ======================================================================
# Parameter sync
# ======================================================================


def sync_and_update(model: ModelConfig, device_grads: list,
                    lr: float | None = None) -> ModelConfig:
    """Sum replica gradients in ascending device order, apply plain SGD."""
    if lr is None:
        lr = model.lr
    L = model.num_layers
    for l in range(L):
        total_w = np.zeros_like(model.weights[l])
        for dg in device_grads:  # ascending device id
            total_w += dg["W"][l]
        model.weights[l] -= lr * total_w
        if model.kind == "gat":
            total_a = np.zeros_like(model.attn[l])
            for dg in device_grads:
                total_a += dg["a"][l]
            model.attn[l] -= lr * total_a
    return model


# ======================================================================
# Intermediate-lifetime tracking
# ======================================================================


class ActivationTracker:
    """Counts live chunk intermediates; peak must stay within one batch's
    worth (m chunks), since each layer releases its intermediates before
    the next batch starts."""

    def __init__(self):
        self._live = set()
        self.peak = 0

    def acquire(self, tag) -> None:
        if tag in self._live:
            raise SimulationError(f"intermediate {tag} acquired twice")
        self._live.add(tag)
        self.peak = max(self.peak, len(self._live))

    def release(self, tag) -> None:
        self._live.discard(tag)

    @property
    def live_count(self) -> int:
        return len(self._live)


# ======================================================================
# Partitioned training loop
# ======================================================================


@dataclass(eq=False)
class EpochResult:
    loss: float
    model: ModelConfig
    tracker: ActivationTracker = field(default_factory=ActivationTracker)


def train_epoch(p: TwoLevelPartition, fleet: DeviceFleet, model: ModelConfig,
                host: HostStore, labels: np.ndarray, mask: np.ndarray,
                tracker: ActivationTracker | None = None) -> EpochResult:
    """One full-graph epoch over the chunk grid.

    Forward sweeps layers then batches, writing h^{l+1} rows and (gcn)
    aggregation checkpoints host-side and releasing chunk intermediates
    immediately.  The loss gradient then flows back layer by layer:
    checkpoint reload, destination-gradient load, per-chunk backward,
    deduplicated gradient accumulation.  Finishes with the replica
    gradient sum and an SGD step.
    """
    if tracker is None:
        tracker = ActivationTracker()
    m, n = p.m, p.n
    L = model.num_layers
    kind = model.kind
    if not host.h_valid[0]:
        raise SimulationError("host features not set; call set_features first")
    host.reset_epoch()

    # ---- forward ----
    for l in range(L):
        fleet.begin_forward_layer(model.dims[l])
        for j in range(n):
            h_nbr = fleet.dedup_comm_fwd(host.h[l], j)
            h_dst = (fleet.load_dest_rows(host.h[l], j)
                     if kind == "gat" else None)
            outs = []
            aggs = []
            for i in range(m):
                chunk = p.chunks[i][j]
                tag = ("fwd", l, i, j)
                tracker.acquire(tag)
                if kind == "gcn":
                    h_out, agg, _z = gcn_layer_forward(
                        chunk, h_nbr[i], model.weights[l])
                    aggs.append(agg)
                else:
                    h_out, _stored = gat_layer_forward(
                        chunk, h_nbr[i], h_dst[i], model.weights[l],
                        model.attn[l], model.leaky_slope)
                outs.append(h_out)
                tracker.release(tag)
            fleet.store_dest_rows(host.h[l + 1], j, outs)
            if kind == "gcn":
                fleet.store_checkpoint(host, l, j, aggs)
        host.h_valid[l + 1] = True

    # ---- loss ----
    loss, grad_last = downstream_loss(host.h[L], labels, mask)
    host.grad_h[L][:] = grad_last

    # ---- backward ----
    device_grads = [
        {
            "W": [np.zeros_like(w) for w in model.weights],
            "a": ([np.zeros_like(v) for v in model.attn]
                  if kind == "gat" else None),
        }
        for _ in range(m)
    ]
    for l in reversed(range(L)):
        fleet.begin_backward_layer(model.dims[l])
        for j in range(n):
            if kind == "gcn":
                aggs = fleet.load_recomp_chkpt(host, "gcn", l, j)
            else:
                h_nbr, h_dst = fleet.load_recomp_chkpt(host, "gat", l, j)
            gouts = fleet.load_dest_rows(host.grad_h[l + 1], j)
            grad_views = []
            dst_grads = []
            for i in range(m):
                chunk = p.chunks[i][j]
                tag = ("bwd", l, i, j)
                tracker.acquire(tag)
                if kind == "gcn":
                    g_nbr, g_w = gcn_layer_backward_hybrid(
                        chunk, aggs[i], gouts[i], model.weights[l])
                else:
                    g_nbr, g_dst, g_w, g_a = gat_layer_backward_recompute(
                        chunk, h_nbr[i], h_dst[i], gouts[i],
                        model.weights[l], model.attn[l], model.leaky_slope)
                    device_grads[i]["a"][l] += g_a
                    dst_grads.append(g_dst)
                device_grads[i]["W"][l] += g_w
                grad_views.append(g_nbr)
                tracker.release(tag)
            if kind == "gat":
                fleet.add_dest_grads(host.grad_h[l], j, dst_grads)
            fleet.dedup_comm_bwd(grad_views, host.grad_h[l], j)

    sync_and_update(model, device_grads)
    return EpochResult(loss=loss, model=model, tracker=tracker)


def comm_passes_per_epoch(model: ModelConfig) -> tuple:
    """(forward, backward) full communication sweeps one epoch performs;
    a GAT backward layer re-runs the forward machinery to reload inputs."""
    L = model.num_layers
    if model.kind == "gat":
        return (2 * L, L)
    return (L, L)


# ======================================================================
# Dense matrix / label files
# ======================================================================

_MATRIX_MAGIC = b"HTF1"
_LABELS_MAGIC = b"HTL1"


def save_matrix(X: np.ndarray, path: str) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise GraphFormatError("matrix files hold 2-D arrays")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", X.shape[0], X.shape[1]))
        fh.write(X.astype("<f8").tobytes())


def load_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MATRIX_MAGIC:
            raise GraphFormatError(
                f"{path}: bad magic {magic!r}, expected {_MATRIX_MAGIC!r}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        raw = fh.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise GraphFormatError(f"{path}: truncated payload")
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()


def save_labels(y: np.ndarray, path: str) -> None:
    y = np.asarray(y, dtype=np.int64)
    with open(path, "wb") as fh:
        fh.write(_LABELS_MAGIC)
        fh.write(struct.pack("<Q", y.shape[0]))
        fh.write(y.astype("<i8").tobytes())


def load_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _LABELS_MAGIC:
            raise GraphFormatError(
                f"{path}: bad magic {magic!r}, expected {_LABELS_MAGIC!r}")
        (count,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read(count * 8)
        if len(raw) != count * 8:
            raise GraphFormatError(f"{path}: truncated payload")
        return np.frombuffer(raw, dtype="<i8").copy()
