"""Metered virtual-device execution of a communication plan.

The fleet moves real float64 rows between a host store and per-device
buffers exactly as the plan prescribes, counting every transfer:

  h2d/d2h     host <-> device rows on the neighbor/transition path
  d2d         peer-to-peer fetches (forward) and gradient pushes (backward)
  reuse       rows carried in place between consecutive batches
  dest_*      destination-row traffic (outputs, output gradients, GAT inputs)
  chkpt_*     recomputation-checkpoint traffic

Execution is sequential and deterministic: step boundaries marked
"barrier" in the comments are points where a parallel deployment would
synchronize; every accumulation runs in ascending device id, then
ascending vertex id, so results are scheduling-independent by
construction.

Modes:
  baseline  every chunk loads its full neighbor set from the host;
  p2p       one hosted copy per batch on the owner device, peers fetch
            device-to-device, no cross-batch retention;
  full      p2p plus in-place reuse of rows shared with the previous
            batch (transition rows and repeated neighbor rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMissingError, SimulationError
from .planner import DedupPlan, predicted_transfers, _intersect

_MODES = ("baseline", "p2p", "full")
_FLUSH_POLICIES = ("on_eviction", "every_batch")


# ======================================================================
# Host-side storage
# ======================================================================


class HostStore:
    """Host-resident vertex data: representations, gradients, checkpoints."""

    def __init__(self, num_vertices: int, dims: list, dtype=np.float64):
        self.num_vertices = int(num_vertices)
        self.dims = list(dims)
        self.dtype = np.dtype(dtype)
        self.h = [np.zeros((num_vertices, d), dtype=self.dtype)
                  for d in self.dims]
        self.grad_h = [np.zeros((num_vertices, d), dtype=self.dtype)
                       for d in self.dims]
        self.h_valid = [False] * len(self.dims)
        self.agg = {}           # layer -> (V, dims[layer]) cached aggregates
        self.agg_written = set()  # (layer, partition, chunk)

    def set_features(self, features: np.ndarray) -> None:
        X = np.asarray(features, dtype=self.dtype)
        if X.shape != self.h[0].shape:
            raise SimulationError(
                f"feature matrix shape {X.shape} does not match "
                f"(num_vertices, d0) = {self.h[0].shape}"
            )
        self.h[0][:] = X
        self.h_valid[0] = True

    def reset_epoch(self) -> None:
        """Invalidate everything derived during the previous epoch."""
        for l in range(1, len(self.h)):
            self.h_valid[l] = False
        for g in self.grad_h:
            g[:] = 0.0
        self.agg_written.clear()


# ======================================================================
# Per-device state
# ======================================================================


@dataclass(eq=False)
class DeviceState:
    """One virtual device: merged row buffer plus transfer meters."""

    device_id: int
    h2d_rows: int = 0
    d2h_rows: int = 0
    d2d_rows: int = 0
    reuse_rows: int = 0
    dest_h2d_rows: int = 0
    dest_d2h_rows: int = 0
    chkpt_h2d_rows: int = 0
    chkpt_d2h_rows: int = 0
    h2d_bytes: int = 0
    d2h_bytes: int = 0
    d2d_bytes: int = 0
    dest_bytes: int = 0
    chkpt_bytes: int = 0
    peak_live_slots: int = 0
    buffer: np.ndarray | None = field(default=None, repr=False)
    grad_buffer: np.ndarray | None = field(default=None, repr=False)

    def counter_dict(self) -> dict:
        return {
            "h2d_rows": self.h2d_rows,
            "d2h_rows": self.d2h_rows,
            "d2d_rows": self.d2d_rows,
            "reuse_rows": self.reuse_rows,
            "dest_h2d_rows": self.dest_h2d_rows,
            "dest_d2h_rows": self.dest_d2h_rows,
            "chkpt_h2d_rows": self.chkpt_h2d_rows,
            "chkpt_d2h_rows": self.chkpt_d2h_rows,
            "h2d_bytes": self.h2d_bytes,
            "d2h_bytes": self.d2h_bytes,
            "d2d_bytes": self.d2d_bytes,
            "dest_bytes": self.dest_bytes,
            "chkpt_bytes": self.chkpt_bytes,
            "peak_live_slots": self.peak_live_slots,
        }


# ======================================================================
# Fleet
# ======================================================================


class DeviceFleet:
    """Executes a DedupPlan over m virtual devices with full metering."""

    def __init__(self, plan: DedupPlan, mode: str = "full",
                 flush_policy: str = "on_eviction", dtype=np.float64):
        if mode not in _MODES:
            raise SimulationError(f"unknown mode {mode!r}")
        if flush_policy not in _FLUSH_POLICIES:
            raise SimulationError(f"unknown flush policy {flush_policy!r}")
        self.plan = plan
        self.mode = mode
        self.flush_policy = flush_policy
        self.dtype = np.dtype(dtype)
        self.m = plan.m
        self.n = plan.n
        self.devices = [DeviceState(i) for i in range(self.m)]

        # Pre-resolved slot arrays: slots aligned with the sorted live set,
        # so any sorted subset resolves via one searchsorted.
        self._live = plan.layout.live_sets
        self._live_slots = [
            [
                np.array([plan.layout.slot_maps[i][j][int(v)]
                          for v in self._live[i][j]], dtype=np.int64)
                for j in range(self.n)
            ]
            for i in range(self.m)
        ]
        self._local_sets = [
            [_intersect(plan.neighbor_sets[i][j], plan.owned_sets[i][j])
             for j in range(self.n)]
            for i in range(self.m)
        ]
        if mode == "baseline":
            self._caps = [max((int(plan.neighbor_sets[i][j].size)
                               for j in range(self.n)), default=0)
                          for i in range(self.m)]
        else:
            self._caps = list(plan.layout.capacities)

        self._dim = None
        self._fwd_next = None
        self._bwd_next = None

    # ------------------------------------------------------------------
    # slot resolution
    # ------------------------------------------------------------------

    def _slots(self, i: int, j: int, vertices: np.ndarray) -> np.ndarray:
        live = self._live[i][j]
        pos = np.searchsorted(live, vertices)
        if vertices.size and (
            pos.max(initial=-1) >= live.size or
            not np.array_equal(live[pos], vertices)
        ):
            raise SimulationError(
                f"device {i} batch {j}: rows requested outside the live set"
            )
        return self._live_slots[i][j][pos]

    # ------------------------------------------------------------------
    # layer lifecycle
    # ------------------------------------------------------------------

    def begin_forward_layer(self, dim: int) -> None:
        self._dim = int(dim)
        for i, dev in enumerate(self.devices):
            dev.buffer = np.zeros((self._caps[i], self._dim), dtype=self.dtype)
        self._fwd_next = 0

    def begin_backward_layer(self, dim: int) -> None:
        """Allocate value + gradient buffers for one backward layer pass."""
        self._dim = int(dim)
        for i, dev in enumerate(self.devices):
            dev.buffer = np.zeros((self._caps[i], self._dim), dtype=self.dtype)
            if self.mode != "baseline":
                dev.grad_buffer = np.zeros((self._caps[i], self._dim),
                                           dtype=self.dtype)
        self._fwd_next = 0
        self._bwd_next = 0

    def _check_seq(self, kind: str, batch: int) -> None:
        expected = self._fwd_next if kind == "fwd" else self._bwd_next
        if expected is None or batch != expected:
            raise SimulationError(
                f"{kind} communication for batch {batch} out of order "
                f"(expected {expected}); batches must run 0..n-1 after a "
                f"layer begin"
            )

    # ------------------------------------------------------------------
    # forward communication
    # ------------------------------------------------------------------

    def dedup_comm_fwd(self, host_rows: np.ndarray, batch: int) -> list:
        """Stage h-rows for batch `batch` and return each device's
        neighbor view, bitwise equal to host_rows[N_ij]."""
        self._check_seq("fwd", batch)
        self._fwd_next = batch + 1 if batch + 1 < self.n else None
        j = batch
        plan = self.plan
        row_bytes = host_rows.shape[1] * host_rows.dtype.itemsize

        if self.mode == "baseline":
            views = []
            for i, dev in enumerate(self.devices):
                nbr = plan.neighbor_sets[i][j]
                dev.buffer[: nbr.size] = host_rows[nbr]
                dev.h2d_rows += int(nbr.size)
                dev.h2d_bytes += int(nbr.size) * row_bytes
                dev.peak_live_slots = max(dev.peak_live_slots, int(nbr.size))
                views.append(dev.buffer[: nbr.size].copy())
            return views

        # step 1: every device stages its hosted rows (host loads + carry)
        for i, dev in enumerate(self.devices):
            if self.mode == "full":
                load = plan.load_sets[i][j]
                dev.reuse_rows += int(plan.carry_sets[i][j].size)
            else:
                load = plan.owned_sets[i][j]
            if load.size:
                dev.buffer[self._slots(i, j, load)] = host_rows[load]
            dev.h2d_rows += int(load.size)
            dev.h2d_bytes += int(load.size) * row_bytes
            dev.peak_live_slots = max(dev.peak_live_slots,
                                      int(self._live[i][j].size))
        # barrier: peer buffers now hold every hosted row for this batch

        # step 2: interleaved peer fetches, skipping rows still in place
        for i, dev in enumerate(self.devices):
            carried = (plan.nbr_carry_sets[i][j]
                       if self.mode == "full" else None)
            for step in range(1, self.m):
                k = (i + step) % self.m
                fetch = plan.fetch_sets[i][j][k]
                if carried is not None and carried.size:
                    fetch = np.setdiff1d(fetch, carried, assume_unique=True)
                if fetch.size == 0:
                    continue
                src = self.devices[k].buffer[self._slots(k, j, fetch)]
                dev.buffer[self._slots(i, j, fetch)] = src
                dev.d2d_rows += int(fetch.size)
                dev.d2d_bytes += int(fetch.size) * row_bytes
        # barrier: all neighbor rows resident

        return [
            dev.buffer[self._slots(i, j, plan.neighbor_sets[i][j])].copy()
            for i, dev in enumerate(self.devices)
        ]

    # ------------------------------------------------------------------
    # backward communication
    # ------------------------------------------------------------------

    def dedup_comm_bwd(self, grad_views: list, host_grad: np.ndarray,
                       batch: int) -> None:
        """Scatter-accumulate neighbor gradients toward owners, then flush.

        grad_views[i] holds d/dh for every row of N_ij on device i.  After
        the final batch every contribution has reached host_grad exactly
        once.
        """
        self._check_seq("bwd", batch)
        self._bwd_next = batch + 1 if batch + 1 < self.n else None
        j = batch
        plan = self.plan
        row_bytes = host_grad.shape[1] * host_grad.dtype.itemsize

        if self.mode == "baseline":
            for i, dev in enumerate(self.devices):
                nbr = plan.neighbor_sets[i][j]
                if nbr.size:
                    host_grad[nbr] += grad_views[i]
                dev.d2h_rows += int(nbr.size)
                dev.d2h_bytes += int(nbr.size) * row_bytes
                dev.peak_live_slots = max(dev.peak_live_slots, int(nbr.size))
            return

        # step 1: push gradients to owning devices (ascending source id)
        for k, owner_dev in enumerate(self.devices):
            for i in range(self.m):
                rows = (self._local_sets[k][j] if i == k
                        else plan.fetch_sets[i][j][k])
                if rows.size == 0:
                    continue
                pos = np.searchsorted(plan.neighbor_sets[i][j], rows)
                owner_dev.grad_buffer[self._slots(k, j, rows)] += \
                    grad_views[i][pos]
                if i != k:
                    self.devices[i].d2d_rows += int(rows.size)
                    self.devices[i].d2d_bytes += int(rows.size) * row_bytes
        # barrier: every batch-j contribution is accumulated at its owner

        # step 2: flush completed rows to the host (host-side addition)
        for k, dev in enumerate(self.devices):
            dev.peak_live_slots = max(dev.peak_live_slots,
                                      int(self._live[k][j].size))
            owned = plan.owned_sets[k][j]
            if self.mode == "p2p" or self.flush_policy == "every_batch":
                flush = owned
            elif j + 1 < self.n:
                # rows absent from the next batch have their full gradient
                flush = np.setdiff1d(owned, plan.owned_sets[k][j + 1],
                                     assume_unique=True)
            else:
                flush = owned  # device's last batch of the layer
            if flush.size:
                slots = self._slots(k, j, flush)
                host_grad[flush] += dev.grad_buffer[slots]
                dev.grad_buffer[slots] = 0.0
            dev.d2h_rows += int(flush.size)
            dev.d2h_bytes += int(flush.size) * row_bytes

    # ------------------------------------------------------------------
    # destination-row traffic (outputs, gradients, GAT inputs)
    # ------------------------------------------------------------------

    def _dest(self, i: int, j: int) -> np.ndarray:
        if self.plan.dest_sets is None:
            raise SimulationError(
                "plan carries no destination sets; build it from a "
                "partition to run training traffic"
            )
        return self.plan.dest_sets[i][j]

    def load_dest_rows(self, host_rows: np.ndarray, batch: int) -> list:
        """Fetch destination-vertex rows (e.g. output gradients) per device."""
        out = []
        row_bytes = host_rows.shape[1] * host_rows.dtype.itemsize
        for i, dev in enumerate(self.devices):
            verts = self._dest(i, batch)
            out.append(host_rows[verts].copy())
            dev.dest_h2d_rows += int(verts.size)
            dev.dest_bytes += int(verts.size) * row_bytes
        return out

    def store_dest_rows(self, host_rows: np.ndarray, batch: int,
                        rows: list) -> None:
        """Write per-device destination rows back to a host array."""
        row_bytes = host_rows.shape[1] * host_rows.dtype.itemsize
        for i, dev in enumerate(self.devices):
            verts = self._dest(i, batch)
            host_rows[verts] = rows[i]
            dev.dest_d2h_rows += int(verts.size)
            dev.dest_bytes += int(verts.size) * row_bytes

    def add_dest_grads(self, host_grad: np.ndarray, batch: int,
                       rows: list) -> None:
        """Accumulate per-device destination-row gradients into the host."""
        row_bytes = host_grad.shape[1] * host_grad.dtype.itemsize
        for i, dev in enumerate(self.devices):
            verts = self._dest(i, batch)
            if verts.size:
                host_grad[verts] += rows[i]
            dev.dest_d2h_rows += int(verts.size)
            dev.dest_bytes += int(verts.size) * row_bytes

    # ------------------------------------------------------------------
    # recomputation checkpoints
    # ------------------------------------------------------------------

    def store_checkpoint(self, host: HostStore, layer: int, batch: int,
                         agg_rows: list) -> None:
        """Cache per-chunk aggregates host-side for the hybrid backward."""
        if layer not in host.agg:
            host.agg[layer] = np.zeros((host.num_vertices, host.dims[layer]),
                                       dtype=host.dtype)
        row_bytes = host.dims[layer] * host.dtype.itemsize
        for i, dev in enumerate(self.devices):
            verts = self._dest(i, batch)
            host.agg[layer][verts] = agg_rows[i]
            host.agg_written.add((layer, i, batch))
            dev.chkpt_d2h_rows += int(verts.size)
            dev.chkpt_bytes += int(verts.size) * row_bytes

    def load_recomp_chkpt(self, host: HostStore, kind: str, layer: int,
                          batch: int):
        """Reload what the backward pass of `layer` needs at `batch`.

        kind="gcn": the cached aggregate rows for each chunk's destinations
        (the backward skips aggregation entirely).
        kind="gat": the layer-input neighbor rows, re-staged through the
        forward communication machinery, plus destination input rows.
        Returns a list per device ("gcn") or an (h_N list, h_dst list)
        tuple ("gat").
        """
        if kind == "gcn":
            out = []
            row_bytes = host.dims[layer] * host.dtype.itemsize
            for i, dev in enumerate(self.devices):
                if (layer, i, batch) not in host.agg_written:
                    raise CheckpointMissingError(layer, i, batch)
                verts = self._dest(i, batch)
                out.append(host.agg[layer][verts].copy())
                dev.chkpt_h2d_rows += int(verts.size)
                dev.chkpt_bytes += int(verts.size) * row_bytes
            return out
        if kind == "gat":
            if not host.h_valid[layer]:
                raise CheckpointMissingError(layer, 0, batch)
            h_nbr = self.dedup_comm_fwd(host.h[layer], batch)
            h_dst = self.load_dest_rows(host.h[layer], batch)
            return h_nbr, h_dst
        raise SimulationError(f"unknown model kind {kind!r}")

    # ------------------------------------------------------------------
    # reporting
    # ------------------------------------------------------------------

    def transfer_report(self, fwd_passes: int = 0, bwd_passes: int = 0,
                        cost_params=None) -> dict:
        """Totals per transfer class, peaks, and planner-consistency check.

        fwd_passes / bwd_passes: how many complete n-batch communication
        sweeps ran in each direction (a GAT backward layer contributes one
        of each).  When both are zero the consistency check is skipped.
        Passing CostParams adds the throughput-model cost per swept layer.
        """
        per_device = [dev.counter_dict() for dev in self.devices]
        totals: dict = {}
        for rec in per_device:
            for key, val in rec.items():
                if key == "peak_live_slots":
                    continue
                totals[key] = totals.get(key, 0) + val

        report = {
            "mode": self.mode,
            "per_device": per_device,
            "totals": totals,
            "peak_live_slots": [dev.peak_live_slots for dev in self.devices],
            "volumes": {
                "v_ori": self.plan.volumes.v_ori,
                "v_p2p": self.plan.volumes.v_p2p,
                "v_ru": self.plan.volumes.v_ru,
            },
        }
        if cost_params is not None:
            from .planner import comm_cost

            report["predicted_cost_per_layer"] = comm_cost(
                self.plan.volumes, cost_params)
        if fwd_passes or bwd_passes:
            pred = predicted_transfers(self.plan, self.mode)
            expected = {
                "h2d_rows": fwd_passes * pred["fwd_h2d_rows"],
                "d2h_rows": bwd_passes * pred["bwd_d2h_rows"],
                "d2d_rows": (fwd_passes * pred["fwd_d2d_rows"]
                             + bwd_passes * pred["bwd_d2d_rows"]),
                "reuse_rows": fwd_passes * pred["fwd_reuse_rows"],
            }
            report["expected"] = expected
            report["planner_consistent"] = all(
                totals[k] == v for k, v in expected.items()
            ) and all(
                dev.peak_live_slots == pred["peak_slots"][i]
                for i, dev in enumerate(self.devices)
            )
        return report
