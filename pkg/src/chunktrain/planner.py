"""Deduplicated host/device communication planning over a chunk grid.

Given the neighbor sets N_ij of an m x n chunk grid (device i, batch j)
and the vertex owner map, this module derives:

  * per-batch transition sets  U_j = union_i N_ij, split by owner into
    T_ij, the rows device i hosts for batch j;
  * the intra-device split of T_ij into rows carried over from batch j-1
    (reused in place) and rows freshly loaded from the host;
  * remote-fetch lists N_ij ^ T_kj telling device i which rows to copy
    from each peer k;
  * the three communication volumes and the throughput-weighted cost;
  * a stable slot layout for the merged transition+neighbor buffer;
  * a greedy reorganization of the grid that improves cross-batch reuse.

Rows move once from host to their owner, then fan out device-to-device;
consecutive batches sharing rows skip the host entirely.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError
from .partition import TwoLevelPartition

# ======================================================================
# Sorted-set primitives (all sets are sorted unique int64 arrays)
# ======================================================================

_EMPTY = np.empty(0, dtype=np.int64)


def _as_set(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.int64).ravel()
    if arr.size and (np.diff(arr) <= 0).any():
        arr = np.unique(arr)
    return arr


def _union_many(sets) -> np.ndarray:
    parts = [s for s in sets if s.size]
    if not parts:
        return _EMPTY.copy()
    return np.unique(np.concatenate(parts))


def _intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0 or b.size == 0:
        return _EMPTY.copy()
    return np.intersect1d(a, b, assume_unique=True)


def _difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return _EMPTY.copy()
    if b.size == 0:
        return a.copy()
    return np.setdiff1d(a, b, assume_unique=True)


# ======================================================================
# Types
# ======================================================================


@dataclass(frozen=True)
class Volumes:
    """Row counts moved per layer under the three transfer policies."""

    v_ori: int   # every chunk loads its full neighbor set from host
    v_p2p: int   # one hosted copy per batch, peers fetch device-to-device
    v_ru: int    # additionally, rows shared with the previous batch stay put


@dataclass(frozen=True)
class CostParams:
    """Relative link throughputs (rows per unit time)."""

    t_hd: float = 25.0    # host <-> device
    t_dd: float = 200.0   # device <-> device
    t_ru: float = 1300.0  # in-place reuse (effective)


@dataclass(eq=False)
class BufferLayout:
    """Stable slot assignment for each device's merged row buffer.

    slot_maps[i][j] maps vertex id -> slot for every row live on device i
    during batch j (live = T_ij union N_ij).  Rows live in consecutive
    batches keep their slot; evicted slots are recycled in ascending slot
    order; the buffer only grows when no freed slot is available, so
    capacities[i] == max_j |live set|.
    """

    capacities: list
    slot_maps: list   # [i][j] -> dict[int, int]
    live_sets: list   # [i][j] -> sorted array


@dataclass(eq=False)
class DedupPlan:
    """Complete communication schedule for one chunk grid."""

    m: int
    n: int
    owner: np.ndarray
    neighbor_sets: list        # [i][j] N_ij
    union_sets: list           # [j]    U_j
    owned_sets: list           # [i][j] T_ij
    carry_sets: list           # [i][j] rows of T_ij shared with batch j-1
    load_sets: list            # [i][j] rows of T_ij loaded from host
    fetch_sets: list           # [i][j] dict peer k -> N_ij ^ T_kj (k != i)
    nbr_carry_sets: list       # [i][j] N_ij ^ N_i,j-1 (rows kept in place)
    layout: BufferLayout
    volumes: Volumes
    dest_sets: list | None = field(default=None)

    def live_set(self, i: int, j: int) -> np.ndarray:
        return self.layout.live_sets[i][j]


# ======================================================================
# Transition sets and splits
# ======================================================================


def transition_sets(neighbor_sets: list, owner: np.ndarray):
    """Per-batch union sets and their owner-restricted splits.

    Returns (union_sets, owned_sets): U_j = union_i N_ij and
    T_ij = { v in U_j : owner[v] == i }.  Every vertex referenced by any
    neighbor set must have an owner in [0, m).
    """
    m = len(neighbor_sets)
    if m == 0:
        raise PlanError("neighbor_sets must have at least one device row")
    n = len(neighbor_sets[0])
    owner = np.asarray(owner, dtype=np.int64)
    nbrs = [[_as_set(s) for s in row] for row in neighbor_sets]
    for row in nbrs:
        if len(row) != n:
            raise PlanError("all devices must have the same batch count")

    union_sets = []
    owned_sets = [[None] * n for _ in range(m)]
    for j in range(n):
        u = _union_many(nbrs[i][j] for i in range(m))
        if u.size:
            if u[-1] >= owner.shape[0] or u[0] < 0:
                raise PlanError(
                    f"batch {j} references vertex {int(u[-1])} outside the "
                    f"owner map (size {owner.shape[0]})"
                )
            owners = owner[u]
            if owners.min() < 0 or owners.max() >= m:
                bad = int(u[(owners < 0) | (owners >= m)][0])
                raise PlanError(
                    f"vertex {bad} has owner {int(owner[bad])}, outside [0, {m})"
                )
        else:
            owners = _EMPTY
        union_sets.append(u)
        for i in range(m):
            owned_sets[i][j] = u[owners == i]
    return union_sets, owned_sets


def intra_split(owned_sets: list):
    """Split each T_ij into carried rows (shared with T_i,j-1) and fresh loads.

    Batch 0 carries nothing.  carry_sets[i][j] = T_ij ^ T_i,j-1;
    load_sets[i][j] = T_ij minus that.
    """
    m = len(owned_sets)
    n = len(owned_sets[0]) if m else 0
    carry = [[None] * n for _ in range(m)]
    load = [[None] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            if j == 0:
                carry[i][j] = _EMPTY.copy()
                load[i][j] = owned_sets[i][j].copy()
            else:
                carry[i][j] = _intersect(owned_sets[i][j], owned_sets[i][j - 1])
                load[i][j] = _difference(owned_sets[i][j], owned_sets[i][j - 1])
    return carry, load


def remote_fetch_sets(neighbor_sets: list, owned_sets: list):
    """fetch[i][j][k] = N_ij ^ T_kj for each peer k != i.

    Union over k (plus the local T_ij rows) covers all of N_ij.
    """
    m = len(neighbor_sets)
    n = len(neighbor_sets[0])
    out = []
    for i in range(m):
        row = []
        for j in range(n):
            per_peer = {}
            for k in range(m):
                if k == i:
                    continue
                per_peer[k] = _intersect(_as_set(neighbor_sets[i][j]),
                                         owned_sets[k][j])
            row.append(per_peer)
        out.append(row)
    return out


# ======================================================================
# Volumes and cost
# ======================================================================


def comm_volumes(neighbor_sets: list, union_sets: list) -> Volumes:
    v_ori = sum(int(_as_set(s).size) for row in neighbor_sets for s in row)
    v_p2p = sum(int(u.size) for u in union_sets)
    v_ru = int(union_sets[0].size) if union_sets else 0
    for j in range(1, len(union_sets)):
        v_ru += int(_difference(union_sets[j], union_sets[j - 1]).size)
    return Volumes(v_ori=v_ori, v_p2p=v_p2p, v_ru=v_ru)


def comm_cost(v: Volumes, params: CostParams = CostParams()) -> float:
    """Throughput-weighted transfer cost of one layer's row movement.

    cost = V_ru/t_hd + (V_ori - V_p2p)/t_dd + (V_p2p - V_ru)/t_ru.
    With equal throughputs T this telescopes to V_ori/T.
    """
    for name in ("t_hd", "t_dd", "t_ru"):
        if getattr(params, name) <= 0:
            raise PlanError(f"throughput {name} must be positive, got "
                            f"{getattr(params, name)}")
    return (
        v.v_ru / params.t_hd
        + (v.v_ori - v.v_p2p) / params.t_dd
        + (v.v_p2p - v.v_ru) / params.t_ru
    )


# ======================================================================
# Buffer layout
# ======================================================================


def build_buffer_layout(owned_sets: list, neighbor_sets: list) -> BufferLayout:
    m = len(owned_sets)
    n = len(owned_sets[0]) if m else 0
    capacities = []
    slot_maps = []
    live_sets = []
    for i in range(m):
        slots: dict = {}
        free: list = []
        allocated = 0
        maps_row = []
        live_row = []
        for j in range(n):
            live = _union_many((owned_sets[i][j], _as_set(neighbor_sets[i][j])))
            live_lookup = set(live.tolist())
            evicted = sorted(v for v in slots if v not in live_lookup)
            for v in evicted:
                heapq.heappush(free, slots.pop(v))
            for v in live.tolist():
                if v in slots:
                    continue
                if free:
                    slots[v] = heapq.heappop(free)
                else:
                    slots[v] = allocated
                    allocated += 1
            maps_row.append(dict(slots))
            live_row.append(live)
        capacities.append(allocated)
        slot_maps.append(maps_row)
        live_sets.append(live_row)
    return BufferLayout(capacities=capacities, slot_maps=slot_maps,
                        live_sets=live_sets)


# ======================================================================
# Full plan
# ======================================================================


def build_plan(neighbor_sets: list, owner: np.ndarray,
               dest_sets: list | None = None) -> DedupPlan:
    nbrs = [[_as_set(s) for s in row] for row in neighbor_sets]
    union_sets, owned_sets = transition_sets(nbrs, owner)
    carry_sets, load_sets = intra_split(owned_sets)
    fetch_sets = remote_fetch_sets(nbrs, owned_sets)
    m, n = len(nbrs), len(nbrs[0])
    nbr_carry = [[None] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            nbr_carry[i][j] = (
                _EMPTY.copy() if j == 0 else _intersect(nbrs[i][j], nbrs[i][j - 1])
            )
    layout = build_buffer_layout(owned_sets, nbrs)
    volumes = comm_volumes(nbrs, union_sets)
    if dest_sets is not None:
        dest_sets = [[_as_set(s) for s in row] for row in dest_sets]
    return DedupPlan(
        m=m, n=n, owner=np.asarray(owner, dtype=np.int64),
        neighbor_sets=nbrs, union_sets=union_sets, owned_sets=owned_sets,
        carry_sets=carry_sets, load_sets=load_sets, fetch_sets=fetch_sets,
        nbr_carry_sets=nbr_carry, layout=layout, volumes=volumes,
        dest_sets=dest_sets,
    )


def plan_for_partition(p: TwoLevelPartition) -> DedupPlan:
    return build_plan(p.neighbor_sets(), p.assignment.owner, p.dest_sets())


# ======================================================================
# Per-mode transfer predictions
# ======================================================================

MODES = ("baseline", "p2p", "full")


def predicted_transfers(plan: DedupPlan, mode: str) -> dict:
    """Exact per-layer row counts the simulator must reproduce.

    Forward: h2d (host loads), d2d (peer fetches), reuse (rows kept in
    place).  Backward: d2h (gradient flushes), d2d (gradient pushes).
    """
    if mode not in MODES:
        raise PlanError(f"unknown mode {mode!r}, expected one of {MODES}")
    fwd_h2d = fwd_d2d = fwd_reuse = bwd_d2h = bwd_d2d = 0
    peak = []
    for i in range(plan.m):
        peak_i = 0
        for j in range(plan.n):
            nbr = plan.neighbor_sets[i][j]
            if mode == "baseline":
                fwd_h2d += int(nbr.size)
                bwd_d2h += int(nbr.size)
                peak_i = max(peak_i, int(nbr.size))
                continue
            peak_i = max(peak_i, int(plan.live_set(i, j).size))
            if mode == "p2p":
                fwd_h2d += int(plan.owned_sets[i][j].size)
                bwd_d2h += int(plan.owned_sets[i][j].size)
                for k, f in plan.fetch_sets[i][j].items():
                    fwd_d2d += int(f.size)
                    bwd_d2d += int(f.size)
            else:  # full
                fwd_h2d += int(plan.load_sets[i][j].size)
                fwd_reuse += int(plan.carry_sets[i][j].size)
                bwd_d2h += int(plan.load_sets[i][j].size)
                carried = plan.nbr_carry_sets[i][j]
                for k, f in plan.fetch_sets[i][j].items():
                    fwd_d2d += int(_difference(f, carried).size)
                    bwd_d2d += int(f.size)
        peak.append(peak_i)
    return {
        "fwd_h2d_rows": fwd_h2d,
        "fwd_d2d_rows": fwd_d2d,
        "fwd_reuse_rows": fwd_reuse,
        "bwd_d2h_rows": bwd_d2h,
        "bwd_d2d_rows": bwd_d2d,
        "peak_slots": peak,
    }


# ======================================================================
# Grid reorganization
# ======================================================================


@dataclass(eq=False)
class ReorgResult:
    partition: TwoLevelPartition
    chunk_orders: list   # [i][pos] = original chunk index of device i at batch pos
    batch_order: list    # [pos] = phase-1 batch index placed at pos


def reorganize(p: TwoLevelPartition, *, move_all_rows: bool = True) -> ReorgResult:
    """Two-phase greedy reordering of the chunk grid.

    Phase 1 keeps device 0's chunk order and, device by device, assigns
    each batch the unprocessed chunk overlapping most with the batch's
    running union set.  Phase 2 keeps batch 0 and repeatedly appends the
    batch whose union set overlaps most with the previously placed one.
    Ties break toward the smallest original index.  With
    move_all_rows=False, phase 2 reorders devices 1..m-1 only, leaving
    device 0's row in place.
    """
    m, n = p.m, p.n
    nbrs = [[_as_set(c.sources) for c in row] for row in p.chunks]

    # ---- phase 1: align chunks to batches, device by device ----
    grid = [list(p.chunks[0])]
    chunk_orders = [list(range(n))]
    unions = [nbrs[0][j].copy() for j in range(n)]
    for i in range(1, m):
        remaining = list(range(n))
        row = []
        order = []
        for j in range(n):
            best_k = remaining[0]
            best_score = -1
            for k in remaining:
                score = int(_intersect(nbrs[i][k], unions[j]).size)
                if score > best_score:
                    best_score = score
                    best_k = k
            row.append(p.chunks[i][best_k])
            order.append(best_k)
            remaining.remove(best_k)
            unions[j] = _union_many((unions[j], nbrs[i][best_k]))
        grid.append(row)
        chunk_orders.append(order)

    # ---- phase 2: chain batches by adjacent union overlap ----
    batch_order = [0]
    remaining = list(range(1, n))
    while remaining:
        prev = unions[batch_order[-1]]
        best_k = remaining[0]
        best_score = -1
        for k in remaining:
            score = int(_intersect(unions[k], prev).size)
            if score > best_score:
                best_score = score
                best_k = k
        batch_order.append(best_k)
        remaining.remove(best_k)

    new_chunks = []
    new_orders = []
    for i in range(m):
        if i == 0 and not move_all_rows:
            new_chunks.append(list(grid[0]))
            new_orders.append(list(chunk_orders[0]))
        else:
            new_chunks.append([grid[i][b] for b in batch_order])
            new_orders.append([chunk_orders[i][b] for b in batch_order])

    reord = TwoLevelPartition(m=m, n=n, assignment=p.assignment, chunks=new_chunks)
    return ReorgResult(partition=reord, chunk_orders=new_orders,
                       batch_order=batch_order)


# ======================================================================
# Plan artifacts
# ======================================================================

_PLAN_FORMAT = "chunktrain-plan-v1"


def plan_summary(plan: DedupPlan, params: CostParams) -> dict:
    return {
        "m": plan.m,
        "n": plan.n,
        "volumes": {
            "v_ori": plan.volumes.v_ori,
            "v_p2p": plan.volumes.v_p2p,
            "v_ru": plan.volumes.v_ru,
        },
        "cost": comm_cost(plan.volumes, params),
        "batch_union_sizes": [int(u.size) for u in plan.union_sets],
        "device_splits": [
            [
                {
                    "transition": int(plan.owned_sets[i][j].size),
                    "carried": int(plan.carry_sets[i][j].size),
                    "host_loaded": int(plan.load_sets[i][j].size),
                }
                for j in range(plan.n)
            ]
            for i in range(plan.m)
        ],
        "buffer_capacities": [int(c) for c in plan.layout.capacities],
        "predicted_transfers": {mode: predicted_transfers(plan, mode)
                                for mode in MODES},
    }


def save_plan(
    path: str,
    chosen_plan: DedupPlan,
    params: CostParams,
    *,
    graph_hash: str,
    partition_hash: str,
    cost_identity: float,
    cost_reorganized: float | None,
    chosen: str,
    reorg: ReorgResult | None = None,
) -> None:
    doc = {
        "format": _PLAN_FORMAT,
        "graph_hash": graph_hash,
        "partition_hash": partition_hash,
        "cost_params": {"t_hd": params.t_hd, "t_dd": params.t_dd,
                        "t_ru": params.t_ru},
        "cost_identity": cost_identity,
        "cost_reorganized": cost_reorganized,
        "chosen_ordering": chosen,
        "plan": plan_summary(chosen_plan, params),
    }
    if reorg is not None:
        doc["reorganization"] = {
            "chunk_orders": reorg.chunk_orders,
            "batch_order": reorg.batch_order,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
