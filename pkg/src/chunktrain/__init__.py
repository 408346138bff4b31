"""Desk-scale simulator and planner for partition-based full-graph GNN
training with host memory offloading.

The pipeline: build a two-level partition (locality partitions x
in-edge-balanced chunks), derive a deduplicated host/device transfer
plan with cost-guided grid reorganization, then execute fully metered
training on virtual devices with recomputation-based backward passes,
verified against a monolithic reference trainer.
"""

from .errors import (
    CheckpointMissingError,
    ChunktrainError,
    ConfigError,
    GraphFormatError,
    GraphParseError,
    PartitionError,
    PlanError,
    SimulationError,
)
from .graph import (
    Graph,
    from_edges,
    gcn_edge_weights,
    load_edge_list,
    load_graph_cache,
    save_graph_cache,
)
from .partition import (
    ChunkSubgraph,
    PartitionAssignment,
    TwoLevelPartition,
    balance_capacity,
    chunk_from_vertices,
    edge_cut,
    load_partition,
    partition_vertices,
    replication_factor,
    save_partition,
    split_chunks,
    split_ranges,
    two_level_from_ranges,
)
from .planner import (
    MODES,
    BufferLayout,
    CostParams,
    DedupPlan,
    ReorgResult,
    Volumes,
    build_buffer_layout,
    build_plan,
    comm_cost,
    comm_volumes,
    intra_split,
    plan_for_partition,
    plan_summary,
    predicted_transfers,
    remote_fetch_sets,
    reorganize,
    save_plan,
    transition_sets,
)
from .devices import DeviceFleet, DeviceState, HostStore
from .engine import (
    ActivationTracker,
    EpochResult,
    ModelConfig,
    downstream_loss,
    gat_layer_backward_recompute,
    gat_layer_backward_storeall,
    gat_layer_forward,
    gcn_layer_backward_hybrid,
    gcn_layer_backward_storeall,
    gcn_layer_forward,
    init_model,
    load_labels,
    load_matrix,
    save_labels,
    save_matrix,
    sync_and_update,
    train_epoch,
)
from .reference import reference_train, reference_train_epoch
from .synth import SynthDataset, SynthSpec, synth_dataset, synth_graph
from .cli import RunConfig, main

__version__ = "0.1.0"

__all__ = [
    "ActivationTracker",
    "BufferLayout",
    "CheckpointMissingError",
    "ChunkSubgraph",
    "ChunktrainError",
    "ConfigError",
    "CostParams",
    "DedupPlan",
    "DeviceFleet",
    "DeviceState",
    "EpochResult",
    "Graph",
    "GraphFormatError",
    "GraphParseError",
    "HostStore",
    "MODES",
    "ModelConfig",
    "PartitionAssignment",
    "PartitionError",
    "PlanError",
    "ReorgResult",
    "RunConfig",
    "SimulationError",
    "SynthDataset",
    "SynthSpec",
    "TwoLevelPartition",
    "Volumes",
    "balance_capacity",
    "build_buffer_layout",
    "build_plan",
    "chunk_from_vertices",
    "comm_cost",
    "comm_volumes",
    "downstream_loss",
    "edge_cut",
    "from_edges",
    "gat_layer_backward_recompute",
    "gat_layer_backward_storeall",
    "gat_layer_forward",
    "gcn_edge_weights",
    "gcn_layer_backward_hybrid",
    "gcn_layer_backward_storeall",
    "gcn_layer_forward",
    "init_model",
    "intra_split",
    "load_edge_list",
    "load_graph_cache",
    "load_labels",
    "load_matrix",
    "load_partition",
    "main",
    "partition_vertices",
    "plan_for_partition",
    "plan_summary",
    "predicted_transfers",
    "reference_train",
    "reference_train_epoch",
    "remote_fetch_sets",
    "reorganize",
    "replication_factor",
    "save_graph_cache",
    "save_labels",
    "save_matrix",
    "save_partition",
    "save_plan",
    "split_chunks",
    "split_ranges",
    "sync_and_update",
    "synth_dataset",
    "synth_graph",
    "train_epoch",
    "transition_sets",
    "two_level_from_ranges",
]
