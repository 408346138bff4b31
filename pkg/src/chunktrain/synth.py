"""Seeded synthetic graphs and node data for desk-scale experiments.

The generator plants clusters with intra-cluster edge preference and a
small hub pool per cluster whose in-edge popularity falls off steeply
(log-uniform rank selection), giving the skewed, community-structured
connectivity on which deduplicated transfer scheduling pays off.

Cluster membership is laid out in shuffled contiguous id segments: each
cluster's vertices occupy several disjoint id ranges spread across the
id space.  Ascending-id chunking therefore interleaves clusters, which
makes chunk composition vary along a partition and leaves headroom for
the grid reorganization to group similar chunks.

Every artifact derives from the single 64-bit seed in the spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .graph import Graph, from_edges

# ======================================================================
# Spec
# ======================================================================


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the clustered generator (all seeded)."""

    num_vertices: int
    avg_degree: float = 8.0
    num_clusters: int = 8
    segments_per_cluster: int = 8
    intra_prob: float = 0.85
    hub_fraction: float = 0.02
    hub_prob: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.num_vertices < 1:
            raise ConfigError("num_vertices must be positive")
        if self.num_clusters < 1 or self.segments_per_cluster < 1:
            raise ConfigError("cluster/segment counts must be positive")
        if self.num_vertices < self.num_clusters * self.segments_per_cluster:
            raise ConfigError(
                f"num_vertices={self.num_vertices} is smaller than "
                f"num_clusters*segments_per_cluster="
                f"{self.num_clusters * self.segments_per_cluster}"
            )
        if not (0.0 <= self.intra_prob <= 1.0):
            raise ConfigError("intra_prob must lie in [0, 1]")
        if not (0.0 < self.hub_fraction <= 1.0):
            raise ConfigError("hub_fraction must lie in (0, 1]")
        if not (0.0 <= self.hub_prob <= 1.0):
            raise ConfigError("hub_prob must lie in [0, 1]")
        if self.avg_degree <= 0:
            raise ConfigError("avg_degree must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(
                f"unknown synthetic-graph fields: {sorted(extra)}")
        if "num_vertices" not in doc:
            raise ConfigError("synthetic-graph spec needs num_vertices")
        return cls(**doc)


@dataclass(eq=False)
class SynthDataset:
    """Graph plus aligned node data produced from one seed."""

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    cluster_of: np.ndarray = field(repr=False, default=None)


# ======================================================================
# Graph synthesis
# ======================================================================


def _cluster_membership(spec: SynthSpec, rng: np.random.Generator):
    """Assign clusters in shuffled contiguous id segments."""
    V, C = spec.num_vertices, spec.num_clusters
    seg_count = C * spec.segments_per_cluster
    seg_cluster = rng.permutation(
        np.repeat(np.arange(C, dtype=np.int64), spec.segments_per_cluster))
    bounds = np.linspace(0, V, seg_count + 1).astype(np.int64)
    cluster_of = np.repeat(seg_cluster, np.diff(bounds))
    return cluster_of


def _padded_pools(groups: list):
    """Stack variable-length id pools into a padded matrix + length vector."""
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    width = max(1, int(counts.max()))
    pad = np.zeros((len(groups), width), dtype=np.int64)
    for c, g in enumerate(groups):
        pad[c, : len(g)] = g
    return pad, counts


def synth_graph_with_clusters(spec: SynthSpec):
    """Returns (graph, cluster_of).  Deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    V, C = spec.num_vertices, spec.num_clusters
    cluster_of = _cluster_membership(spec, rng)

    members = [np.flatnonzero(cluster_of == c) for c in range(C)]
    hubs = []
    for c in range(C):
        k = max(1, int(round(spec.hub_fraction * members[c].size)))
        hubs.append(np.sort(rng.choice(members[c], size=k, replace=False)))
    members_pad, member_count = _padded_pools(members)
    hubs_pad, hub_count = _padded_pools(hubs)

    E = int(round(spec.avg_degree * V))
    dst = rng.integers(0, V, size=E)
    dst_cluster = cluster_of[dst]
    cross = rng.random(E) >= spec.intra_prob
    if C > 1:
        shift = rng.integers(1, C, size=E)
    else:
        shift = np.zeros(E, dtype=np.int64)
        cross[:] = False
    src_cluster = np.where(cross, (dst_cluster + shift) % C, dst_cluster)

    use_hub = rng.random(E) < spec.hub_prob
    # log-uniform rank: floor(pool_size ** u) concentrates on low ranks
    hub_rank = np.floor(
        hub_count[src_cluster] ** rng.random(E)).astype(np.int64) - 1
    hub_rank = np.clip(hub_rank, 0, None)
    member_rank = np.floor(
        rng.random(E) * member_count[src_cluster]).astype(np.int64)
    src = np.where(
        use_hub,
        hubs_pad[src_cluster, hub_rank],
        members_pad[src_cluster, member_rank],
    )

    # deduplicate parallel edges
    key = dst.astype(np.int64) * V + src
    _, keep = np.unique(key, return_index=True)
    return from_edges(src[keep], dst[keep], num_vertices=V), cluster_of


def synth_graph(spec: SynthSpec) -> Graph:
    return synth_graph_with_clusters(spec)[0]


# ======================================================================
# Node data
# ======================================================================


def synth_node_data(num_vertices: int, feature_dim: int, num_classes: int,
                    seed: int, cluster_of: np.ndarray | None = None,
                    mask_fraction: float = 0.3, noise: float = 0.5):
    """Seeded features/labels/mask.

    With cluster membership, features are noisy cluster centroids and the
    label is the cluster modulo the class count, so the task is learnable.
    Without, features are standard normal and labels uniform.
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    if not (0.0 < mask_fraction <= 1.0):
        raise ConfigError("mask_fraction must lie in (0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if cluster_of is not None:
        C = int(cluster_of.max()) + 1
        centers = rng.normal(0.0, 1.0, size=(C, feature_dim))
        X = centers[cluster_of] + noise * rng.normal(
            0.0, 1.0, size=(num_vertices, feature_dim))
        y = (cluster_of % num_classes).astype(np.int64)
    else:
        X = rng.normal(0.0, 1.0, size=(num_vertices, feature_dim))
        y = rng.integers(0, num_classes, size=num_vertices)
    mask = rng.random(num_vertices) < mask_fraction
    if not mask.any():
        mask[0] = True
    return X, y, mask


def synth_dataset(spec: SynthSpec, feature_dim: int, num_classes: int,
                  mask_fraction: float = 0.3) -> SynthDataset:
    g, cluster_of = synth_graph_with_clusters(spec)
    X, y, mask = synth_node_data(
        spec.num_vertices, feature_dim, num_classes, spec.seed,
        cluster_of=cluster_of, mask_fraction=mask_fraction)
    return SynthDataset(graph=g, features=X, labels=y, mask=mask,
                        cluster_of=cluster_of)
