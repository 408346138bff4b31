"""Seeded synthetic graph and node-data generation."""

import numpy as np
import pytest

from chunktrain import synth
from chunktrain.errors import ConfigError


def test_spec_validation():
    with pytest.raises(ConfigError, match="num_vertices"):
        synth.SynthSpec(num_vertices=0)
    with pytest.raises(ConfigError, match="smaller than"):
        synth.SynthSpec(num_vertices=10, num_clusters=8,
                        segments_per_cluster=8)
    with pytest.raises(ConfigError, match="intra_prob"):
        synth.SynthSpec(num_vertices=100, intra_prob=1.5)
    with pytest.raises(ConfigError, match="avg_degree"):
        synth.SynthSpec(num_vertices=100, avg_degree=0.0)
    with pytest.raises(ConfigError, match="hub_fraction"):
        synth.SynthSpec(num_vertices=100, hub_fraction=0.0)


def test_spec_dict_round_trip():
    spec = synth.SynthSpec(num_vertices=200, avg_degree=4.0, seed=3)
    assert synth.SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError, match="unknown synthetic-graph fields"):
        synth.SynthSpec.from_dict({"num_vertices": 100, "wat": 1})
    with pytest.raises(ConfigError, match="needs num_vertices"):
        synth.SynthSpec.from_dict({"avg_degree": 4.0})


def test_graph_is_deterministic_in_seed():
    spec = synth.SynthSpec(num_vertices=300, seed=9)
    g1, c1 = synth.synth_graph_with_clusters(spec)
    g2, c2 = synth.synth_graph_with_clusters(spec)
    assert g1.content_hash() == g2.content_hash()
    np.testing.assert_array_equal(c1, c2)
    g3 = synth.synth_graph(synth.SynthSpec(num_vertices=300, seed=10))
    assert g3.content_hash() != g1.content_hash()


def test_graph_shape_and_dedup():
    spec = synth.SynthSpec(num_vertices=500, avg_degree=6.0, seed=1)
    g, cluster_of = synth.synth_graph_with_clusters(spec)
    assert g.num_vertices == 500
    # parallel edges are removed, so the count is at most the draw budget
    assert 0 < g.num_edges <= round(6.0 * 500)
    pairs = set(zip(g.csc_sources.tolist(),
                    g.edge_destinations().tolist()))
    assert len(pairs) == g.num_edges
    assert cluster_of.shape == (500,)
    assert cluster_of.min() >= 0 and cluster_of.max() < spec.num_clusters
    assert np.bincount(cluster_of, minlength=8).min() > 0


def test_cluster_segments_interleave_in_id_space():
    # each cluster occupies several disjoint id ranges, so ascending-id
    # chunks mix clusters; count the id-boundary changes
    spec = synth.SynthSpec(num_vertices=400, num_clusters=4,
                           segments_per_cluster=8, seed=2)
    _g, cluster_of = synth.synth_graph_with_clusters(spec)
    changes = int((np.diff(cluster_of) != 0).sum())
    assert changes >= 8  # far more fragmented than one block per cluster


def test_full_intra_probability_keeps_edges_inside_clusters():
    spec = synth.SynthSpec(num_vertices=300, num_clusters=3,
                           segments_per_cluster=4, intra_prob=1.0, seed=4)
    g, cluster_of = synth.synth_graph_with_clusters(spec)
    src_c = cluster_of[g.csc_sources]
    dst_c = cluster_of[g.edge_destinations()]
    np.testing.assert_array_equal(src_c, dst_c)


def test_intra_preference_dominates_at_default_setting():
    spec = synth.SynthSpec(num_vertices=1000, seed=5)
    g, cluster_of = synth.synth_graph_with_clusters(spec)
    same = (cluster_of[g.csc_sources]
            == cluster_of[g.edge_destinations()]).mean()
    assert same > 0.7  # intra_prob=0.85 modulo dedup noise


def test_hub_pool_concentrates_in_degree():
    spec = synth.SynthSpec(num_vertices=1000, seed=6)
    g = synth.synth_graph(spec)
    outdeg = np.sort(g.out_degrees())[::-1]
    top = outdeg[:20].sum()
    assert top > 0.3 * g.num_edges  # a few sources emit much of the volume


def test_single_cluster_spec_works():
    spec = synth.SynthSpec(num_vertices=64, num_clusters=1,
                           segments_per_cluster=1, seed=0)
    g, cluster_of = synth.synth_graph_with_clusters(spec)
    assert set(cluster_of.tolist()) == {0}
    assert g.num_edges > 0


def test_node_data_is_seeded_and_shaped():
    X1, y1, m1 = synth.synth_node_data(50, 8, 3, seed=7)
    X2, y2, m2 = synth.synth_node_data(50, 8, 3, seed=7)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(m1, m2)
    assert X1.shape == (50, 8)
    assert y1.min() >= 0 and y1.max() < 3
    assert m1.dtype == bool
    X3, _y3, _m3 = synth.synth_node_data(50, 8, 3, seed=8)
    assert not np.array_equal(X1, X3)


def test_node_data_labels_follow_clusters():
    cluster_of = np.array([0, 0, 1, 2, 3, 3])
    _X, y, _m = synth.synth_node_data(6, 4, 2, seed=0, cluster_of=cluster_of)
    np.testing.assert_array_equal(y, cluster_of % 2)


def test_node_data_mask_is_never_empty():
    _X, _y, mask = synth.synth_node_data(40, 2, 2, seed=0,
                                         mask_fraction=1e-9)
    assert mask.any()
    _X, _y, full = synth.synth_node_data(40, 2, 2, seed=0, mask_fraction=1.0)
    assert full.all()


def test_node_data_validation():
    with pytest.raises(ConfigError, match="num_classes"):
        synth.synth_node_data(10, 2, 0, seed=0)
    with pytest.raises(ConfigError, match="mask_fraction"):
        synth.synth_node_data(10, 2, 2, seed=0, mask_fraction=0.0)


def test_dataset_bundles_aligned_pieces():
    spec = synth.SynthSpec(num_vertices=128, num_clusters=4,
                           segments_per_cluster=4, seed=11)
    ds = synth.synth_dataset(spec, feature_dim=6, num_classes=3)
    assert ds.graph.num_vertices == 128
    assert ds.features.shape == (128, 6)
    assert ds.labels.shape == (128,)
    assert ds.mask.shape == (128,)
    np.testing.assert_array_equal(ds.labels, ds.cluster_of % 3)
