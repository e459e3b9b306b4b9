import json

import numpy as np
import pytest
from scipy import ndimage as ndi

from poreval.phantom import PhantomParams, generate_network, ground_truth_metrics, rasterize
from poreval.skelgraph import (
    GraphMetrics, analyze_binary, classify_edges, extract_graph, graph_json, graph_metrics, handshake_ok,
    local_thickness, metric_ratios, skeletonize3d,
)

FULL = np.ones((3, 3, 3), bool)

# geometry used for the clean-phantom graph oracle
GRAPH_PHANTOM = PhantomParams(dims=(128, 128, 48), spacing=(100, 100, 100), n_tubules=2, n_branches=2,
                              tubule_radius_um=(0.6, 0.9), jitter_um=0.4)


def n_components(b):
    return ndi.label(b, structure=FULL)[1]


def endpoints(skel):
    nb = ndi.convolve(skel.astype(int), FULL.astype(int), mode="constant") - 1
    return int((skel & (nb == 1)).sum())


def ball(r, pad=2):
    n = 2 * (r + pad) + 1
    z, y, x = np.mgrid[:n, :n, :n] - (r + pad)
    return z * z + y * y + x * x <= r * r


def test_skeleton_single_voxel():
    v = np.zeros((5, 5, 5), bool)
    v[2, 2, 2] = True
    assert np.array_equal(skeletonize3d(v), v)


def test_skeleton_bar():
    v = np.zeros((7, 7, 36), bool)
    v[2:5, 2:5, 3:33] = True
    s = skeletonize3d(v)
    assert s.sum() > 0 and np.all(s <= v)
    assert n_components(s) == 1 and endpoints(s) == 2
    # one voxel wide: every x column holds at most one skeleton voxel
    assert s.sum(axis=(0, 1)).max() == 1
    xs = np.nonzero(s.any(axis=(0, 1)))[0]
    assert xs.min() <= 5 and xs.max() >= 30


def test_skeleton_two_bars_and_components(rng):
    v = np.zeros((8, 20, 30), bool)
    v[2:5, 2:5, 2:28] = True
    v[2:5, 12:16, 2:28] = True
    assert n_components(skeletonize3d(v)) == 2
    for _ in range(3):
        r = ndi.gaussian_filter(rng.uniform(size=(24, 24, 24)), 1.5) > 0.52
        s = skeletonize3d(r)
        assert np.all(s <= r)
        assert n_components(s) == n_components(r)


def test_skeleton_preserves_tunnel():
    # a torus must keep its loop
    z, y, x = np.mgrid[:9, :25, :25]
    d = np.hypot(np.hypot(y - 12, x - 12) - 8, z - 4)
    s = skeletonize3d(d <= 2.5)
    assert n_components(s) == 1
    g = extract_graph(s, None, (100, 100, 100))
    assert len(g.edges) == 1 and next(iter(g.edges.values())).self_loop
    assert handshake_ok(g)


@pytest.mark.parametrize("r", range(3, 11))
def test_local_thickness_balls(r):
    b = ball(r)
    d = local_thickness(b)
    assert np.all(np.abs(d[b] - 2 * r) <= 1.0)
    assert np.all(d[~b] == 0)
    c = b.shape[0] // 2
    edt = ndi.distance_transform_edt(np.pad(b, 1))[1:-1, 1:-1, 1:-1]
    assert d.max() == pytest.approx(2 * edt[c, c, c] - 1)


def test_local_thickness_line_and_background():
    v = np.zeros((5, 5, 20), bool)
    v[2, 2, 3:17] = True
    d = local_thickness(v)
    assert np.all(d[v] == 1.0) and np.all(d[~v] == 0)
    assert not local_thickness(np.zeros((4, 4, 4), bool)).any()


@pytest.mark.parametrize("seed", range(10))
def test_local_thickness_dilation_monotone(seed):
    rng = np.random.default_rng(seed)
    v = ndi.gaussian_filter(rng.uniform(size=(24, 24, 24)), 1.5) > 0.5
    dv = ndi.binary_dilation(v)
    a, b = local_thickness(v), local_thickness(dv)
    assert np.all(b[v] >= a[v])


def test_local_thickness_lower_bound(rng):
    v = ndi.gaussian_filter(rng.uniform(size=(24, 24, 24)), 1.5) > 0.5
    d = local_thickness(v)
    edt = ndi.distance_transform_edt(np.pad(v, 1))[1:-1, 1:-1, 1:-1]
    assert np.all(d[v] >= 2 * edt[v] - 1 - 1e-5)
    assert np.all(d[v] > 0)


def test_extract_straight_path():
    s = np.zeros((3, 3, 20), bool)
    s[1, 1, 2:14] = True
    g = extract_graph(s, None, (250, 250, 250))
    assert len(g.nodes) == 2 and all(n.degree == 1 for n in g.nodes.values())
    assert len(g.edges) == 1
    assert next(iter(g.edges.values())).length_um == pytest.approx(11 * 0.25)


def y_skeleton():
    s = np.zeros((3, 30, 30), bool)
    s[1, 15, 15:29] = True
    for k in range(1, 13):
        s[1, 15 - k, 15 - k] = True
        s[1, 15 + k, 15 - k] = True
    return s


def test_extract_y():
    g = extract_graph(y_skeleton(), None, (100, 100, 100))
    degs = sorted(n.degree for n in g.nodes.values())
    assert degs == [1, 1, 1, 3] and len(g.edges) == 3 and handshake_ok(g)
    diam = y_skeleton().astype(np.float32) * 2.0  # 0.2 um everywhere
    g = extract_graph(y_skeleton(), diam, (100, 100, 100))
    classify_edges(g, 1.0)
    m = graph_metrics(g)
    assert (m.n_edges_branch, m.n_nodes_degree_1, m.n_nodes_degree_3) == (3, 3, 1)
    classify_edges(g, 0.0)
    assert graph_metrics(g).n_edges_tubule == 3


def test_classify_direction():
    s = np.zeros((3, 3, 30), bool)
    s[1, 1, 2:28] = True
    diam = s * 20.0
    g = extract_graph(s, diam, (100, 100, 100))
    classify_edges(g, 1.0, direction_axis=(1, 0, 0))
    assert graph_metrics(g).n_edges_tubule == 1
    classify_edges(g, 1.0, direction_axis=(0, 1, 0))
    assert graph_metrics(g).n_edges_branch == 1


def test_metrics_and_ratios():
    assert graph_metrics(extract_graph(np.zeros((4, 4, 4), bool))) == GraphMetrics()
    v = np.zeros((12, 12, 40), bool)
    v[1:4, 1:4, 2:38] = True
    v[7:10, 7:10, 2:38] = True
    g, m = analyze_binary(v, (500, 500, 500))
    assert (m.n_edges_tubule, m.n_nodes_degree_1) == (2, 4)
    r = metric_ratios(m, m)
    assert all(x == 1.0 for k, x in r.items() if getattr(m, k)) and r["n_edges_branch"] is None
    a, b = GraphMetrics(n_edges_branch=8), GraphMetrics(n_edges_branch=10)
    assert metric_ratios(a, b)["n_edges_branch"] == 0.8
    doc = json.loads(graph_json(g))
    assert len(doc["edges"]) == 2 and len(doc["edges"][0]["polyline"]) > 2


@pytest.mark.parametrize("seed", range(10))
def test_clean_phantom_graph(seed):
    spec = generate_network(GRAPH_PHANTOM, seed)
    tub, bra = rasterize(spec)
    g, m = analyze_binary(tub | bra, GRAPH_PHANTOM.spacing, extend_boundary=True)
    gt = ground_truth_metrics(spec)
    assert handshake_ok(g)
    assert m.n_nodes_degree_3 == gt.n_nodes_degree_3 == len(spec.junctions)
    assert m.n_edges_all == gt.n_edges_all
    assert m.n_edges_tubule == gt.n_edges_tubule and m.n_edges_branch == gt.n_edges_branch
    for f in ("total_length_all", "total_length_tubule", "total_length_branch"):
        assert getattr(m, f) == pytest.approx(getattr(gt, f), rel=0.05)
