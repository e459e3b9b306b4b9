"""3D skeletonization, local thickness and skeleton graph analysis.

Thinning is a directional, sequential simple-point deletion (26-connected
foreground, 6-connected background) that keeps curve end points, so solid
tubes reduce to one-voxel-wide centrelines without changing topology.
Diameters follow the largest-inscribed-sphere definition on the binary
volume. Graph nodes are clusters of skeleton voxels with a neighbour count
other than two; edges are the two-neighbour chains between them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numba
import numpy as np
from scipy import ndimage as ndi

TUBULE_MIN_DIAMETER_UM = 1.0
PRUNE_LENGTH = 2.0
# moving-average window (voxels) applied to polylines before measuring length
LENGTH_WINDOW = 5
DEGREES = (1, 3, 4, 5)

# ----------------------------------------------------------------------------
# neighbourhood tables for the 3x3x3 cube, index = 9 dz + 3 dy + dx (+1 each)
# ----------------------------------------------------------------------------

_CUBE = np.array([(z, y, x) for z in (-1, 0, 1) for y in (-1, 0, 1) for x in (-1, 0, 1)])


def _adjacency(max_l1: int, members: np.ndarray) -> np.ndarray:
    nb = -np.ones((27, 26), dtype=np.int64)
    for i in range(27):
        k = 0
        for j in range(27):
            d = np.abs(_CUBE[i] - _CUBE[j])
            if i != j and members[i] and members[j] and d.max() <= 1 and d.sum() <= max_l1:
                nb[i, k] = j
                k += 1
    return nb


_L1 = np.abs(_CUBE).sum(axis=1)
_N26 = _L1 > 0
_N18 = (_L1 > 0) & (_L1 <= 2)
_ADJ26 = _adjacency(3, _N26)
_ADJ6 = _adjacency(1, _N18)
_FACES = np.flatnonzero(_L1 == 1)


@numba.njit(cache=True)
def _count_components(mask, adj, seeds, stack, seen):
    # number of components of `mask` reachable from `seeds` using `adj`
    for i in range(27):
        seen[i] = False
    n = 0
    for s in seeds:
        if not mask[s] or seen[s]:
            continue
        n += 1
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            i = stack[top]
            top -= 1
            for k in range(26):
                j = adj[i, k]
                if j < 0:
                    break
                if mask[j] and not seen[j]:
                    seen[j] = True
                    top += 1
                    stack[top] = j
    return n


@numba.njit(cache=True)
def _gather(img, z, y, x, cube):
    k = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                cube[k] = img[z + dz, y + dy, x + dx]
                k += 1


@numba.njit(cache=True)
def _is_simple(cube, adj26, adj6, faces, all26, fgmask, bgmask, stack, seen):
    for i in range(27):
        fgmask[i] = cube[i] and i != 13
        bgmask[i] = (not cube[i]) and i != 13
    if _count_components(fgmask, adj26, all26, stack, seen) != 1:
        return False
    return _count_components(bgmask, adj6, faces, stack, seen) == 1


@numba.njit(cache=True)
def _thin(img, zs, ys, xs, dirs, adj26, adj6, faces, all26):
    cube = np.zeros(27, dtype=np.bool_)
    fgmask = np.zeros(27, dtype=np.bool_)
    bgmask = np.zeros(27, dtype=np.bool_)
    stack = np.zeros(32, dtype=np.int64)
    seen = np.zeros(27, dtype=np.bool_)
    n = zs.size
    alive = np.ones(n, dtype=np.bool_)
    cand = np.zeros(n, dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(dirs.shape[0]):
            dz, dy, dx = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            nc = 0
            for i in range(n):
                if not alive[i]:
                    continue
                z, y, x = zs[i], ys[i], xs[i]
                if img[z + dz, y + dy, x + dx]:
                    continue
                _gather(img, z, y, x, cube)
                nb = 0
                for k in range(27):
                    if cube[k] and k != 13:
                        nb += 1
                if nb <= 1:
                    continue
                if _is_simple(cube, adj26, adj6, faces, all26, fgmask, bgmask, stack, seen):
                    cand[nc] = i
                    nc += 1
            # re-check sequentially so that deletions never break topology
            for c in range(nc):
                i = cand[c]
                z, y, x = zs[i], ys[i], xs[i]
                _gather(img, z, y, x, cube)
                nb = 0
                for k in range(27):
                    if cube[k] and k != 13:
                        nb += 1
                if nb <= 1:
                    continue
                if _is_simple(cube, adj26, adj6, faces, all26, fgmask, bgmask, stack, seen):
                    img[z, y, x] = False
                    alive[i] = False
                    changed = True


_DIRS = np.array(
    [(0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1), (-1, 0, 0), (1, 0, 0)], dtype=np.int64
)


def _boundary_pad(binary: np.ndarray, extend_boundary) -> Tuple[np.ndarray, Tuple]:
    if not extend_boundary:
        return binary, tuple(slice(None) for _ in range(binary.ndim))
    axes = range(binary.ndim) if extend_boundary is True else tuple(extend_boundary)
    if not binary.any():
        return binary, tuple(slice(None) for _ in range(binary.ndim))
    w = int(math.ceil(ndi.distance_transform_edt(np.pad(binary, 1)).max())) + 2
    pad = [(w, w) if ax in axes else (0, 0) for ax in range(binary.ndim)]
    crop = tuple(slice(p[0], p[0] + n) for p, n in zip(pad, binary.shape))
    return np.pad(binary, pad, mode="edge"), crop


def skeletonize3d(binary, extend_boundary: Union[bool, Sequence[int]] = False) -> np.ndarray:
    """Homotopic curve thinning of a 3D binary volume.

    Parameters
    ----------
    binary : array_like of bool, shape (z, y, x)
    extend_boundary : bool or sequence of int
        Structures cut by the volume border normally shrink away from it
        during thinning. When set, the volume is edge-replicated along the
        given axes (all axes for ``True``) before thinning and cropped
        afterwards, so centrelines run up to the border.

    Returns
    -------
    np.ndarray of bool
        Skeleton, a subset of the input.
    """
    b = np.asarray(binary, dtype=bool)
    if b.ndim == 2:
        return skeletonize3d(b[np.newaxis], extend_boundary)[0]
    if b.ndim != 3:
        raise ValueError("expected a 3D volume")
    work, crop = _boundary_pad(b, extend_boundary)
    img = np.pad(work, 1)
    zs, ys, xs = (a.astype(np.int64) for a in np.nonzero(img))
    _thin(img, zs, ys, xs, _DIRS, _ADJ26, _ADJ6, _FACES, np.flatnonzero(_N26))
    out = img[1:-1, 1:-1, 1:-1][crop]
    return np.ascontiguousarray(out & b)


# ----------------------------------------------------------------------------
# local thickness
# ----------------------------------------------------------------------------

@numba.njit(cache=True)
def _paint_balls(out, cz, cy, cx, r2, diam):
    nz, ny, nx = out.shape
    for i in range(cz.size):
        d2 = r2[i]
        r = int(math.ceil(math.sqrt(d2)))
        dval = diam[i]
        for z in range(max(cz[i] - r, 0), min(cz[i] + r + 1, nz)):
            dz2 = (z - cz[i]) ** 2
            for y in range(max(cy[i] - r, 0), min(cy[i] + r + 1, ny)):
                dy2 = dz2 + (y - cy[i]) ** 2
                if dy2 >= d2:
                    continue
                for x in range(max(cx[i] - r, 0), min(cx[i] + r + 1, nx)):
                    if dy2 + (x - cx[i]) ** 2 < d2 and out[z, y, x] < dval:
                        out[z, y, x] = dval


@numba.njit(cache=True)
def _ridge(edt2, zs, ys, xs):
    # drop centres whose ball lies inside a neighbour's ball
    keep = np.ones(zs.size, dtype=np.bool_)
    nz, ny, nx = edt2.shape
    for i in range(zs.size):
        z, y, x = zs[i], ys[i], xs[i]
        d = math.sqrt(edt2[z, y, x])
        for dz in range(-1, 2):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dz == 0 and dy == 0 and dx == 0:
                        continue
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if zz < 0 or yy < 0 or xx < 0 or zz >= nz or yy >= ny or xx >= nx:
                        continue
                    dn = math.sqrt(edt2[zz, yy, xx])
                    if dn - math.sqrt(dz * dz + dy * dy + dx * dx) >= d:
                        keep[i] = False
    return keep


def local_thickness(binary, extend_boundary: Union[bool, Sequence[int]] = False) -> np.ndarray:
    """Largest-inscribed-sphere diameter map, in voxels.

    Each foreground voxel receives ``2 d(c) - 1`` maximized over all centres
    ``c`` whose open ball of radius ``d(c)`` (the Euclidean distance from
    ``c`` to the nearest background voxel) contains it. A one-voxel line
    gets 1; a digital ball of radius ``r`` gets ``2 r + 1`` at its centre.
    Background is 0.
    """
    b = np.asarray(binary, dtype=bool)
    squeeze = b.ndim == 2
    if squeeze:
        b = b[np.newaxis]
    work, crop = _boundary_pad(b, extend_boundary)
    # outside the volume counts as background
    padded = np.pad(work, 1)
    edt = ndi.distance_transform_edt(padded, return_distances=True)
    edt2 = np.rint(edt**2).astype(np.int64)
    zs, ys, xs = (a.astype(np.int64) for a in np.nonzero(padded))
    out = np.zeros(padded.shape, dtype=np.float32)
    if zs.size:
        keep = _ridge(edt2, zs, ys, xs)
        zs, ys, xs = zs[keep], ys[keep], xs[keep]
        r2 = edt2[zs, ys, xs]
        order = np.argsort(-r2, kind="stable")
        zs, ys, xs, r2 = zs[order], ys[order], xs[order], r2[order]
        diam = (2.0 * np.sqrt(r2) - 1.0).astype(np.float32)
        _paint_balls(out, zs, ys, xs, r2, diam)
    out = out[1:-1, 1:-1, 1:-1][crop]
    out[~b] = 0.0
    return out[0] if squeeze else out


# ----------------------------------------------------------------------------
# graph
# ----------------------------------------------------------------------------

@dataclass
class Node:
    id: int
    position: Tuple[float, float, float]  # (x, y, z) voxel coordinates
    degree: int = 0
    voxels: List[Tuple[int, int, int]] = field(default_factory=list)  # (z, y, x)


@dataclass
class Edge:
    id: int
    endpoints: Tuple[int, int]
    polyline: List[Tuple[int, int, int]]  # (z, y, x) voxels, node voxels at both ends
    length_um: float = 0.0
    mean_diameter_um: float = float("nan")
    max_diameter_um: float = float("nan")
    cls: str = "unclassified"

    @property
    def self_loop(self) -> bool:
        return self.endpoints[0] == self.endpoints[1]


@dataclass
class PorosityGraph:
    nodes: Dict[int, Node]
    edges: Dict[int, Edge]
    spacing: Tuple[float, float, float]
    params: dict = field(default_factory=dict)

    def recompute_degrees(self):
        for n in self.nodes.values():
            n.degree = 0
        for e in self.edges.values():
            a, b = e.endpoints
            self.nodes[a].degree += 1
            self.nodes[b].degree += 1

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        return {
            "spacing_nm": list(self.spacing),
            "params": self.params,
            "nodes": [
                {"id": n.id, "position": [round(c, 6) for c in n.position], "degree": n.degree}
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "edges": [
                {
                    "id": e.id,
                    "endpoints": list(e.endpoints),
                    "class": e.cls,
                    "length_um": round(e.length_um, 6),
                    "mean_diameter_um": num(round(e.mean_diameter_um, 6)),
                    "max_diameter_um": num(round(e.max_diameter_um, 6)),
                    # exported as (x, y, z)
                    "polyline": [[int(p[2]), int(p[1]), int(p[0])] for p in e.polyline],
                }
                for e in sorted(self.edges.values(), key=lambda e: e.id)
            ],
        }


def _neighbour_count(skel: np.ndarray) -> np.ndarray:
    k = np.ones((3, 3, 3), dtype=np.int32)
    k[1, 1, 1] = 0
    return ndi.convolve(skel.astype(np.int32), k, mode="constant") * skel


def smooth_polyline(poly, window: int = 0) -> np.ndarray:
    """Centred moving average with a window shrinking at the ends.

    End points stay fixed and straight runs are reproduced exactly.
    """
    p = np.asarray(poly, dtype=np.float64)
    k = window // 2
    if k < 1 or len(p) < 3:
        return p
    c = np.vstack([np.zeros((1, p.shape[1])), np.cumsum(p, axis=0)])
    i = np.arange(len(p))
    h = np.minimum(np.minimum(i, len(p) - 1 - i), k)
    return (c[i + h + 1] - c[i - h]) / (2 * h + 1)[:, None]


def _steps_length(poly: Sequence[Tuple[int, int, int]], spacing, window: int = 0) -> float:
    if len(poly) < 2:
        return 0.0
    p = smooth_polyline(poly, window)
    scale = np.array([spacing[2], spacing[1], spacing[0]]) / 1000.0
    d = np.diff(p, axis=0) * scale
    return float(np.sqrt((d**2).sum(axis=1)).sum())


_OFFS = [tuple(o) for o in _CUBE if np.any(o)]


def _neighbours(v, vox: set):
    z, y, x = v
    return [(z + a, y + b, x + c) for a, b, c in _OFFS if (z + a, y + b, x + c) in vox]


def _walk(start, cset):
    path = [start]
    seen = {start}
    cur = start
    while True:
        nbs = [v for v in _neighbours(cur, cset) if v not in seen]
        if not nbs:
            return path
        cur = min(nbs)
        seen.add(cur)
        path.append(cur)


def extract_graph(skeleton, diameter_map=None, spacing=(1000.0, 1000.0, 1000.0),
                  prune_length: float = PRUNE_LENGTH, length_window: int = LENGTH_WINDOW) -> PorosityGraph:
    """Build a node/edge graph from a thinned skeleton.

    Parameters
    ----------
    skeleton : array_like of bool, (z, y, x)
    diameter_map : np.ndarray, optional
        Diameters in voxels (see :func:`local_thickness`); edge diameters
        stay NaN without it.
    spacing : (sx, sy, sz) in nm
    prune_length : float
        Terminal edges shorter than this many voxel steps that hang off a
        junction (degree >= 3) are removed, then degree-2 nodes are merged
        into their edges.
    length_window : int
        Edge lengths are the Euclidean step sums of the polyline after a
        centred moving average of this many voxels (end points fixed),
        which removes the staircase excess of digital paths. 0 or 1 gives
        the raw voxel-step length.

    Notes
    -----
    A closed loop without junctions becomes a node at its first voxel in
    raster order carrying a self-loop edge. Edge mean diameters skip the
    polyline voxels that lie inside either end node's inscribed sphere.
    """
    skel = np.asarray(skeleton, dtype=bool)
    if skel.ndim == 2:
        skel = skel[np.newaxis]
    counts = _neighbour_count(skel)
    node_mask = skel & (counts != 2)
    full = np.ones((3, 3, 3), dtype=bool)
    node_lab, n_nodes = ndi.label(node_mask, structure=full)

    nodes: Dict[int, Node] = {}
    node_of: Dict[Tuple[int, int, int], int] = {}
    if n_nodes:
        coords = np.argwhere(node_mask)
        labs = node_lab[node_mask]
        # node ids in raster order of each cluster's first voxel
        first = {}
        for c, l in zip(map(tuple, coords), labs):
            first.setdefault(int(l), c)
        order = sorted(first, key=lambda l: first[l])
        remap = {l: i for i, l in enumerate(order)}
        for c, l in zip(map(tuple, coords), labs):
            nid = remap[int(l)]
            node_of[c] = nid
            nodes.setdefault(nid, Node(nid, (0.0, 0.0, 0.0))).voxels.append(c)

    node_set = set(node_of)
    chain_vox = set(map(tuple, np.argwhere(skel & (counts == 2))))
    visited = set()
    raw_edges = []
    for start in sorted(chain_vox):
        if start in visited:
            continue
        # collect the chain component
        comp = [start]
        visited.add(start)
        k = 0
        while k < len(comp):
            for nb in _neighbours(comp[k], chain_vox):
                if nb not in visited:
                    visited.add(nb)
                    comp.append(nb)
            k += 1
        cset = set(comp)
        ends = [v for v in comp if len(_neighbours(v, cset)) < 2]
        if not ends:
            # a pure cycle: anchor a node at its first voxel
            anchor = min(comp)
            nid = len(nodes)
            nodes[nid] = Node(nid, (0.0, 0.0, 0.0), voxels=[anchor])
            path = _walk(anchor, cset)
            raw_edges.append((nid, nid, path + [anchor]))
            continue
        path = _walk(min(ends), cset)
        head = _neighbours(path[0], node_set)
        tail = _neighbours(path[-1], node_set)
        if len(path) == 1:
            hs = sorted(head)
            head, tail = hs[:1], hs[1:2] if len(hs) > 1 else hs[:1]
        if not head or not tail:
            continue
        a, b = min(head), min(tail)
        raw_edges.append((node_of[a], node_of[b], [a] + path + [b]))

    graph = PorosityGraph(nodes, {}, tuple(float(s) for s in spacing))
    for i, (a, b, poly) in enumerate(raw_edges):
        graph.edges[i] = Edge(i, (a, b), poly)
    graph.recompute_degrees()
    _set_positions(graph)
    graph.params["prune_length"] = prune_length
    graph.params["length_window"] = length_window
    if prune_length > 0:
        prune_spurs(graph, prune_length)
    dissolve_degree2(graph)
    _renumber(graph)
    _measure(graph, diameter_map)
    return graph


def _set_positions(graph: PorosityGraph):
    for n in graph.nodes.values():
        c = np.mean(np.asarray(n.voxels, dtype=np.float64), axis=0)
        n.position = (float(c[2]), float(c[1]), float(c[0]))


def _voxel_steps(poly) -> float:
    return _steps_length(poly, (1000.0, 1000.0, 1000.0))


def prune_spurs(graph: PorosityGraph, prune_length: float = PRUNE_LENGTH) -> int:
    """Remove short terminal edges attached to junctions (one pass)."""
    removed = 0
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        a, b = e.endpoints
        if a == b:
            continue
        da, db = graph.nodes[a].degree, graph.nodes[b].degree
        if not ((da == 1 and db >= 3) or (db == 1 and da >= 3)):
            continue
        if _voxel_steps(e.polyline) >= prune_length:
            continue
        tip, hub = (a, b) if da == 1 else (b, a)
        del graph.edges[eid]
        del graph.nodes[tip]
        graph.nodes[hub].degree -= 1
        removed += 1
    graph.params["pruned_spurs"] = graph.params.get("pruned_spurs", 0) + removed
    return removed


def dissolve_degree2(graph: PorosityGraph) -> int:
    """Merge the two edges meeting at every degree-2 node."""
    merged = 0
    for nid in sorted(graph.nodes):
        node = graph.nodes.get(nid)
        if node is None or node.degree != 2:
            continue
        inc = [e for e in graph.edges.values() if nid in e.endpoints]
        if len(inc) != 2:
            continue  # a self-loop on its own
        e1, e2 = inc
        p1 = e1.polyline if e1.endpoints[1] == nid else e1.polyline[::-1]
        p2 = e2.polyline if e2.endpoints[0] == nid else e2.polyline[::-1]
        a = e1.endpoints[0] if e1.endpoints[1] == nid else e1.endpoints[1]
        b = e2.endpoints[1] if e2.endpoints[0] == nid else e2.endpoints[0]
        # join at the node without repeating a shared voxel
        joined = list(p1) + list(p2[1:] if p2[0] == p1[-1] else p2)
        del graph.edges[e2.id]
        graph.edges[e1.id] = Edge(e1.id, (a, b), joined)
        del graph.nodes[nid]
        merged += 1
    return merged


def _renumber(graph: PorosityGraph):
    nmap = {old: i for i, old in enumerate(sorted(graph.nodes, key=lambda k: min(graph.nodes[k].voxels)))}
    nodes = {}
    for old, new in nmap.items():
        n = graph.nodes[old]
        n.id = new
        nodes[new] = n
    edges = {}
    ordered = sorted(
        graph.edges.values(),
        key=lambda e: (min(nmap[e.endpoints[0]], nmap[e.endpoints[1]]), e.polyline[len(e.polyline) // 2]),
    )
    for i, e in enumerate(ordered):
        a, b = nmap[e.endpoints[0]], nmap[e.endpoints[1]]
        poly = e.polyline
        if a > b:
            a, b, poly = b, a, poly[::-1]
        edges[i] = Edge(i, (a, b), poly)
    graph.nodes, graph.edges = nodes, edges
    graph.recompute_degrees()


def _anchored(graph: PorosityGraph, e: Edge) -> np.ndarray:
    # run the measured path from node centroid to node centroid
    pts = [np.asarray(p, dtype=np.float64) for p in e.polyline]
    a = np.asarray(graph.nodes[e.endpoints[0]].position[::-1])
    b = np.asarray(graph.nodes[e.endpoints[1]].position[::-1])
    if not np.allclose(a, pts[0]):
        pts.insert(0, a)
    if not np.allclose(b, pts[-1]):
        pts.append(b)
    return np.asarray(pts)


def _measure(graph: PorosityGraph, diameter_map):
    sx = graph.spacing[0] / 1000.0
    dm = None
    if diameter_map is not None:
        dm = np.asarray(diameter_map)
        if dm.ndim == 2:
            dm = dm[np.newaxis]
    for e in graph.edges.values():
        e.length_um = _steps_length(_anchored(graph, e), graph.spacing, graph.params.get("length_window", 0))
        if dm is None:
            continue
        poly = np.asarray(e.polyline)
        vals = dm[poly[:, 0], poly[:, 1], poly[:, 2]].astype(np.float64)
        keep = np.ones(len(poly), dtype=bool)
        for nid in set(e.endpoints):
            n = graph.nodes[nid]
            nv = np.asarray(n.voxels)
            r = 0.5 * float(dm[nv[:, 0], nv[:, 1], nv[:, 2]].max())
            c = np.array(n.position[::-1])
            keep &= np.sqrt(((poly - c) ** 2).sum(axis=1)) >= r
        sel = vals[keep] if keep.any() else vals
        sel = sel[sel > 0] if np.any(sel > 0) else sel
        e.mean_diameter_um = float(sel.mean()) * sx
        e.max_diameter_um = float(vals.max()) * sx


def classify_edges(graph: PorosityGraph, tubule_min_diameter_um: float = TUBULE_MIN_DIAMETER_UM,
                   direction_axis: Optional[Sequence[float]] = None,
                   max_angle_deg: float = 45.0) -> PorosityGraph:
    """Label edges as tubule or branch by mean diameter (and optionally direction).

    ``direction_axis`` is an ``(x, y, z)`` vector; when given, tubules must
    also have their end-to-end direction within ``max_angle_deg`` of it.
    Edges without a diameter stay unclassified.
    """
    axis = None
    if direction_axis is not None:
        axis = np.asarray(direction_axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
    for e in graph.edges.values():
        if math.isnan(e.mean_diameter_um):
            e.cls = "unclassified"
            continue
        tub = e.mean_diameter_um >= tubule_min_diameter_um
        if tub and axis is not None:
            p = np.asarray(e.polyline[-1], dtype=np.float64) - np.asarray(e.polyline[0], dtype=np.float64)
            v = p[::-1] * np.asarray(graph.spacing)
            nrm = np.linalg.norm(v)
            if nrm > 0:
                cosang = abs(float(np.dot(v / nrm, axis)))
                tub = cosang >= math.cos(math.radians(max_angle_deg)) - 1e-12
        e.cls = "tubule" if tub else "branch"
    graph.params.update(
        {
            "tubule_min_diameter_um": tubule_min_diameter_um,
            "direction_axis": None if axis is None else [float(a) for a in axis],
            "max_angle_deg": max_angle_deg,
        }
    )
    return graph


@dataclass
class GraphMetrics:
    n_edges_all: int = 0
    n_edges_tubule: int = 0
    n_edges_branch: int = 0
    n_edges_unclassified: int = 0
    n_nodes_degree_1: int = 0
    n_nodes_degree_3: int = 0
    n_nodes_degree_4: int = 0
    n_nodes_degree_5: int = 0
    n_nodes_degree_other: int = 0
    total_length_all: float = 0.0
    total_length_tubule: float = 0.0
    total_length_branch: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


RATIO_FIELDS = (
    "n_edges_all", "n_edges_tubule", "n_edges_branch",
    "n_nodes_degree_1", "n_nodes_degree_3", "n_nodes_degree_4", "n_nodes_degree_5",
    "total_length_all", "total_length_tubule", "total_length_branch",
)


def graph_metrics(graph: PorosityGraph) -> GraphMetrics:
    m = GraphMetrics()
    for e in graph.edges.values():
        m.n_edges_all += 1
        m.total_length_all += e.length_um
        if e.cls == "tubule":
            m.n_edges_tubule += 1
            m.total_length_tubule += e.length_um
        elif e.cls == "branch":
            m.n_edges_branch += 1
            m.total_length_branch += e.length_um
        else:
            m.n_edges_unclassified += 1
    for n in graph.nodes.values():
        if n.degree in DEGREES:
            setattr(m, f"n_nodes_degree_{n.degree}", getattr(m, f"n_nodes_degree_{n.degree}") + 1)
        else:
            m.n_nodes_degree_other += 1
    return m


def metric_ratios(gen: GraphMetrics, gt: GraphMetrics) -> Dict[str, Optional[float]]:
    """Field-wise ``gen / gt``; None (undefined) where the GT value is 0."""
    out = {}
    for f in RATIO_FIELDS:
        g, t = getattr(gen, f), getattr(gt, f)
        out[f] = None if t == 0 else float(g) / float(t)
    return out


def handshake_ok(graph: PorosityGraph) -> bool:
    """Sum of node degrees equals twice the edge count."""
    return sum(n.degree for n in graph.nodes.values()) == 2 * len(graph.edges)


def metrics_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def graph_json(graph: PorosityGraph) -> str:
    return json.dumps(graph.to_json(), sort_keys=True, indent=1)


def analyze_binary(binary, spacing, tubule_min_diameter_um: float = TUBULE_MIN_DIAMETER_UM,
                   prune_length: float = PRUNE_LENGTH, extend_boundary=False,
                   direction_axis=None, length_window: int = LENGTH_WINDOW):
    """Skeleton, diameter map, classified graph and metrics of a binary volume."""
    skel = skeletonize3d(binary, extend_boundary=extend_boundary)
    diam = local_thickness(binary, extend_boundary=extend_boundary)
    g = extract_graph(skel, diam, spacing, prune_length=prune_length, length_window=length_window)
    classify_edges(g, tubule_min_diameter_um, direction_axis)
    g.params["extend_boundary"] = extend_boundary if isinstance(extend_boundary, bool) else list(extend_boundary)
    return g, graph_metrics(g)
