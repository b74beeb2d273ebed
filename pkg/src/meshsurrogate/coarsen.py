"""Quadric-error mesh simplification, barycentric upsamplers, and hierarchies.

Coarsening is selection-only: kept nodes stay at their original positions,
so the coarse node set is always a subset of the fine one. The transition
between two levels is a binary selection matrix D (downsampling) and a sparse
barycentric upsampling matrix U with row sums 1 and at most 3 weights per row.
"""

from __future__ import annotations

import heapq
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread, mmwrite

from .mesh import Graph, Mesh, build_graph, estimate_lambda_max, normalized_laplacian, scaled_laplacian


class SimplifyError(RuntimeError):
    """Simplification cannot reach the requested node count."""

    def __init__(self, message, reachable=None):
        super().__init__(message)
        self.reachable = reachable


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary row-selection operator; row i picks fine node kept[i]."""

    kept: np.ndarray  # (n_down,) ascending fine indices
    n: int

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.int64)
        if kept.size != np.unique(kept).size:
            raise ValueError("kept indices must be distinct")
        if kept.size and (kept.min() < 0 or kept.max() >= self.n):
            raise ValueError("kept index out of range")
        object.__setattr__(self, "kept", kept)

    @property
    def n_down(self) -> int:
        return self.kept.size

    def matrix(self) -> sp.csr_matrix:
        rows = np.arange(self.n_down)
        data = np.ones(self.n_down)
        return sp.csr_matrix((data, (rows, self.kept)), shape=(self.n_down, self.n))

    def apply(self, states: np.ndarray) -> np.ndarray:
        """Row selection along the node axis (second-to-last for >=2D)."""
        return np.take(states, self.kept, axis=-2)


def compute_quadrics(mesh: Mesh) -> np.ndarray:
    """Per-node 4x4 plane quadrics: sum of p p^T over incident face planes.

    Zero-area faces contribute nothing (counted and warned once).
    """
    n = mesh.n
    quadrics = np.zeros((n, 4, 4))
    degenerate = 0
    for f in mesh.faces:
        v0, v1, v2 = mesh.nodes[f]
        normal = np.cross(v1 - v0, v2 - v0)
        norm = np.linalg.norm(normal)
        if norm < 1e-300:
            degenerate += 1
            continue
        normal = normal / norm
        plane = np.append(normal, -normal @ v0)  # (a, b, c, d) with unit normal
        quad = np.outer(plane, plane)
        for i in f:
            quadrics[i] += quad
    if degenerate:
        warnings.warn(f"skipped {degenerate} zero-area faces in quadric accumulation")
    return quadrics


def quadric_error(quadric: np.ndarray, point: np.ndarray) -> float:
    """Evaluate v^T Q v for a homogeneous point (x, y, z, 1)."""
    v = np.append(np.asarray(point, dtype=np.float64)[:3], 1.0)
    return float(v @ quadric @ v)


def _pair_cost(quadrics, nodes, p, q):
    """Cost of contracting pair (p, q): keep the endpoint of least error.

    Ties go to the smaller node index. Returns (cost, kept, removed).
    """
    qsum = quadrics[p] + quadrics[q]
    hp = np.append(nodes[p], 1.0)
    hq = np.append(nodes[q], 1.0)
    cp = float(hp @ qsum @ hp)
    cq = float(hq @ qsum @ hq)
    lo, hi = min(p, q), max(p, q)
    if cp < cq or (cp == cq and p == lo):
        return cp, p, q
    return cq, q, p


def simplify(mesh: Mesh, target_n: int, pair_distance: float = 0.0) -> tuple[SelectionMatrix, Mesh]:
    """Contract least-cost node pairs until exactly target_n nodes remain.

    Valid pairs are mesh edges plus (optionally) node pairs closer than
    pair_distance. Contractions never move nodes; the survivor absorbs the
    removed node's quadric and incident faces re-wire to it. A lazy-deletion
    heap keeps pair costs current.
    """
    n = mesh.n
    if not 1 <= target_n < n:
        raise ValueError(f"target_n must be in [1, {n - 1}], got {target_n}")

    quadrics = compute_quadrics(mesh)
    nodes = mesh.nodes
    neighbors: list[set[int]] = [set() for _ in range(n)]
    faces: set[tuple[int, int, int]] = set()
    face_order: list[tuple[int, int, int]] = []
    for f in mesh.faces:
        key = tuple(sorted(f.tolist()))
        if key not in faces:
            faces.add(key)
            face_order.append(key)
        a, b, c = f
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))

    extra_pairs: set[tuple[int, int]] = set()
    if pair_distance > 0:
        d2 = pair_distance * pair_distance
        diff = nodes[:, None, :] - nodes[None, :, :]
        close = (diff * diff).sum(-1) < d2
        ii, jj = np.nonzero(np.triu(close, k=1))
        for i, j in zip(ii.tolist(), jj.tolist()):
            if j not in neighbors[i]:
                extra_pairs.add((i, j))
                neighbors[i].add(j)
                neighbors[j].add(i)

    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    heap: list[tuple] = []

    def push_pairs(i):
        for j in sorted(neighbors[i]):
            if not alive[j]:
                continue
            lo, hi = min(i, j), max(i, j)
            cost, kept, removed = _pair_cost(quadrics, nodes, lo, hi)
            heapq.heappush(heap, (cost, lo, hi, version[lo], version[hi], kept, removed))

    for i in range(n):
        for j in sorted(neighbors[i]):
            if j > i:
                cost, kept, removed = _pair_cost(quadrics, nodes, i, j)
                heapq.heappush(heap, (cost, i, j, version[i], version[j], kept, removed))

    n_alive = n
    while n_alive > target_n:
        while heap:
            cost, lo, hi, vlo, vhi, kept, removed = heapq.heappop(heap)
            if alive[lo] and alive[hi] and version[lo] == vlo and version[hi] == vhi:
                break
        else:
            raise SimplifyError(
                f"no contractible pairs left at {n_alive} nodes (target {target_n})",
                reachable=n_alive)

        alive[removed] = False
        quadrics[kept] += quadrics[removed]
        # re-wire faces incident to the removed node; drop degenerate results
        for key in [f for f in faces if removed in f]:
            faces.discard(key)
            face_order.remove(key)
            new = tuple(sorted(kept if v == removed else v for v in key))
            if len(set(new)) == 3 and new not in faces:
                faces.add(new)
                face_order.append(new)
        for j in neighbors[removed]:
            neighbors[j].discard(removed)
            if j != kept:
                neighbors[j].add(kept)
                neighbors[kept].add(j)
        neighbors[kept].discard(kept)
        neighbors[removed] = set()
        version[kept] += 1
        push_pairs(kept)
        n_alive -= 1

    kept_idx = np.nonzero(alive)[0]
    remap = -np.ones(n, dtype=np.int64)
    remap[kept_idx] = np.arange(kept_idx.size)
    coarse_faces = np.array([[remap[v] for v in f] for f in face_order], dtype=np.int64)
    sel = SelectionMatrix(kept_idx, n)
    return sel, Mesh(nodes[kept_idx], coarse_faces.reshape(-1, 3))


def _closest_point_barycentric(p, a, b, c):
    """Closest point to p on triangle (a, b, c); returns (dist2, (wa, wb, wc)).

    Barycentric weights of the projection are clamped to [0, 1] and
    renormalized, so they always sum to 1.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        w = (1.0, 0.0, 0.0)
    else:
        bp = p - b
        d3, d4 = ab @ bp, ac @ bp
        if d3 >= 0 and d4 <= d3:
            w = (0.0, 1.0, 0.0)
        else:
            cp = p - c
            d5, d6 = ab @ cp, ac @ cp
            vc = d1 * d4 - d3 * d2
            if vc <= 0 and d1 >= 0 and d3 <= 0:
                v = d1 / (d1 - d3) if d1 != d3 else 0.0
                w = (1.0 - v, v, 0.0)
            elif d6 >= 0 and d5 <= d6:
                w = (0.0, 0.0, 1.0)
            else:
                vb = d5 * d2 - d1 * d6
                if vb <= 0 and d2 >= 0 and d6 <= 0:
                    v = d2 / (d2 - d6) if d2 != d6 else 0.0
                    w = (1.0 - v, 0.0, v)
                else:
                    va = d3 * d6 - d5 * d4
                    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
                        v = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                        w = (0.0, 1.0 - v, v)
                    else:
                        denom = va + vb + vc
                        v, u = vb / denom, vc / denom
                        w = (1.0 - v - u, v, u)
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0)
    w = w / w.sum()
    point = w[0] * a + w[1] * b + w[2] * c
    return float((p - point) @ (p - point)), w


def build_upsampler(fine: Mesh, coarse: Mesh, sel: SelectionMatrix) -> sp.csr_matrix:
    """Sparse (n_fine x n_coarse) lift: kept rows one-hot, discarded rows
    barycentric weights on the closest coarse triangle (brute-force search)."""
    if coarse.faces.size == 0:
        raise SimplifyError("coarse mesh has no faces; barycentric projection impossible")
    n, n_down = fine.n, sel.n_down
    coarse_of = -np.ones(n, dtype=np.int64)
    coarse_of[sel.kept] = np.arange(n_down)
    rows, cols, vals = [], [], []
    tri = coarse.nodes[coarse.faces]  # (m, 3, 3)
    for p in range(n):
        if coarse_of[p] >= 0:
            rows.append(p)
            cols.append(coarse_of[p])
            vals.append(1.0)
            continue
        x = fine.nodes[p]
        best = (np.inf, None, None)
        for fi in range(tri.shape[0]):
            d2, w = _closest_point_barycentric(x, tri[fi, 0], tri[fi, 1], tri[fi, 2])
            if d2 < best[0] - 1e-15:
                best = (d2, fi, w)
        _, fi, w = best
        for wi, ci in zip(w, coarse.faces[fi]):
            rows.append(p)
            cols.append(ci)
            vals.append(float(wi))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n_down))
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


@dataclass
class Level:
    """One resolution of the hierarchy with its cached graph operators."""

    mesh: Mesh
    graph: Graph
    laplacian: sp.csr_matrix
    scaled_laplacian: sp.csr_matrix
    lambda_max: float


class Hierarchy:
    """Ordered chain of levels (0 = finest) and their transition operators.

    ``selections[l]`` maps level l-1 states to level l; ``upsamplers[l]``
    lifts level l back to l-1. ``lift_matrix(l)`` is the precomposed lift
    straight to level 0.
    """

    def __init__(self, levels, selections, upsamplers):
        sizes = [lv.mesh.n for lv in levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"level node counts must strictly decrease, got {sizes}")
        self.levels: list[Level] = levels
        self.selections: list[SelectionMatrix] = selections  # per transition l-1 -> l
        self.upsamplers: list[sp.csr_matrix] = upsamplers    # per transition l -> l-1
        self._lifts = [sp.eye(sizes[0], format="csr")]
        for up in upsamplers:
            self._lifts.append((self._lifts[-1] @ up).tocsr())
        # composed selections: level 0 -> level l
        self._full_kept = [np.arange(sizes[0])]
        for s in selections:
            self._full_kept.append(self._full_kept[-1][s.kept])

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def lift_matrix(self, level: int) -> sp.csr_matrix:
        return self._lifts[level]

    def full_selection(self, level: int) -> SelectionMatrix:
        """Selection straight from level 0 to the given level."""
        return SelectionMatrix(self._full_kept[level], self.levels[0].mesh.n)


def _make_level(mesh: Mesh, assume_lmax_2: bool = False) -> Level:
    graph = build_graph(mesh)
    lap = normalized_laplacian(graph)
    # generous budget: mesh spectra with a tight top cluster converge slowly
    lmax = 2.0 if assume_lmax_2 else estimate_lambda_max(lap, max_iter=20000)
    if lmax == 0.0:
        lmax = 2.0  # edgeless graph; any positive scale gives L~ = -I
    return Level(mesh, graph, lap, scaled_laplacian(lap, lmax), lmax)


def build_hierarchy(mesh: Mesh, level_sizes, pair_distance: float = 0.0,
                    assume_lmax_2: bool = False) -> Hierarchy:
    """Repeated simplify/build_upsampler between consecutive levels."""
    sizes = list(level_sizes)
    if any(b >= a for a, b in zip([mesh.n] + sizes, sizes)):
        raise ValueError(f"level_sizes must strictly decrease below n={mesh.n}, got {sizes}")
    levels = [_make_level(mesh, assume_lmax_2)]
    selections, upsamplers = [], []
    current = mesh
    for target in sizes:
        sel, coarse = simplify(current, target, pair_distance)
        upsamplers.append(build_upsampler(current, coarse, sel))
        selections.append(sel)
        levels.append(_make_level(coarse, assume_lmax_2))
        current = coarse
    return Hierarchy(levels, selections, upsamplers)


def downsample_states(states: np.ndarray, hierarchy: Hierarchy, level: int) -> np.ndarray:
    """Row-select a level-0 trajectory (..., n0, channels) down to a level."""
    n0 = hierarchy.levels[0].mesh.n
    if states.shape[-2] != n0:
        raise ValueError(f"expected {n0} nodes on the node axis, got {states.shape[-2]}")
    return hierarchy.full_selection(level).apply(states)


def save_hierarchy(hierarchy: Hierarchy, directory) -> None:
    """Write meshes, D/U matrices (Matrix Market), and a JSON manifest."""
    from .mesh import write_mesh

    os.makedirs(directory, exist_ok=True)
    manifest = {"level_sizes": [lv.mesh.n for lv in hierarchy.levels],
                "meshes": [], "selections": [], "upsamplers": []}
    for i, lv in enumerate(hierarchy.levels):
        name = f"level{i}.obj"
        write_mesh(lv.mesh, os.path.join(directory, name))
        manifest["meshes"].append(name)
    for i, (sel, up) in enumerate(zip(hierarchy.selections, hierarchy.upsamplers)):
        dname, uname = f"D_{i}_{i + 1}.mtx", f"U_{i + 1}_{i}.mtx"
        mmwrite(os.path.join(directory, dname), sel.matrix().tocoo())
        mmwrite(os.path.join(directory, uname), up.tocoo())
        manifest["selections"].append(dname)
        manifest["upsamplers"].append(uname)
    with open(os.path.join(directory, "hierarchy.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_hierarchy(directory) -> Hierarchy:
    from .mesh import load_mesh

    with open(os.path.join(directory, "hierarchy.json")) as fh:
        manifest = json.load(fh)
    meshes = [load_mesh(os.path.join(directory, m)) for m in manifest["meshes"]]
    levels = [_make_level(m) for m in meshes]
    selections = []
    for i, name in enumerate(manifest["selections"]):
        d = sp.csr_matrix(mmread(os.path.join(directory, name)))
        kept = np.asarray(d.argmax(axis=1)).ravel()
        selections.append(SelectionMatrix(kept, d.shape[1]))
    upsamplers = [sp.csr_matrix(mmread(os.path.join(directory, name)))
                  for name in manifest["upsamplers"]]
    return Hierarchy(levels, selections, upsamplers)
