"""Triangle meshes, their graphs, and normalized/scaled Laplacians.

Meshes are loaded from a minimal OBJ subset (``v``/``f`` lines only). Quads
are split deterministically at load time; all downstream machinery assumes
triangles.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh data or unparsable mesh file."""


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge; carries the last estimate."""

    def __init__(self, message, last_estimate):
        super().__init__(message)
        self.last_estimate = last_estimate


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh: node positions and triangle faces."""

    nodes: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=np.float64))
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or nodes.shape[0] < 1:
            raise MeshError("nodes must be a non-empty (n, 3) array")
        if faces.size:
            if faces.min() < 0 or faces.max() >= nodes.shape[0]:
                raise MeshError("face index out of range")
            for f in faces:
                if len(set(f.tolist())) != 3:
                    raise MeshError(f"degenerate face {tuple(f)}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "faces", faces)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]


@dataclass(frozen=True)
class Graph:
    """Undirected graph given by a symmetric sparse adjacency matrix."""

    adjacency: sp.csr_matrix
    weights: sp.csr_matrix | None = field(default=None)

    def __post_init__(self):
        a = self.adjacency.tocsr().astype(np.float64)
        a.eliminate_zeros()
        if (a != a.T).nnz != 0:
            raise MeshError("adjacency must be symmetric")
        if a.diagonal().any():
            raise MeshError("adjacency must have zero diagonal")
        if a.nnz and (a.data <= 0).any():
            raise MeshError("adjacency entries must be positive")
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


def load_mesh(path) -> Mesh:
    """Parse the OBJ subset: ``v x y z`` and ``f i j k [l]`` (1-based).

    Quads are split by the (v1,v2,v3)+(v1,v3,v4) rule. All other line types
    are ignored.
    """
    nodes = []
    raw_faces = []  # (line number, indices)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    nodes.append([float(p) for p in parts[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex: {exc}") from exc
            elif parts[0] == "f":
                if len(parts) not in (4, 5):
                    raise MeshError(f"{path}:{lineno}: faces must have 3 or 4 vertices")
                try:
                    # tolerate v/vt/vn references, keep the vertex index only
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad face index: {exc}") from exc
                raw_faces.append((lineno, idx))
    n = len(nodes)
    faces = []
    for lineno, idx in raw_faces:
        for i in idx:
            if not 0 <= i < n:
                raise MeshError(f"{path}:{lineno}: face index {i + 1} out of range (n={n})")
        if len(idx) == 3:
            faces.append(idx)
        else:
            faces.append([idx[0], idx[1], idx[2]])
            faces.append([idx[0], idx[2], idx[3]])
    return Mesh(np.array(nodes, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_mesh(mesh: Mesh, path) -> None:
    """Write ``v`` then ``f`` lines, 17 significant digits."""
    with open(path, "w") as fh:
        for p in mesh.nodes:
            fh.write("v %.17g %.17g %.17g\n" % (p[0], p[1], p[2]))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def build_graph(mesh: Mesh) -> Graph:
    """Adjacency from shared face edges: A(p,q)=1 iff p,q are edge neighbours."""
    n = mesh.n
    if mesh.faces.size == 0:
        return Graph(sp.csr_matrix((n, n)))
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    a = a + a.T
    a.data[:] = 1.0
    a.setdiag(0)
    a.eliminate_zeros()
    return Graph(a)


def normalized_laplacian(graph: Graph) -> sp.csr_matrix:
    """Symmetric normalized Laplacian I - D^{-1/2} A D^{-1/2}.

    Isolated nodes get L(p,p)=1 (their D^{-1/2} entry is taken as 0).
    """
    a = graph.weights if graph.weights is not None else graph.adjacency
    a = a.tocsr().astype(np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    lap = sp.eye(graph.n, format="csr") - sp.diags(dinv) @ a @ sp.diags(dinv)
    lap = (lap + lap.T) * 0.5  # enforce exact entrywise symmetry
    return lap.tocsr()


def estimate_lambda_max(lap: sp.spmatrix, max_iter: int = 1000, tol: float = 1e-12) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The primary start is the normalized all-ones vector. That vector is
    exactly in the kernel of the normalized Laplacian of any regular graph,
    and for highly symmetric meshes it can sit inside an interior eigenspace,
    so a cosine-sequence start runs as well and the larger estimate wins
    (every limit of the Rayleigh quotients is a true eigenvalue, so larger
    is always closer to the top).

    The Rayleigh quotients converge geometrically, so when the top of the
    spectrum is tightly clustered and the raw sequence has not settled within
    the iteration budget, a long-stable Aitken extrapolation of the sequence
    is accepted as the limit instead of failing.
    """
    lap = lap.tocsr()
    n = lap.shape[0]
    scale = abs(lap).max() if lap.nnz else 0.0
    if scale == 0.0:
        return 0.0
    starts = [np.ones(n), np.cos(np.arange(1, n + 1, dtype=np.float64))]
    window = 50
    estimates = []
    failure = None
    for v in starts:
        v = v / np.linalg.norm(v)
        lam = prev1 = prev2 = None
        recent = deque(maxlen=window)
        annihilated = False
        for _ in range(max_iter):
            w = lap @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                annihilated = True  # image at round-off level: start in kernel
                break
            v = w / nw
            lam = float(v @ (lap @ v))
            if prev1 is not None:
                if abs(lam - prev1) <= tol * max(abs(lam), 1.0):
                    break
                if prev2 is not None:
                    den = lam - 2.0 * prev1 + prev2
                    if abs(den) > 1e-300:
                        recent.append(lam - (lam - prev1) ** 2 / den)
            prev2, prev1 = prev1, lam
        else:
            # budget exhausted; a stable extrapolation still counts. The
            # denominator chatters at round-off, so judge stability by how
            # many recent extrapolations cluster around their median.
            if len(recent) == window:
                med = float(np.median(recent))
                near = sum(abs(a - med) <= 1e-8 * max(abs(med), 1.0)
                           for a in recent)
                if near >= window // 2:
                    estimates.append(max(med, lam))
                    continue
            failure = PowerIterationError(
                f"power iteration did not converge in {max_iter} iterations",
                lam)
            continue
        if not annihilated:
            estimates.append(lam)
    if estimates:
        return max(estimates)
    if failure is not None:
        raise failure
    return 0.0  # every start annihilated: matrix is (numerically) zero


def scaled_laplacian(lap: sp.spmatrix, lambda_max: float) -> sp.csr_matrix:
    """Rescale so the spectrum lands in [-1, 1]: 2 L / lambda_max - I."""
    if lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    n = lap.shape[0]
    return ((2.0 / lambda_max) * lap.tocsr() - sp.eye(n, format="csr")).tocsr()
