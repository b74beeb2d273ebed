"""Procedural test meshes: rectangular plates and icospheres."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def plate_grid(nx: int, ny: int, width: float = 3.0, height: float = 2.0) -> Mesh:
    """Regular nx*ny triangulated grid in the z=0 plane, origin at the corner."""
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    nodes = np.zeros((nx * ny, 3))
    nodes[:, 0] = np.repeat(xs, ny)
    nodes[:, 1] = np.tile(ys, nx)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, b + 1])
            faces.append([a, b + 1, a + 1])
    return Mesh(nodes, np.array(faces, dtype=np.int64))


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron; 12, 42, 162, ... nodes for 0, 1, 2, ... levels."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts / np.linalg.norm(verts[0]))
    for _ in range(subdivisions):
        midpoint = {}

        def midx(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midx(a, b), midx(b, c), midx(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    nodes = np.array(verts) * radius
    return Mesh(nodes, np.array(faces, dtype=np.int64))
