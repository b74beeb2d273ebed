import numpy as np
import pytest
import scipy.sparse as sp

from meshsurrogate.mesh import (Graph, Mesh, MeshError, PowerIterationError,
                                build_graph, estimate_lambda_max, load_mesh,
                                normalized_laplacian, scaled_laplacian,
                                write_mesh)
from conftest import random_connected_graph


def _write(tmp_path, text, name="m.obj"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadMesh:
    def test_minimal_triangle(self, tmp_path):
        mesh = load_mesh(_write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
        assert mesh.n == 3
        assert mesh.faces.shape == (1, 3)
        assert np.array_equal(mesh.faces[0], [0, 1, 2])

    def test_quad_split(self, tmp_path):
        mesh = load_mesh(_write(
            tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"))
        assert np.array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_index_out_of_range(self, tmp_path):
        path = _write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(MeshError, match="out of range"):
            load_mesh(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = _write(tmp_path, "v 0 0 0\nv 1 0 x\n")
        with pytest.raises(MeshError, match=":2"):
            load_mesh(path)

    def test_roundtrip(self, tmp_path):
        mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0.25, 1 / 3, 0]]),
                    np.array([[0, 1, 2]]))
        path = tmp_path / "out.obj"
        write_mesh(mesh, path)
        back = load_mesh(path)
        assert np.array_equal(back.nodes, mesh.nodes)
        assert np.array_equal(back.faces, mesh.faces)

    def test_degenerate_face_rejected(self):
        with pytest.raises(MeshError, match="degenerate"):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


class TestBuildGraph:
    def test_single_triangle(self):
        mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
        a = build_graph(mesh).adjacency.toarray()
        assert np.array_equal(a, np.ones((3, 3)) - np.eye(3))

    def test_two_triangles_degrees(self):
        # triangles (0,1,2) and (1,2,3) sharing edge (1,2)
        mesh = Mesh(np.arange(12.0).reshape(4, 3), np.array([[0, 1, 2], [1, 2, 3]]))
        deg = np.asarray(build_graph(mesh).adjacency.sum(axis=1)).ravel()
        assert np.array_equal(deg, [2, 3, 3, 2])

    def test_isolated_node(self):
        mesh = Mesh(np.arange(12.0).reshape(4, 3), np.array([[0, 1, 2]]))
        a = build_graph(mesh).adjacency
        assert a[3].nnz == 0 and a[:, 3].nnz == 0

    def test_face_order_invariance(self):
        rng = np.random.default_rng(0)
        mesh = Mesh(rng.normal(size=(5, 3)),
                    np.array([[0, 1, 2], [1, 2, 3], [2, 3, 4]]))
        perm = Mesh(mesh.nodes, mesh.faces[::-1])
        assert (build_graph(mesh).adjacency != build_graph(perm).adjacency).nnz == 0

    def test_graph_invariants_rejected(self):
        asym = sp.csr_matrix(np.array([[0.0, 1], [0, 0]]))
        with pytest.raises(MeshError, match="symmetric"):
            Graph(asym)
        diag = sp.csr_matrix(np.array([[1.0, 1], [1, 0]]))
        with pytest.raises(MeshError, match="diagonal"):
            Graph(diag)


class TestNormalizedLaplacian:
    def test_single_edge(self):
        g = Graph(sp.csr_matrix(np.array([[0.0, 1], [1, 0]])))
        lap = normalized_laplacian(g).toarray()
        assert np.allclose(lap, [[1, -1], [-1, 1]], atol=1e-15)

    def test_triangle_eigenvalues(self):
        g = Graph(sp.csr_matrix(np.ones((3, 3)) - np.eye(3)))
        lam = np.linalg.eigvalsh(normalized_laplacian(g).toarray())
        assert np.allclose(sorted(lam), [0.0, 1.5, 1.5], atol=1e-12)

    def test_isolated_node_convention(self):
        a = np.zeros((3, 3))
        a[0, 1] = a[1, 0] = 1.0
        lap = normalized_laplacian(Graph(sp.csr_matrix(a))).toarray()
        assert lap[2, 2] == 1.0
        assert lap[2, 0] == lap[2, 1] == 0.0

    def test_symmetry_and_psd(self):
        rng = np.random.default_rng(3)
        for n in (4, 9, 17):
            lap = normalized_laplacian(random_connected_graph(rng, n))
            assert (lap != lap.T).nnz == 0
            for _ in range(100):
                x = rng.normal(size=n)
                assert x @ (lap @ x) >= -1e-12


class TestEstimateLambdaMax:
    def test_single_edge(self):
        lap = sp.csr_matrix(np.array([[1.0, -1], [-1, 1]]))
        assert abs(estimate_lambda_max(lap) - 2.0) <= 1e-6 * 2.0

    def test_triangle(self):
        g = Graph(sp.csr_matrix(np.ones((3, 3)) - np.eye(3)))
        lap = normalized_laplacian(g)
        assert abs(estimate_lambda_max(lap) - 1.5) <= 1e-6 * 1.5

    def test_zero_matrix(self):
        assert estimate_lambda_max(sp.csr_matrix((4, 4))) == 0.0

    def test_non_convergence_carries_last_estimate(self):
        lap = sp.csr_matrix(np.array([[1.0, -1], [-1, 1]]))
        with pytest.raises(PowerIterationError) as exc:
            estimate_lambda_max(lap, max_iter=1)
        assert exc.value.last_estimate == pytest.approx(2.0)

    def test_random_graphs_match_dense_eigensolve(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = int(rng.integers(2, 30))
            lap = normalized_laplacian(random_connected_graph(rng, n))
            true = np.linalg.eigvalsh(lap.toarray()).max()
            est = estimate_lambda_max(lap, max_iter=20000)
            assert abs(est - true) <= 1e-6 * true


class TestScaledLaplacian:
    def test_single_edge(self):
        lap = sp.csr_matrix(np.array([[1.0, -1], [-1, 1]]))
        assert np.allclose(scaled_laplacian(lap, 2.0).toarray(),
                           [[0, -1], [-1, 0]], atol=1e-15)

    def test_zero_laplacian(self):
        out = scaled_laplacian(sp.csr_matrix((3, 3)), 1.0).toarray()
        assert np.array_equal(out, -np.eye(3))

    def test_triangle_spectrum(self):
        g = Graph(sp.csr_matrix(np.ones((3, 3)) - np.eye(3)))
        lap = normalized_laplacian(g)
        lam = np.linalg.eigvalsh(scaled_laplacian(lap, 1.5).toarray())
        assert np.allclose(sorted(lam), [-1.0, 1.0, 1.0], atol=1e-12)

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(ValueError):
            scaled_laplacian(sp.csr_matrix((2, 2)), 0.0)

    def test_spectral_radius_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(2, 51))
            lap = normalized_laplacian(random_connected_graph(rng, n))
            lmax = estimate_lambda_max(lap, max_iter=20000)
            radius = np.abs(np.linalg.eigvalsh(
                scaled_laplacian(lap, lmax).toarray())).max()
            assert radius <= 1.0 + 1e-6
