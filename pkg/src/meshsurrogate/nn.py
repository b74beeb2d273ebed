"""Graph-convolutional building blocks on top of the autodiff tape.

The Chebyshev layer evaluates its polynomial filter by the sparse
three-term recursion and never materializes T_k(L~). A dense spectral
formulation (explicit Fourier basis from a Jacobi eigensolve) exists purely
as a test oracle for small graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import (ParamStore, Tensor, concat, elu, matmul, spmm_front,
                       swap_nodes_batch)

CHEB_ORDER = 3  # coefficient matrices k = 0..2


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ChebConvLayer:
    """Chebyshev spectral graph convolution of a fixed order."""

    theta: list[Tensor]  # K tensors of shape (c_in, c_out)
    bias: Tensor         # (c_out,)
    scaled_laplacian: sp.csr_matrix
    lap_t: sp.csr_matrix = None  # cached transpose for the backward pass

    @property
    def order(self) -> int:
        return len(self.theta)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, scaled_laplacian, c_in: int,
               c_out: int, rng: np.random.Generator, order: int = CHEB_ORDER,
               zero_init: bool = False) -> "ChebConvLayer":
        if order < 1:
            raise ValueError("Chebyshev order must be >= 1")
        theta = []
        for k in range(order):
            init = (np.zeros((c_in, c_out)) if zero_init
                    else glorot_uniform(rng, c_in * order, c_out, (c_in, c_out)))
            theta.append(store.add(f"{prefix}/theta{k}", init))
        bias = store.add(f"{prefix}/bias", np.zeros(c_out))
        lap = scaled_laplacian.tocsr()
        return cls(theta, bias, lap, lap.T.tocsr())


def cheb_conv(x: Tensor, layer: ChebConvLayer) -> Tensor:
    """sum_k T_k(L~) X theta_k + bias via the sparse recursion.

    T_0 = I, T_1 = L~, T_k = 2 L~ T_{k-1} - T_{k-2}. Accepts (n, c_in) or
    (batch, n, c_in) signals.
    """
    n = layer.scaled_laplacian.shape[0]
    if x.shape[-2] != n:
        raise ValueError(f"signal has {x.shape[-2]} nodes, Laplacian expects {n}")
    # node-first layout keeps the sparse products transpose-free for batches
    batched = x.value.ndim == 3
    h = swap_nodes_batch(x) if batched else x
    lap, lap_t = layer.scaled_laplacian, layer.lap_t
    if lap_t is None:
        lap_t = lap.T.tocsr()
    t_prev, t_curr = None, h
    out = matmul(t_curr, layer.theta[0])
    for k in range(1, layer.order):
        if k == 1:
            t_next = spmm_front(lap, h, lap_t)
        else:
            t_next = spmm_front(lap, t_curr, lap_t) * 2.0 - t_prev
        out = out + matmul(t_next, layer.theta[k])
        t_prev, t_curr = t_curr, t_next
    out = out + layer.bias
    return swap_nodes_batch(out) if batched else out


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvector columns). Iterates until the
    off-diagonal Frobenius norm drops below ``tol``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < tol / (n * n + 1):
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) \
                    if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    else:
        raise RuntimeError("Jacobi eigensolve did not converge")
    order = np.argsort(np.diag(a))
    return np.diag(a)[order], v[:, order]


def spectral_oracle(x: np.ndarray, coeffs: np.ndarray, scaled_laplacian) -> np.ndarray:
    """Dense Fourier-space evaluation of the same Chebyshev filter.

    Computes U diag(sum_k w_k T_k(lambda_i)) U^T x from an explicit
    eigendecomposition. Test-scale only (n <= 64).
    """
    dense = np.asarray(scaled_laplacian.todense() if sp.issparse(scaled_laplacian)
                       else scaled_laplacian, dtype=np.float64)
    n = dense.shape[0]
    if n > 64:
        raise ValueError("spectral oracle is restricted to n <= 64")
    lam, u = jacobi_eigh(dense)
    # Chebyshev values per eigenvalue by the same scalar recursion
    t_prev, t_curr = None, np.ones_like(lam)
    filt = coeffs[0] * t_curr
    for k in range(1, len(coeffs)):
        t_next = lam.copy() if k == 1 else 2 * lam * t_curr - t_prev
        filt = filt + coeffs[k] * t_next
        t_prev, t_curr = t_curr, t_next
    return u @ (filt * (u.T @ np.asarray(x, dtype=np.float64)))


@dataclass
class DenseLayer:
    """Affine map y = x W + b."""

    weights: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d_in: int, d_out: int,
               rng: np.random.Generator, zero_init: bool = False,
               init=None) -> "DenseLayer":
        if init is None:
            init = (np.zeros((d_in, d_out)) if zero_init
                    else glorot_uniform(rng, d_in, d_out, (d_in, d_out)))
        w = store.add(f"{prefix}/weights", init)
        b = store.add(f"{prefix}/bias", np.zeros(d_out))
        return cls(w, b)


def dense(x: Tensor, layer: DenseLayer) -> Tensor:
    return matmul(x, layer.weights) + layer.bias


# -- architecture bookkeeping -------------------------------------------


def count_params(layers) -> int:
    """Total weight+bias elements for a list of layer descriptors.

    Descriptors are tuples: ("fc", d_in, d_out, biased),
    ("gcn", c_in, c_out, order, biased), or ("linear_map", d_in, d_out)
    for a bias-free matrix such as a POD basis.
    """
    total = 0
    for spec in layers:
        kind = spec[0]
        if kind == "fc":
            _, d_in, d_out, biased = spec
            total += d_in * d_out + (d_out if biased else 0)
        elif kind == "gcn":
            _, c_in, c_out, order, biased = spec
            total += order * c_in * c_out + (c_out if biased else 0)
        elif kind == "linear_map":
            _, d_in, d_out = spec
            total += d_in * d_out
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return total


GCN_CHANNELS = (3, 6, 12, 24)
MLP_HIDDEN = (64, 64, 64)


def gae_architecture(n_nodes: int, latent: int, order: int = CHEB_ORDER):
    """Layer descriptors for one graph-convolutional autoencoder."""
    layers = []
    for c_in, c_out in zip(GCN_CHANNELS, GCN_CHANNELS[1:]):
        layers.append(("gcn", c_in, c_out, order, True))
    layers.append(("fc", n_nodes * GCN_CHANNELS[-1], latent, True))
    layers.append(("fc", latent, n_nodes * GCN_CHANNELS[-1], True))
    for c_in, c_out in zip(GCN_CHANNELS[::-1], GCN_CHANNELS[::-1][1:]):
        layers.append(("gcn", c_in, c_out, order, True))
    return layers


def mlp_architecture(d_in: int, latent: int, hidden=MLP_HIDDEN):
    dims = [d_in, *hidden, latent]
    return [("fc", a, b, True) for a, b in zip(dims, dims[1:])]
