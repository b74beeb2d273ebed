"""Synthetic parametric plate-impact dynamics, Halton sampling, datasets.

The closed-form flow stands in for an expensive finite-element solve: a flat
plate hit by an angled impact front, with a saturating (plasticity-flavored)
in-plane crush and an out-of-plane buckling bulge. Exact ground truth, instant
generation, and nonlinear in all parameters and time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh
from .primitives import plate_grid

STIFFNESS_SCALE = 400.0   # in-plane crush magnitude at the reference stiffness
BULGE_FACTOR = 0.15       # out-of-plane amplitude relative to the plate extent

PARAM_RANGES = ((5.0, 35.0), (-np.pi / 4, np.pi / 4), (168.0, 758.0))


@dataclass(frozen=True)
class ScenarioParams:
    """Impact speed, impact angle (radians), and stiffness factor."""

    mu1: float
    mu2: float
    mu3: float

    def __post_init__(self):
        if self.mu1 < 0:
            raise ValueError("impact speed must be non-negative")
        if not -np.pi / 4 <= self.mu2 <= np.pi / 4:
            raise ValueError("impact angle must lie in [-pi/4, pi/4]")
        if self.mu3 <= 0:
            raise ValueError("stiffness factor must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2, self.mu3])


@dataclass
class Dataset:
    """Per-simulation parameters, shared time grid, and state trajectories."""

    level: int
    params: np.ndarray       # (n_s, l)
    times: np.ndarray        # (eta,)
    states: np.ndarray       # (n_s, eta, n, 3)
    split: np.ndarray = field(default=None)  # (n_s,) uint8, 0 train / 1 test

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.split is None:
            self.split = np.zeros(self.params.shape[0], dtype=np.uint8)
        self.split = np.asarray(self.split, dtype=np.uint8)
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(self.params)) and np.all(np.isfinite(self.states))):
            raise ValueError("dataset values must be finite")
        n_s = self.params.shape[0]
        if self.states.shape[:2] != (n_s, self.times.size) or self.split.shape != (n_s,):
            raise ValueError("inconsistent dataset shapes")

    @property
    def n_sims(self) -> int:
        return self.params.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.states.shape[2]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.level, self.params[mask], self.times,
                       self.states[mask], self.split[mask])

    def train(self) -> "Dataset":
        return self.subset(self.split == 0)

    def test(self) -> "Dataset":
        return self.subset(self.split == 1)


# -- Halton sampling -----------------------------------------------------

_FIRST_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)


def _is_prime(b: int) -> bool:
    if b < 2:
        return False
    return all(b % d for d in range(2, int(b ** 0.5) + 1))


def halton(index: int, base: int) -> float:
    """Radical-inverse value of a 1-based index in a prime base."""
    if not _is_prime(base):
        raise ValueError(f"Halton base must be prime, got {base}")
    if index < 1:
        raise ValueError("Halton index is 1-based")
    f, r = 1.0, 0.0
    i = index
    while i > 0:
        f /= base
        i, digit = divmod(i, base)
        r += f * digit
    return r


def halton_sample(n_samples: int, ranges) -> np.ndarray:
    """Low-discrepancy parameter matrix: one prime base per dimension,
    affinely mapped into the given (low, high) ranges."""
    ranges = list(ranges)
    if len(ranges) > len(_FIRST_PRIMES):
        raise ValueError("too many dimensions for the built-in prime table")
    out = np.empty((n_samples, len(ranges)))
    for d, (lo, hi) in enumerate(ranges):
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid range ({lo}, {hi})")
        base = _FIRST_PRIMES[d]
        for s in range(n_samples):
            out[s, d] = lo + (hi - lo) * halton(s + 1, base)
    return out


# -- closed-form plate impact --------------------------------------------


def simulate(mesh: Mesh, params: ScenarioParams, times) -> np.ndarray:
    """Deterministic displacement trajectory (eta, n, 3) for a flat plate.

    An impact front with direction d = (cos mu2, sin mu2, 0) sweeps across
    the plate at speed mu1. Each node crushes in-plane by a saturating ramp
    h(u) = u - tanh(u) scaled by the inverse stiffness, and buckles out of
    plane with a tanh-saturated sine bulge across the plate extent.
    """
    if np.any(mesh.nodes[:, 2] != 0):
        raise ValueError("simulate expects a flat plate mesh with rest z = 0")
    times = np.asarray(times, dtype=np.float64)
    d = np.array([np.cos(params.mu2), np.sin(params.mu2), 0.0])
    phi = mesh.nodes @ d
    phi_min = phi.min()
    extent = phi.max() - phi_min
    if extent <= 0:
        raise ValueError("plate is degenerate along the impact direction")
    u = params.mu1 * times[:, None] - (phi - phi_min)[None, :]  # (eta, n)
    ramp = np.where(u > 0, u - np.tanh(u), 0.0)
    traj = np.zeros((times.size, mesh.n, 3))
    inplane = -(STIFFNESS_SCALE / params.mu3) * ramp
    traj[:, :, 0] = inplane * d[0]
    traj[:, :, 1] = inplane * d[1]
    traj[:, :, 2] = (BULGE_FACTOR * extent * np.tanh(ramp / extent)
                     * np.sin(np.pi * (phi - phi_min) / extent)[None, :])
    return traj


def make_benchmark(seed: int = 0, n_sims: int = 80, n_times: int = 51,
                   nx: int = 30, ny: int = 20) -> tuple[Dataset, Mesh]:
    """Plate benchmark: Halton-sampled parameters, 80/20 train/test split.

    The seed only tags the dataset for provenance; generation itself is fully
    deterministic (Halton points and a closed-form flow).
    """
    mesh = plate_grid(nx, ny)
    params = halton_sample(n_sims, PARAM_RANGES)
    times = np.linspace(0.0, 1.0, n_times)
    states = np.stack([
        simulate(mesh, ScenarioParams(*p), times) for p in params
    ])
    n_train = int(round(n_sims * 0.8))
    split = np.zeros(n_sims, dtype=np.uint8)
    split[n_train:] = 1
    return Dataset(0, params, times, states, split), mesh


# -- MHSD binary container -----------------------------------------------

_MHSD_MAGIC = b"MHSD"


def write_dataset(dataset: Dataset, path) -> None:
    """Serialize to the MHSD container (little-endian, bit-exact round trip)."""
    n_s, eta, n, nc = dataset.states.shape
    ell = dataset.params.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MHSD_MAGIC)
        fh.write(struct.pack("<6I", 1, dataset.level, n_s, eta, n, nc))
        fh.write(struct.pack("<I", ell))
        fh.write(np.ascontiguousarray(dataset.times, dtype="<f8").tobytes())
        for s in range(n_s):
            fh.write(np.ascontiguousarray(dataset.params[s], dtype="<f8").tobytes())
            fh.write(struct.pack("<B", int(dataset.split[s])))
            fh.write(np.ascontiguousarray(dataset.states[s], dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MHSD_MAGIC:
        raise ValueError(f"{path}: not an MHSD dataset")
    try:
        version, level, n_s, eta, n, nc = struct.unpack_from("<6I", data, 4)
        if version != 1:
            raise ValueError(f"{path}: unsupported MHSD version {version}")
        (ell,) = struct.unpack_from("<I", data, 28)
        off = 32
        body = eta + n_s * (ell + eta * n * nc)
        if off + 8 * body + n_s > len(data):
            raise ValueError(f"{path}: truncated MHSD dataset")
        times = np.frombuffer(data, dtype="<f8", count=eta, offset=off).copy()
        off += 8 * eta
        params = np.empty((n_s, ell))
        split = np.empty(n_s, dtype=np.uint8)
        states = np.empty((n_s, eta, n, nc))
        block = eta * n * nc
        for s in range(n_s):
            params[s] = np.frombuffer(data, dtype="<f8", count=ell, offset=off)
            off += 8 * ell
            split[s] = data[off]
            off += 1
            chunk = np.frombuffer(data, dtype="<f8", count=block, offset=off)
            states[s] = chunk.reshape(eta, n, nc)
            off += 8 * block
    except (struct.error, IndexError) as exc:
        raise ValueError(f"{path}: truncated MHSD dataset") from exc
    return Dataset(level, params, times, states, split)
