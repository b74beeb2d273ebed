"""Error metrics, singular-value spectra, and prediction timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ErrorReport:
    """Mean per-node Euclidean distances and their time/simulation means."""

    per_time: np.ndarray   # (n_s, eta)
    per_sim: np.ndarray    # (n_s,)
    grand_mean: float
    level: int = 0
    model: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("simulation,time_index,error\r\n")
            for s in range(self.per_time.shape[0]):
                for k in range(self.per_time.shape[1]):
                    fh.write(f"{s},{k},{float(self.per_time[s, k])!r}\r\n")
            fh.write(f"mean,,{float(self.grand_mean)!r}\r\n")


def node_error(reference: np.ndarray, approx: np.ndarray, level: int = 0,
               model: str = "") -> ErrorReport:
    """Euclidean distance per node, averaged over nodes, then time, then sims.

    Accepts (eta, n, 3) single trajectories or (n_s, eta, n, 3) stacks.
    """
    reference = np.asarray(reference, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if reference.shape != approx.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {approx.shape}")
    if reference.ndim == 3:
        reference = reference[None]
        approx = approx[None]
    dist = np.linalg.norm(reference - approx, axis=-1)  # (n_s, eta, n)
    per_time = dist.mean(axis=-1)
    per_sim = per_time.mean(axis=-1)
    return ErrorReport(per_time, per_sim, float(per_sim.mean()), level, model)


@dataclass
class SpectrumReport:
    """Leading normalized singular values of an (uncentered) snapshot matrix."""

    values: np.ndarray  # non-increasing, values[0] == 1
    n_kept: int = field(init=False)

    def __post_init__(self):
        self.n_kept = self.values.size

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("index,normalized_singular_value\r\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i + 1},{float(v)!r}\r\n")


def singular_spectrum(snapshots: np.ndarray, n_keep: int = 50) -> SpectrumReport:
    """Singular values of the raw snapshot matrix, normalized by the largest."""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 2 or snapshots.shape[0] < 2:
        raise ValueError("need a 2D snapshot matrix with at least 2 snapshots")
    s = np.linalg.svd(snapshots, compute_uv=False)
    if s[0] <= 0:
        raise ValueError("degenerate all-zero snapshot matrix")
    return SpectrumReport((s / s[0])[:n_keep])


def time_predictions(model, dataset, repetitions: int, hierarchy=None):
    """Mean wall-clock milliseconds per prediction, with and without the
    lift to full resolution. The lifted time is None without a hierarchy
    or for a level-0 model."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    mu = dataset.params[0]
    t_mid = dataset.times[dataset.times.size // 2]
    model.predict(mu, t_mid)  # warm-up outside the timed loop

    start = time.perf_counter()
    for _ in range(repetitions):
        model.predict(mu, t_mid)
    plain_ms = (time.perf_counter() - start) / repetitions * 1e3

    lifted_ms = None
    if hierarchy is not None and model.level > 0:
        from .refine import lift_to_full

        start = time.perf_counter()
        for _ in range(repetitions):
            lift_to_full(model.predict(mu, t_mid), hierarchy, model.level)
        lifted_ms = (time.perf_counter() - start) / repetitions * 1e3
    return plain_ms, lifted_ms
