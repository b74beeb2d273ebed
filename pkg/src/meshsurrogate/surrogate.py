"""Single-level surrogates (graph-conv autoencoder + MLP), the two-part
loss, the Adam training loop, and the POD / dense-autoencoder baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (ParamStore, Tensor, concat, elu, matmul, mean_square,
                       slice_rows)
from .coarsen import Hierarchy, downsample_states
from .datagen import Dataset
from .nn import (CHEB_ORDER, GCN_CHANNELS, MLP_HIDDEN, ChebConvLayer,
                 DenseLayer, cheb_conv, dense)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 32
    learning_rate: float = 1e-3
    learning_rate_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma_approx: float = 1.0
    gamma_rec: float = 1.0
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.gamma_approx < 0 or self.gamma_rec < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma_approx == 0 and self.gamma_rec == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


@dataclass
class TrainHistory:
    total: list[float] = field(default_factory=list)
    approx: list[float] = field(default_factory=list)
    rec: list[float] = field(default_factory=list)
    best_epoch: int = -1
    initial_total: float = np.nan
    initial_approx: float = np.nan
    initial_rec: float = np.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("epoch,total,approx,rec\r\n")
            for e, (t, a, r) in enumerate(zip(self.total, self.approx, self.rec)):
                fh.write(f"{e},{float(t)!r},{float(a)!r},{float(r)!r}\r\n")


@dataclass
class Normalization:
    """Per-channel state standardization and min-max input scaling.

    State statistics are computed once on the finest-level training split and
    shared across all hierarchy levels: selection and row-stochastic lifting
    both commute with a per-channel affine map, which keeps the frozen-coarse
    warm start exact.
    """

    state_mean: np.ndarray  # (3,)
    state_std: np.ndarray   # (3,)
    input_lo: np.ndarray    # (l+1,)
    input_hi: np.ndarray    # (l+1,)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "Normalization":
        train = dataset.train() if (dataset.split == 0).any() else dataset
        states = train.states
        mean = states.mean(axis=(0, 1, 2))
        std = np.maximum(states.std(axis=(0, 1, 2)), 1e-12)
        inputs = cls._raw_inputs(train)
        lo, hi = inputs.min(axis=0), inputs.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(mean, std, lo, hi)

    @staticmethod
    def _raw_inputs(dataset: Dataset) -> np.ndarray:
        """(n_s * eta, l + 1) rows of (mu, t)."""
        n_s, eta = dataset.n_sims, dataset.times.size
        mu = np.repeat(dataset.params, eta, axis=0)
        t = np.tile(dataset.times, n_s)[:, None]
        return np.hstack([mu, t])

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        return (states - self.state_mean) / self.state_std

    def denormalize_states(self, states: np.ndarray) -> np.ndarray:
        return states * self.state_std + self.state_mean

    def normalize_inputs(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.input_lo) / (self.input_hi - self.input_lo)

    def save_into(self, store: ParamStore, prefix: str = "norm") -> None:
        for key in ("state_mean", "state_std", "input_lo", "input_hi"):
            store.add(f"{prefix}/{key}", getattr(self, key))
        store.freeze([f"{prefix}/{key}"
                      for key in ("state_mean", "state_std", "input_lo", "input_hi")])

    @classmethod
    def load_from(cls, store: ParamStore, prefix: str = "norm") -> "Normalization":
        return cls(*(store[f"{prefix}/{key}"].value
                     for key in ("state_mean", "state_std", "input_lo", "input_hi")))


class SurrogateLevel:
    """Encoder/decoder over one mesh resolution plus the latent-dynamics MLP.

    Encoder: ChebConv 3->6->12->24 with ELU, then a linear dense map to the
    latent dimension. Decoder mirrors it. MLP: (l+1) -> 64 -> 64 -> 64 -> r,
    ELU hidden, linear output. All computation happens in normalized space;
    ``predict`` converts back to physical units.
    """

    def __init__(self, store, prefix, scaled_laplacian, n_nodes, latent,
                 norm, level, rng, order=CHEB_ORDER, n_inputs=4):
        self.store = store
        self.prefix = prefix
        self.n_nodes = n_nodes
        self.latent_dim = latent
        self.norm = norm
        self.level = level
        self.scaled_laplacian = scaled_laplacian
        ch = GCN_CHANNELS
        self.enc_layers = [
            ChebConvLayer.create(store, f"{prefix}/enc/gcn{i}", scaled_laplacian,
                                 ch[i], ch[i + 1], rng, order)
            for i in range(len(ch) - 1)]
        self.enc_dense = DenseLayer.create(store, f"{prefix}/enc/dense",
                                           n_nodes * ch[-1], latent, rng)
        self.dec_dense = DenseLayer.create(store, f"{prefix}/dec/dense",
                                           latent, n_nodes * ch[-1], rng)
        rev = ch[::-1]
        self.dec_layers = [
            ChebConvLayer.create(store, f"{prefix}/dec/gcn{i}", scaled_laplacian,
                                 rev[i], rev[i + 1], rng, order)
            for i in range(len(rev) - 1)]
        dims = [n_inputs, *MLP_HIDDEN, latent]
        self.mlp_layers = [
            DenseLayer.create(store, f"{prefix}/mlp/fc{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)]

    def param_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix + "/")]

    def encode(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.enc_layers:
            h = elu(cheb_conv(h, layer))
        flat = h.reshape(-1, self.n_nodes * GCN_CHANNELS[-1]) if h.value.ndim == 3 \
            else h.reshape(1, -1)
        z = dense(flat, self.enc_dense)
        return z if x.value.ndim == 3 else z.reshape(self.latent_dim)

    def decode(self, z: Tensor) -> Tensor:
        single = z.value.ndim == 1
        zb = z.reshape(1, -1) if single else z
        h = elu(dense(zb, self.dec_dense))
        h = h.reshape(-1, self.n_nodes, GCN_CHANNELS[-1])
        for i, layer in enumerate(self.dec_layers):
            h = cheb_conv(h, layer)
            if i < len(self.dec_layers) - 1:
                h = elu(h)
        return h.reshape(self.n_nodes, GCN_CHANNELS[0]) if single else h

    def latent(self, inputs: Tensor) -> Tensor:
        h = inputs
        for layer in self.mlp_layers[:-1]:
            h = elu(dense(h, layer))
        return dense(h, self.mlp_layers[-1])

    def predict(self, mu, t) -> np.ndarray:
        """Physical-space approximate state (n_nodes, 3) at the model's level."""
        mu = np.asarray(mu, dtype=np.float64).ravel()
        raw = np.append(mu, float(t))
        if raw.size != self.norm.input_lo.size:
            raise ValueError(f"expected {self.norm.input_lo.size - 1} parameters")
        inp = Tensor(self.norm.normalize_inputs(raw)[None, :])
        out = self.decode(self.latent(inp)).value[0]
        return self.norm.denormalize_states(out)


def loss(inputs: Tensor, states: Tensor, model, gamma_approx: float,
         gamma_rec: float) -> tuple[Tensor, Tensor, Tensor]:
    """Two-part loss on a normalized batch: approximation + reconstruction.

    Returns (total, approx, rec) as graph tensors; the zero-weighted part is
    still evaluated so histories always carry both components.
    """
    if states.value.shape[0] == 0:
        raise ValueError("empty batch")
    approx = mean_square(states - model.decode(model.latent(inputs)))
    rec = mean_square(states - model.decode(model.encode(states)))
    total = approx * gamma_approx + rec * gamma_rec
    return total, approx, rec


class Adam:
    """Adam with cosine learning-rate decay, skipping frozen parameters."""

    def __init__(self, store: ParamStore, config: TrainConfig):
        self.store = store
        self.cfg = config
        self.m = {n: np.zeros_like(t.value) for n, t in store.trainable()}
        self.v = {n: np.zeros_like(t.value) for n, t in store.trainable()}
        self.t = 0

    def lr_at(self, epoch: int) -> float:
        cfg = self.cfg
        if cfg.epochs == 1:
            return cfg.learning_rate
        frac = epoch / (cfg.epochs - 1)
        return cfg.learning_rate_min + 0.5 * (cfg.learning_rate - cfg.learning_rate_min) \
            * (1 + np.cos(np.pi * frac))

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1 - cfg.beta1 ** self.t
        b2c = 1 - cfg.beta2 ** self.t
        for name, tensor in self.store.trainable():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            tensor.value -= lr * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)


def dataset_arrays(dataset: Dataset, norm: Normalization):
    """Normalized (inputs, states) training arrays from a dataset."""
    inputs = norm.normalize_inputs(Normalization._raw_inputs(dataset))
    n_s, eta = dataset.n_sims, dataset.times.size
    states = norm.normalize_states(dataset.states).reshape(
        n_s * eta, dataset.n_nodes, -1)
    return inputs, states


def evaluate_loss(model, dataset: Dataset, config: TrainConfig,
                  chunk: int = 64):
    """Full-dataset loss triple (floats) at the current parameters.

    Evaluated in chunks so the forward pass never materializes the whole
    dataset's activations at once; the aggregate is the exact global mean.
    """
    inputs, states = dataset_arrays(dataset, model.norm)
    sse_approx = sse_rec = 0.0
    count = 0
    for start in range(0, inputs.shape[0], chunk):
        inp = Tensor(inputs[start:start + chunk])
        st = Tensor(states[start:start + chunk])
        approx_res = (st - model.decode(model.latent(inp))).value
        rec_res = (st - model.decode(model.encode(st))).value
        sse_approx += float(np.sum(approx_res ** 2))
        sse_rec += float(np.sum(rec_res ** 2))
        count += approx_res.size
    approx = sse_approx / count
    rec = sse_rec / count
    return config.gamma_approx * approx + config.gamma_rec * rec, approx, rec


def train(model, dataset: Dataset, config: TrainConfig) -> TrainHistory:
    """Minibatch Adam over shuffled samples; restores the best-epoch weights.

    Only the training split of the dataset is used. Frozen parameters are
    untouched. Seeded shuffling makes runs bit-reproducible.
    """
    train_set = dataset.train() if (dataset.split == 0).any() else dataset
    if train_set.n_nodes != model.n_nodes:
        raise ValueError(f"dataset has {train_set.n_nodes} nodes, "
                         f"model expects {model.n_nodes}")
    inputs, states = dataset_arrays(train_set, model.norm)
    n_samples = inputs.shape[0]
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.store, config)
    history = TrainHistory()
    history.initial_total, history.initial_approx, history.initial_rec = \
        evaluate_loss(model, train_set, config)
    best = np.inf
    best_values = None
    trainable = model.store.trainable()
    # the frozen coarse chain is constant in the data: evaluate it once
    cache = None
    if hasattr(model, "precompute_frozen") and model.coarse_is_frozen():
        cache = model.precompute_frozen(inputs, states)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n_samples)
            lr = opt.lr_at(epoch)
            sums = np.zeros(3)
            n_batches = 0
            for start in range(0, n_samples, config.batch_size):
                idx = order[start:start + config.batch_size]
                if cache is not None:
                    model.frozen_batch = {k: v[idx] for k, v in cache.items()}
                model.store.zero_grad()
                total, approx, rec = loss(Tensor(inputs[idx]), Tensor(states[idx]),
                                          model, config.gamma_approx, config.gamma_rec)
                if not np.isfinite(total.value):
                    raise TrainError(f"non-finite loss at epoch {epoch}")
                if lr > 0:
                    total.backward()
                    opt.step(lr)
                sums += (float(total.value), float(approx.value), float(rec.value))
                n_batches += 1
            epoch_total, epoch_approx, epoch_rec = sums / n_batches
            history.total.append(epoch_total)
            history.approx.append(epoch_approx)
            history.rec.append(epoch_rec)
            if epoch_total < best:
                best = epoch_total
                history.best_epoch = epoch
                best_values = [t.value.copy() for _, t in trainable]
    finally:
        if cache is not None:
            model.frozen_batch = None
    if best_values is not None:
        for (_, t), val in zip(trainable, best_values):
            t.value[...] = val
    if config.checkpoint_path:
        model.store.save(config.checkpoint_path)
    return history


# -- POD baseline --------------------------------------------------------


@dataclass
class PodBasis:
    """Mean + orthonormal basis of the leading left singular directions."""

    mean: np.ndarray             # (N_flat,)
    basis: np.ndarray            # (N_flat, r)
    singular_values: np.ndarray  # (r,)


def pod_fit(snapshots: np.ndarray, r: int) -> PodBasis:
    """Top-r SVD of the centered snapshot matrix (rows are snapshots)."""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if r > min(snapshots.shape):
        raise ValueError(f"r={r} exceeds the snapshot matrix rank bound")
    mean = snapshots.mean(axis=0)
    _, s, vt = np.linalg.svd(snapshots - mean, full_matrices=False)
    return PodBasis(mean, vt[:r].T.copy(), s[:r].copy())


def pod_project(pod: PodBasis, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) - pod.mean) @ pod.basis


def pod_reconstruct(pod: PodBasis, coeffs: np.ndarray) -> np.ndarray:
    return pod.mean + np.asarray(coeffs) @ pod.basis.T


class PodSurrogate:
    """PODNN baseline: linear reduction plus the standard latent MLP."""

    def __init__(self, pod: PodBasis, norm: Normalization, store: ParamStore,
                 rng: np.random.Generator, n_inputs: int = 4):
        self.pod = pod
        self.norm = norm
        self.store = store
        r = pod.basis.shape[1]
        dims = [n_inputs, *MLP_HIDDEN, r]
        self.mlp_layers = [
            DenseLayer.create(store, f"podnn/mlp/fc{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)]
        self.coeff_scale = np.maximum(pod.singular_values / np.sqrt(
            max(pod.basis.shape[0], 1)), 1e-12)

    def latent(self, inputs: Tensor) -> Tensor:
        h = inputs
        for layer in self.mlp_layers[:-1]:
            h = elu(dense(h, layer))
        return dense(h, self.mlp_layers[-1])

    def predict(self, mu, t) -> np.ndarray:
        raw = np.append(np.asarray(mu, dtype=np.float64).ravel(), float(t))
        inp = Tensor(self.norm.normalize_inputs(raw)[None, :])
        coeffs = self.latent(inp).value[0] * self.coeff_scale
        return pod_reconstruct(self.pod, coeffs)


def train_podnn(dataset: Dataset, r: int, config: TrainConfig) -> PodSurrogate:
    """Fit POD on the training split and regress latent coefficients."""
    train_set = dataset.train() if (dataset.split == 0).any() else dataset
    n_s, eta = train_set.n_sims, train_set.times.size
    flat = train_set.states.reshape(n_s * eta, -1)
    pod = pod_fit(flat, r)
    norm = Normalization.from_dataset(dataset)
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    model = PodSurrogate(pod, norm, store, rng)
    inputs = norm.normalize_inputs(Normalization._raw_inputs(train_set))
    targets = pod_project(pod, flat) / model.coeff_scale
    opt = Adam(store, config)
    rng_shuffle = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(inputs.shape[0])
        lr = opt.lr_at(epoch)
        for start in range(0, inputs.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            store.zero_grad()
            err = mean_square(model.latent(Tensor(inputs[idx])) - Tensor(targets[idx]))
            if not np.isfinite(err.value):
                raise TrainError(f"non-finite PODNN loss at epoch {epoch}")
            err.backward()
            opt.step(lr)
    return model


# -- dense autoencoder baseline ------------------------------------------


class DenseAutoencoder:
    """Fully-connected mirror-symmetric autoencoder over flattened states."""

    def __init__(self, store, prefix, n_nodes, n_channels, hidden, latent,
                 norm, rng, n_inputs=4, identity_init=False):
        self.store = store
        self.prefix = prefix
        self.n_nodes = n_nodes
        self.n_channels = n_channels
        self.latent_dim = latent
        self.norm = norm
        self.level = 0
        flat = n_nodes * n_channels
        enc_dims = [flat, *hidden, latent]
        dec_dims = [latent, *hidden[::-1], flat]

        def make(side, dims):
            layers = []
            for i in range(len(dims) - 1):
                init = None
                if identity_init and dims[i] == dims[i + 1]:
                    init = np.eye(dims[i])
                layers.append(DenseLayer.create(
                    store, f"{prefix}/{side}/fc{i}", dims[i], dims[i + 1], rng,
                    init=init))
            return layers

        self.enc_layers = make("enc", enc_dims)
        self.dec_layers = make("dec", dec_dims)
        dims = [n_inputs, *MLP_HIDDEN, latent]
        self.mlp_layers = [
            DenseLayer.create(store, f"{prefix}/mlp/fc{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)]

    def encode(self, x: Tensor) -> Tensor:
        h = x.reshape(-1, self.n_nodes * self.n_channels)
        for i, layer in enumerate(self.enc_layers):
            h = dense(h, layer)
            if i < len(self.enc_layers) - 1:
                h = elu(h)
        return h

    def decode(self, z: Tensor) -> Tensor:
        h = z
        for i, layer in enumerate(self.dec_layers):
            h = dense(h, layer)
            if i < len(self.dec_layers) - 1:
                h = elu(h)
        return h.reshape(-1, self.n_nodes, self.n_channels)

    def latent(self, inputs: Tensor) -> Tensor:
        h = inputs
        for layer in self.mlp_layers[:-1]:
            h = elu(dense(h, layer))
        return dense(h, self.mlp_layers[-1])

    def predict(self, mu, t) -> np.ndarray:
        raw = np.append(np.asarray(mu, dtype=np.float64).ravel(), float(t))
        inp = Tensor(self.norm.normalize_inputs(raw)[None, :])
        out = self.decode(self.latent(inp)).value[0]
        return self.norm.denormalize_states(out)


def dense_ae_build(n_nodes: int, n_channels: int, hidden, latent: int,
                   norm: Normalization, seed: int = 0,
                   identity_init: bool = False) -> DenseAutoencoder:
    store = ParamStore()
    rng = np.random.default_rng(seed)
    return DenseAutoencoder(store, "aenn", n_nodes, n_channels, list(hidden),
                            latent, norm, rng, identity_init=identity_init)


def coarsest_surrogate(hierarchy: Hierarchy, dataset_level0: Dataset,
                       latent: int, seed: int = 0) -> SurrogateLevel:
    """Build the deepest-level surrogate with shared finest-level statistics."""
    level = hierarchy.n_levels - 1
    norm = Normalization.from_dataset(dataset_level0)
    store = ParamStore()
    norm.save_into(store)
    rng = np.random.default_rng(seed)
    lv = hierarchy.levels[level]
    n_inputs = dataset_level0.params.shape[1] + 1
    return SurrogateLevel(store, f"level{level}", lv.scaled_laplacian,
                          lv.mesh.n, latent, norm, level, rng, n_inputs=n_inputs)


def downsampled_dataset(dataset_level0: Dataset, hierarchy: Hierarchy,
                        level: int) -> Dataset:
    states = downsample_states(dataset_level0.states, hierarchy, level)
    return Dataset(level, dataset_level0.params, dataset_level0.times,
                   states, dataset_level0.split)
