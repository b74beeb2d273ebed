"""Frozen-coarse transfer learning: residual encoder/decoder, adaptive
upsampling, refined MLP, and lifting predictions back to full resolution.

A refined surrogate starts exactly at the coarse model's performance: the
residual networks' final layers are zero-initialized, the adaptive
upsampler is warm-started at the static barycentric lift, and the refined
MLP passes the coarse latent through an identity skip.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, concat, elu, matmul, take_nodes
from .coarsen import Hierarchy
from .datagen import Dataset
from .nn import CHEB_ORDER, GCN_CHANNELS, MLP_HIDDEN, ChebConvLayer, DenseLayer, cheb_conv, dense
from .surrogate import SurrogateLevel, TrainConfig, TrainHistory, evaluate_loss, train


class AdaptiveUpsampler:
    """Trainable affine lift over flattened states, warm-started at the
    static upsampling matrix (applied channelwise, zero bias)."""

    def __init__(self, store, prefix, static_up: sp.spmatrix, n_channels=3,
                 sparse_theta=False):
        n_fine, n_coarse = static_up.shape
        self.n_fine, self.n_coarse = n_fine, n_coarse
        self.n_channels = n_channels
        # x_flat @ W with node-major channel-innermost flattening: W = kron(U^T, I_c)
        init = sp.kron(static_up.T, sp.eye(n_channels)).toarray()
        self.mask = (init != 0.0).astype(np.float64) if sparse_theta else None
        self.weights = store.add(f"{prefix}/weights", init)
        self.bias = store.add(f"{prefix}/bias", np.zeros(n_fine * n_channels))

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.reshape(-1, self.n_coarse * self.n_channels)
        w = self.weights if self.mask is None else self.weights * self.mask
        out = matmul(flat, w) + self.bias
        return out.reshape(-1, self.n_fine, self.n_channels)


class RefinedSurrogate:
    """One transfer-learning step: frozen coarse surrogate + residual nets
    one level finer. Usable as the coarse model of the next refinement."""

    def __init__(self, store, prefix, coarse, hierarchy: Hierarchy, rng,
                 order: int = CHEB_ORDER, sparse_theta: bool = False):
        level = coarse.level - 1
        if level < 0:
            raise ValueError("coarse model is already at the finest level")
        self.store = store
        self.prefix = prefix
        self.coarse = coarse
        self.level = level
        self.norm = coarse.norm
        self.latent_dim = coarse.latent_dim
        lv = hierarchy.levels[level]
        self.n_nodes = lv.mesh.n
        self.selection = hierarchy.selections[level]       # level -> level+1
        self.static_up = hierarchy.upsamplers[level]       # level+1 -> level

        ch = GCN_CHANNELS
        lap = lv.scaled_laplacian
        self.res_enc_layers = [
            ChebConvLayer.create(store, f"{prefix}/res_enc/gcn{i}", lap,
                                 ch[i], ch[i + 1], rng, order)
            for i in range(len(ch) - 1)]
        self.res_enc_dense = DenseLayer.create(
            store, f"{prefix}/res_enc/dense", self.n_nodes * ch[-1],
            self.latent_dim, rng, zero_init=True)
        self.res_dec_dense = DenseLayer.create(
            store, f"{prefix}/res_dec/dense", self.latent_dim,
            self.n_nodes * ch[-1], rng)
        rev = ch[::-1]
        self.res_dec_layers = [
            ChebConvLayer.create(store, f"{prefix}/res_dec/gcn{i}", lap,
                                 rev[i], rev[i + 1], rng, order,
                                 zero_init=(i == len(rev) - 2))
            for i in range(len(rev) - 1)]
        self.upsampler = AdaptiveUpsampler(store, f"{prefix}/theta",
                                           self.static_up, ch[0], sparse_theta)
        n_inputs = len(self.norm.input_lo)
        dims = [n_inputs + self.latent_dim, *MLP_HIDDEN, self.latent_dim]
        self.res_mlp_layers = [
            DenseLayer.create(store, f"{prefix}/res_mlp/fc{i}", dims[i],
                              dims[i + 1], rng,
                              zero_init=(i == len(dims) - 2))
            for i in range(len(dims) - 1)]
        self.mlp_skip = DenseLayer.create(
            store, f"{prefix}/res_mlp/skip", self.latent_dim, self.latent_dim,
            rng, init=np.eye(self.latent_dim))
        # per-batch constants for the frozen coarse chain (set by train/eval)
        self.frozen_batch = None

    def param_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix + "/")]

    def coarse_is_frozen(self) -> bool:
        """True when every parameter below this level is frozen."""
        m = self.coarse
        while m is not None:
            if any(not self.store.is_frozen(n) for n in m.param_names()):
                return False
            m = getattr(m, "coarse", None)
        return True

    def precompute_frozen(self, inputs: np.ndarray, states: np.ndarray,
                          chunk: int = 64) -> dict:
        """Evaluate the frozen coarse chain once per sample.

        During training every parameter of ``coarse`` is frozen, so its
        latent and encoder outputs are constants of the data and need not be
        recomputed (or differentiated) per batch.
        """
        lat, enc = [], []
        for start in range(0, inputs.shape[0], chunk):
            inp = Tensor(inputs[start:start + chunk])
            st = Tensor(states[start:start + chunk])
            lat.append(self.coarse.latent(inp).value)
            enc.append(self.coarse.encode(
                take_nodes(st, self.selection.kept)).value)
        return {"latent": np.concatenate(lat), "encode": np.concatenate(enc)}

    def encode(self, x: Tensor) -> Tensor:
        if self.frozen_batch is not None:
            z_coarse = Tensor(self.frozen_batch["encode"])
        else:
            z_coarse = self.coarse.encode(take_nodes(x, self.selection.kept))
        h = x
        for layer in self.res_enc_layers:
            h = elu(cheb_conv(h, layer))
        flat = h.reshape(-1, self.n_nodes * GCN_CHANNELS[-1])
        return z_coarse + dense(flat, self.res_enc_dense)

    def decode(self, z: Tensor) -> Tensor:
        lifted = self.upsampler(self.coarse.decode(z))
        h = elu(dense(z, self.res_dec_dense))
        h = h.reshape(-1, self.n_nodes, GCN_CHANNELS[-1])
        for i, layer in enumerate(self.res_dec_layers):
            h = cheb_conv(h, layer)
            if i < len(self.res_dec_layers) - 1:
                h = elu(h)
        return lifted + h

    def latent(self, inputs: Tensor) -> Tensor:
        if self.frozen_batch is not None:
            z_coarse = Tensor(self.frozen_batch["latent"])
        else:
            z_coarse = self.coarse.latent(inputs)
        h = concat([inputs, z_coarse], axis=-1)
        for layer in self.res_mlp_layers[:-1]:
            h = elu(dense(h, layer))
        return dense(h, self.res_mlp_layers[-1]) + dense(z_coarse, self.mlp_skip)

    def predict(self, mu, t) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64).ravel()
        raw = np.append(mu, float(t))
        inp = Tensor(self.norm.normalize_inputs(raw)[None, :])
        out = self.decode(self.latent(inp)).value[0]
        return self.norm.denormalize_states(out)


def lifted_coarse_loss(coarse, refined: RefinedSurrogate, dataset_fine: Dataset,
                       config: TrainConfig, chunk: int = 256):
    """Loss of the coarse model's statically lifted predictions on fine data."""
    from .surrogate import dataset_arrays

    inputs, states = dataset_arrays(dataset_fine, coarse.norm)
    up = refined.static_up
    sse_approx = sse_rec = 0.0
    count = 0
    sel = refined.selection
    for start in range(0, inputs.shape[0], chunk):
        inp = Tensor(inputs[start:start + chunk])
        st = states[start:start + chunk]
        coarse_states = Tensor(np.take(st, sel.kept, axis=-2))

        def lift(batch):
            b, n, c = batch.shape
            flat = batch.transpose(1, 0, 2).reshape(n, b * c)
            out = up @ flat
            return out.reshape(up.shape[0], b, c).transpose(1, 0, 2)

        approx_res = st - lift(coarse.decode(coarse.latent(inp)).value)
        rec_res = st - lift(coarse.decode(coarse.encode(coarse_states)).value)
        sse_approx += float(np.sum(approx_res ** 2))
        sse_rec += float(np.sum(rec_res ** 2))
        count += approx_res.size
    approx = sse_approx / count
    rec = sse_rec / count
    return config.gamma_approx * approx + config.gamma_rec * rec, approx, rec


def train_next_level(coarse, dataset_fine: Dataset, hierarchy: Hierarchy,
                     config: TrainConfig, sparse_theta: bool = False
                     ) -> tuple[RefinedSurrogate, TrainHistory]:
    """Freeze the coarse surrogate, warm-start the residual networks, and
    train one level finer. The returned model serves as the next coarse one."""
    level = coarse.level - 1
    if dataset_fine.n_nodes != hierarchy.levels[level].mesh.n:
        raise ValueError(
            f"dataset has {dataset_fine.n_nodes} nodes but level {level} "
            f"has {hierarchy.levels[level].mesh.n}")
    store = coarse.store
    store.freeze(coarse.param_names() if hasattr(coarse, "param_names") else None)
    rng = np.random.default_rng(config.seed)
    refined = RefinedSurrogate(store, f"level{level}", coarse, hierarchy, rng,
                               sparse_theta=sparse_theta)
    history = train(refined, dataset_fine, config)
    return refined, history


def lift_to_full(states: np.ndarray, hierarchy: Hierarchy, level: int) -> np.ndarray:
    """Apply the precomposed static lift U_l^0 along the node axis."""
    if not 0 <= level < hierarchy.n_levels:
        raise ValueError(f"level {level} out of range")
    up = hierarchy.lift_matrix(level)
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        return up @ states
    lead = states.shape[:-2]
    n, c = states.shape[-2:]
    flat = states.reshape(-1, n, c).transpose(1, 0, 2).reshape(n, -1)
    out = up @ flat
    return out.reshape(up.shape[0], -1, c).transpose(1, 0, 2).reshape(*lead, up.shape[0], c)


def level_contribution(refined, coarse, mu, t, hierarchy: Hierarchy) -> np.ndarray:
    """Level-0 delta between consecutive surrogates' lifted predictions."""
    fine_pred = lift_to_full(refined.predict(mu, t), hierarchy, refined.level)
    coarse_pred = lift_to_full(coarse.predict(mu, t), hierarchy, coarse.level)
    if fine_pred.shape != coarse_pred.shape:
        raise ValueError("surrogates belong to different hierarchies")
    return fine_pred - coarse_pred


def rebuild_chain(store_loaded, hierarchy: Hierarchy, n_inputs: int):
    """Reconstruct the surrogate chain from a loaded parameter store.

    Parameter names encode the structure: ``level{k}/...`` for each level in
    the chain plus ``norm/...`` statistics. Returns models ordered coarsest
    to finest.
    """
    from .autodiff import ParamStore
    from .surrogate import Normalization, SurrogateLevel

    norm = Normalization.load_from(store_loaded)
    levels = sorted({int(name.split("/", 1)[0][len("level"):])
                     for name in store_loaded.names()
                     if name.startswith("level")})
    if not levels:
        raise ValueError("checkpoint contains no surrogate levels")
    if levels != list(range(levels[0], levels[-1] + 1)):
        raise ValueError(f"checkpoint levels are not contiguous: {levels}")
    coarsest_level = levels[-1]
    if coarsest_level >= hierarchy.n_levels:
        raise ValueError("checkpoint is deeper than the hierarchy")
    latent = store_loaded[f"level{coarsest_level}/enc/dense/weights"].value.shape[1]
    store = ParamStore()
    norm.save_into(store)
    rng = np.random.default_rng(0)
    lv = hierarchy.levels[coarsest_level]
    model = SurrogateLevel(store, f"level{coarsest_level}", lv.scaled_laplacian,
                           lv.mesh.n, latent, norm, coarsest_level, rng,
                           n_inputs=n_inputs)
    models = [model]
    for level in range(coarsest_level - 1, levels[0] - 1, -1):
        model = RefinedSurrogate(store, f"level{level}", model, hierarchy, rng)
        models.append(model)
    for name in store.names():
        if name.startswith("norm/"):
            continue
        if name not in store_loaded:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if store[name].value.shape != store_loaded[name].value.shape:
            raise ValueError(f"checkpoint parameter {name!r} has wrong shape")
        store[name].value[...] = store_loaded[name].value
    return models


def surrogate_chain(coarsest, dataset_level0: Dataset, hierarchy: Hierarchy,
                    config: TrainConfig, sparse_theta: bool = False):
    """Refine level by level down to level 0; returns (models, histories)
    ordered from coarsest to finest."""
    from .surrogate import downsampled_dataset

    models = [coarsest]
    histories = []
    current = coarsest
    while current.level > 0:
        data = downsampled_dataset(dataset_level0, hierarchy, current.level - 1)
        current, history = train_next_level(current, data, hierarchy, config,
                                            sparse_theta=sparse_theta)
        models.append(current)
        histories.append(history)
    return models, histories
