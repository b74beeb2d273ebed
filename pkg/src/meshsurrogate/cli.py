"""Command-line orchestration of the surrogate-modeling pipeline.

Subcommands: gen-data, coarsen, train, refine, predict, evaluate, spectrum,
inspect. Report-producing commands write RFC-4180 CSV plus a rendered PNG
figure next to it. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

import numpy as np

from . import datagen
from .autodiff import ParamStore
from .coarsen import SimplifyError, build_hierarchy, load_hierarchy, save_hierarchy
from .datagen import Dataset, read_dataset, write_dataset
from .mesh import MeshError, load_mesh, write_mesh
from .metrics import node_error, singular_spectrum
from .refine import lift_to_full, rebuild_chain, train_next_level
from .surrogate import (TrainConfig, TrainError, coarsest_surrogate,
                        downsampled_dataset, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshsurrogate",
        description="Multi-resolution graph-convolutional surrogate modeling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic plate dataset")
    p.add_argument("--out", required=True, help="output MHSD dataset path")
    p.add_argument("--mesh", help="also write the plate mesh as OBJ")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sims", type=int, default=80)
    p.add_argument("--times", type=int, default=51)

    p = sub.add_parser("coarsen", help="build a mesh hierarchy")
    p.add_argument("--mesh", required=True)
    p.add_argument("--levels", required=True,
                   help="comma-separated decreasing node counts, e.g. 150,40")
    p.add_argument("--pair-distance", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output hierarchy directory")

    p = sub.add_parser("train", help="train the coarsest-level surrogate")
    p.add_argument("--dataset", required=True, help="level-0 MHSD dataset")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output MHW1 checkpoint")

    p = sub.add_parser("refine", help="train the next finer level")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="level-0 MHSD dataset")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="emit a predicted trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--dataset", required=True,
                   help="MHSD dataset providing the time grid")
    p.add_argument("--mu", required=True,
                   help="comma-separated scenario parameters")
    p.add_argument("--level", type=int, help="chain level to predict at")
    p.add_argument("--lift", action="store_true",
                   help="lift the trajectory to full resolution")
    p.add_argument("--obj-frames", help="also write one OBJ per time step here")
    p.add_argument("--out", required=True, help="output MHSD trajectory")

    p = sub.add_parser("evaluate", help="error report between trajectories")
    p.add_argument("--reference", required=True, help="reference MHSD file")
    p.add_argument("--approx", help="approximation MHSD file")
    p.add_argument("--checkpoint", help="evaluate this model instead of a file")
    p.add_argument("--hierarchy")
    p.add_argument("--level", type=int)
    p.add_argument("--lift", action="store_true")
    p.add_argument("--out", required=True, help="output CSV (PNG next to it)")

    p = sub.add_parser("spectrum", help="singular-value spectrum report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--keep", type=int, default=50)
    p.add_argument("--out", required=True, help="output CSV (PNG next to it)")

    p = sub.add_parser("inspect", help="print container headers and sizes")
    p.add_argument("path")
    return parser


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _load_chain(args, hierarchy, dataset):
    store = ParamStore.load(args.checkpoint)
    return rebuild_chain(store, hierarchy, dataset.params.shape[1] + 1)


def _cmd_gen_data(args) -> int:
    dataset, mesh = datagen.make_benchmark(seed=args.seed, n_sims=args.sims,
                                           n_times=args.times)
    write_dataset(dataset, args.out)
    if args.mesh:
        write_mesh(mesh, args.mesh)
    print(f"wrote {dataset.n_sims} simulations "
          f"({(dataset.split == 0).sum()} train / {(dataset.split == 1).sum()} test) "
          f"to {args.out}")
    return EXIT_OK


def _cmd_coarsen(args) -> int:
    mesh = load_mesh(args.mesh)
    sizes = [int(s) for s in args.levels.split(",") if s]
    hierarchy = build_hierarchy(mesh, sizes, pair_distance=args.pair_distance)
    save_hierarchy(hierarchy, args.out)
    print(f"hierarchy levels: {[lv.mesh.n for lv in hierarchy.levels]} -> {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = read_dataset(args.dataset)
    hierarchy = load_hierarchy(args.hierarchy)
    config = _load_config(args)
    config.checkpoint_path = args.out
    latent = dataset.params.shape[1] + 1
    model = coarsest_surrogate(hierarchy, dataset, latent, seed=config.seed)
    level_data = downsampled_dataset(dataset, hierarchy, model.level)
    history = train(model, level_data, config)
    _write_history(history, args.out)
    print(f"trained level {model.level} surrogate: "
          f"best epoch {history.best_epoch}, "
          f"loss {history.total[history.best_epoch]:.6g} -> {args.out}")
    return EXIT_OK


def _cmd_refine(args) -> int:
    dataset = read_dataset(args.dataset)
    hierarchy = load_hierarchy(args.hierarchy)
    config = _load_config(args)
    models = _load_chain(args, hierarchy, dataset)
    coarse = models[-1]
    if coarse.level == 0:
        raise ValueError("chain already reaches level 0; nothing to refine")
    level_data = downsampled_dataset(dataset, hierarchy, coarse.level - 1)
    refined, history = train_next_level(coarse, level_data, hierarchy, config)
    refined.store.save(args.out)
    _write_history(history, args.out)
    print(f"refined to level {refined.level}: best epoch {history.best_epoch}, "
          f"loss {history.total[history.best_epoch]:.6g} -> {args.out}")
    return EXIT_OK


def _write_history(history, checkpoint_path) -> None:
    base, _ = os.path.splitext(checkpoint_path)
    history.write_csv(base + "_history.csv")
    from .figures import training_history_figure

    training_history_figure(history, base + "_history.png")


def _select_model(models, level):
    if level is None:
        return models[-1]
    for m in models:
        if m.level == level:
            return m
    raise ValueError(f"no surrogate at level {level} in this checkpoint "
                     f"(available: {[m.level for m in models]})")


def _cmd_predict(args) -> int:
    dataset = read_dataset(args.dataset)
    hierarchy = load_hierarchy(args.hierarchy)
    models = _load_chain(args, hierarchy, dataset)
    model = _select_model(models, args.level)
    mu = np.array([float(x) for x in args.mu.split(",")])
    traj = np.stack([model.predict(mu, t) for t in dataset.times])
    level = model.level
    if args.lift and level > 0:
        traj = lift_to_full(traj, hierarchy, level)
        level = 0
    out = Dataset(level, mu[None, :], dataset.times, traj[None])
    write_dataset(out, args.out)
    if args.obj_frames:
        os.makedirs(args.obj_frames, exist_ok=True)
        from .mesh import Mesh

        base_mesh = hierarchy.levels[level].mesh
        for k in range(dataset.times.size):
            frame = Mesh(base_mesh.nodes + traj[k], base_mesh.faces)
            write_mesh(frame, os.path.join(args.obj_frames, f"frame_{k:04d}.obj"))
    print(f"wrote level-{level} trajectory ({traj.shape[0]} steps) to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    reference = read_dataset(args.reference)
    if args.checkpoint:
        if not args.hierarchy:
            raise ValueError("--checkpoint evaluation requires --hierarchy")
        hierarchy = load_hierarchy(args.hierarchy)
        models = _load_chain(args, hierarchy, reference)
        model = _select_model(models, args.level)
        test = reference.test() if (reference.split == 1).any() else reference
        preds = np.stack([
            np.stack([model.predict(test.params[s], t) for t in test.times])
            for s in range(test.n_sims)])
        if args.lift and model.level > 0:
            preds = lift_to_full(preds, hierarchy, model.level)
            ref_states = test.states
        else:
            from .coarsen import downsample_states

            ref_states = downsample_states(test.states, hierarchy, model.level) \
                if test.n_nodes != model.n_nodes else test.states
        report = node_error(ref_states, preds, level=model.level,
                            model=f"level{model.level}")
        times = test.times
    else:
        if not args.approx:
            raise ValueError("evaluate needs either --approx or --checkpoint")
        approx = read_dataset(args.approx)
        report = node_error(reference.states, approx.states, level=reference.level)
        times = reference.times
    report.write_csv(args.out)
    from .figures import error_over_time_figure

    error_over_time_figure(report, times, os.path.splitext(args.out)[0] + ".png")
    print(f"mean node error: {report.grand_mean:.6g} -> {args.out}")
    return EXIT_OK


def _cmd_spectrum(args) -> int:
    dataset = read_dataset(args.dataset)
    subset = dataset.train() if (dataset.split == 0).any() else dataset
    flat = subset.states.reshape(subset.n_sims * subset.times.size, -1)
    report = singular_spectrum(flat, n_keep=args.keep)
    report.write_csv(args.out)
    from .figures import spectrum_figure

    spectrum_figure(report, os.path.splitext(args.out)[0] + ".png")
    print(f"wrote {report.n_kept} normalized singular values to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"MHW1":
        store = ParamStore.load(args.path)
        counted = sum(store[n].value.size for n in store.names()
                      if not n.startswith("norm/"))
        print(f"MHW1 checkpoint: {args.path}")
        prefixes = sorted({n.split("/", 1)[0] for n in store.names()})
        for prefix in prefixes:
            size = sum(store[n].value.size for n in store.names()
                       if n.split("/", 1)[0] == prefix)
            print(f"  {prefix}: {size} values")
        print(f"parameters: {counted}")
    elif magic == b"MHSD":
        with open(args.path, "rb") as fh:
            header = fh.read(32)
        version, level, n_s, eta, n, nc = struct.unpack_from("<6I", header, 4)
        (ell,) = struct.unpack_from("<I", header, 28)
        print(f"MHSD dataset: {args.path}")
        print(f"  version {version}, level {level}, simulations {n_s}, "
              f"times {eta}, nodes {n}, channels {nc}, parameters {ell}")
    else:
        raise ValueError(f"{args.path}: unknown container magic {magic!r}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "coarsen": _cmd_coarsen,
    "train": _cmd_train,
    "refine": _cmd_refine,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "spectrum": _cmd_spectrum,
    "inspect": _cmd_inspect,
}


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, MeshError, SimplifyError, TrainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
