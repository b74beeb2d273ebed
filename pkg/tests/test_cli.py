import json

import numpy as np
import pytest

from meshsurrogate.autodiff import ParamStore
from meshsurrogate.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, cli_main
from meshsurrogate.datagen import read_dataset
from meshsurrogate.mesh import load_mesh
from meshsurrogate.nn import DenseLayer


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full CLI run: gen-data -> coarsen -> train -> refine -> predict ->
    evaluate -> spectrum, all into one shared directory."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "plate.mhsd"
    mesh = root / "plate.obj"
    hier = root / "hier"
    ckpt2 = root / "level2.mhw"
    ckpt1 = root / "level1.mhw"
    config = root / "config.json"
    config.write_text(json.dumps({"epochs": 2, "batch_size": 8, "seed": 0}))

    steps = [
        ["gen-data", "--out", str(data), "--mesh", str(mesh),
         "--sims", "4", "--times", "3"],
        ["coarsen", "--mesh", str(mesh), "--levels", "150,40",
         "--out", str(hier)],
        ["train", "--dataset", str(data), "--hierarchy", str(hier),
         "--config", str(config), "--out", str(ckpt2)],
        ["refine", "--checkpoint", str(ckpt2), "--dataset", str(data),
         "--hierarchy", str(hier), "--config", str(config),
         "--out", str(ckpt1)],
        ["predict", "--checkpoint", str(ckpt1), "--hierarchy", str(hier),
         "--dataset", str(data), "--mu", "10,0.0,300", "--lift",
         "--obj-frames", str(root / "frames"),
         "--out", str(root / "pred.mhsd")],
        ["evaluate", "--reference", str(data), "--checkpoint", str(ckpt1),
         "--hierarchy", str(hier), "--lift", "--out", str(root / "eval.csv")],
        ["spectrum", "--dataset", str(data), "--keep", "5",
         "--out", str(root / "spec.csv")],
    ]
    for argv in steps:
        assert cli_main(argv) == EXIT_OK, f"step failed: {argv[0]}"
    return root


class TestPipeline:
    def test_gen_data_outputs(self, pipeline):
        data = read_dataset(pipeline / "plate.mhsd")
        assert data.states.shape == (4, 3, 600, 3)
        assert int((data.split == 1).sum()) == 1
        assert load_mesh(pipeline / "plate.obj").n == 600

    def test_coarsen_outputs(self, pipeline):
        hier = pipeline / "hier"
        assert (hier / "hierarchy.json").exists()
        assert (hier / "D_0_1.mtx").exists()
        assert (hier / "U_2_1.mtx").exists()

    def test_train_writes_history_report(self, pipeline):
        assert (pipeline / "level2.mhw").exists()
        csv = (pipeline / "level2_history.csv").read_bytes()
        assert csv.startswith(b"epoch,total,approx,rec\r\n")
        assert len(csv.split(b"\r\n")) == 4  # header + 2 epochs + trailing
        assert (pipeline / "level2_history.png").stat().st_size > 0

    def test_refine_extends_chain(self, pipeline):
        store = ParamStore.load(pipeline / "level1.mhw")
        prefixes = {n.split("/", 1)[0] for n in store.names()}
        assert {"level1", "level2", "norm"} <= prefixes
        assert (pipeline / "level1_history.png").stat().st_size > 0

    def test_predict_outputs(self, pipeline):
        pred = read_dataset(pipeline / "pred.mhsd")
        assert pred.level == 0
        assert pred.states.shape == (1, 3, 600, 3)
        assert np.array_equal(pred.params, [[10.0, 0.0, 300.0]])
        frames = sorted((pipeline / "frames").iterdir())
        assert [f.name for f in frames] == ["frame_0000.obj", "frame_0001.obj",
                                            "frame_0002.obj"]
        assert load_mesh(frames[0]).n == 600

    def test_evaluate_outputs(self, pipeline):
        lines = (pipeline / "eval.csv").read_bytes().split(b"\r\n")
        assert lines[0] == b"simulation,time_index,error"
        assert lines[-2].startswith(b"mean,,")
        assert float(lines[-2].rsplit(b",", 1)[1]) >= 0.0
        assert (pipeline / "eval.png").stat().st_size > 0

    def test_spectrum_outputs(self, pipeline):
        lines = (pipeline / "spec.csv").read_bytes().split(b"\r\n")
        assert lines[0] == b"index,normalized_singular_value"
        assert lines[1] == b"1,1.0"
        assert len(lines) == 7  # header + 5 values + trailing
        assert (pipeline / "spec.png").stat().st_size > 0

    def test_inspect_dataset(self, pipeline, capsys):
        assert cli_main(["inspect", str(pipeline / "plate.mhsd")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "simulations 4" in out
        assert "nodes 600" in out

    def test_evaluate_identical_files_zero_error(self, pipeline, tmp_path,
                                                 capsys):
        data = str(pipeline / "plate.mhsd")
        out = tmp_path / "self.csv"
        assert cli_main(["evaluate", "--reference", data, "--approx", data,
                         "--out", str(out)]) == EXIT_OK
        mean_line = out.read_bytes().split(b"\r\n")[-2]
        assert float(mean_line.rsplit(b",", 1)[1]) == 0.0


class TestInspectCheckpoint:
    def test_mlp_parameter_count(self, tmp_path, capsys):
        store = ParamStore()
        rng = np.random.default_rng(0)
        dims = [(4, 64), (64, 64), (64, 64), (64, 4)]
        for i, (d_in, d_out) in enumerate(dims):
            DenseLayer.create(store, f"mlp/fc{i}", d_in, d_out, rng)
        path = tmp_path / "mlp.mhw"
        store.save(path)
        assert cli_main(["inspect", str(path)]) == EXIT_OK
        assert "parameters: 8900" in capsys.readouterr().out


class TestErrorHandling:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli_main(["frobnicate"]) == EXIT_USAGE

    def test_no_arguments_is_usage_error(self, capsys):
        assert cli_main([]) == EXIT_USAGE

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        code = cli_main(["inspect", str(tmp_path / "nope.mhw")])
        assert code == EXIT_DATA
        assert "error:" in capsys.readouterr().err

    def test_unknown_magic_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"JUNKJUNK")
        assert cli_main(["inspect", str(bad)]) == EXIT_DATA

    def test_nondecreasing_levels_is_data_error(self, tmp_path, capsys):
        from meshsurrogate.mesh import write_mesh
        from meshsurrogate.primitives import plate_grid

        mesh_path = tmp_path / "m.obj"
        write_mesh(plate_grid(5, 4), mesh_path)
        code = cli_main(["coarsen", "--mesh", str(mesh_path),
                         "--levels", "10,15", "--out", str(tmp_path / "h")])
        assert code == EXIT_DATA

    def test_evaluate_without_comparand(self, pipeline, tmp_path, capsys):
        code = cli_main(["evaluate", "--reference",
                         str(pipeline / "plate.mhsd"),
                         "--out", str(tmp_path / "e.csv")])
        assert code == EXIT_DATA
