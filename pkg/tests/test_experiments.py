import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from deqflow.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from deqflow.errors import InvalidConfig, NonContractive
from deqflow.experiments import (
    ExperimentConfig,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    prepare_data,
    run_experiment,
)
from deqflow.flow import TRACE_COLUMNS

DATA = Path(__file__).resolve().parents[1] / "data"

TINY = {
    "experiment": "convergence",
    "dataset": {"kind": "two_cluster_sphere", "n": 4, "d": 3, "seed": 1},
    "model": {"m": [8, 16], "gamma0": 0.3, "scheme": "subgaussian", "phi_kind": "tanh"},
    "schedule": {"t_end": 20.0, "t_unit": "absolute", "dt": 0.1, "record_every": 2},
    "seeds": [0, 1],
}


def with_changes(base, **sections):
    raw = json.loads(json.dumps(base))
    for key, value in sections.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return raw


def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def tree_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


class TestConfig:
    def test_round_trip(self):
        cfg = config_from_dict(TINY)
        assert cfg.model.m == (8, 16)
        assert config_from_dict(config_to_dict(cfg)) == cfg

    @pytest.mark.parametrize("raw", [
        with_changes(TINY, extra=1),
        with_changes(TINY, model={"width": 3}),
        with_changes(TINY, dataset={"size": 3}),
        with_changes(TINY, schedule={"steps": 3}),
    ])
    def test_unknown_keys(self, raw):
        with pytest.raises(InvalidConfig, match="unknown"):
            config_from_dict(raw)

    @pytest.mark.parametrize("raw", [
        with_changes(TINY, model={"m": []}),
        with_changes(TINY, model={"m": [16, 8]}),
        with_changes(TINY, model={"gamma0": 1.0}),
        with_changes(TINY, model={"scheme": "orthogonal"}),
        with_changes(TINY, schedule={"t_unit": "seconds"}),
        with_changes(TINY, schedule={"dt": 0}),
        with_changes(TINY, seeds=[]),
        with_changes(TINY, seeds=[0.5]),
        with_changes(TINY, delta=2.0),
        with_changes(TINY, experiment="nope"),
        with_changes(TINY, dataset={"kind": "mnist"}),
    ])
    def test_invalid_values(self, raw):
        with pytest.raises(InvalidConfig):
            config_from_dict(raw)

    def test_missing_experiment(self):
        raw = dict(TINY)
        raw.pop("experiment")
        with pytest.raises(InvalidConfig):
            config_from_dict(raw)

    def test_scalar_width(self):
        assert config_from_dict(with_changes(TINY, model={"m": 32})).model.m == (32,)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(InvalidConfig):
            load_config(path)
        with pytest.raises(InvalidConfig):
            load_config(tmp_path / "absent.json")

    def test_relative_idx_paths(self, tmp_path):
        raw = with_changes(TINY, dataset={"kind": "mnist", "images": "a.idx", "labels": "b.idx"})
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.dataset.images == str(tmp_path / "a.idx")

    def test_digest_ignores_output_dir(self):
        cfg = config_from_dict(TINY)
        assert cfg.digest() == cfg.with_overrides(output_dir="elsewhere").digest()
        assert cfg.digest() != cfg.with_overrides(seeds=(5,)).digest()

    def test_digest_ignores_idx_directory(self):
        raw = with_changes(TINY, dataset={"kind": "mnist", "images": "/x/i.idx",
                                          "labels": "/x/l.idx"})
        moved = with_changes(raw, dataset={"images": "/y/i.idx", "labels": "/y/l.idx"})
        assert config_from_dict(raw).digest() == config_from_dict(moved).digest()


class TestPrepareData:
    def test_probe_and_test_points(self):
        cfg = config_from_dict(with_changes(TINY, dataset={"probes": 5, "test_points": 7}))
        data = prepare_data(cfg)
        assert data.probes.shape == (5, 3)
        assert data.test.n == 7
        # probes are not copies of training points
        assert np.abs(data.probes @ data.train.X.T).max() < 1 - 1e-9

    def test_mnist(self):
        cfg = ExperimentConfig(
            experiment="mnist_width_sweep",
            dataset=dict_to_dataset(kind="mnist", n=20, test_count=10,
                                    images=str(DATA / "mnist-subset-images.idx3-ubyte.gz"),
                                    labels=str(DATA / "mnist-subset-labels.idx1-ubyte.gz")))
        data = prepare_data(cfg)
        assert data.train.n == 20 and data.test.n == 10


def dict_to_dataset(**kw):
    from deqflow.experiments import DatasetConfig
    return DatasetConfig(**kw)


@pytest.fixture(scope="module")
def convergence_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("conv")
    return run_experiment(config_from_dict(TINY), out_dir=out)


class TestRunExperiment:
    def test_file_names(self, convergence_run):
        r = convergence_run
        names = {p.name for p in r.out_dir.iterdir()}
        for m in (8, 16):
            for s in (0, 1):
                assert f"{r.prefix}-m{m}-s{s}-trace.csv" in names
        assert f"{r.prefix}-summary.csv" in names
        assert f"{r.prefix}-manifest.json" in names
        assert f"{r.prefix}-plot.svg" in names

    def test_trace_header(self, convergence_run):
        r = convergence_run
        with open(r.out_dir / f"{r.prefix}-m8-s0-trace.csv", newline="") as fh:
            assert tuple(next(csv.reader(fh))) == TRACE_COLUMNS

    def test_manifest_hashes(self, convergence_run):
        r = convergence_run
        manifest = json.loads((r.out_dir / f"{r.prefix}-manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["config_hash"] == r.config.digest()
        for entry in manifest["files"]:
            digest = hashlib.sha256((r.out_dir / entry["name"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_summary_matches_cells(self, convergence_run):
        r = convergence_run
        assert r.column("final_loss").shape == (2, 2)
        assert all(row["envelope_ok"] for row in r.rows())
        with open(r.out_dir / f"{r.prefix}-summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert float(rows[0]["final_loss"]) == r.rows()[0]["final_loss"]

    def test_rerun_is_byte_identical(self, convergence_run, tmp_path):
        again = run_experiment(convergence_run.config, out_dir=tmp_path)
        assert tree_bytes(tmp_path) == tree_bytes(convergence_run.out_dir)

    def test_process_pool_matches_serial(self, convergence_run, tmp_path):
        run_experiment(convergence_run.config, out_dir=tmp_path, threads=2)
        assert tree_bytes(tmp_path) == tree_bytes(convergence_run.out_dir)

    def test_failure_writes_manifest(self, tmp_path):
        raw = with_changes(TINY, model={"m": [64], "gamma0": 0.9, "scheme": "half_normal_A"},
                           seeds=[0])
        with pytest.raises(NonContractive):
            run_experiment(config_from_dict(raw), out_dir=tmp_path)
        manifest = json.loads(next(tmp_path.glob("*-manifest.json")).read_text())
        assert manifest["status"] == "failed"
        assert "NonContractive" in manifest["error"]


class TestExperimentKinds:
    def test_coupling(self, tmp_path):
        raw = with_changes(TINY, experiment="coupling_sweep", dataset={"probes": 3})
        r = run_experiment(config_from_dict(raw), out_dir=tmp_path, plots=False)
        assert np.all(np.isfinite(r.column("probe_gap")))
        assert (tmp_path / f"{r.prefix}-m8-s0-gaps.csv").exists()

    def test_genbound(self, tmp_path):
        raw = with_changes(TINY, experiment="genbound", dataset={"test_points": 10})
        r = run_experiment(config_from_dict(raw), out_dir=tmp_path)
        bound = json.loads((tmp_path / f"{r.prefix}-m8-s0-bound.json").read_text())
        assert bound["test_error"] == r.column("test_error")[0, 0]
        assert np.all(r.column("leading_term") > 0)

    def test_ntk_limit(self, tmp_path):
        raw = with_changes(TINY, experiment="ntk_limit", mc_width=16, mc_reps=4)
        r = run_experiment(config_from_dict(raw), out_dir=tmp_path)
        assert (tmp_path / f"{r.prefix}-limit-bound.json").exists()
        assert np.all(r.column("h_dist_fro") > 0)

    def test_mnist(self, tmp_path):
        raw = {
            "experiment": "mnist_width_sweep",
            "dataset": {"kind": "mnist", "n": 10, "test_count": 6,
                        "images": str(DATA / "mnist-subset-images.idx3-ubyte.gz"),
                        "labels": str(DATA / "mnist-subset-labels.idx1-ubyte.gz")},
            "model": {"m": [16], "gamma0": 0.3},
            "schedule": {"t_end": 5.0, "t_unit": "absolute", "dt": 0.5, "stop_loss": 1e-12},
            "seeds": [0],
        }
        r = run_experiment(config_from_dict(raw), out_dir=tmp_path)
        assert math.isinf(r.column("time_to_threshold")[0, 0])
        with open(tmp_path / f"{r.prefix}-m16-s0-checkpoints.csv", newline="") as fh:
            assert next(csv.reader(fh)) == ["t", "loss", "test_loss", "guard"]


class TestCli:
    def test_success(self, tmp_path, capsys):
        path = write_config(tmp_path, with_changes(TINY, model={"m": [8]}, seeds=[0]))
        code = main(["convergence", "--config", str(path), "--out", str(tmp_path / "o"),
                     "--seeds", "2,3", "--no-plots"])
        assert code == EXIT_OK
        assert "manifest" in capsys.readouterr().out
        assert len(list((tmp_path / "o").glob("*-trace.csv"))) == 2

    def test_unknown_key_exit_code(self, tmp_path):
        path = write_config(tmp_path, with_changes(TINY, bogus=True))
        assert main(["convergence", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_empty_widths_exit_code(self, tmp_path):
        path = write_config(tmp_path, with_changes(TINY, model={"m": []}))
        assert main(["convergence", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_experiment_mismatch(self, tmp_path):
        path = write_config(tmp_path, TINY)
        assert main(["genbound", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_idx_file(self, tmp_path):
        raw = with_changes(TINY, experiment="mnist_width_sweep",
                           dataset={"kind": "mnist", "images": "nope.idx", "labels": "nope2.idx"})
        path = write_config(tmp_path, raw)
        code = main(["mnist_width_sweep", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_numeric_failure_exit_code(self, tmp_path):
        raw = with_changes(TINY, model={"m": [64], "gamma0": 0.9, "scheme": "half_normal_A"},
                           seeds=[0])
        path = write_config(tmp_path, raw)
        assert main(["convergence", "--config", str(path), "--out", str(tmp_path)]) == EXIT_NUMERIC

    def test_bad_seed_list(self, tmp_path):
        path = write_config(tmp_path, TINY)
        with pytest.raises(SystemExit) as info:
            main(["convergence", "--config", str(path), "--seeds", "a,b"])
        assert info.value.code == 2
