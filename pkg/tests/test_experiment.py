import csv
import math
import sys

import numpy as np
import pytest

from flsnn import cli
from flsnn.errors import ConfigurationError
from flsnn.experiment import (
    AVERAGED_DEVICE,
    METRICS_COLUMNS,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    RunConfig,
    generate_data,
    parse_config,
    parse_config_text,
    read_metrics,
    run_experiment,
    sweep,
)
from flsnn.data import load_raster_file

SMALL = """\
seed = 7
data = synthetic
num_input = 6
num_output = 2
num_basis = 3
synaptic_duration = 4
num_examples = 8
example_len = 5
train_per_device = 6
test_per_class = 4
eval_samples = 2
eval_every = 2
tau = 2
"""


def small_cfg(**changes):
    return parse_config_text(SMALL).replace(**changes)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config_text("seed = 1\ndata = synthetic\n")
        assert cfg.learning_rate == 0.05 and cfg.trace_decay == 0.2
        assert cfg.delta_s == 5 and cfg.num_basis == 8
        assert cfg.total_rounds * cfg.delta_s == cfg.stream_len

    def test_comments_and_spacing(self):
        cfg = parse_config_text("# header\nseed=3   # inline\n\n  data =synthetic\ntau = inf\n")
        assert cfg.seed == 3 and cfg.tau is None

    def test_rate_fraction(self):
        cfg = parse_config_text("seed = 1\ndata = synthetic\ntau = 8\nrate = 1/4\n")
        assert cfg.federation_config().num_exchanged(cfg.num_basis) == 2

    def test_tau_zero(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("seed = 1\ndata = synthetic\ntau = 0\n")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match="foo"):
            parse_config_text("seed = 1\ndata = synthetic\nfoo = 3\n")

    @pytest.mark.parametrize("text", ["data = synthetic\n", "seed = 1\n"])
    def test_missing_required(self, text):
        with pytest.raises(ConfigurationError, match="missing"):
            parse_config_text(text)

    def test_stream_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("seed = 1\ndata = synthetic\nexample_len = 7\nnum_examples = 3\n")
        with pytest.raises(ConfigurationError):
            parse_config_text("seed = 1\ndata = synthetic\nrounds = 10\n")

    @pytest.mark.parametrize("line", ["seed = x", "rate = 1/0", "baseline = maybe", "no equals sign"])
    def test_unparseable(self, line):
        with pytest.raises(ConfigurationError):
            parse_config_text(f"data = synthetic\n{line}\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\ndata = synthetic\n")

    def test_sparse_rate_too_small(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("seed = 1\ndata = synthetic\ntau = 2\nrate = 1/4\n")

    def test_relative_raster_paths(self, tmp_path):
        (tmp_path / "run.cfg").write_text("seed = 1\ndata = raster\ndevices = 1\ntrain_files = a.sras\n"
                                          "test_file = t.sras\n")
        cfg = parse_config(tmp_path / "run.cfg")
        assert cfg.train_files == (str(tmp_path / "a.sras"),)
        assert cfg.test_file == str(tmp_path / "t.sras")


class TestRunExperiment:
    def test_outputs_and_schema(self, tmp_path):
        res = run_experiment(small_cfg(), tmp_path)
        rows = read_rows(tmp_path / "metrics.csv")
        assert rows[0] == METRICS_COLUMNS
        metrics = read_metrics(tmp_path / "metrics.csv")
        assert [m.round for m in metrics] == sorted(m.round for m in metrics)
        total = small_cfg().total_rounds
        assert {m.round for m in metrics} == set(range(2, total + 1, 2))
        assert {m.device for m in metrics} == {0, 1, AVERAGED_DEVICE}
        for m in metrics:
            assert 0 <= m.test_accuracy <= 1 and m.test_log_loss > 0
        summary = read_rows(tmp_path / "summary.csv")
        assert summary[0] == SUMMARY_COLUMNS
        assert [r[0] for r in summary[1:]] == ["0", "1", "mean", "-1"]
        assert res.mean_accuracy == float(summary[3][2])

    def test_byte_identical(self, tmp_path):
        cfg = small_cfg(baseline=True)
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        for name in ("metrics.csv", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_results(self, tmp_path):
        a = run_experiment(small_cfg(), write=False)
        b = run_experiment(small_cfg(seed=8), write=False)
        assert [m.test_log_loss for m in a.metrics] != [m.test_log_loss for m in b.metrics]

    def test_comm_counter_in_summary(self, tmp_path):
        cfg = small_cfg(tau=4)
        res = run_experiment(cfg, tmp_path)
        net = cfg.network()
        syncs = cfg.total_rounds // 4
        expected = syncs * cfg.devices * 2 * net.param_dim
        assert res.communicated_entries == expected
        summary = read_rows(tmp_path / "summary.csv")
        assert {int(r[6]) for r in summary[1:]} == {expected}
        last = [m for m in read_metrics(tmp_path / "metrics.csv") if m.round == cfg.total_rounds]
        assert sorted(m.uploaded_entries for m in last if m.device >= 0) == res.uploaded

    def test_baseline_ratio(self, tmp_path):
        res = run_experiment(small_cfg(baseline=True), tmp_path)
        base = run_experiment(small_cfg(tau=None), write=False)
        assert res.baseline_losses == base.final_losses
        assert res.loss_ratio == pytest.approx(res.mean_loss / np.mean(base.final_losses), rel=1e-15)

    def test_no_baseline_gives_nan_ratio(self):
        assert math.isnan(run_experiment(small_cfg(), write=False).loss_ratio)

    def test_raster_data(self, tmp_path):
        cfg = small_cfg()
        paths = generate_data(cfg, tmp_path / "data")
        raster_cfg = cfg.replace(data="raster", train_files=tuple(str(p) for p in paths[:2]),
                                 test_file=str(paths[2]))
        a = run_experiment(cfg, write=False)
        b = run_experiment(raster_cfg, write=False)
        assert a.final_losses == b.final_losses

    def test_raster_shape_mismatch(self, tmp_path):
        cfg = small_cfg()
        paths = generate_data(cfg, tmp_path)
        bad = cfg.replace(data="raster", num_input=7, train_files=tuple(str(p) for p in paths[:2]),
                          test_file=str(paths[2]))
        with pytest.raises(ConfigurationError):
            run_experiment(bad, write=False)


class TestSweep:
    def test_tau_rows(self, tmp_path):
        rows = sweep(small_cfg(), "tau", ["2", "4", "8"], tmp_path)
        assert [r[1] for r in rows] == ["2", "4", "8"]
        table = read_rows(tmp_path / "sweep.csv")
        assert table[0] == SWEEP_COLUMNS and len(table) == 4
        assert (tmp_path / "tau=4" / "metrics.csv").exists()

    def test_rate_below_one_per_period(self, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep(small_cfg(), "rate", ["1/4"], tmp_path)  # r * tau = 1/2

    def test_bad_key(self, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep(small_cfg(), "seed", ["1"], tmp_path)

    def test_single_value_matches_run(self, tmp_path):
        rows = sweep(small_cfg(), "tau", ["4"], tmp_path / "s")
        res = run_experiment(small_cfg(tau=4, baseline=True), tmp_path / "r")
        assert rows[0][2:] == [repr(res.mean_accuracy), repr(res.mean_loss), repr(res.loss_ratio),
                               res.communicated_entries]
        for name in ("metrics.csv", "summary.csv"):
            assert (tmp_path / "s" / "tau=4" / name).read_bytes() == (tmp_path / "r" / name).read_bytes()


class TestGenData:
    def test_files(self, tmp_path):
        cfg = small_cfg()
        paths = generate_data(cfg, tmp_path)
        assert [p.name for p in paths] == ["train_device0.sras", "train_device1.sras", "test.sras"]
        test = load_raster_file(paths[2])
        assert len(test) == 8 and test.num_neurons == 6 and test.num_steps == 5


class TestCli:
    def write_cfg(self, tmp_path, text=SMALL):
        path = tmp_path / "run.cfg"
        path.write_text(text)
        return str(path)

    def test_run_ok(self, tmp_path, capsys):
        assert cli.main(["run", self.write_cfg(tmp_path), "-o", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "metrics.csv").exists()
        assert "accuracy" in capsys.readouterr().out

    def test_config_error(self, tmp_path, capsys):
        assert cli.main(["run", self.write_cfg(tmp_path, SMALL + "foo = 1\n")]) == 2
        assert "foo" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.cfg")]) == 2

    def test_runtime_error(self, tmp_path):
        text = SMALL.replace("data = synthetic", "data = raster\ndevices = 2\ntrain_files = a.sras,b.sras\n"
                                                 "test_file = t.sras")
        assert cli.main(["run", self.write_cfg(tmp_path, text)]) == 1

    def test_sweep_and_baseline_and_gen_data(self, tmp_path, capsys):
        cfg = self.write_cfg(tmp_path)
        assert cli.main(["sweep", cfg, "--key", "tau", "--values", "2,inf", "-o", str(tmp_path / "sw")]) == 0
        assert len(read_rows(tmp_path / "sw" / "sweep.csv")) == 3
        assert cli.main(["baseline", cfg, "-o", str(tmp_path / "b")]) == 0
        assert cli.main(["gen-data", cfg, "-o", str(tmp_path / "g")]) == 0
        assert (tmp_path / "g" / "test.sras").exists()

    def test_module_entry(self, tmp_path):
        import subprocess
        out = subprocess.run([sys.executable, "-m", "flsnn", "run", self.write_cfg(tmp_path, "seed = 1\n")],
                             capture_output=True, text=True)
        assert out.returncode == 2
