"""Run configuration, end-to-end experiments, sweeps, and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from flsnn.data import (
    RasterDataset,
    block_templates,
    build_stream,
    encode_targets,
    load_raster_file,
    make_synthetic_noniid,
    save_raster_file,
)
from flsnn.errors import ConfigurationError
from flsnn.federation import (
    FederationConfig,
    RoundRecord,
    average_params,
    make_devices,
    run_federated_training,
)
from flsnn.learning import Hyperparams, evaluate_dataset
from flsnn.spike_core import GLMNetwork, ModelParams, NetworkTopology, make_raised_cosine_basis

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["round", "device", "learning_signal", "test_log_loss", "test_accuracy", "uploaded_entries"]
SUMMARY_COLUMNS = [
    "device", "final_test_log_loss", "final_test_accuracy", "baseline_test_log_loss",
    "loss_ratio", "uploaded_entries", "communicated_entries",
]
SWEEP_COLUMNS = ["key", "value", "final_mean_accuracy", "final_mean_test_log_loss",
                 "final_mean_loss_ratio", "communicated_entries"]

AVERAGED_DEVICE = -1

# RNG stream tags under the run seed; device learners use ``seed ^ device_id``.
_INIT_STREAM, _SELECT_STREAM, _EVAL_STREAM, _DATA_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: str  # "synthetic" or "raster"
    train_files: tuple[str, ...] = ()
    test_file: str = ""
    output: str = "results"
    num_input: int = 20
    num_hidden: int = 0
    num_output: int = 2
    num_basis: int = 8
    synaptic_duration: int = 10
    learning_rate: float = 0.05
    trace_decay: float = 0.2
    delta_s: int = 5
    devices: int = 2
    tau: int | None = 5  # None: never synchronize
    rounds: int | None = None  # derived from the stream length when omitted
    rate: Fraction | None = None  # None: dense exchange
    sparse_mode: str = "delta"
    num_examples: int = 400
    example_len: int = 80
    gap: int = 0
    target_scheme: str = "constant"
    target_period: int = 2
    eval_samples: int = 20
    eval_every: int | None = None
    baseline: bool = False
    train_per_device: int = 100
    test_per_class: int = 50
    template_rate: float = 0.8
    noise: float = 0.02

    def __post_init__(self):
        positive = ["num_output", "num_basis", "synaptic_duration", "delta_s", "devices", "num_examples",
                    "example_len", "target_period", "eval_samples", "train_per_device"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ["num_input", "num_hidden", "gap", "test_per_class"]:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.data not in ("synthetic", "raster"):
            raise ConfigurationError(f"data must be 'synthetic' or 'raster', got {self.data!r}")
        if self.data == "raster":
            if len(self.train_files) != self.devices:
                raise ConfigurationError(f"raster data needs {self.devices} train_files, got {len(self.train_files)}")
            if not self.test_file:
                raise ConfigurationError("raster data needs test_file")
        else:
            if self.devices > self.num_output:
                raise ConfigurationError("synthetic data assigns one class per device; devices > num_output")
            if self.num_input < self.num_output:
                raise ConfigurationError("synthetic templates need num_input >= num_output")
            if not 0 <= self.noise <= 1 or not 0 <= self.template_rate <= 1:
                raise ConfigurationError("noise and template_rate must lie in [0, 1]")
        if self.tau is not None and self.tau < 1:
            raise ConfigurationError("tau must be >= 1 (or inf)")
        if self.target_scheme not in ("constant", "periodic"):
            raise ConfigurationError(f"unknown target_scheme {self.target_scheme!r}")
        if self.synaptic_duration < self.num_basis:
            raise ConfigurationError("synaptic_duration must be >= num_basis")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        Hyperparams(self.learning_rate, self.trace_decay, self.delta_s)

        if self.stream_len % self.delta_s:
            raise ConfigurationError(
                f"S = D*(S'+G) = {self.stream_len} is not a multiple of delta_s = {self.delta_s}"
            )
        if self.rounds is not None and self.rounds * self.delta_s != self.stream_len:
            raise ConfigurationError(
                f"S = {self.stream_len} but T*delta_s = {self.rounds * self.delta_s}"
            )
        self.federation_config().num_exchanged(self.num_basis)

    @property
    def stream_len(self) -> int:
        return self.num_examples * (self.example_len + self.gap)

    @property
    def total_rounds(self) -> int:
        return self.stream_len // self.delta_s

    @property
    def eval_period(self) -> int:
        return self.eval_every if self.eval_every is not None else max(1, self.total_rounds // 50)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.trace_decay, self.delta_s)

    def network(self) -> GLMNetwork:
        topo = NetworkTopology.fully_connected(self.num_input, self.num_hidden, self.num_output)
        return GLMNetwork(topo, make_raised_cosine_basis(self.num_basis, self.synaptic_duration))

    def federation_config(self, dataset_sizes: Sequence[int] | None = None) -> FederationConfig:
        sizes = tuple(dataset_sizes) if dataset_sizes is not None else (self.train_per_device,) * self.devices
        return FederationConfig(self.devices, sizes, self.tau, self.total_rounds, self.rate, self.sparse_mode)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tau(text: str) -> int | None:
    return None if text.lower() in ("inf", "none", "never") else int(text)


def _parse_rate(text: str) -> Fraction | None:
    return None if text.lower() == "dense" else Fraction(text)


def _parse_optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "auto") else int(text)


def _parse_files(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_PARSERS = {
    "seed": int, "data": str, "train_files": _parse_files, "test_file": str, "output": str,
    "num_input": int, "num_hidden": int, "num_output": int, "num_basis": int, "synaptic_duration": int,
    "learning_rate": float, "trace_decay": float, "delta_s": int, "devices": int, "tau": _parse_tau,
    "rounds": _parse_optional_int, "rate": _parse_rate, "sparse_mode": str, "num_examples": int,
    "example_len": int, "gap": int, "target_scheme": str, "target_period": int, "eval_samples": int,
    "eval_every": _parse_optional_int, "baseline": _parse_bool, "train_per_device": int,
    "test_per_class": int, "template_rate": float, "noise": float,
}
REQUIRED_KEYS = ("seed", "data")


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"cannot parse {key} = {text!r}: {exc}") from exc


def parse_config_text(text: str, base_dir: Path | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated config.

    Relative raster paths are resolved against ``base_dir``.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, value)
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigurationError(f"missing required key(s): {', '.join(missing)}")
    if base_dir is not None:
        if "train_files" in values:
            values["train_files"] = tuple(str(base_dir / p) for p in values["train_files"])
        if values.get("test_file"):
            values["test_file"] = str(base_dir / values["test_file"])
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), base_dir=path.parent)


@dataclass
class MetricsRow:
    round: int
    device: int
    learning_signal: float
    test_log_loss: float
    test_accuracy: float
    uploaded_entries: int

    def as_list(self) -> list:
        return [self.round, self.device, _fmt(self.learning_signal), _fmt(self.test_log_loss),
                _fmt(self.test_accuracy), self.uploaded_entries]

    @classmethod
    def from_list(cls, row: Sequence[str]) -> "MetricsRow":
        return cls(int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4]), int(row[5]))


@dataclass
class ExperimentResult:
    metrics: list[MetricsRow]
    final_losses: list[float]
    final_accuracies: list[float]
    averaged_loss: float
    averaged_accuracy: float
    uploaded: list[int]
    communicated_entries: int
    baseline_losses: list[float] | None = None
    summary: list[list] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.final_losses))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.final_accuracies))

    @property
    def loss_ratio(self) -> float:
        if self.baseline_losses is None:
            return math.nan
        return self.mean_loss / float(np.mean(self.baseline_losses))


def _fmt(x) -> str:
    return repr(float(x))


def _stream_seed(seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tags)


def load_datasets(cfg: RunConfig) -> tuple[list[RasterDataset], RasterDataset]:
    if cfg.data == "synthetic":
        data_seed = int(_stream_seed(cfg.seed, _DATA_STREAM).generate_state(1)[0])
        return make_synthetic_noniid(
            cfg.num_output, cfg.num_input, cfg.example_len,
            block_templates(cfg.num_output, cfg.num_input, 1.0), cfg.noise,
            [cfg.train_per_device] * cfg.devices, cfg.test_per_class, data_seed,
            p_max=cfg.template_rate, num_output=cfg.num_output,
        )
    train = [load_raster_file(p) for p in cfg.train_files]
    test = load_raster_file(cfg.test_file)
    for name, ds in [(p, d) for p, d in zip(cfg.train_files, train)] + [(cfg.test_file, test)]:
        if ds.num_neurons != cfg.num_input or ds.num_steps != cfg.example_len:
            raise ConfigurationError(
                f"{name}: rasters are {ds.num_neurons}x{ds.num_steps}, config expects "
                f"{cfg.num_input}x{cfg.example_len}"
            )
        if ds.num_classes > cfg.num_output:
            raise ConfigurationError(f"{name}: {ds.num_classes} classes but only {cfg.num_output} outputs")
    return train, test


def _train_and_evaluate(cfg: RunConfig) -> ExperimentResult:
    net = cfg.network()
    hyper = cfg.hyperparams()
    train, test = load_datasets(cfg)
    sizes = [len(d) for d in train]
    fed_cfg = cfg.federation_config(sizes)

    streams = [
        build_stream(d, cfg.num_examples, cfg.num_output, np.random.default_rng(_stream_seed(cfg.seed, _SELECT_STREAM, i)),
                     cfg.gap, cfg.target_scheme, cfg.target_period)
        for i, d in enumerate(train)
    ]
    theta0 = ModelParams.random_uniform(net.topology, net.num_basis,
                                        np.random.default_rng(_stream_seed(cfg.seed, _INIT_STREAM)))
    devices = make_devices(net, theta0, streams, sizes, cfg.seed)

    test_x = test.rasters
    test_y = encode_targets(test.labels, cfg.example_len, cfg.num_output, cfg.target_scheme, cfg.target_period)
    metrics: list[MetricsRow] = []
    final: dict[int, tuple[float, float]] = {}
    total = cfg.total_rounds

    def evaluate(t: int, index: int, params: ModelParams) -> tuple[float, float]:
        rng = np.random.default_rng(_stream_seed(cfg.seed, _EVAL_STREAM, t, index))
        return evaluate_dataset(net, params, test_x, test_y, test.labels, cfg.eval_samples, rng)

    def on_round(t: int, devs, record: RoundRecord) -> None:
        if t % cfg.eval_period and t != total:
            return
        for i, dev in enumerate(devs):
            loss, acc = evaluate(t, i, dev.params)
            metrics.append(MetricsRow(t, i, dev.state.learning_signal, loss, acc, record.uploaded[i]))
            if t == total:
                final[i] = (loss, acc)
        avg = average_params(net, devs)
        loss, acc = evaluate(t, len(devs), avg)
        metrics.append(MetricsRow(t, AVERAGED_DEVICE, float(np.mean(record.learning_signals)), loss, acc,
                                  sum(record.uploaded)))
        if t == total:
            final[AVERAGED_DEVICE] = (loss, acc)
        log.info("round %d/%d: mean test loss %.4f", t, total,
                 np.mean([m.test_log_loss for m in metrics[-len(devs) - 1:-1]]))

    result = run_federated_training(net, hyper, fed_cfg, devices, on_round)
    n = len(devices)
    return ExperimentResult(
        metrics=metrics,
        final_losses=[final[i][0] for i in range(n)],
        final_accuracies=[final[i][1] for i in range(n)],
        averaged_loss=final[AVERAGED_DEVICE][0],
        averaged_accuracy=final[AVERAGED_DEVICE][1],
        uploaded=list(result.comm.uploaded),
        communicated_entries=result.comm.total,
    )


def baseline_config(cfg: RunConfig) -> RunConfig:
    """Separate training: identical setup with synchronization disabled."""
    return cfg.replace(tau=None, rate=None)


def _summary_rows(res: ExperimentResult) -> list[list]:
    base = res.baseline_losses
    rows = []
    for i, (loss, acc) in enumerate(zip(res.final_losses, res.final_accuracies)):
        b = base[i] if base else math.nan
        rows.append([str(i), _fmt(loss), _fmt(acc), _fmt(b), _fmt(loss / b if base else math.nan),
                     res.uploaded[i], res.communicated_entries])
    mean_base = float(np.mean(base)) if base else math.nan
    rows.append(["mean", _fmt(res.mean_loss), _fmt(res.mean_accuracy), _fmt(mean_base),
                 _fmt(res.loss_ratio), sum(res.uploaded), res.communicated_entries])
    rows.append([str(AVERAGED_DEVICE), _fmt(res.averaged_loss), _fmt(res.averaged_accuracy), _fmt(mean_base),
                 _fmt(res.averaged_loss / mean_base if base else math.nan), sum(res.uploaded),
                 res.communicated_entries])
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def run_experiment(cfg: RunConfig, output_dir=None, baseline_losses: Sequence[float] | None = None,
                   write: bool = True) -> ExperimentResult:
    """Train, evaluate, and (optionally) write ``metrics.csv`` and ``summary.csv``.

    With ``cfg.baseline`` set and no ``baseline_losses`` supplied, a separately
    trained baseline is run first to normalize the final losses.
    """
    if baseline_losses is None and cfg.baseline:
        baseline_losses = _train_and_evaluate(baseline_config(cfg)).final_losses
    res = _train_and_evaluate(cfg)
    res.baseline_losses = list(baseline_losses) if baseline_losses is not None else None
    res.summary = _summary_rows(res)
    if write:
        out = Path(output_dir if output_dir is not None else cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", METRICS_COLUMNS, [m.as_list() for m in res.metrics])
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS, res.summary)
    return res


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow.from_list(row) for row in reader]


def _format_value(key: str, value) -> str:
    if value is None:
        return "inf" if key == "tau" else "dense"
    return str(value)


def sweep_configs(cfg: RunConfig, key: str, values: Sequence[str]) -> list[RunConfig]:
    if key not in ("tau", "rate"):
        raise ConfigurationError(f"sweep key must be 'tau' or 'rate', got {key!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    return [cfg.replace(**{key: parse_value(key, str(v))}) for v in values]


def _sweep_point(args):
    point, out_dir, baseline = args
    res = run_experiment(point, out_dir, baseline_losses=baseline)
    return res.mean_accuracy, res.mean_loss, res.loss_ratio, res.communicated_entries


def sweep(cfg: RunConfig, key: str, values: Sequence[str], output_dir=None, jobs: int = 1) -> list[list]:
    """One experiment per value (same seed), plus ``sweep.csv`` with one row per value.

    Every point is normalized against the same separately trained baseline.
    """
    points = sweep_configs(cfg, key, values)
    out = Path(output_dir if output_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    baseline = _train_and_evaluate(baseline_config(cfg)).final_losses
    labels = [_format_value(key, getattr(p, key)) for p in points]
    tasks = [(p, out / f"{key}={label.replace('/', '_')}", baseline) for p, label in zip(points, labels)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_point, tasks))
    else:
        outcomes = [_sweep_point(t) for t in tasks]
    rows = [[key, label, _fmt(acc), _fmt(loss), _fmt(ratio), comm]
            for label, (acc, loss, ratio, comm) in zip(labels, outcomes)]
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


def generate_data(cfg: RunConfig, output_dir=None) -> list[Path]:
    """Write the synthetic train/test split as raster files."""
    if cfg.data != "synthetic":
        raise ConfigurationError("gen-data requires data = synthetic")
    out = Path(output_dir if output_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    paths = []
    for i, ds in enumerate(train):
        paths.append(out / f"train_device{i}.sras")
        save_raster_file(ds, paths[-1])
    paths.append(out / "test.sras")
    save_raster_file(test, paths[-1])
    return paths
