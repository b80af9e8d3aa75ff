"""Simulated base station: weighted averaging, periodic sync, and sparse exchange."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from flsnn.errors import ConfigurationError, DimensionError
from flsnn.learning import Hyperparams, LearnerState, local_round
from flsnn.spike_core import GLMNetwork, ModelParams

log = logging.getLogger(__name__)


def fed_average(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Dataset-size weighted mean of device parameter vectors.

    Contributions are summed in a canonical order so the result does not depend
    on the order devices report in, and entries on which every device agrees
    are returned unchanged.
    """
    if not updates:
        raise ConfigurationError("fed_average needs at least one update")
    thetas = [np.asarray(theta, dtype=np.float64) for theta, _ in updates]
    sizes = [int(size) for _, size in updates]
    shape = thetas[0].shape
    for theta in thetas:
        if theta.shape != shape:
            raise DimensionError(f"parameter shapes differ: {theta.shape} vs {shape}")
    if any(size < 0 for size in sizes) or sum(sizes) == 0:
        raise ConfigurationError("dataset sizes must be nonnegative with a positive total")

    order = sorted(range(len(thetas)), key=lambda i: (sizes[i], thetas[i].tobytes()))
    total = sum(sizes)
    out = np.zeros(shape)
    for i in order:
        out += (sizes[i] / total) * thetas[i]
    first = thetas[0]
    agree = np.ones(shape, dtype=bool)
    for theta in thetas[1:]:
        agree &= theta == first
    return np.where(agree, first, out)


def select_topk(magnitudes: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ties to the lowest index,
    returned in ascending order."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if not 0 <= k <= magnitudes.shape[-1]:
        raise ConfigurationError(f"k={k} outside [0, {magnitudes.shape[-1]}]")
    order = np.argsort(-magnitudes, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


@dataclass
class SparseUpdate:
    """One device's upload under sparse exchange.

    ``indices[e]`` are the basis indices sent for synapse ``e`` and
    ``values[e]`` their weights; bias and feedback go dense.
    """

    indices: np.ndarray  # (E, K') int, ascending per row
    values: np.ndarray  # (E, K')
    bias: np.ndarray
    feedback: np.ndarray
    num_basis: int

    def mask(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.num_basis), dtype=bool)
        np.put_along_axis(out, self.indices, True, axis=1)
        return out

    def dense_values(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.num_basis))
        np.put_along_axis(out, self.indices, self.values, axis=1)
        return out


def make_sparse_update(params: ModelParams, magnitudes: np.ndarray, k: int) -> SparseUpdate:
    if magnitudes.shape != params.synapses.shape:
        raise DimensionError("magnitudes must match the synapse weight array")
    idx = select_topk(magnitudes, k)
    return SparseUpdate(idx, np.take_along_axis(params.synapses, idx, axis=1),
                        params.bias.copy(), params.feedback.copy(), params.num_basis)


def sparse_merge(updates: Sequence[SparseUpdate], dataset_sizes: Sequence[int]) -> ModelParams:
    """Base-station merge for sparse uploads.

    Per synaptic weight: several senders -> their dataset-weighted mean; one
    sender -> its value; no sender -> zero. Bias and feedback are averaged
    densely.
    """
    if not updates or len(updates) != len(dataset_sizes):
        raise ConfigurationError("need one dataset size per sparse update")
    ref = updates[0]
    for u in updates:
        if u.num_basis != ref.num_basis or u.indices.shape[0] != ref.indices.shape[0] \
                or u.bias.shape != ref.bias.shape:
            raise DimensionError("sparse updates come from different topologies")

    shape = (ref.indices.shape[0], ref.num_basis)
    weight_sum = np.zeros(shape)
    masks, values = [], []
    for u, size in zip(updates, dataset_sizes):
        m = u.mask()
        masks.append(m)
        values.append(u.dense_values())
        weight_sum += np.where(m, float(size), 0.0)

    sent = weight_sum > 0
    merged = np.zeros(shape)
    denom = np.where(sent, weight_sum, 1.0)
    order = sorted(range(len(updates)), key=lambda i: (dataset_sizes[i], values[i].tobytes()))
    for i in order:
        merged += np.where(masks[i], dataset_sizes[i] / denom, 0.0) * values[i]
    merged = np.where(sent, merged, 0.0)

    bias = fed_average([(u.bias, s) for u, s in zip(updates, dataset_sizes)])
    feedback = fed_average([(u.feedback, s) for u, s in zip(updates, dataset_sizes)])
    return ModelParams(bias, feedback, merged)


@dataclass(frozen=True)
class FederationConfig:
    num_devices: int
    dataset_sizes: tuple[int, ...]
    sync_period: int | None  # None: never synchronize (separate training)
    total_rounds: int
    sparse_rate: Fraction | None = None  # None: dense exchange
    sparse_mode: str = "delta"  # "delta": exchange updates since last sync; "literal": exchange weights

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigurationError("num_devices must be >= 1")
        if len(self.dataset_sizes) != self.num_devices:
            raise ConfigurationError("one dataset size per device is required")
        if any(s < 1 for s in self.dataset_sizes):
            raise ConfigurationError("every device needs a nonempty local dataset")
        if self.sync_period is not None and self.sync_period < 1:
            raise ConfigurationError("sync_period must be >= 1")
        if self.total_rounds < 1:
            raise ConfigurationError("total_rounds must be >= 1")
        if self.sparse_rate is not None and self.sparse_rate <= 0:
            raise ConfigurationError("sparse rate must be > 0")
        if self.sparse_mode not in ("delta", "literal"):
            raise ConfigurationError(f"unknown sparse mode {self.sparse_mode!r}")

    def num_exchanged(self, num_basis: int) -> int:
        """Synaptic weights sent per synapse per sync, ``K'_a = round(r * tau)``."""
        if self.sparse_rate is None or self.sync_period is None:
            return num_basis
        exact = Fraction(self.sparse_rate) * self.sync_period
        k = int(exact + Fraction(1, 2))
        if exact < 1 or not 1 <= k <= num_basis:
            raise ConfigurationError(
                f"rate {self.sparse_rate} with tau={self.sync_period} gives K'_a={k}, need 1 <= K'_a <= {num_basis}"
            )
        return k

    def is_sync_round(self, t: int) -> bool:
        return self.sync_period is not None and t % self.sync_period == 0


@dataclass
class Device:
    """A device's learner state, current parameters, and concatenated training streams."""

    state: LearnerState
    params: ModelParams
    inputs: np.ndarray  # (N_X, S)
    targets: np.ndarray  # (N_Y, S)
    dataset_size: int
    drift: ModelParams | None = None  # applied updates since the last sync


@dataclass
class CommStats:
    """Entry counts exchanged with the base station.

    ``uploaded[i]`` counts values plus per-synapse index overhead sent by
    device ``i``; ``broadcast`` counts entries multicast back, once per device.
    """

    uploaded: list[int]
    broadcast: int = 0
    syncs: int = 0

    @property
    def total(self) -> int:
        return sum(self.uploaded) + self.broadcast


@dataclass
class RoundRecord:
    round: int
    learning_signals: tuple[float, ...]
    uploaded: tuple[int, ...]
    synced: bool


@dataclass
class FederationResult:
    final_params: ModelParams  # theta(T) if the last round synced, else the dense average
    device_params: list[ModelParams]
    synced_at_end: bool
    history: list[RoundRecord] = field(default_factory=list)
    comm: CommStats | None = None


def upload_entries(net: GLMNetwork, k: int | None) -> int:
    """Entries one device uploads per sync: the full vector when dense, otherwise
    dense bias/feedback plus ``k`` weights and one index entry per synapse."""
    if k is None:
        return net.param_dim
    return 2 * net.topology.num_neurons + net.topology.num_synapses * (k + 1)


def make_devices(net: GLMNetwork, theta0: ModelParams, streams: Sequence[tuple[np.ndarray, np.ndarray]],
                 dataset_sizes: Sequence[int], seed: int) -> list[Device]:
    """Devices starting from a shared ``theta0``, each with RNG seed ``seed ^ device_id``."""
    return [
        Device(LearnerState.initial(net, seed ^ i), theta0.copy(), np.asarray(x), np.asarray(y), int(size))
        for i, ((x, y), size) in enumerate(zip(streams, dataset_sizes))
    ]


def run_federated_training(net: GLMNetwork, hyper: Hyperparams, config: FederationConfig,
                           devices: Sequence[Device],
                           on_round: Callable[[int, Sequence[Device], RoundRecord], None] | None = None
                           ) -> FederationResult:
    """Run ``config.total_rounds`` rounds of local learning with periodic exchange.

    ``on_round(t, devices, record)`` is called after each round, once any
    synchronization for that round has completed.
    """
    if len(devices) != config.num_devices:
        raise ConfigurationError(f"{len(devices)} devices given, config expects {config.num_devices}")
    need = config.total_rounds * hyper.window
    for i, dev in enumerate(devices):
        if dev.inputs.shape != (net.topology.num_input, need) or dev.targets.shape != (net.topology.num_output, need):
            raise ConfigurationError(
                f"device {i} streams have shapes {dev.inputs.shape}/{dev.targets.shape}; "
                f"S must equal T * delta_s = {need}"
            )
        if dev.params.synapses.shape != (net.topology.num_synapses, net.num_basis):
            raise DimensionError(f"device {i} parameters do not match the network")

    sparse = config.sparse_rate is not None and config.sync_period is not None
    k = config.num_exchanged(net.num_basis) if sparse else None
    per_upload = upload_entries(net, k)
    comm = CommStats([0] * len(devices))
    history: list[RoundRecord] = []
    for dev in devices:
        dev.drift = ModelParams.zeros(net.topology, net.num_basis)
    global_synapses = devices[0].params.synapses.copy()

    for t in range(1, config.total_rounds + 1):
        sl = slice((t - 1) * hyper.window, t * hyper.window)
        for dev in devices:
            dev.params, step, _ = local_round(net, hyper, dev.params, dev.state,
                                              dev.inputs[:, sl], dev.targets[:, sl])
            dev.drift.synapses += step.synapses

        synced = config.is_sync_round(t)
        if synced:
            sizes = [dev.dataset_size for dev in devices]
            if sparse and config.sparse_mode == "delta":
                ups = [
                    make_sparse_update(ModelParams(dev.params.bias, dev.params.feedback, dev.drift.synapses),
                                       np.abs(dev.drift.synapses), k)
                    for dev in devices
                ]
                merged = sparse_merge(ups, sizes)
                merged.synapses = global_synapses + merged.synapses
            elif sparse:
                ups = [make_sparse_update(dev.params, np.abs(dev.drift.synapses), k) for dev in devices]
                merged = sparse_merge(ups, sizes)
            else:
                theta = fed_average([(dev.params.flatten(net.topology), s) for dev, s in zip(devices, sizes)])
                merged = ModelParams.unflatten(theta, net.topology, net.num_basis)
            global_synapses = merged.synapses.copy()
            for i, dev in enumerate(devices):
                dev.params = merged.copy()
                dev.drift = ModelParams.zeros(net.topology, net.num_basis)
                comm.uploaded[i] += per_upload
            comm.broadcast += len(devices) * net.param_dim
            comm.syncs += 1
            log.debug("round %d: synchronized %d devices", t, len(devices))

        history.append(RoundRecord(
            t, tuple(dev.state.learning_signal for dev in devices), tuple(comm.uploaded), synced,
        ))
        if on_round is not None:
            on_round(t, devices, history[-1])

    synced_at_end = config.is_sync_round(config.total_rounds)
    device_params = [dev.params.copy() for dev in devices]
    if synced_at_end:
        final = device_params[0].copy()
    else:
        final = average_params(net, devices)
    return FederationResult(final, device_params, synced_at_end, history, comm)


def average_params(net: GLMNetwork, devices: Sequence[Device]) -> ModelParams:
    theta = fed_average([(dev.params.flatten(net.topology), dev.dataset_size) for dev in devices])
    return ModelParams.unflatten(theta, net.topology, net.num_basis)
