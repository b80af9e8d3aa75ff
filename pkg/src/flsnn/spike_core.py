"""Discrete-time probabilistic GLM spiking neurons.

Neurons are numbered ``0..N_V-1`` with inputs first, then hidden, then
outputs. The membrane potential of neuron ``n`` at step ``s`` is

    u_n(s) = sum_{k in P_n} sum_l w_{n,k}^l * (a_l * o_k)(s-1)
             + w_n * (b * o_n)(s-1) + gamma_n

and the neuron spikes with probability ``sigmoid(u_n(s))``. Time starts at
``s = 1``; all traces are zero before the first step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from flsnn.errors import ConfigurationError, DimensionError

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class NetworkTopology:
    """Directed synapse graph over input, hidden and output neurons.

    ``presynaptic[n]`` is the ordered tuple of source ids feeding neuron ``n``.
    Input neurons must have no incoming synapses.
    """

    num_input: int
    num_hidden: int
    num_output: int
    presynaptic: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if min(self.num_input, self.num_hidden, self.num_output) < 0:
            raise ConfigurationError("neuron counts must be nonnegative")
        if self.num_output < 1:
            raise ConfigurationError("at least one output neuron is required")
        n_total = self.num_input + self.num_hidden + self.num_output
        if len(self.presynaptic) != n_total:
            raise ConfigurationError(
                f"presynaptic sets given for {len(self.presynaptic)} neurons, expected {n_total}"
            )
        for n, sources in enumerate(self.presynaptic):
            if n < self.num_input and sources:
                raise ConfigurationError(f"input neuron {n} cannot receive synapses")
            if len(set(sources)) != len(sources):
                raise ConfigurationError(f"duplicate presynaptic source for neuron {n}")
            for k in sources:
                if not 0 <= k < n_total:
                    raise ConfigurationError(f"neuron {n} has unknown source {k}")

    @classmethod
    def fully_connected(cls, num_input: int, num_hidden: int, num_output: int) -> "NetworkTopology":
        """Inputs project to every other neuron; hidden and output neurons are all-to-all
        (self-connections are covered by the feedback filter instead)."""
        n_total = num_input + num_hidden + num_output
        sets: list[tuple[int, ...]] = [() for _ in range(num_input)]
        for n in range(num_input, n_total):
            sets.append(tuple(k for k in range(n_total) if k != n))
        return cls(num_input, num_hidden, num_output, tuple(sets))

    @property
    def num_neurons(self) -> int:
        return self.num_input + self.num_hidden + self.num_output

    @property
    def input_ids(self) -> range:
        return range(0, self.num_input)

    @property
    def hidden_ids(self) -> range:
        return range(self.num_input, self.num_input + self.num_hidden)

    @property
    def output_ids(self) -> range:
        return range(self.num_input + self.num_hidden, self.num_neurons)

    @cached_property
    def hidden_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_neurons, dtype=bool)
        mask[self.num_input:self.num_input + self.num_hidden] = True
        return mask

    @cached_property
    def visible_mask(self) -> np.ndarray:
        return ~self.hidden_mask

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(post, pre) id arrays, grouped by post neuron in ``presynaptic`` order."""
        post = [n for n, sources in enumerate(self.presynaptic) for _ in sources]
        pre = [k for sources in self.presynaptic for k in sources]
        return np.asarray(post, dtype=np.intp), np.asarray(pre, dtype=np.intp)

    @cached_property
    def edge_offsets(self) -> np.ndarray:
        """Row ``n`` of the edge arrays spans ``edge_offsets[n]:edge_offsets[n+1]``."""
        return np.concatenate([[0], np.cumsum([len(s) for s in self.presynaptic])]).astype(np.intp)

    @property
    def num_synapses(self) -> int:
        return int(self.edge_offsets[-1])

    def param_dim(self, num_basis: int) -> int:
        return 2 * self.num_neurons + num_basis * self.num_synapses


def raised_cosine(s, center: float, width: float):
    """Raised-cosine bump: ``0.5 * (1 + cos(pi * (s - center) / width))`` on ``|s - center| <= width``."""
    d = np.asarray(s, dtype=np.float64) - center
    out = 0.5 * (1.0 + np.cos(np.pi * d / width))
    return np.where(np.abs(d) <= width, out, 0.0)


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Synaptic basis kernels ``a_l(1..W)`` and the fixed feedback kernel ``b(1..W)``."""

    basis_values: np.ndarray  # (K_a, W)
    feedback_values: np.ndarray  # (W,)
    centers: np.ndarray
    width: float

    @property
    def num_basis(self) -> int:
        return self.basis_values.shape[0]

    @property
    def window_len(self) -> int:
        return self.basis_values.shape[1]

    @cached_property
    def rotated_kernels(self) -> np.ndarray:
        # [head, slot, l]: kernel value for the bit stored at ``slot`` when the
        # newest bit sits at ``head``; last column is the feedback kernel.
        w = self.window_len
        stacked = np.vstack([self.basis_values, self.feedback_values[None, :]])  # (K+1, W)
        slots = np.arange(w)
        out = np.empty((w, w, stacked.shape[0]))
        for head in range(w):
            lag = (head - slots) % w
            out[head] = stacked[:, lag].T
        return out


def make_raised_cosine_basis(num_basis: int, window_len: int = 10) -> BasisSet:
    """Build ``num_basis`` raised-cosine kernels spanning ``window_len`` steps.

    Centers are evenly spaced over ``[1, window_len]`` and rounded to the nearest
    sample so every kernel peaks at exactly 1.0. The feedback kernel is
    ``exp(-(s - 1) / (window_len / 2))``.
    """
    if num_basis < 1 or window_len < 1:
        raise ConfigurationError("num_basis and window_len must be positive")
    if window_len < num_basis:
        raise ConfigurationError(f"window_len={window_len} is shorter than num_basis={num_basis}")
    s = np.arange(1, window_len + 1, dtype=np.float64)
    if num_basis == 1:
        width = (window_len + 1) / 2.0
        centers = np.array([math.floor((window_len + 1) / 2.0 + 0.5)], dtype=np.float64)
    else:
        width = 2.0 * (window_len - 1) / (num_basis - 1)
        centers = np.floor(np.linspace(1.0, window_len, num_basis) + 0.5)
    values = np.stack([raised_cosine(s, c, width) for c in centers])
    feedback = np.exp(-(s - 1.0) / (window_len / 2.0))
    return BasisSet(values, feedback, centers, float(width))


@lru_cache(maxsize=64)
def _flat_layout(topology: NetworkTopology, num_basis: int):
    sizes = 2 + num_basis * np.diff(topology.edge_offsets)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
    bias_idx = offsets
    fb_idx = offsets + 1
    post, _ = topology.edges
    rank = np.arange(topology.num_synapses) - topology.edge_offsets[post]
    syn_idx = (offsets[post] + 2 + num_basis * rank)[:, None] + np.arange(num_basis)[None, :]
    return bias_idx, fb_idx, syn_idx


@dataclass
class ModelParams:
    """Per-neuron bias and feedback weight plus per-synapse basis weights.

    ``synapses[e, l]`` belongs to edge ``e`` of ``topology.edges``. The same
    container shape is reused for eligibility traces and gradients.
    """

    bias: np.ndarray
    feedback: np.ndarray
    synapses: np.ndarray

    @classmethod
    def zeros(cls, topology: NetworkTopology, num_basis: int) -> "ModelParams":
        n = topology.num_neurons
        return cls(np.zeros(n), np.zeros(n), np.zeros((topology.num_synapses, num_basis)))

    @classmethod
    def random_uniform(cls, topology: NetworkTopology, num_basis: int, rng: np.random.Generator,
                       scale: float = 0.05) -> "ModelParams":
        theta = rng.uniform(-scale, scale, size=topology.param_dim(num_basis))
        return cls.unflatten(theta, topology, num_basis)

    @property
    def num_basis(self) -> int:
        return self.synapses.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.bias.copy(), self.feedback.copy(), self.synapses.copy())

    def flatten(self, topology: NetworkTopology) -> np.ndarray:
        bias_idx, fb_idx, syn_idx = _flat_layout(topology, self.num_basis)
        theta = np.empty(topology.param_dim(self.num_basis))
        theta[bias_idx] = self.bias
        theta[fb_idx] = self.feedback
        theta[syn_idx] = self.synapses
        return theta

    @classmethod
    def unflatten(cls, theta: np.ndarray, topology: NetworkTopology, num_basis: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (topology.param_dim(num_basis),):
            raise DimensionError(
                f"parameter vector has shape {theta.shape}, expected ({topology.param_dim(num_basis)},)"
            )
        bias_idx, fb_idx, syn_idx = _flat_layout(topology, num_basis)
        return cls(theta[bias_idx], theta[fb_idx], theta[syn_idx])


class TraceState:
    """Ring buffer of the last ``window_len`` spike bits per neuron and the derived traces.

    After ``push`` at step ``s``, ``syn[..., k, l]`` holds ``(a_l * o_k)(s)`` and
    ``fb[..., n]`` holds ``(b * o_n)(s)``. Leading batch dimensions are allowed.
    """

    def __init__(self, num_neurons: int, basis: BasisSet, batch_shape: tuple[int, ...] = ()):
        w = basis.window_len
        self.buffer = np.zeros(batch_shape + (num_neurons, w))
        self.head = w - 1
        self.syn = np.zeros(batch_shape + (num_neurons, basis.num_basis))
        self.fb = np.zeros(batch_shape + (num_neurons,))

    @property
    def num_neurons(self) -> int:
        return self.buffer.shape[-2]

    def push(self, spikes: np.ndarray, basis: BasisSet) -> None:
        spikes = np.asarray(spikes)
        if spikes.shape != self.buffer.shape[:-1]:
            raise DimensionError(f"spike vector has shape {spikes.shape}, expected {self.buffer.shape[:-1]}")
        self.head = (self.head + 1) % self.buffer.shape[-1]
        self.buffer[..., self.head] = spikes
        traces = self.buffer @ basis.rotated_kernels[self.head]
        self.syn = traces[..., :-1]
        self.fb = traces[..., -1]

    def copy(self) -> "TraceState":
        out = TraceState.__new__(TraceState)
        out.buffer = self.buffer.copy()
        out.head = self.head
        out.syn = self.syn.copy()
        out.fb = self.fb.copy()
        return out


def update_traces(state: TraceState, basis: BasisSet, new_spikes) -> TraceState:
    """Return a new trace state advanced by one step; ``state`` is left untouched."""
    out = state.copy()
    out.push(new_spikes, basis)
    return out


@dataclass(frozen=True, eq=False)
class GLMNetwork:
    """A topology bound to its basis set, with helpers for vectorized potentials."""

    topology: NetworkTopology
    basis: BasisSet

    @property
    def num_basis(self) -> int:
        return self.basis.num_basis

    @property
    def param_dim(self) -> int:
        return self.topology.param_dim(self.num_basis)

    def dense_weights(self, params: ModelParams) -> np.ndarray:
        """Synaptic weights as an ``(N_V, N_V * K_a)`` matrix acting on flattened traces."""
        n, k = self.topology.num_neurons, self.num_basis
        post, pre = self.topology.edges
        dense = np.zeros((n, n, k))
        dense[post, pre] = params.synapses
        return dense.reshape(n, n * k)

    def potentials(self, params: ModelParams, dense: np.ndarray, traces: TraceState) -> np.ndarray:
        syn = traces.syn.reshape(traces.syn.shape[:-2] + (-1,))
        return syn @ dense.T + params.feedback * traces.fb + params.bias


def membrane_potential(n: int, params: ModelParams, traces: TraceState, topology: NetworkTopology) -> float:
    """Potential ``u_n(s)`` from traces that hold history up to step ``s - 1``."""
    lo, hi = topology.edge_offsets[n], topology.edge_offsets[n + 1]
    _, pre = topology.edges
    u = params.bias[n] + params.feedback[n] * traces.fb[n]
    for e in range(lo, hi):
        u += float(np.dot(params.synapses[e], traces.syn[pre[e]]))
    return float(u)


def spike_probability(u):
    """Numerically stable sigmoid, floored at the smallest positive normal double."""
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(u))
    p = np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    p = np.maximum(p, _TINY)
    return float(p) if p.ndim == 0 else p


def log_spike_probability(o, u):
    """``log p(o | u)`` for a Bernoulli(sigmoid(u)) spike, via softplus."""
    sign = 2.0 * np.asarray(o, dtype=np.float64) - 1.0
    out = -np.logaddexp(0.0, -sign * np.asarray(u, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def sample_spike(u: float, rng: np.random.Generator) -> int:
    return int(rng.random() < spike_probability(u))
