"""Online three-factor learning for a single device's SNN.

Each global round covers ``window`` consecutive SNN steps. Visible neurons are
clamped to data, hidden neurons are sampled, and per-parameter gradients of
``log p(o_n(s) | u_n(s))`` are summed over the window. The sums feed
exponentially decaying eligibility traces; the summed visible log-probability
feeds the learning signal that gates hidden-neuron updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flsnn.errors import ConfigurationError, DimensionError
from flsnn.spike_core import (
    GLMNetwork,
    ModelParams,
    NetworkTopology,
    TraceState,
    log_spike_probability,
    spike_probability,
)


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.05
    trace_decay: float = 0.2
    window: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.trace_decay < 1:
            raise ConfigurationError("trace_decay must lie in [0, 1)")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")


@dataclass
class LearnerState:
    """Everything a device carries between rounds except the parameters themselves."""

    traces: TraceState
    eligibility: ModelParams
    learning_signal: float
    rng: np.random.Generator
    step: int = 0
    round: int = 0

    @classmethod
    def initial(cls, net: GLMNetwork, seed) -> "LearnerState":
        return cls(
            traces=TraceState(net.topology.num_neurons, net.basis),
            eligibility=ModelParams.zeros(net.topology, net.num_basis),
            learning_signal=0.0,
            rng=np.random.default_rng(seed),
        )


def gradient_log_prob(o: int, u: float, feedback_trace: float, synaptic_traces: np.ndarray) -> np.ndarray:
    """Gradient of ``log p(o | u)`` w.r.t. one neuron's block ``[bias, feedback, synapses...]``.

    ``synaptic_traces`` has shape ``(|P_n|, K_a)`` and holds the presynaptic
    traces at ``s - 1`` in ``P_n`` order.
    """
    err = o - spike_probability(u)
    return np.concatenate([[err, err * feedback_trace], err * np.ravel(synaptic_traces)])


def update_learning_signal(prev: float, window_visible_logprob: float, kappa: float) -> float:
    return kappa * prev + (1.0 - kappa) * window_visible_logprob


def update_eligibility(prev, window_gradient_sum, kappa: float):
    prev = np.asarray(prev, dtype=np.float64)
    window_gradient_sum = np.asarray(window_gradient_sum, dtype=np.float64)
    if prev.shape != window_gradient_sum.shape:
        raise DimensionError(f"eligibility shape {prev.shape} != gradient shape {window_gradient_sum.shape}")
    return kappa * prev + (1.0 - kappa) * window_gradient_sum


def _update_eligibility_params(prev: ModelParams, grad: ModelParams, kappa: float) -> ModelParams:
    return ModelParams(
        update_eligibility(prev.bias, grad.bias, kappa),
        update_eligibility(prev.feedback, grad.feedback, kappa),
        update_eligibility(prev.synapses, grad.synapses, kappa),
    )


def local_update_step(topology: NetworkTopology, eligibility: ModelParams, learning_signal: float,
                      learning_rate: float) -> ModelParams:
    """The increment added to the parameters: ``alpha * e`` for visible neurons,
    ``alpha * l * e`` for hidden ones (ascent on log-probability)."""
    gate = np.where(topology.hidden_mask, learning_signal, 1.0) * learning_rate
    post, _ = topology.edges
    return ModelParams(
        gate * eligibility.bias,
        gate * eligibility.feedback,
        gate[post, None] * eligibility.synapses,
    )


def apply_local_update(topology: NetworkTopology, params: ModelParams, eligibility: ModelParams,
                       learning_signal: float, learning_rate: float) -> ModelParams:
    step = local_update_step(topology, eligibility, learning_signal, learning_rate)
    return ModelParams(
        params.bias + step.bias,
        params.feedback + step.feedback,
        params.synapses + step.synapses,
    )


def step_window(net: GLMNetwork, params: ModelParams, state: LearnerState,
                inputs: np.ndarray, targets: np.ndarray) -> tuple[LearnerState, float, ModelParams]:
    """Run the SNN over one window with visible neurons clamped.

    ``inputs`` is ``(N_X, window)`` and ``targets`` is ``(N_Y, window)``. Advances
    ``state.traces`` and ``state.step`` in place. Returns the state, the summed
    visible log-probability of the window, and the summed per-parameter
    gradients.
    """
    topo = net.topology
    nx, nh = topo.num_input, topo.num_hidden
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[1] != targets.shape[1]:
        raise DimensionError("inputs and targets must be 2-D rasters covering the same steps")
    if inputs.shape[0] != nx or targets.shape[0] != topo.num_output:
        raise DimensionError(
            f"window rasters have {inputs.shape[0]} inputs / {targets.shape[0]} outputs, "
            f"expected {nx} / {topo.num_output}"
        )

    post, pre = topo.edges
    dense = net.dense_weights(params)
    visible = topo.visible_mask
    g_bias = np.zeros(topo.num_neurons)
    g_fb = np.zeros(topo.num_neurons)
    g_syn = np.zeros((topo.num_synapses, net.num_basis))
    logprob = 0.0
    spikes = np.empty(topo.num_neurons)

    for j in range(inputs.shape[1]):
        tr = state.traces
        u = net.potentials(params, dense, tr)
        p = spike_probability(u)
        spikes[:nx] = inputs[:, j]
        if nh:
            spikes[nx:nx + nh] = state.rng.random(nh) < p[nx:nx + nh]
        spikes[nx + nh:] = targets[:, j]
        logprob += float(log_spike_probability(spikes, u)[visible].sum())
        err = spikes - p
        g_bias += err
        g_fb += err * tr.fb
        g_syn += err[post, None] * tr.syn[pre]
        tr.push(spikes, net.basis)
        state.step += 1

    return state, logprob, ModelParams(g_bias, g_fb, g_syn)


def local_round(net: GLMNetwork, hyper: Hyperparams, params: ModelParams, state: LearnerState,
                inputs: np.ndarray, targets: np.ndarray) -> tuple[ModelParams, ModelParams, float]:
    """One global round on one device: window simulation, trace updates, parameter step.

    Returns ``(new_params, applied_step, window_logprob)``.
    """
    if inputs.shape[1] != hyper.window:
        raise DimensionError(f"window has {inputs.shape[1]} steps, expected {hyper.window}")
    state, logprob, grad = step_window(net, params, state, inputs, targets)
    state.learning_signal = update_learning_signal(state.learning_signal, logprob, hyper.trace_decay)
    state.eligibility = _update_eligibility_params(state.eligibility, grad, hyper.trace_decay)
    step = local_update_step(net.topology, state.eligibility, state.learning_signal, hyper.learning_rate)
    new = ModelParams(params.bias + step.bias, params.feedback + step.feedback, params.synapses + step.synapses)
    state.round += 1
    return new, step, logprob


def train_standalone(net: GLMNetwork, hyper: Hyperparams, params: ModelParams, state: LearnerState,
                     inputs: np.ndarray, targets: np.ndarray, num_rounds: int | None = None,
                     trajectory: list | None = None) -> ModelParams:
    """Train a single device with no communication; optionally record flat parameters per round."""
    total = inputs.shape[1] // hyper.window if num_rounds is None else num_rounds
    if total * hyper.window > inputs.shape[1]:
        raise ConfigurationError("stream is shorter than num_rounds * window")
    for t in range(total):
        sl = slice(t * hyper.window, (t + 1) * hyper.window)
        params, _, _ = local_round(net, hyper, params, state, inputs[:, sl], targets[:, sl])
        if trajectory is not None:
            trajectory.append(params.flatten(net.topology))
    return params


def simulate_batch(net: GLMNetwork, params: ModelParams, inputs: np.ndarray, rng: np.random.Generator,
                   targets: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run a batch of independent sequences from empty history.

    ``inputs`` is ``(B, N_X, S)``. Hidden neurons are sampled. If ``targets``
    ``(B, N_Y, S)`` is given, outputs are clamped to it; otherwise they are
    sampled freely. Returns the summed output log-probability per sequence and
    the output spike counts ``(B, N_Y)``.
    """
    topo = net.topology
    nx, nh, ny = topo.num_input, topo.num_hidden, topo.num_output
    batch, _, steps = inputs.shape
    dense = net.dense_weights(params)
    traces = TraceState(topo.num_neurons, net.basis, (batch,))
    spikes = np.zeros((batch, topo.num_neurons))
    out_logp = np.zeros(batch)
    counts = np.zeros((batch, ny))
    for s in range(steps):
        u = net.potentials(params, dense, traces)
        spikes[:, :nx] = inputs[:, :, s]
        if nh:
            spikes[:, nx:nx + nh] = rng.random((batch, nh)) < spike_probability(u[:, nx:nx + nh])
        if targets is None:
            spikes[:, nx + nh:] = rng.random((batch, ny)) < spike_probability(u[:, nx + nh:])
        else:
            spikes[:, nx + nh:] = targets[:, :, s]
        out_logp += log_spike_probability(spikes[:, nx + nh:], u[:, nx + nh:]).sum(axis=1)
        counts += spikes[:, nx + nh:]
        traces.push(spikes, net.basis)
    return out_logp, counts


def evaluate_log_loss(net: GLMNetwork, params: ModelParams, x: np.ndarray, y: np.ndarray,
                      num_samples: int, rng: np.random.Generator) -> float:
    """Negative output log-probability of target raster ``y`` given input raster ``x``.

    Exact when there are no hidden neurons; otherwise the average over
    ``num_samples`` hidden paths drawn from the network itself, which upper
    bounds the marginal log-loss in expectation.
    """
    if num_samples < 1:
        raise ConfigurationError("num_samples must be >= 1")
    reps = 1 if net.topology.num_hidden == 0 else num_samples
    xs = np.broadcast_to(x, (reps,) + x.shape)
    ys = np.broadcast_to(y, (reps,) + y.shape)
    logp, _ = simulate_batch(net, params, xs, rng, ys)
    return float(-logp.mean())


def decode_class(counts: np.ndarray) -> np.ndarray:
    """Argmax over output spike counts; ties go to the lowest index."""
    return np.argmax(np.asarray(counts), axis=-1)


def evaluate_dataset(net: GLMNetwork, params: ModelParams, inputs: np.ndarray, targets: np.ndarray,
                     labels: np.ndarray, num_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean test log-loss and rate-decoded accuracy over a set of examples.

    ``inputs`` is ``(E, N_X, S')`` and ``targets`` ``(E, N_Y, S')``. Accuracy
    uses one free-running pass per example with inputs clamped.
    """
    if len(labels) == 0:
        return float("nan"), float("nan")
    reps = 1 if net.topology.num_hidden == 0 else num_samples
    xs = np.repeat(inputs, reps, axis=0)
    ys = np.repeat(targets, reps, axis=0)
    logp, _ = simulate_batch(net, params, xs, rng, ys)
    loss = float(-logp.mean())
    _, counts = simulate_batch(net, params, inputs, rng, None)
    accuracy = float(np.mean(decode_class(counts) == np.asarray(labels)))
    return loss, accuracy
