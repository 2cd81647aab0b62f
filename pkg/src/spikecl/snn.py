"""Bias-free leaky integrate-and-fire network: forward simulation and tracing.

Networks are plain dense weight stacks with LIF dynamics per non-input
layer and no bias terms anywhere. Classification logits are the per-output-
neuron spike counts over the simulation window, which is also exactly what
the chip's readout registers latch.

``forward`` supports two unit nonlinearities sharing one code path:

* ``spike``   -- hard threshold, binary spike trains (the real model);
* ``relaxed`` -- the surrogate's smooth activation everywhere, making the
  whole network differentiable so gradients can be checked against finite
  differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_bundle, write_bundle
from .errors import ContractViolation
from .numerics import require_finite
from .rng import RngStream

RESET_MODES = ("subtract", "zero")


@dataclass
class LifParams:
    """Leak multiplier per step, spike threshold, and reset behavior."""

    decay: float = 0.9
    threshold: float = 1.0
    reset: str = "subtract"

    def __post_init__(self):
        if not (0.0 < self.decay <= 1.0):
            raise ContractViolation(f"decay must be in (0, 1], got {self.decay}")
        if not (self.threshold > 0.0):
            raise ContractViolation(f"threshold must be > 0, got {self.threshold}")
        if self.reset not in RESET_MODES:
            raise ContractViolation(f"reset must be one of {RESET_MODES}")


@dataclass
class SpikingNetwork:
    """Layered LIF network; weight matrix l connects layer l to layer l+1.

    ``heads`` holds one output weight matrix per task (task-incremental
    mode); when absent, the last entry of ``weights`` feeds the output
    layer directly.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    lif: list[LifParams]
    heads: list[np.ndarray] | None = None
    head_size: int | None = None

    def __post_init__(self):
        expected = len(self.layer_sizes) - 1
        if len(self.weights) != expected:
            raise ContractViolation(
                f"{expected} weight matrices expected for {len(self.layer_sizes)} layers"
            )
        for l, w in enumerate(self.weights):
            want = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if w.shape != want:
                raise ContractViolation(f"weight {l} has shape {w.shape}, want {want}")
        n_lif = expected + (1 if self.heads is not None else 0)
        if len(self.lif) != n_lif:
            raise ContractViolation(f"{n_lif} LIF parameter sets expected, got {len(self.lif)}")
        if self.heads is not None:
            for t, h in enumerate(self.heads):
                if h.shape[0] != self.layer_sizes[-1] or h.shape[1] != self.head_size:
                    raise ContractViolation(f"head {t} has shape {h.shape}")

    @property
    def multi_head(self) -> bool:
        return self.heads is not None

    def n_outputs(self) -> int:
        return self.head_size if self.multi_head else self.layer_sizes[-1]

    def param_names(self) -> list[str]:
        names = [f"w{l}" for l in range(len(self.weights))]
        if self.heads is not None:
            names += [f"head{t}" for t in range(len(self.heads))]
        return names

    def get_param(self, name: str) -> np.ndarray:
        if name.startswith("head"):
            return self.heads[int(name[4:])]
        return self.weights[int(name[1:])]

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name.startswith("head"):
            self.heads[int(name[4:])] = value
        else:
            self.weights[int(name[1:])] = value

    def copy(self) -> "SpikingNetwork":
        return SpikingNetwork(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            lif=[LifParams(p.decay, p.threshold, p.reset) for p in self.lif],
            heads=None if self.heads is None else [h.copy() for h in self.heads],
            head_size=self.head_size,
        )


def init_network(
    layer_sizes: list[int],
    rng: RngStream,
    lif: LifParams | None = None,
    n_heads: int | None = None,
    head_size: int | None = None,
    gain: float = 2.0,
    head_gain: float = 1.0,
) -> SpikingNetwork:
    """Fresh network with normal(0, gain/sqrt(fan_in)) weights, no bias.

    ``head_gain`` additionally scales the classification layer (the heads,
    or the last matrix of a single-head network); a smaller readout init
    avoids a few output units hogging all early spikes.
    """
    lif = lif or LifParams()
    weights = []
    for l in range(len(layer_sizes) - 1):
        scale = gain / np.sqrt(layer_sizes[l])
        if n_heads is None and l == len(layer_sizes) - 2:
            scale *= head_gain
        weights.append(rng.fork(f"init/w{l}").normal((layer_sizes[l], layer_sizes[l + 1])) * scale)
    heads = None
    if n_heads is not None:
        scale = head_gain * gain / np.sqrt(layer_sizes[-1])
        heads = [
            rng.fork(f"init/head{t}").normal((layer_sizes[-1], head_size)) * scale
            for t in range(n_heads)
        ]
    n_lif = len(weights) + (1 if heads is not None else 0)
    lifs = [LifParams(lif.decay, lif.threshold, lif.reset) for _ in range(n_lif)]
    return SpikingNetwork(list(layer_sizes), weights, lifs, heads, head_size)


@dataclass
class ForwardTrace:
    """Everything the backward pass and rate recording need from one forward.

    Per layer (index 0 is the input layer): spikes (B, T, n). For non-input
    layers additionally the pre-reset potentials ``u`` and post-reset
    membrane potentials ``v``.
    """

    spikes: list[np.ndarray]
    pre_reset: list[np.ndarray]
    potentials: list[np.ndarray]
    task: int | None
    gates: list[np.ndarray] | None
    mode: str
    batched: bool

    @property
    def timesteps(self) -> int:
        return self.spikes[0].shape[1]


def lif_step(state: np.ndarray, input_current: np.ndarray, p: LifParams):
    """One LIF update: leak, integrate, threshold, reset.

    Returns ``(new_state, spikes)`` where spikes are 0/1 floats.
    """
    state = np.asarray(state, dtype=np.float64)
    input_current = np.asarray(input_current, dtype=np.float64)
    if state.shape != input_current.shape:
        raise ContractViolation("state and input current shapes differ")
    require_finite(input_current, "input current")
    u = p.decay * state + input_current
    spikes = (u >= p.threshold).astype(np.float64)
    if p.reset == "subtract":
        v = u - p.threshold * spikes
    else:
        v = u * (1.0 - spikes)
    return v, spikes


def _layer_dynamics(currents: np.ndarray, p: LifParams, mode: str, surrogate):
    """Run the membrane recurrence over time for one layer.

    ``currents`` is (B, T, n). Returns (spikes, pre_reset, potentials),
    each (B, T, n). In relaxed mode the hard threshold is replaced by the
    surrogate's smooth activation (and reset uses that real-valued output).
    """
    B, T, n = currents.shape
    s_all = np.empty_like(currents)
    u_all = np.empty_like(currents)
    v_all = np.empty_like(currents)
    v = np.zeros((B, n))
    for t in range(T):
        u = p.decay * v + currents[:, t, :]
        if mode == "spike":
            s = (u >= p.threshold).astype(np.float64)
        else:
            s = surrogate.relaxed_activation(u - p.threshold)
        if p.reset == "subtract":
            v = u - p.threshold * s
        else:
            v = u * (1.0 - s)
        u_all[:, t, :] = u
        s_all[:, t, :] = s
        v_all[:, t, :] = v
    return s_all, u_all, v_all


def forward(
    net: SpikingNetwork,
    input_spikes: np.ndarray,
    task: int | None = None,
    gates: list[np.ndarray] | None = None,
    mode: str = "spike",
    surrogate=None,
) -> tuple[ForwardTrace, np.ndarray]:
    """Simulate the network over T steps; logits are output spike counts.

    ``input_spikes`` is (T, n_in) for one sample or (B, T, n_in) for a
    batch. ``gates`` optionally silences hidden units (one 0/1 vector per
    hidden layer, multiplied into that layer's input current). Multi-head
    networks require ``task``. Read-only on the network.
    """
    x = np.asarray(input_spikes, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        if x.ndim != 2:
            raise ContractViolation(f"input must be (T, n) or (B, T, n), got {x.shape}")
        x = x[None, :, :]
    if x.shape[2] != net.layer_sizes[0]:
        raise ContractViolation(
            f"input width {x.shape[2]} != input layer size {net.layer_sizes[0]}"
        )
    if mode == "spike":
        if not np.all((x == 0.0) | (x == 1.0)):
            raise ContractViolation("input spikes must be binary")
    elif mode != "relaxed":
        raise ContractViolation(f"unknown mode {mode!r}")
    if mode == "relaxed" and surrogate is None:
        raise ContractViolation("relaxed mode requires a surrogate spec")
    if net.multi_head:
        if task is None:
            raise ContractViolation("multi-head network requires a task id")
        if not (0 <= task < len(net.heads)):
            raise ContractViolation(f"task {task} out of range")

    matrices = list(net.weights)
    if net.multi_head:
        matrices.append(net.heads[task])
    n_hidden = len(matrices) - 1
    if gates is not None and len(gates) != n_hidden:
        raise ContractViolation(f"{n_hidden} gate vectors expected, got {len(gates)}")

    B, T, _ = x.shape
    spikes = [x]
    pre_reset: list[np.ndarray] = []
    potentials: list[np.ndarray] = []
    for l, w in enumerate(matrices):
        prev = spikes[-1]
        cur = prev.reshape(B * T, -1) @ w
        cur = cur.reshape(B, T, -1)
        if gates is not None and l < n_hidden:
            cur = cur * gates[l]
        s, u, v = _layer_dynamics(cur, net.lif[l], mode, surrogate)
        spikes.append(s)
        pre_reset.append(u)
        potentials.append(v)
    logits = spikes[-1].sum(axis=1)
    trace = ForwardTrace(spikes, pre_reset, potentials, task, gates, mode, batched)
    if not batched:
        logits = logits[0]
    return trace, logits


@dataclass
class FiringRates:
    """Per-layer firing rates f_i = spike count / T, one row per sample."""

    rates: list[np.ndarray] = field(default_factory=list)


def record_firing_rates(trace: ForwardTrace) -> FiringRates:
    """Mean spike rate per neuron over the window, for every layer.

    Layer 0 is the input layer, so adjacent entries line up with the weight
    matrix between them.
    """
    if not trace.spikes or trace.timesteps == 0:
        raise ContractViolation("empty trace")
    return FiringRates([s.mean(axis=1) for s in trace.spikes])


def save_network(path, net: SpikingNetwork) -> None:
    """Write a checkpoint (format: versioned bundle, layout in container.py)."""
    meta = {
        "kind": "network-checkpoint",
        "version": 1,
        "layer_sizes": [int(s) for s in net.layer_sizes],
        "lif": [[p.decay, p.threshold, p.reset] for p in net.lif],
        "n_heads": 0 if net.heads is None else len(net.heads),
        "head_size": net.head_size,
    }
    arrays = {f"w{l}": w for l, w in enumerate(net.weights)}
    if net.heads is not None:
        arrays.update({f"head{t}": h for t, h in enumerate(net.heads)})
    write_bundle(path, meta, arrays)


def load_network(path) -> SpikingNetwork:
    meta, arrays = read_bundle(path)
    if meta.get("kind") != "network-checkpoint":
        raise ContractViolation(f"not a network checkpoint: {meta.get('kind')!r}")
    n_heads = meta["n_heads"]
    weights = [arrays[f"w{l}"] for l in range(len(meta["layer_sizes"]) - 1)]
    heads = [arrays[f"head{t}"] for t in range(n_heads)] if n_heads else None
    lifs = [LifParams(decay, thr, reset) for decay, thr, reset in meta["lif"]]
    return SpikingNetwork(meta["layer_sizes"], weights, lifs, heads, meta["head_size"])
