"""Simulated internal neuromorphic processing unit and the mentor-learner loop.

The chip holds quantized integer weights and runs integer LIF dynamics:
leak by arithmetic right shift, integer accumulation, threshold compare,
reset. Interaction follows a strict handshake -- upload a config image, push
one input, wait for the interrupt, read spike-count registers layer by
layer (reading the last layer clears the interrupt) -- and any call out of
order raises a protocol error without touching chip state.

Training couples three predictions of the same topology: the full-precision
external network, the chip's register readout, and a float "twin" of the
quantized chip evaluated externally. Only the external and twin paths carry
gradients; the chip readout enters the loss as a constant. After each epoch
the freshly trained weights are re-quantized and uploaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import parse_bundle, serialize_bundle
from .errors import (
    ConstraintViolation,
    ContractViolation,
    ProtocolError,
)
from .numerics import cross_entropy_grad, require_finite, softmax_cross_entropy_batch
from .snn import LifParams, SpikingNetwork, forward
from .train import LossSpec, OptimizerState, SurrogateSpec, backward_dlogits, optimizer_step

QUANT_BITS = (4, 8, 16)


@dataclass
class QuantSpec:
    """Symmetric per-layer weight quantization plus the chip's leak shift."""

    bits: int = 8
    leak_shift: int = 3  # decay = 1 - 2**-shift
    scale_override: list[float] | None = None

    def __post_init__(self):
        if self.bits not in QUANT_BITS:
            raise ContractViolation(f"bits must be one of {QUANT_BITS}")
        if self.leak_shift < 0:
            raise ContractViolation("leak_shift must be >= 0")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass
class ChipConstraints:
    """Hardware budget the simulator enforces on upload."""

    max_classes: int = 16
    max_layers: int = 9
    max_neurons_per_layer: int = 1024
    max_synapses_per_layer: int = 262144


@dataclass
class ConfigImage:
    """Serialized register and weight-memory contents for one network."""

    layer_sizes: list[int]
    quantized: list[np.ndarray]  # int64 matrices
    scales: list[float]
    thresholds: list[int]
    leak_shift: int
    bits: int
    reset: str
    version: int = 1

    def network_shape(self) -> list[int]:
        return list(self.layer_sizes)


def serialize_image(image: ConfigImage) -> bytes:
    meta = {
        "kind": "chip-config",
        "version": image.version,
        "layer_sizes": [int(s) for s in image.layer_sizes],
        "scales": [float(s) for s in image.scales],
        "thresholds": [int(t) for t in image.thresholds],
        "leak_shift": int(image.leak_shift),
        "bits": int(image.bits),
        "reset": image.reset,
    }
    arrays = {f"q{l}": q for l, q in enumerate(image.quantized)}
    return serialize_bundle(meta, arrays)


def parse_image(data: bytes) -> ConfigImage:
    meta, arrays = parse_bundle(data)
    if meta.get("kind") != "chip-config":
        raise ContractViolation(f"not a chip config image: {meta.get('kind')!r}")
    n = len(meta["layer_sizes"]) - 1
    return ConfigImage(
        layer_sizes=meta["layer_sizes"],
        quantized=[arrays[f"q{l}"] for l in range(n)],
        scales=meta["scales"],
        thresholds=meta["thresholds"],
        leak_shift=meta["leak_shift"],
        bits=meta["bits"],
        reset=meta["reset"],
        version=meta["version"],
    )


def flatten_for_chip(net: SpikingNetwork, task: int | None = None) -> tuple[list[int], list[np.ndarray], list[LifParams]]:
    """Single-head view of a network: trunk plus the active task's head."""
    sizes = list(net.layer_sizes)
    mats = [w for w in net.weights]
    lifs = list(net.lif)
    if net.multi_head:
        if task is None:
            raise ContractViolation("multi-head network requires a task id for the chip")
        mats = mats + [net.heads[task]]
        sizes = sizes + [net.head_size]
    return sizes, mats, lifs


def quantize_network(
    net: SpikingNetwork,
    spec: QuantSpec,
    task: int | None = None,
) -> ConfigImage:
    """Symmetric per-layer quantization q = clamp(round(w / scale)).

    The default scale max|w| / qmax maps the largest weight onto the signed
    range; an all-zero layer degenerates to scale 1. Thresholds are scaled
    by the same factor so spike behavior is unchanged in exact arithmetic
    (then rounded to at least one integer unit).
    """
    sizes, mats, lifs = flatten_for_chip(net, task)
    quantized, scales, thresholds = [], [], []
    for w, p in zip(mats, lifs):
        require_finite(w, "weights")
        if spec.scale_override is not None:
            scale = spec.scale_override[len(scales)]
        else:
            peak = float(np.abs(w).max())
            scale = peak / spec.qmax if peak > 0.0 else 1.0
        q = np.clip(np.rint(w / scale), -spec.qmax, spec.qmax).astype(np.int64)
        quantized.append(q)
        scales.append(scale)
        thresholds.append(max(1, int(np.rint(p.threshold / scale))))
    reset = lifs[0].reset
    return ConfigImage(sizes, quantized, scales, thresholds, spec.leak_shift, spec.bits, reset)


def dequantize_to_network(image: ConfigImage) -> SpikingNetwork:
    """Float twin of a config image: dequantized weights, shift-equivalent
    leak, and rescaled thresholds. This is the surrogate-differentiable
    stand-in for the chip."""
    decay = 1.0 - 2.0 ** -image.leak_shift
    weights = [q.astype(np.float64) * s for q, s in zip(image.quantized, image.scales)]
    lifs = [
        LifParams(decay=decay, threshold=float(t) * s, reset=image.reset)
        for t, s in zip(image.thresholds, image.scales)
    ]
    return SpikingNetwork(list(image.layer_sizes), weights, lifs, None, None)


def validate_constraints(
    subject: SpikingNetwork | ConfigImage,
    constraints: ChipConstraints | None = None,
    extra_arrays: dict | None = None,
) -> list[str]:
    """Check the class cap, layer budget, per-layer memory, and bias absence.

    Returns a list of human-readable violations (empty means ok).
    """
    c = constraints or ChipConstraints()
    violations = []
    if isinstance(subject, SpikingNetwork):
        sizes = list(subject.layer_sizes)
        if subject.multi_head:
            sizes = sizes + [subject.head_size]
        mats = [w.shape for w in subject.weights]
        if subject.multi_head:
            mats = mats + [subject.heads[0].shape]
    else:
        sizes = subject.network_shape()
        mats = [q.shape for q in subject.quantized]
    if sizes[-1] > c.max_classes:
        violations.append(f"output classes {sizes[-1]} exceed cap {c.max_classes}")
    if len(mats) > c.max_layers:
        violations.append(f"{len(mats)} computing layers exceed cap {c.max_layers}")
    for l, shape in enumerate(mats):
        if sizes[l + 1] > c.max_neurons_per_layer:
            violations.append(
                f"layer {l} has {sizes[l + 1]} neurons, cap {c.max_neurons_per_layer}"
            )
        if shape[0] * shape[1] > c.max_synapses_per_layer:
            violations.append(
                f"layer {l} has {shape[0] * shape[1]} synapses, cap {c.max_synapses_per_layer}"
            )
    # networks built here are bias-free by construction; foreign images may
    # carry a bias section, which the chip has no storage for
    if extra_arrays:
        for name in extra_arrays:
            if "bias" in name.lower():
                violations.append(f"bias storage requested ({name}); chip has none")
    return violations


def _integer_layer_counts(
    image: ConfigImage, input_spikes: np.ndarray
) -> list[np.ndarray]:
    """Integer LIF pass over all layers; per-layer spike counts (B, n).

    ``input_spikes`` is (B, T, n_in) or (T, n_in) with 0/1 entries. This is
    the single integer core backing both the protocol machine and batched
    twin evaluation.
    """
    x = np.asarray(input_spikes)
    if x.ndim == 2:
        x = x[None]
    if not np.all((x == 0) | (x == 1)):
        raise ContractViolation("chip input spikes must be binary")
    spikes = x.astype(np.int64)
    B, T, _ = spikes.shape
    shift = image.leak_shift
    counts = []
    for q, thr in zip(image.quantized, image.thresholds):
        cur = spikes.reshape(B * T, -1) @ q
        cur = cur.reshape(B, T, -1)
        v = np.zeros((B, q.shape[1]), dtype=np.int64)
        out = np.empty_like(cur)
        for t in range(T):
            v = v - (v >> shift) + cur[:, t, :]
            s = v >= thr
            if image.reset == "subtract":
                v = v - thr * s
            else:
                v = v * ~s
            out[:, t, :] = s
        spikes = out
        counts.append(out.sum(axis=1))
    return counts


def chip_twin_counts(image: ConfigImage, input_spikes: np.ndarray) -> np.ndarray:
    """Final-layer spike counts of the externally evaluated quantized twin."""
    return _integer_layer_counts(image, input_spikes)[-1]


@dataclass
class ChipModel:
    """Stateful protocol machine over the integer core.

    Readout registers hold per-layer spike counts of the last processed
    input and change only between interrupt assertions.
    """

    constraints: ChipConstraints = field(default_factory=ChipConstraints)
    image: ConfigImage | None = None
    readout: list[np.ndarray] = field(default_factory=list)
    interrupt: bool = False
    membranes: list[np.ndarray] = field(default_factory=list)

    @property
    def configured(self) -> bool:
        return self.image is not None


def upload_config(chip: ChipModel, data: bytes | ConfigImage) -> ChipModel:
    """Install a config image: memories overwritten, neuron state zeroed,
    interrupt cleared. On any failure the chip is left unchanged."""
    image = parse_image(data) if isinstance(data, (bytes, bytearray)) else data
    violations = validate_constraints(image, chip.constraints)
    if violations:
        raise ConstraintViolation("; ".join(violations))
    chip.image = image
    chip.membranes = [np.zeros(q.shape[1], dtype=np.int64) for q in image.quantized]
    chip.readout = [np.zeros(q.shape[1], dtype=np.int64) for q in image.quantized]
    chip.interrupt = False
    return chip


def chip_forward(chip: ChipModel, input_spikes: np.ndarray, timesteps: int | None = None) -> None:
    """Process one input: fills the readout registers and asserts the interrupt."""
    if not chip.configured:
        raise ProtocolError("forward before any config upload")
    if chip.interrupt:
        raise ProtocolError("forward while a readout is pending")
    x = np.asarray(input_spikes)
    if x.ndim != 2:
        raise ProtocolError("chip takes one input at a time (T, n_in)")
    if timesteps is not None and x.shape[0] != timesteps:
        raise ContractViolation(f"input has {x.shape[0]} steps, expected {timesteps}")
    counts = _integer_layer_counts(chip.image, x)
    chip.readout = [c[0] for c in counts]
    chip.membranes = [np.zeros_like(m) for m in chip.membranes]  # stateless per input
    chip.interrupt = True


def read_layer_spikes(chip: ChipModel, layer: int) -> np.ndarray:
    """Latched spike counts for one layer; reading the final layer clears
    the interrupt, re-arming the chip for the next input."""
    if not chip.configured:
        raise ProtocolError("read before any config upload")
    if not chip.interrupt:
        raise ProtocolError("read without a pending interrupt")
    if not (0 <= layer < len(chip.readout)):
        raise ContractViolation(f"layer index {layer} out of range")
    out = chip.readout[layer].copy()
    if layer == len(chip.readout) - 1:
        chip.interrupt = False
    return out


# ---------------------------------------------------------------------------
# Optional framed byte transport (see docs/protocol.md for the bit layout)

FRAME_SOF = 0xA5
CMD_CONFIG_CHUNK = 0x01
_FRAME_PAYLOAD_MAX = 4096


def encode_frames(payload: bytes, cmd: int = CMD_CONFIG_CHUNK) -> list[bytes]:
    """Split a payload into checksummed frames:
    SOF, cmd, u32 offset, u16 length, bytes, u32 crc32(frame body)."""
    import struct as _struct
    import zlib as _zlib

    frames = []
    for off in range(0, len(payload), _FRAME_PAYLOAD_MAX):
        chunk = payload[off : off + _FRAME_PAYLOAD_MAX]
        body = bytes([FRAME_SOF, cmd]) + _struct.pack("<IH", off, len(chunk)) + chunk
        frames.append(body + _struct.pack("<I", _zlib.crc32(body)))
    return frames


def decode_frames(frames: list[bytes]) -> bytes:
    """Reassemble framed chunks, verifying structure and checksums."""
    import struct as _struct
    import zlib as _zlib

    from .errors import TransportError

    parts: dict[int, bytes] = {}
    for frame in frames:
        if len(frame) < 12 or frame[0] != FRAME_SOF:
            raise TransportError("malformed frame")
        body, crc = frame[:-4], _struct.unpack("<I", frame[-4:])[0]
        if _zlib.crc32(body) != crc:
            raise TransportError("frame checksum mismatch")
        off, length = _struct.unpack("<IH", body[2:8])
        chunk = body[8:]
        if len(chunk) != length:
            raise TransportError("frame length mismatch")
        parts[off] = chunk
    out = bytearray()
    for off in sorted(parts):
        if off != len(out):
            raise TransportError("missing frame")
        out += parts[off]
    return bytes(out)


# ---------------------------------------------------------------------------
# Mentor-learner training loop


@dataclass
class MentorState:
    """External full-precision network plus the chip-side bookkeeping."""

    net: SpikingNetwork
    optimizer: OptimizerState
    surrogate: SurrogateSpec
    loss_spec: LossSpec
    quant_spec: QuantSpec
    task: int | None = None  # active head in multi-head mode
    epoch: int = 0
    upload_per_batch: bool = False
    twin_image: ConfigImage | None = None

    def refresh_twin(self) -> ConfigImage:
        self.twin_image = quantize_network(self.net, self.quant_spec, self.task)
        return self.twin_image


def _chip_readout_batch(chip: ChipModel, x_enc: np.ndarray) -> np.ndarray:
    """Run the full handshake per sample; returns final-layer counts (B, K)."""
    outs = []
    for i in range(x_enc.shape[0]):
        chip_forward(chip, x_enc[i])
        for l in range(len(chip.readout)):  # layer-by-layer readout
            counts = read_layer_spikes(chip, l)
        outs.append(counts)
    return np.stack(outs).astype(np.float64)


def mentor_learner_epoch(
    state: MentorState,
    chip: ChipModel,
    batches,
    strategy=None,
    ctx=None,
) -> dict:
    """One epoch of coupled training over ``batches`` of (x_enc, labels).

    Per batch: chip handshake for the readout prediction, external forward,
    simulated-twin forward, composite loss, backprop through the external
    and twin paths (the chip readout is a constant), strategy hooks,
    optimizer step. The simulated twin is re-quantized from the current
    weights every batch (it lives on the external processor, so tracking is
    free and the rounding is crossed straight-through); the physical chip
    only receives a fresh config at epoch end (or per batch behind the
    flag). With mu = 0 the chip and twin are never touched.
    """
    spec = state.loss_spec
    chip_in_loop = spec.mu != 0.0
    if chip_in_loop and state.twin_image is None:
        state.refresh_twin()
        upload_config(chip, state.twin_image)

    total_loss = 0.0
    n_batches = 0
    for item in batches:
        x_enc, labels, *rest = item
        gates = rest[0] if rest else None  # external-net-only (e.g. dropout)
        labels = np.asarray(labels, dtype=np.int64)
        trace_e, logits_e = forward(state.net, x_enc, task=state.task, gates=gates)
        ce_e, probs_e = softmax_cross_entropy_batch(np.atleast_2d(logits_e), labels)
        grads: dict[str, np.ndarray] = {}
        for name, g in backward_dlogits(
            state.net, trace_e, spec.lam * cross_entropy_grad(probs_e, labels), state.surrogate
        ).items():
            grads[name] = g
        loss = spec.lam * ce_e

        if chip_in_loop:
            y_inn = _chip_readout_batch(chip, x_enc)
            ce_inn, _ = softmax_cross_entropy_batch(y_inn, labels)
            sim_net = dequantize_to_network(
                quantize_network(state.net, state.quant_spec, state.task)
            )
            trace_s, logits_s = forward(sim_net, x_enc)
            ce_s, probs_s = softmax_cross_entropy_batch(np.atleast_2d(logits_s), labels)
            loss += spec.mu * (spec.alpha * ce_inn + spec.beta * ce_s)
            if spec.beta != 0.0:
                dlog_s = spec.mu * spec.beta * cross_entropy_grad(probs_s, labels)
                twin_grads = backward_dlogits(sim_net, trace_s, dlog_s, state.surrogate)
                # straight-through: twin gradients drive the external weights
                for l, name in enumerate(f"w{i}" for i in range(len(sim_net.weights))):
                    ext_name = name
                    if state.net.multi_head and l == len(sim_net.weights) - 1:
                        ext_name = f"head{state.task}"
                    grads[ext_name] = grads.get(ext_name, 0.0) + twin_grads[name]

        if strategy is not None and ctx is not None:
            extra_loss, extra_grads = strategy.batch_loss(
                ctx, state.net, x_enc, labels, trace_e, logits_e
            )
            loss += extra_loss
            if extra_grads:
                for name, g in extra_grads.items():
                    grads[name] = grads.get(name, 0.0) + g
            grads = strategy.grad_transform(ctx, state.net, grads)
        optimizer_step(state.optimizer, state.net, grads)
        total_loss += loss
        n_batches += 1

        if chip_in_loop and state.upload_per_batch:
            state.refresh_twin()
            upload_config(chip, state.twin_image)

    if chip_in_loop and not state.upload_per_batch:
        state.refresh_twin()
        upload_config(chip, state.twin_image)
    state.epoch += 1
    return {"mean_loss": total_loss / max(n_batches, 1), "batches": n_batches}
