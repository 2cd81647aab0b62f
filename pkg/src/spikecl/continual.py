"""Incremental-learning strategies behind one hook interface.

The consolidation method works on coincidence statistics: while a task is
learned, each synapse accumulates the product of its pre- and post-synaptic
firing rates, averaged over training samples. The running elementwise
maximum of those per-task statistics yields a plasticity potential per
synapse -- continuous (``soft``: P = 1 - max) or thresholded binary
(``hard``) -- which multiplies every raw gradient update. Synapses that
fired together for an earlier task stop moving; the rest stay free to learn.

Baselines (EWC, SI, LwF, XdG) and the none/joint reference modes expose the
same four training-loop hooks: before_task, batch_loss, grad_transform,
after_task. On the first task every strategy except XdG is a bit-exact
no-op relative to ``none``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import write_bundle
from .errors import ConfigurationError, ContractViolation
from .numerics import matmul
from .rng import RngStream
from .snn import SpikingNetwork, forward, record_firing_rates
from .train import SurrogateSpec, backward, backward_dlogits, distillation_grad, distillation_loss

STRATEGIES = ("none", "joint", "hwc-soft", "hwc-hard", "ewc", "si", "lwf", "xdg")


@dataclass
class TaskContext:
    """Position inside an incremental run: current task, scenario, epoch."""

    task: int
    total_tasks: int
    scenario: str = "task-incremental"
    epoch: int = 0
    total_epochs: int = 1

    def __post_init__(self):
        if not (1 <= self.task <= self.total_tasks):
            raise ContractViolation(f"task {self.task} outside 1..{self.total_tasks}")

    @property
    def is_final_epoch(self) -> bool:
        return self.epoch == self.total_epochs - 1


# ---------------------------------------------------------------------------
# Hebbian consolidation primitives


class HebbianAccumulator:
    """Per-synapse running sum of pre*post firing-rate products for one task."""

    def __init__(self, shape: tuple[int, int]):
        self.sums = np.zeros(shape)
        self.count = 0


def accumulate_hebbian(acc: HebbianAccumulator, pre_rates: np.ndarray, post_rates: np.ndarray) -> HebbianAccumulator:
    """Add sample contributions f_pre (x) f_post to the accumulator.

    Accepts one sample (vectors) or a batch (B, m) / (B, n); the batched
    path sums samples in index order, bit-identical to adding them one by
    one. ``finalize_hebbian`` divides by the sample count afterwards.
    """
    pre = np.asarray(pre_rates, dtype=np.float64)
    post = np.asarray(post_rates, dtype=np.float64)
    if pre.ndim == 1:
        pre = pre[None, :]
        post = post[None, :]
    for r in (pre, post):
        if np.any(r < 0.0) or np.any(r > 1.0):
            raise ContractViolation("firing rates must lie in [0, 1]")
    if pre.shape[0] != post.shape[0] or (pre.shape[1], post.shape[1]) != acc.sums.shape:
        raise ContractViolation("rate shapes do not match the synapse matrix")
    acc.sums += matmul(pre.T, post)
    acc.count += pre.shape[0]
    return acc


def finalize_hebbian(acc: HebbianAccumulator) -> np.ndarray:
    """Mean coincidence H = sums / N, guaranteed inside [0, 1]."""
    if acc.count == 0:
        raise ContractViolation("no samples accumulated")
    return acc.sums / acc.count


@dataclass
class HebbianStore:
    """Elementwise maximum of per-task coincidence statistics over completed
    tasks, keyed like network parameters. Optionally keeps per-task
    snapshots (equivalent information; the max is what gating uses)."""

    h_max: dict[str, np.ndarray] = field(default_factory=dict)
    tasks_completed: int = 0
    keep_snapshots: bool = False
    snapshots: list[dict[str, np.ndarray]] = field(default_factory=list)


def finalize_task(store: HebbianStore, h_tau: dict[str, np.ndarray]) -> HebbianStore:
    """Fold one completed task's statistics into the running maximum."""
    for name, h in h_tau.items():
        if np.any(h < 0.0) or np.any(h > 1.0):
            raise ContractViolation(f"H values for {name} outside [0, 1]")
        if name in store.h_max:
            if store.h_max[name].shape != h.shape:
                raise ContractViolation(f"shape mismatch for {name}")
            store.h_max[name] = np.maximum(store.h_max[name], h)
        else:
            store.h_max[name] = h.copy()
    if store.keep_snapshots:
        store.snapshots.append({k: v.copy() for k, v in h_tau.items()})
    store.tasks_completed += 1
    return store


@dataclass
class PotentialMask:
    """Plasticity potential per synapse: multiplies raw gradient updates."""

    mode: str
    values: dict[str, np.ndarray]
    threshold: float | None = None


def potential(store: HebbianStore, mode: str, threshold: float | None = None) -> PotentialMask:
    """P = 1 - max(H) (soft) or P = 1 - g(max(H)) (hard).

    Hard mode's gate g(x) is 0 for x <= threshold and 1 above it, so a
    statistic exactly at the threshold stays plastic.
    """
    if store.tasks_completed < 1:
        raise ContractViolation("potential requires at least one completed task")
    if mode not in ("soft", "hard"):
        raise ContractViolation(f"unknown potential mode {mode!r}")
    if mode == "hard":
        if threshold is None or not (0.0 < threshold < 1.0):
            raise ContractViolation("hard mode requires a threshold in (0, 1)")
        values = {k: (h <= threshold).astype(np.float64) for k, h in store.h_max.items()}
    else:
        values = {k: 1.0 - h for k, h in store.h_max.items()}
    return PotentialMask(mode, values, threshold)


def gate_update(grads: dict[str, np.ndarray], mask: PotentialMask) -> dict[str, np.ndarray]:
    """Elementwise product of raw gradients with the potential mask."""
    out = {}
    for name, g in grads.items():
        p = mask.values.get(name)
        if p is None:
            out[name] = g
        else:
            if p.shape != g.shape:
                raise ContractViolation(f"mask shape mismatch for {name}")
            out[name] = g * p
    return out


def write_mask_dump(path, mask: PotentialMask) -> None:
    """Persist a potential mask for post-hoc analysis (bundle container)."""
    meta = {"kind": "potential-mask", "version": 1, "mode": mask.mode, "threshold": mask.threshold}
    write_bundle(path, meta, mask.values)


# ---------------------------------------------------------------------------
# Baseline primitives


def ewc_fisher(
    net: SpikingNetwork,
    examples,
    surrogate: SurrogateSpec,
    task: int | None = None,
    gates: list[np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Diagonal Fisher estimate: mean squared log-likelihood gradient.

    ``examples`` yields (spike_train, label) pairs; gradients are taken one
    sample at a time at the true label.
    """
    sums: dict[str, np.ndarray] = {}
    n = 0
    for spikes, label in examples:
        trace, logits = forward(net, spikes, task=task, gates=gates)
        grads = backward(net, trace, logits, int(label), surrogate)
        for name, g in grads.items():
            if name not in sums:
                sums[name] = np.zeros_like(g)
            sums[name] += g * g
        n += 1
    if n == 0:
        raise ContractViolation("fisher estimation needs at least one example")
    return {name: s / n for name, s in sums.items()}


def regularizer_penalty(
    importances: dict[str, np.ndarray],
    anchors: dict[str, np.ndarray],
    net: SpikingNetwork,
    strength: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """(strength/2) * sum importance * (theta - anchor)^2, with gradients."""
    if not importances:
        raise ContractViolation("importance store is empty")
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, imp in importances.items():
        diff = net.get_param(name) - anchors[name]
        loss += 0.5 * strength * float((imp * diff * diff).sum())
        grads[name] = strength * imp * diff
    return loss, grads


def si_update_omega(
    w_acc: dict[str, np.ndarray],
    drift: dict[str, np.ndarray],
    damping: float,
) -> dict[str, np.ndarray]:
    """Per-parameter importance from the path integral of one task.

    w_acc holds the accrued -gradient * step products; drift is the total
    parameter movement over the task. Contributions are clamped at zero so
    importances stay nonnegative.
    """
    out = {}
    for name, w in w_acc.items():
        out[name] = np.maximum(w, 0.0) / (drift[name] * drift[name] + damping)
    return out


def xdg_gates(
    hidden_sizes: list[int],
    task_id: int,
    fraction: float,
    seed: int,
) -> list[np.ndarray]:
    """Deterministic per-task binary unit gates keeping ceil(fraction*n) units."""
    if not (0.0 < fraction < 1.0):
        raise ContractViolation("fraction must be in (0, 1)")
    gates = []
    for layer_idx, n in enumerate(hidden_sizes):
        stream = RngStream(seed).fork(f"xdg/task{task_id}/layer{layer_idx}")
        keep = int(np.ceil(fraction * n))
        order = stream.permutation(n)
        g = np.zeros(n)
        g[order[:keep]] = 1.0
        gates.append(g)
    return gates


# ---------------------------------------------------------------------------
# Strategy objects


@dataclass
class StrategyConfig:
    name: str = "none"
    hwc_threshold_rel: float = 0.03
    hwc_threshold_abs: float | None = None
    hwc_keep_snapshots: bool = False
    ewc_strength: float = 5000.0
    ewc_fisher_samples: int = 200
    si_strength: float = 0.1
    si_damping: float = 0.1
    xdg_fraction: float = 0.8
    lwf_strength: float = 1.0
    lwf_temperature: float = 2.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.name!r}; expected one of {STRATEGIES}"
            )


class Strategy:
    """Identity hooks; base for every strategy and the ``none``/``joint`` modes."""

    pooled = False

    def __init__(self, cfg: StrategyConfig, scenario: str, seed: int, surrogate: SurrogateSpec):
        self.cfg = cfg
        self.scenario = scenario
        self.seed = seed
        self.surrogate = surrogate

    # -- the four loop hooks -------------------------------------------------
    def before_task(self, ctx: TaskContext, net: SpikingNetwork) -> None:
        pass

    def batch_loss(self, ctx, net, x_enc, labels, trace, logits):
        """Extra loss term and its gradients, or (0.0, None)."""
        return 0.0, None

    def grad_transform(self, ctx, net, grads):
        return grads

    def after_task(self, ctx, net, sample_provider=None) -> None:
        pass

    # -- gating queries (test-time behavior is part of the strategy) ---------
    def train_gates(self, ctx: TaskContext, net: SpikingNetwork):
        return None

    def eval_gates(self, eval_task: int, trained_task: int, net: SpikingNetwork):
        return None

    def consolidated_names(self, net: SpikingNetwork) -> list[str]:
        """Parameters subject to consolidation: every trunk matrix. Per-task
        heads are exempt (each serves exactly one task); the shared head of
        a single-head network is a trunk matrix and thus included."""
        return [f"w{l}" for l in range(len(net.weights))]


class JointStrategy(Strategy):
    pooled = True


class HwcStrategy(Strategy):
    """Coincidence-gated plasticity in soft or hard masking mode."""

    def __init__(self, cfg, scenario, seed, surrogate):
        super().__init__(cfg, scenario, seed, surrogate)
        self.mode = "hard" if cfg.name == "hwc-hard" else "soft"
        self.store = HebbianStore(keep_snapshots=cfg.hwc_keep_snapshots)
        self.mask: PotentialMask | None = None
        self._acc: dict[str, HebbianAccumulator] = {}

    def current_threshold(self) -> float | None:
        if self.mode != "hard":
            return None
        if self.cfg.hwc_threshold_abs is not None:
            return self.cfg.hwc_threshold_abs
        peak = max((float(h.max()) for h in self.store.h_max.values()), default=0.0)
        return self.cfg.hwc_threshold_rel * peak

    def before_task(self, ctx, net):
        self.mask = None
        if self.store.tasks_completed >= 1:
            thr = self.current_threshold()
            if self.mode == "hard" and (thr is None or thr <= 0.0):
                self.mask = None  # nothing consolidated yet (all-silent history)
            else:
                self.mask = potential(self.store, self.mode, thr)
        self._acc = {
            name: HebbianAccumulator(net.get_param(name).shape)
            for name in self.consolidated_names(net)
        }

    def batch_loss(self, ctx, net, x_enc, labels, trace, logits):
        if ctx.is_final_epoch:
            rates = record_firing_rates(trace).rates
            for name, acc in self._acc.items():
                l = int(name[1:])
                accumulate_hebbian(acc, rates[l], rates[l + 1])
        return 0.0, None

    def grad_transform(self, ctx, net, grads):
        if self.mask is None:
            return grads
        return gate_update(grads, self.mask)

    def after_task(self, ctx, net, sample_provider=None):
        h_tau = {name: finalize_hebbian(acc) for name, acc in self._acc.items()}
        finalize_task(self.store, h_tau)


class EwcStrategy(Strategy):
    def __init__(self, cfg, scenario, seed, surrogate):
        super().__init__(cfg, scenario, seed, surrogate)
        self.tasks: list[tuple[dict, dict]] = []  # (fisher, anchor) per task

    def batch_loss(self, ctx, net, x_enc, labels, trace, logits):
        if not self.tasks:
            return 0.0, None
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        for fisher, anchor in self.tasks:
            loss, g = regularizer_penalty(fisher, anchor, net, self.cfg.ewc_strength)
            total += loss
            for name, arr in g.items():
                grads[name] = grads.get(name, 0.0) + arr
        return total, grads

    def after_task(self, ctx, net, sample_provider=None):
        if sample_provider is None:
            raise ContractViolation("EWC needs task samples to estimate importances")
        keep = set(self.consolidated_names(net))
        fisher = ewc_fisher(
            net,
            sample_provider(self.cfg.ewc_fisher_samples),
            self.surrogate,
            task=ctx.task - 1 if net.multi_head else None,
        )
        fisher = {k: v for k, v in fisher.items() if k in keep}
        anchor = {k: net.get_param(k).copy() for k in fisher}
        self.tasks.append((fisher, anchor))


class SiStrategy(Strategy):
    def __init__(self, cfg, scenario, seed, surrogate):
        super().__init__(cfg, scenario, seed, surrogate)
        self.omega: dict[str, np.ndarray] = {}
        self.anchor: dict[str, np.ndarray] = {}
        self._w_acc: dict[str, np.ndarray] = {}
        self._theta_start: dict[str, np.ndarray] = {}
        self._pending: tuple[dict, dict] | None = None

    def before_task(self, ctx, net):
        names = self.consolidated_names(net)
        self._theta_start = {k: net.get_param(k).copy() for k in names}
        self._w_acc = {k: np.zeros_like(net.get_param(k)) for k in names}
        self._pending = None

    def batch_loss(self, ctx, net, x_enc, labels, trace, logits):
        if not self.omega:
            return 0.0, None
        return regularizer_penalty(self.omega, self.anchor, net, self.cfg.si_strength)

    def _flush(self, net):
        if self._pending is None:
            return
        theta_prev, grads_prev = self._pending
        for name, g in grads_prev.items():
            if name in self._w_acc:
                self._w_acc[name] += -g * (net.get_param(name) - theta_prev[name])
        self._pending = None

    def grad_transform(self, ctx, net, grads):
        # the optimizer applies `grads` after this call; the resulting move
        # is credited at the next call (or at task end)
        self._flush(net)
        self._pending = (
            {k: net.get_param(k).copy() for k in self._w_acc},
            {k: g.copy() for k, g in grads.items() if k in self._w_acc},
        )
        return grads

    def after_task(self, ctx, net, sample_provider=None):
        self._flush(net)
        drift = {
            k: net.get_param(k) - self._theta_start[k] for k in self._w_acc
        }
        contrib = si_update_omega(self._w_acc, drift, self.cfg.si_damping)
        for name, c in contrib.items():
            self.omega[name] = self.omega.get(name, 0.0) + c
        self.anchor = {k: net.get_param(k).copy() for k in self._w_acc}


class LwfStrategy(Strategy):
    def __init__(self, cfg, scenario, seed, surrogate):
        super().__init__(cfg, scenario, seed, surrogate)
        self.snapshot: SpikingNetwork | None = None
        self.seen_tasks: list[int] = []

    def batch_loss(self, ctx, net, x_enc, labels, trace, logits):
        if self.snapshot is None:
            return 0.0, None
        strength = self.cfg.lwf_strength
        temp = self.cfg.lwf_temperature
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        if net.multi_head:
            targets = list(self.seen_tasks)
        else:
            targets = [None]
        for h in targets:
            _, old_logits = forward(self.snapshot, x_enc, task=h)
            if h is None or h == ctx.task - 1:
                trace_h, new_logits = trace, logits
            else:
                trace_h, new_logits = forward(net, x_enc, task=h)
            old2 = np.atleast_2d(old_logits)
            new2 = np.atleast_2d(new_logits)
            per = [
                distillation_loss(old2[i], new2[i], temp) for i in range(old2.shape[0])
            ]
            total += strength * float(np.mean(per))
            dlog = strength * distillation_grad(old2, new2, temp)
            for name, g in backward_dlogits(net, trace_h, dlog, self.surrogate).items():
                grads[name] = grads.get(name, 0.0) + g
        return total, grads

    def after_task(self, ctx, net, sample_provider=None):
        self.snapshot = net.copy()
        self.seen_tasks.append(ctx.task - 1)


class XdgStrategy(Strategy):
    def __init__(self, cfg, scenario, seed, surrogate):
        super().__init__(cfg, scenario, seed, surrogate)
        self._cache: dict[int, list[np.ndarray]] = {}
        self._last_trained = 1

    def _hidden_sizes(self, net: SpikingNetwork) -> list[int]:
        if net.multi_head:
            return list(net.layer_sizes[1:])
        return list(net.layer_sizes[1:-1])

    def gates_for(self, task: int, net: SpikingNetwork) -> list[np.ndarray]:
        if task not in self._cache:
            self._cache[task] = xdg_gates(
                self._hidden_sizes(net), task, self.cfg.xdg_fraction, self.seed
            )
        return self._cache[task]

    def before_task(self, ctx, net):
        self._last_trained = ctx.task

    def train_gates(self, ctx, net):
        return self.gates_for(ctx.task, net)

    def eval_gates(self, eval_task, trained_task, net):
        if self.scenario == "task-incremental":
            return self.gates_for(eval_task, net)
        # no task identity at test time: evaluate with the deployed gates
        return self.gates_for(trained_task, net)


_STRATEGY_CLASSES = {
    "none": Strategy,
    "joint": JointStrategy,
    "hwc-soft": HwcStrategy,
    "hwc-hard": HwcStrategy,
    "ewc": EwcStrategy,
    "si": SiStrategy,
    "lwf": LwfStrategy,
    "xdg": XdgStrategy,
}


def apply_strategy(
    cfg: StrategyConfig,
    scenario: str,
    seed: int,
    surrogate: SurrogateSpec,
) -> Strategy:
    """Instantiate the hook bundle for a named strategy."""
    cls = _STRATEGY_CLASSES.get(cfg.name)
    if cls is None:
        raise ConfigurationError(f"unknown strategy {cfg.name!r}")
    return cls(cfg, scenario, seed, surrogate)
