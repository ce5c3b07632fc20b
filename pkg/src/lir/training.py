"""Training loops: cross-entropy baseline and hidden-layer energy regularization.

The regularized loss adds, at every selected tap, a two-sided squared
hinge on the layer energy: ID batches are pushed below ``m_in`` and
seen-OoD batches above ``m_out`` (the square sits inside the batch
expectation). Each optimization step consumes one ID batch and one
seen-OoD batch; the two batch streams draw from independent RNG streams
so a run with ``lam = 0`` replays the exact CE-only trajectory.

Default margins: the classic EBO pair (-25, -7) is tuned for logit
scales of large pretrained networks. Small freshly initialized nets
start nowhere near those energies, so :func:`calibrate_margins` derives
task-scale margins from the energy distribution at epoch 0 instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .energy import free_energy_batch
from .metrics import accuracy
from .nets import (
    CeReboLoss,
    ForwardTrace,
    LayeredNet,
    forward_batch,
    init_net,
    sgd_step,
    _grad_ce,
    _grad_ce_rebo,
)
from .data import SyntheticTask

EBO_MARGINS = (-25.0, -7.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class CeConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class REboConfig:
    """Energy-regularized training configuration.

    ``m_out > m_in`` is not required (the classic margin pair has
    m_in = -25 < m_out = -7); only finiteness is asserted. ``layer_set``
    holds tap indices (last tap = logits); None selects every tap.
    """

    m_in: float = EBO_MARGINS[0]
    m_out: float = EBO_MARGINS[1]
    lam: float = 0.05
    layer_set: frozenset | None = None
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not (np.isfinite(self.m_in) and np.isfinite(self.m_out)):
            raise ValueError("margins must be finite")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")


@dataclass
class TrainLog:
    """Per-epoch CE loss, per-tap energy hinge loss, and train-ID accuracy."""

    n_taps: int
    epochs: list[int] = field(default_factory=list)
    ce_loss: list[float] = field(default_factory=list)
    energy_loss: list[np.ndarray] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)

    def append(self, epoch: int, ce: float, energy: np.ndarray, acc: float) -> None:
        self.epochs.append(epoch)
        self.ce_loss.append(ce)
        self.energy_loss.append(np.asarray(energy, dtype=np.float64))
        self.train_acc.append(acc)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["epoch", "ce_loss"]
                + [f"energy_loss_layer_{t}" for t in range(self.n_taps)]
                + ["train_acc"]
            )
            for i, epoch in enumerate(self.epochs):
                w.writerow(
                    [epoch, f"{self.ce_loss[i]:.12g}"]
                    + [f"{v:.12g}" for v in self.energy_loss[i]]
                    + [f"{self.train_acc[i]:.12g}"]
                )


def energy_loss_layer(id_energies, ood_energies, m_in: float, m_out: float) -> float:
    """One layer's two-sided squared hinge.

    mean over ID of max(0, E - m_in)^2 plus mean over OoD of
    max(0, m_out - E)^2; zero exactly when every hinge is slack.
    """
    e_id = np.asarray(id_energies, dtype=np.float64)
    e_ood = np.asarray(ood_energies, dtype=np.float64)
    if e_id.size == 0 or e_ood.size == 0:
        raise ValueError("both ID and OoD energy batches must be non-empty")
    if not (np.all(np.isfinite(e_id)) and np.all(np.isfinite(e_ood))):
        raise ValueError("energies must be finite")
    over = np.maximum(e_id - m_in, 0.0)
    under = np.maximum(m_out - e_ood, 0.0)
    return float(np.mean(over**2) + np.mean(under**2))


def _tap_energies(traces: Sequence[ForwardTrace], tap: int) -> np.ndarray:
    return np.array([free_energy_batch(tr.taps[tap][None, :])[0] for tr in traces])


def rebo_loss(
    trace_batch: Sequence[ForwardTrace],
    ood_trace_batch: Sequence[ForwardTrace],
    cfg: REboConfig,
) -> float:
    """Summed per-layer hinge loss over the configured tap set."""
    if not trace_batch or not ood_trace_batch:
        raise ValueError("both trace batches must be non-empty")
    n_taps = len(trace_batch[0].taps)
    layer_set = _resolve_layer_set(cfg.layer_set, n_taps)
    total = 0.0
    for tap in sorted(layer_set):
        total += energy_loss_layer(
            _tap_energies(trace_batch, tap),
            _tap_energies(ood_trace_batch, tap),
            cfg.m_in,
            cfg.m_out,
        )
    return total


def _resolve_layer_set(layer_set, n_taps: int) -> frozenset:
    if layer_set is None:
        return frozenset(range(n_taps))
    entries = list(layer_set)
    resolved = frozenset(int(t) for t in entries)
    if len(resolved) != len(entries):
        raise ValueError("layer_set must not repeat layers")
    if not resolved:
        raise ValueError("layer_set must be nonempty")
    bad = [t for t in resolved if not (0 <= t < n_taps)]
    if bad:
        raise ValueError(f"layer_set indices {sorted(bad)} out of range for {n_taps} taps")
    return resolved


def calibrate_margins(
    net: LayeredNet,
    task: SyntheticTask,
    layer_set: frozenset | None = None,
    percentiles: tuple[float, float] = (10.0, 90.0),
) -> tuple[float, float]:
    """Task-scale margins: the 10th/90th percentiles of epoch-0 energies.

    Energies are pooled over the selected taps and over both the ID train
    split and the seen-OoD split, before any training step.
    """
    taps = _resolve_layer_set(layer_set, net.n_taps)
    pools = []
    for x in (task.train_x, task.seen_ood_x):
        trace = forward_batch(net, x)
        for t in sorted(taps):
            pools.append(free_energy_batch(trace.taps[t]))
    pool = np.concatenate(pools)
    lo, hi = np.percentile(pool, percentiles)
    return float(lo), float(hi)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(task: SyntheticTask, cfg: CeConfig | REboConfig) -> tuple[LayeredNet, TrainLog]:
    """Train a classifier on the task; deterministic for a given config.

    CE-only with a CeConfig; CE + weighted energy hinges with a REboConfig
    (requires the task's seen-OoD split). Raises TrainingDiverged with the
    epoch index if the loss goes non-finite.
    """
    regularized = isinstance(cfg, REboConfig)
    dims = [task.input_dim, *cfg.hidden_dims, task.n_classes]
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, id_ss, ood_ss = ss.spawn(3)
    net = init_net(dims, seed=init_ss)
    rng_id = np.random.default_rng(id_ss)
    rng_ood = np.random.default_rng(ood_ss)

    n_taps = net.n_taps
    layer_set = _resolve_layer_set(cfg.layer_set, n_taps) if regularized else frozenset()
    if regularized:
        spec = CeReboLoss(
            m_in=cfg.m_in, m_out=cfg.m_out, lam=cfg.lam, layer_set=layer_set
        )
        n_ood = task.seen_ood_x.shape[0]

    log = TrainLog(n_taps=n_taps)
    velocity = None
    n = task.train_x.shape[0]
    for epoch in range(cfg.epochs):
        ce_sum, hinge_sum, n_steps = 0.0, np.zeros(n_taps), 0
        id_batches = _epoch_batches(rng_id, n, cfg.batch_size)
        if regularized:
            ood_batches = _epoch_batches(rng_ood, n_ood, cfg.batch_size)
        for step, idx in enumerate(id_batches):
            x, y = task.train_x[idx], task.train_y[idx]
            if regularized:
                ood_idx = ood_batches[step % len(ood_batches)]
                total, grads, ce, per_layer = _grad_ce_rebo(
                    net, x, y, task.seen_ood_x[ood_idx], spec
                )
                hinge_sum += per_layer
            else:
                total, grads = _grad_ce(net, x, y)
                ce = total
            if not np.isfinite(total):
                raise TrainingDiverged(epoch, total)
            velocity = sgd_step(net, grads, cfg.lr, cfg.momentum, velocity)
            ce_sum += ce
            n_steps += 1
        acc = accuracy(forward_batch(net, task.train_x).logits, task.train_y)
        log.append(epoch, ce_sum / n_steps, hinge_sum / n_steps, acc)
    return net, log
