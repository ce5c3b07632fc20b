"""Numerically stable free-energy and softmax primitives.

All functions accept any finite real activation vector (hidden-layer
activations or logits) and compute in float64 regardless of input dtype:
ranking metrics downstream are sensitive to ties created by premature
rounding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Marker for the logit head when a tap list mixes hidden layers and logits.
LOGITS = "logits"


def _as_vector(values, name: str = "values") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if v.size == 0:
        raise ValueError(f"{name} must have length >= 1")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def _check_temperature(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t <= 0.0:
        raise ValueError(f"temperature must be a positive finite real, got {t}")
    return t


def free_energy(values, t: float = 1.0) -> float:
    """Free energy -t * log(sum_i exp(v_i / t)) of one activation vector.

    Uses the max-shift logsumexp identity so no intermediate exponential
    overflows; the result is finite for any finite input. Shares the
    batched code path so scalar and row-wise evaluation agree bit-for-bit.
    """
    v = _as_vector(values)
    return float(free_energy_batch(v[None, :], t)[0])


def free_energy_batch(rows, t: float = 1.0) -> np.ndarray:
    """Row-wise free energy of a 2-D array (one activation vector per row)."""
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"rows must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("rows contain non-finite entries")
    t = _check_temperature(t)
    m = np.max(a, axis=1, keepdims=True)
    return -(m[:, 0] + t * np.log(np.sum(np.exp((a - m) / t), axis=1)))


def softmax(values, t: float = 1.0) -> np.ndarray:
    """Stable softmax of v/t."""
    v = _as_vector(values)
    t = _check_temperature(t)
    z = (v - np.max(v)) / t
    e = np.exp(z)
    return e / np.sum(e)


def msp_score(logits, t: float = 1.0) -> float:
    """Maximum softmax probability, computed in log space.

    Always in (0, 1]; equals 1/len(logits) for a uniform logit vector.
    """
    v = _as_vector(logits, "logits")
    t = _check_temperature(t)
    z = v / t
    m = float(np.max(z))
    return float(np.exp(-np.log(np.sum(np.exp(z - m)))))


def msp_batch(rows, t: float = 1.0) -> np.ndarray:
    """Row-wise maximum softmax probability."""
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"rows must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("rows contain non-finite entries")
    t = _check_temperature(t)
    z = a / t
    m = np.max(z, axis=1)
    return np.exp(-np.log(np.sum(np.exp(z - m[:, None]), axis=1)))


def energy_vector(
    acts: Sequence, t: float = 1.0, layer_indices: Sequence[int] | None = None
) -> np.ndarray:
    """Per-layer energies for one sample: component l is free_energy(acts[l], t).

    ``acts`` must cover each tapped layer exactly once in ascending layer
    order. When ``layer_indices`` is given it is validated to be exactly
    0..L-1; a missing or duplicate layer raises ValueError.
    """
    if len(acts) == 0:
        raise ValueError("acts must cover at least one layer")
    if layer_indices is not None:
        idx = list(layer_indices)
        if len(idx) != len(acts):
            raise ValueError(
                f"layer_indices length {len(idx)} does not match acts length {len(acts)}"
            )
        if idx != list(range(len(acts))):
            raise ValueError(
                f"layers must cover 0..{len(acts) - 1} exactly once in order, got {idx}"
            )
    return np.array([free_energy(a, t) for a in acts], dtype=np.float64)
