"""Synthetic ID/OoD task generation and energy-matrix ingestion.

The synthetic task mirrors the two shift families geometrically:

* semantic shift — unseen "classes": extra Gaussian blobs interleaved
  between the ID blob means (near OoD) and a uniform shell far outside
  them (far OoD);
* covariate shift — the ID test features under named corruptions
  (additive noise, scaling, shifts) at several severities.

Seen OoD for outlier-exposure training is a bounded ring at twice the ID
radius, disjoint from both eval OoD distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binio import (
    FileFormatError,
    expect_magic,
    expect_version,
    read_exact,
    read_u16,
    read_u64,
    write_u16,
    write_u64,
)
from .energy import free_energy_batch
from .nets import LayeredNet, forward_batch

ENERGY_MAGIC = b"LIRE"
ENERGY_FORMAT_VERSION = 1

_FLAG_DIST_LABELS = 0x1
_FLAG_CLASS_LABELS = 0x2

# Sanity cap for header-declared payloads: 1 GiB of f64s.
_MAX_CELLS = (1 << 30) // 8

ID_LABEL = 0
OOD_LABEL = 1


@dataclass
class EnergyMatrix:
    """N x L matrix of per-layer energies with optional per-row labels.

    ``dist_labels`` uses 0 for ID and 1 for OoD; ``class_labels`` are
    integer class ids. Either may be None.
    """

    values: np.ndarray
    dist_labels: np.ndarray | None = None
    class_labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values contain non-finite entries")
        if self.dist_labels is not None:
            self.dist_labels = np.asarray(self.dist_labels, dtype=np.uint8)
            if self.dist_labels.shape != (self.n,):
                raise ValueError("dist_labels length does not match row count")
        if self.class_labels is not None:
            self.class_labels = np.asarray(self.class_labels, dtype=np.int32)
            if self.class_labels.shape != (self.n,):
                raise ValueError("class_labels length does not match row count")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def l(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TaskSpec:
    """Geometry and size of a generated task; defaults are CI-scale."""

    input_dim: int = 2
    n_classes: int = 3
    radius: float = 5.0
    n_train: int = 2000
    n_eval: int = 500
    noise_sigmas: tuple[float, ...] = (0.5, 1.0, 2.0)
    scale_factors: tuple[float, ...] = (0.5, 2.0)
    shift_offsets: tuple[float, ...] = (1.0, 3.0)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.n_classes}")
        if self.input_dim < 2:
            raise ValueError(f"need input_dim >= 2, got {self.input_dim}")
        if self.radius <= 0 or self.n_train < 2 or self.n_eval < 1:
            raise ValueError("invalid task spec")


@dataclass
class SyntheticTask:
    """Generated ID/OoD bundle; all splits share the input dimension."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    seen_ood_x: np.ndarray
    near_ood_x: np.ndarray
    far_ood_x: np.ndarray
    corrupted_id: dict[str, np.ndarray] = field(default_factory=dict)
    input_dim: int = 2
    n_classes: int = 3
    radius: float = 5.0

    def eval_ood_splits(self) -> dict[str, np.ndarray]:
        """Evaluation OoD splits by name: near, far, then each corruption."""
        splits = {"near_ood": self.near_ood_x, "far_ood": self.far_ood_x}
        splits.update(self.corrupted_id)
        return splits


def _fmt(value: float) -> str:
    return f"{value:g}"


def _blob_means(n_blobs: int, radius: float, dim: int, phase: float = 0.0) -> np.ndarray:
    angles = 2.0 * np.pi * (np.arange(n_blobs) + phase) / n_blobs
    means = np.zeros((n_blobs, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _sample_blobs(rng, means: np.ndarray, n: int):
    """Round-robin class assignment, then a seeded shuffle: every class is
    guaranteed floor(n / C) samples."""
    c = means.shape[0]
    labels = np.arange(n) % c
    rng.shuffle(labels)
    x = means[labels] + rng.standard_normal((n, means.shape[1]))
    return x, labels.astype(np.int64)


def _sample_shell(rng, n: int, dim: int, r_lo: float, r_hi: float) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(r_lo, r_hi, size=n)
    return d * r[:, None]


def gen_task(spec: TaskSpec, seed: int) -> SyntheticTask:
    """Deterministically generate a SyntheticTask from ``spec`` and ``seed``.

    ID blobs sit on a circle of radius r with unit covariance; near OoD
    blobs interleave at the half-angle offsets on the same circle; far OoD
    is a uniform shell in [3r, 4r]; seen OoD is a ring in [1.8r, 2.2r].
    Corruptions apply to the ID test features.
    """
    rng = np.random.default_rng(seed)
    r = spec.radius
    id_means = _blob_means(spec.n_classes, r, spec.input_dim)
    near_means = _blob_means(spec.n_classes, r, spec.input_dim, phase=0.5)

    train_x, train_y = _sample_blobs(rng, id_means, spec.n_train)
    test_x, test_y = _sample_blobs(rng, id_means, spec.n_eval)
    near_x, _ = _sample_blobs(rng, near_means, spec.n_eval)
    far_x = _sample_shell(rng, spec.n_eval, spec.input_dim, 3.0 * r, 4.0 * r)
    seen_x = _sample_shell(rng, spec.n_train, spec.input_dim, 1.8 * r, 2.2 * r)

    corrupted: dict[str, np.ndarray] = {}
    for sigma in spec.noise_sigmas:
        noise = rng.standard_normal(test_x.shape)
        corrupted[f"gaussian_noise_{_fmt(sigma)}"] = test_x + sigma * noise
    for s in spec.scale_factors:
        corrupted[f"scale_{_fmt(s)}"] = test_x * s
    for o in spec.shift_offsets:
        corrupted[f"shift_{_fmt(o)}"] = test_x + o

    return SyntheticTask(
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
        seen_ood_x=seen_x,
        near_ood_x=near_x,
        far_ood_x=far_x,
        corrupted_id=corrupted,
        input_dim=spec.input_dim,
        n_classes=spec.n_classes,
        radius=r,
    )


def extract_energies(
    net: LayeredNet,
    features,
    t: float = 1.0,
    dist_labels=None,
    class_labels=None,
) -> EnergyMatrix:
    """Per-layer energies for every sample: one column per tap, logits last."""
    trace = forward_batch(net, features)
    cols = [free_energy_batch(tap, t) for tap in trace.taps]
    return EnergyMatrix(
        values=np.column_stack(cols), dist_labels=dist_labels, class_labels=class_labels
    )


def extract_logits(net: LayeredNet, features) -> np.ndarray:
    """Raw logit rows for every sample (for MSP and accuracy)."""
    return forward_batch(net, features).logits


# ---------------------------------------------------------------------------
# energy file format: magic "LIRE", version u16 = 1,
# flags u16 (bit0 dist labels, bit1 class labels), n u64, l u64,
# n*l f64 row-major, optional n u8 dist labels, optional n i32 class labels


def write_energy_file(m: EnergyMatrix, path) -> None:
    with open(path, "wb") as f:
        f.write(ENERGY_MAGIC)
        write_u16(f, ENERGY_FORMAT_VERSION)
        flags = 0
        if m.dist_labels is not None:
            flags |= _FLAG_DIST_LABELS
        if m.class_labels is not None:
            flags |= _FLAG_CLASS_LABELS
        write_u16(f, flags)
        write_u64(f, m.n)
        write_u64(f, m.l)
        f.write(np.ascontiguousarray(m.values, dtype="<f8").tobytes())
        if m.dist_labels is not None:
            f.write(m.dist_labels.astype(np.uint8).tobytes())
        if m.class_labels is not None:
            f.write(m.class_labels.astype("<i4").tobytes())


def read_energy_file(path) -> EnergyMatrix:
    with open(path, "rb") as f:
        expect_magic(f, ENERGY_MAGIC)
        expect_version(f, ENERGY_FORMAT_VERSION)
        flags = read_u16(f, "flags")
        if flags & ~(_FLAG_DIST_LABELS | _FLAG_CLASS_LABELS):
            raise FileFormatError("field", f"unknown flag bits 0x{flags:04x}")
        n = read_u64(f, "row count")
        l = read_u64(f, "column count")
        if n == 0 or l == 0:
            raise FileFormatError("field", f"empty matrix {n}x{l}")
        if n * l > _MAX_CELLS:
            raise FileFormatError(
                "size", f"declared payload {n}x{l} exceeds the {_MAX_CELLS}-cell cap"
            )
        payload = read_exact(f, 8 * n * l, f"{n}x{l} f64 payload")
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, l)
        dist = None
        if flags & _FLAG_DIST_LABELS:
            raw = f.read(n)
            if len(raw) != n:
                raise FileFormatError(
                    "labels", f"dist labels truncated: expected {n} bytes, got {len(raw)}"
                )
            dist = np.frombuffer(raw, dtype=np.uint8).copy()
            if np.any(dist > 1):
                raise FileFormatError("labels", "dist labels must be 0 (ID) or 1 (OoD)")
        cls = None
        if flags & _FLAG_CLASS_LABELS:
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise FileFormatError(
                    "labels",
                    f"class labels truncated: expected {4 * n} bytes, got {len(raw)}",
                )
            cls = np.frombuffer(raw, dtype="<i4").astype(np.int32)
        extra = f.read(1)
        if extra:
            raise FileFormatError("size", "trailing bytes after energy payload")
    try:
        return EnergyMatrix(values=values, dist_labels=dist, class_labels=cls)
    except ValueError as exc:
        raise FileFormatError("field", str(exc)) from exc
