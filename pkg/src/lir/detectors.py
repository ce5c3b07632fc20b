"""Score functions over samples or energy vectors, and the threshold rule.

Detector kinds
--------------
* ``EBO_LOGITS`` — negated logit free energy; higher score = more ID.
* ``MSP`` — maximum softmax probability of the logits.
* ``LAYER_ENERGY(l)`` — negated energy of one tapped layer.
* ``AG_MD`` / ``AG_KNN`` / ``AG_VAE`` — aggregation detectors over the
  length-L energy vector: per-class Mahalanobis distance, mean distance to
  the K nearest reference vectors, and VAE reconstruction error. For all
  three a LOW score means ID.
* :func:`bhl` — the best-hidden-layer oracle: per-layer AUROC with the
  energy-sign flip, reported a posteriori (needs OoD ground truth, so it
  is an analysis tool rather than a deployable detector).

Fitted detectors are immutable and safe to share across threads; batch
scoring is vectorized and yields the same results as sample-at-a-time
scoring.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._binio import (
    FileFormatError,
    expect_magic,
    expect_version,
    read_f64_array,
    read_u8,
    read_u32,
    write_f64_array,
    write_u16,
    write_u32,
)
from .data import EnergyMatrix
from .energy import free_energy, msp_score
from .metrics import auroc
from .nets import VaeNet, init_vae, grad, ElboLoss, sgd_step, vae_reconstruct_mean

DETECTOR_MAGIC = b"LIRD"
DETECTOR_FORMAT_VERSION = 1

ID = "ID"
OOD = "OOD"


class FitError(RuntimeError):
    """Raised when fitting a detector fails (degenerate data, divergence)."""


class DetectorKind(enum.IntEnum):
    EBO_LOGITS = 0
    LAYER_ENERGY = 1
    AG_MD = 2
    AG_KNN = 3
    AG_VAE = 4
    MSP = 5


class Detector:
    """Base detector: a fitted score function plus its orientation.

    ``high_is_id`` tells whether a larger score indicates in-distribution.
    ``n_layers`` is the energy-vector length the detector expects when
    scoring energy matrices (0 = unconstrained, for logit-only kinds).
    ``threshold`` is an optional runtime decision threshold consulted by
    :func:`classify` when no explicit one is passed; it is not part of
    the detector file format.
    """

    kind: DetectorKind
    high_is_id: bool
    n_layers: int = 0
    threshold: float | None = None

    def score(self, vec) -> float:
        """Score one sample from the detector's natural input vector."""
        raise NotImplementedError

    def score_energies(self, energies) -> np.ndarray:
        """Score rows of an energy matrix (hidden taps then logits, per row)."""
        raise NotImplementedError

    def ranking_scores(self, energies) -> np.ndarray:
        """Scores flipped so that higher always means more ID."""
        s = self.score_energies(energies)
        return s if self.high_is_id else -s

    def _check_rows(self, energies) -> np.ndarray:
        e = np.asarray(energies, dtype=np.float64)
        if e.ndim == 1:
            e = e[None, :]
        if e.ndim != 2:
            raise ValueError(f"energies must be 1-D or 2-D, got shape {e.shape}")
        if self.n_layers and e.shape[1] != self.n_layers:
            raise ValueError(
                f"energy vectors of length {e.shape[1]} do not match the "
                f"detector's {self.n_layers} layers"
            )
        return e


class EboLogitsDetector(Detector):
    """Negated logit free energy; the classic logit-head energy score."""

    kind = DetectorKind.EBO_LOGITS
    high_is_id = True

    def __init__(self, n_layers: int = 0, t: float = 1.0):
        self.n_layers = n_layers
        self.t = t

    def score(self, logits) -> float:
        return -free_energy(logits, self.t)

    def score_energies(self, energies) -> np.ndarray:
        e = self._check_rows(energies)
        return -e[:, -1]


class MspDetector(Detector):
    """Maximum softmax probability baseline. Scores logits only: the energy
    matrix does not retain enough information to recover it."""

    kind = DetectorKind.MSP
    high_is_id = True

    def __init__(self, t: float = 1.0):
        self.t = t

    def score(self, logits) -> float:
        return msp_score(logits, self.t)

    def score_energies(self, energies) -> np.ndarray:
        raise ValueError("MSP cannot be computed from stored energies; score logits instead")


class LayerEnergyDetector(Detector):
    """Negated energy of one tapped layer (canonical EBO orientation)."""

    kind = DetectorKind.LAYER_ENERGY
    high_is_id = True

    def __init__(self, layer: int, n_layers: int, t: float = 1.0):
        if not (0 <= layer < n_layers):
            raise ValueError(f"layer {layer} out of range for {n_layers} taps")
        self.layer = layer
        self.n_layers = n_layers
        self.t = t

    def score(self, layer_activations) -> float:
        return -free_energy(layer_activations, self.t)

    def score_energies(self, energies) -> np.ndarray:
        e = self._check_rows(energies)
        return -e[:, self.layer]


class MahalanobisDetector(Detector):
    """Min-over-classes Mahalanobis distance of the energy vector."""

    kind = DetectorKind.AG_MD
    high_is_id = False

    def __init__(self, means: np.ndarray, precisions: np.ndarray):
        means = np.asarray(means, dtype=np.float64)
        precisions = np.asarray(precisions, dtype=np.float64)
        if means.ndim != 2 or precisions.shape != (means.shape[0],) + (means.shape[1],) * 2:
            raise ValueError("means must be (C, L) and precisions (C, L, L)")
        self.means = means
        self.precisions = precisions
        self.n_layers = means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    def score(self, energy_vec) -> float:
        return float(self.score_energies(np.asarray(energy_vec)[None, :])[0])

    def score_energies(self, energies) -> np.ndarray:
        e = self._check_rows(energies)
        dists = np.empty((e.shape[0], self.n_classes))
        for c in range(self.n_classes):
            d = e - self.means[c]
            # Quadratic form per row; clip the tiny negatives SPD roundoff makes.
            q = np.einsum("ij,jk,ik->i", d, self.precisions[c], d)
            dists[:, c] = np.sqrt(np.maximum(q, 0.0))
        return np.min(dists, axis=1)


class KnnDetector(Detector):
    """Mean Euclidean distance to the K nearest reference energy vectors."""

    kind = DetectorKind.AG_KNN
    high_is_id = False

    def __init__(self, references: np.ndarray, k: int):
        references = np.asarray(references, dtype=np.float64)
        if references.ndim != 2 or references.shape[0] == 0:
            raise ValueError("references must be a non-empty 2-D array")
        if not (1 <= k <= references.shape[0]):
            raise FitError(f"k must be in [1, {references.shape[0]}], got {k}")
        self.references = references
        self.k = int(k)
        self.n_layers = references.shape[1]

    def score(self, energy_vec) -> float:
        return float(self.score_energies(np.asarray(energy_vec)[None, :])[0])

    def score_energies(self, energies) -> np.ndarray:
        e = self._check_rows(energies)
        out = np.empty(e.shape[0])
        for i, row in enumerate(e):
            d = np.linalg.norm(self.references - row, axis=1)
            if self.k < d.size:
                nearest = np.partition(d, self.k - 1)[: self.k]
            else:
                nearest = d
            out[i] = float(np.mean(nearest))
        return out


@dataclass(frozen=True)
class Standardizer:
    """Per-component affine map fitted on training energies."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.mean) / self.std


class VaeDetector(Detector):
    """Reconstruction error of the standardized energy vector.

    Scoring decodes the posterior mean latent (no sampling), so repeated
    scoring of the same vector is bit-identical.
    """

    kind = DetectorKind.AG_VAE
    high_is_id = False

    def __init__(self, standardizer: Standardizer, net: VaeNet):
        self.standardizer = standardizer
        self.net = net
        self.n_layers = net.input_dim

    def score(self, energy_vec) -> float:
        return float(self.score_energies(np.asarray(energy_vec)[None, :])[0])

    def score_energies(self, energies) -> np.ndarray:
        e = self._check_rows(energies)
        z = self.standardizer.apply(e)
        zhat = vae_reconstruct_mean(self.net, z)
        return np.linalg.norm(z - zhat, axis=1)


# ---------------------------------------------------------------------------
# fitting


def fit_md(train_energies: EnergyMatrix) -> MahalanobisDetector:
    """Fit per-class means and covariances of the training energy vectors.

    Each class covariance is made SPD before inversion: the raw matrix is
    used when its Cholesky succeeds, otherwise eps*trace/L shrinkage is
    added with eps laddered 1e-6 .. 1e-2.
    """
    if train_energies.class_labels is None:
        raise FitError("Mahalanobis fit needs class labels on the training energies")
    e = train_energies.values
    labels = train_energies.class_labels
    classes = np.unique(labels)
    n_layers = e.shape[1]
    means, precisions = [], []
    for c in classes:
        rows = e[labels == c]
        if rows.shape[0] < 2:
            raise FitError(f"class {c} has {rows.shape[0]} samples, need >= 2")
        mu = np.mean(rows, axis=0)
        cov = np.cov(rows, rowvar=False, ddof=1).reshape(n_layers, n_layers)
        reg = _regularize_spd(cov, c)
        precisions.append(np.linalg.inv(reg))
        means.append(mu)
    return MahalanobisDetector(np.stack(means), np.stack(precisions))


def _regularize_spd(cov: np.ndarray, class_id) -> np.ndarray:
    scale = np.trace(cov) / cov.shape[0]
    for eps in (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2):
        candidate = cov + eps * scale * np.eye(cov.shape[0])
        try:
            np.linalg.cholesky(candidate)
            return candidate
        except np.linalg.LinAlgError:
            continue
    raise FitError(f"class {class_id} covariance is singular even after regularization")


def fit_knn(train_energies: EnergyMatrix, k: int | None = None) -> KnnDetector:
    """Reference the training energy vectors; default K = min(50, N/10)."""
    refs = train_energies.values
    if k is None:
        k = max(1, min(50, refs.shape[0] // 10))
    return KnnDetector(refs, k)


@dataclass(frozen=True)
class VaeConfig:
    hidden_dim: int = 16
    latent_dim: int = 4
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    kl_weight: float = 1.0
    seed: int = 0


def fit_vae(train_energies: EnergyMatrix, cfg: VaeConfig = VaeConfig()) -> VaeDetector:
    """Train a small VAE on standardized energy vectors.

    Standardization statistics come from the training split only;
    zero-variance components standardize with std 1 so constant datasets
    stay finite. Raises FitError naming the epoch if the loss goes
    non-finite.
    """
    e = train_energies.values
    n = e.shape[0]
    if n < 16:
        raise FitError(f"VAE fit needs >= 16 training vectors, got {n}")
    mean = np.mean(e, axis=0)
    std = np.std(e, axis=0)
    std = np.where(std > 0.0, std, 1.0)
    standardizer = Standardizer(mean=mean, std=std)
    z = standardizer.apply(e)

    net = init_vae(e.shape[1], cfg.hidden_dim, cfg.latent_dim, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE1B0]))
    spec = ElboLoss(kl_weight=cfg.kl_weight)
    velocity = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = z[order[start : start + cfg.batch_size]]
            eps = rng.standard_normal((batch.shape[0], cfg.latent_dim))
            try:
                _, g = grad(net, (batch, eps), spec)
            except FloatingPointError as exc:
                raise FitError(f"VAE training diverged at epoch {epoch}: {exc}") from exc
            velocity = sgd_step(net, g, cfg.lr, cfg.momentum, velocity)
    return VaeDetector(standardizer, net)


# ---------------------------------------------------------------------------
# decision rule and the BHL oracle


def classify(d: Detector, s: float, threshold: float | None = None) -> str:
    """Threshold decision; the boundary value counts as in-distribution.

    Falls back to the detector's own ``threshold`` attribute when none is
    passed.
    """
    if threshold is None:
        threshold = d.threshold
    if threshold is None:
        raise ValueError("no threshold given and the detector carries none")
    if d.high_is_id:
        return ID if s >= threshold else OOD
    return ID if s <= threshold else OOD


@dataclass(frozen=True)
class BhlResult:
    """Best layer by oriented AUROC, with the full per-layer profile.

    ``per_layer_auroc`` holds the raw AUROC of every energy column
    (energy as the score, high = ID); ``high_is_id`` reports the sign of
    the winning layer under that convention. ``candidates`` lists the
    column indices that competed for best (the logits column joins only
    when requested).
    """

    best_layer: int
    oriented_auroc: float
    high_is_id: bool
    per_layer_auroc: np.ndarray
    candidates: tuple[int, ...]


def bhl(
    energies_id: EnergyMatrix,
    energies_ood: EnergyMatrix,
    include_logits: bool = False,
) -> BhlResult:
    """Oracle selection of the most discriminative layer.

    For each column the raw AUROC treats the energy itself as a high-is-ID
    score; the oriented value max(a, 1-a) resolves the sign ambiguity of
    hidden layers that assign lower energy to OoD samples. The last column
    is the logit energy and competes only with ``include_logits``. Ties
    break toward the earlier layer (earlier detection is cheaper).
    """
    if energies_id.l != energies_ood.l:
        raise ValueError(
            f"layer count mismatch: ID has {energies_id.l}, OoD has {energies_ood.l}"
        )
    n_cols = energies_id.l
    raw = np.array(
        [auroc(energies_id.values[:, j], energies_ood.values[:, j]) for j in range(n_cols)]
    )
    if include_logits or n_cols == 1:
        candidates = tuple(range(n_cols))
    else:
        candidates = tuple(range(n_cols - 1))
    oriented = np.maximum(raw, 1.0 - raw)
    cand = np.array(candidates)
    best = int(cand[np.argmax(oriented[cand])])
    return BhlResult(
        best_layer=best,
        oriented_auroc=float(oriented[best]),
        high_is_id=bool(raw[best] >= 1.0 - raw[best]),
        per_layer_auroc=raw,
        candidates=candidates,
    )


# ---------------------------------------------------------------------------
# serialization: magic "LIRD", version u16, kind u8, orientation u8, L u32,
# then a kind-specific payload (see README for the full layout)


def save_detector(d: Detector, path) -> None:
    if getattr(d, "t", 1.0) != 1.0:
        raise ValueError("the detector file format has no temperature field; only t=1 persists")
    with open(path, "wb") as f:
        f.write(DETECTOR_MAGIC)
        write_u16(f, DETECTOR_FORMAT_VERSION)
        f.write(bytes([int(d.kind), 1 if d.high_is_id else 0]))
        write_u32(f, d.n_layers)
        if isinstance(d, (EboLogitsDetector, MspDetector)):
            pass
        elif isinstance(d, LayerEnergyDetector):
            write_u32(f, d.layer)
        elif isinstance(d, MahalanobisDetector):
            write_u32(f, d.n_classes)
            for c in range(d.n_classes):
                write_f64_array(f, d.means[c])
                write_f64_array(f, d.precisions[c])
        elif isinstance(d, KnnDetector):
            write_u32(f, d.k)
            write_u32(f, d.references.shape[0])
            write_f64_array(f, d.references)
        elif isinstance(d, VaeDetector):
            dims = d.net.dims
            write_u32(f, len(dims))
            for v in dims:
                write_u32(f, v)
            write_f64_array(f, d.standardizer.mean)
            write_f64_array(f, d.standardizer.std)
            for w, b in zip(d.net.weights, d.net.biases):
                write_f64_array(f, w)
                write_f64_array(f, b)
        else:
            raise TypeError(f"cannot serialize detector {d!r}")


def load_detector(path) -> Detector:
    with open(path, "rb") as f:
        expect_magic(f, DETECTOR_MAGIC)
        expect_version(f, DETECTOR_FORMAT_VERSION)
        kind_byte = read_u8(f, "detector kind")
        try:
            kind = DetectorKind(kind_byte)
        except ValueError:
            raise FileFormatError("field", f"unknown detector kind {kind_byte}")
        orientation = read_u8(f, "orientation")
        if orientation > 1:
            raise FileFormatError("field", f"orientation byte must be 0/1, got {orientation}")
        n_layers = read_u32(f, "layer count")
        d = _load_payload(f, kind, n_layers)
        extra = f.read(1)
        if extra:
            raise FileFormatError("size", "trailing bytes after detector payload")
    if d.high_is_id != bool(orientation):
        raise FileFormatError(
            "field", f"orientation {orientation} contradicts kind {kind.name}"
        )
    return d


def _load_payload(f, kind: DetectorKind, n_layers: int) -> Detector:
    if kind == DetectorKind.EBO_LOGITS:
        return EboLogitsDetector(n_layers=n_layers)
    if kind == DetectorKind.MSP:
        return MspDetector()
    if kind == DetectorKind.LAYER_ENERGY:
        layer = read_u32(f, "layer index")
        if layer >= n_layers:
            raise FileFormatError("field", f"layer {layer} out of range for {n_layers}")
        return LayerEnergyDetector(layer, n_layers)
    if kind == DetectorKind.AG_MD:
        n_classes = read_u32(f, "class count")
        if n_classes == 0 or n_layers == 0:
            raise FileFormatError("field", "MD payload needs >= 1 class and layer")
        means = np.empty((n_classes, n_layers))
        precisions = np.empty((n_classes, n_layers, n_layers))
        for c in range(n_classes):
            means[c] = read_f64_array(f, n_layers, "class mean")
            precisions[c] = read_f64_array(f, n_layers * n_layers, "class precision").reshape(
                n_layers, n_layers
            )
        return MahalanobisDetector(means, precisions)
    if kind == DetectorKind.AG_KNN:
        k = read_u32(f, "k")
        n_refs = read_u32(f, "reference count")
        if n_refs == 0 or n_layers == 0:
            raise FileFormatError("field", "KNN payload needs references and layers")
        refs = read_f64_array(f, n_refs * n_layers, "references").reshape(n_refs, n_layers)
        try:
            return KnnDetector(refs, k)
        except FitError as exc:
            raise FileFormatError("field", str(exc)) from exc
    if kind == DetectorKind.AG_VAE:
        n_dims = read_u32(f, "vae dim count")
        if n_dims != 3:
            raise FileFormatError("field", f"VAE payload needs 3 dims, got {n_dims}")
        input_dim, hidden_dim, latent_dim = (read_u32(f, "vae dim") for _ in range(3))
        if input_dim != n_layers:
            raise FileFormatError(
                "field", f"VAE input dim {input_dim} contradicts layer count {n_layers}"
            )
        mean = read_f64_array(f, input_dim, "standardizer mean")
        std = read_f64_array(f, input_dim, "standardizer std")
        shapes = [
            (input_dim, hidden_dim),
            (hidden_dim, latent_dim),
            (hidden_dim, latent_dim),
            (latent_dim, hidden_dim),
            (hidden_dim, input_dim),
        ]
        weights, biases = [], []
        for d_in, d_out in shapes:
            weights.append(read_f64_array(f, d_in * d_out, "vae weights").reshape(d_in, d_out))
            biases.append(read_f64_array(f, d_out, "vae biases"))
        return VaeDetector(Standardizer(mean, std), VaeNet(weights, biases))
    raise FileFormatError("field", f"unhandled detector kind {kind}")
