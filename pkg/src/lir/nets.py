"""Minimal feedforward networks with exact reverse-mode gradients.

Two architectures, both plain numpy:

* :class:`LayeredNet` — a ReLU MLP classifier exposing every intermediate
  activation. Tap ``i`` is the post-ReLU output of the i-th affine layer;
  the last tap is the raw logits. The energy regularizer hooks into those
  taps, so gradients flow into hidden layers both through the
  cross-entropy path and through per-layer energy hinges.
* :class:`VaeNet` — a small variational autoencoder used by the
  energy-vector reconstruction detector.

Gradients are hand-derived backprop, checked against central finite
differences in the test suite. Nets are value-like: training mutates a
single owned instance; nothing here shares state across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._binio import (
    FileFormatError,
    expect_magic,
    expect_version,
    read_f64_array,
    read_u32,
    write_f64_array,
    write_u16,
    write_u32,
)

NET_MAGIC = b"LIRN"
NET_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# loss specifications


@dataclass(frozen=True)
class CeLoss:
    """Mean cross-entropy over the ID batch."""


@dataclass(frozen=True)
class CeReboLoss:
    """Cross-entropy plus per-layer energy hinges with outlier exposure.

    ``m_in`` is the upper bound for ID energies and ``m_out`` the lower
    bound for seen-OoD energies at every tap in ``layer_set`` (tap indices;
    the last tap is the logits). ``lam`` weights the summed hinge term
    against cross-entropy; ``ce_weight`` exists for hinge-only ablations.
    """

    m_in: float
    m_out: float
    lam: float = 0.1
    layer_set: frozenset = field(default_factory=frozenset)
    ce_weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.m_in) and np.isfinite(self.m_out)):
            raise ValueError("margins must be finite")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if len(self.layer_set) == 0:
            raise ValueError("layer_set must be nonempty")


@dataclass(frozen=True)
class ElboLoss:
    """Gaussian-decoder ELBO: 0.5*||x - x_hat||^2 + kl_weight * KL(q || N(0, I))."""

    kl_weight: float = 1.0


# ---------------------------------------------------------------------------
# classifier MLP


class LayeredNet:
    """ReLU MLP with dims [d_0, ..., d_K]; the final affine layer emits logits."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be parallel non-empty lists")
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError("layer shape mismatch")
        self.weights = weights
        self.biases = biases

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_taps(self) -> int:
        """Number of tapped outputs: every hidden post-ReLU plus the logits."""
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "LayeredNet":
        return LayeredNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardTrace:
    """Per-layer post-ReLU activations plus the raw logits for one sample."""

    hidden: list[np.ndarray]
    logits: np.ndarray

    @property
    def taps(self) -> list[np.ndarray]:
        return self.hidden + [self.logits]


def init_net(layer_dims: Sequence[int], seed: int) -> LayeredNet:
    """Seeded uniform(-s, s) init with s = sqrt(6 / (d_in + d_out)) per layer."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer_dims must be >= 2 positive entries, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-s, s, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return LayeredNet(weights, biases)


def forward(net: LayeredNet, x) -> ForwardTrace:
    """Forward pass for one sample; returns all tapped activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.layer_dims[0]:
        raise ValueError(
            f"input dimension {x.shape} does not match net input {net.layer_dims[0]}"
        )
    trace = forward_batch(net, x[None, :])
    return ForwardTrace(hidden=[h[0] for h in trace.hidden], logits=trace.logits[0])


@dataclass
class BatchTrace:
    """Batched forward pass cache (pre-activations kept for backprop)."""

    x: np.ndarray
    pre: list[np.ndarray]
    hidden: list[np.ndarray]
    logits: np.ndarray

    @property
    def taps(self) -> list[np.ndarray]:
        return self.hidden + [self.logits]


def forward_batch(net: LayeredNet, x_rows) -> BatchTrace:
    x = np.asarray(x_rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layer_dims[0]:
        raise ValueError(
            f"input shape {x.shape} does not match net input dim {net.layer_dims[0]}"
        )
    pre, hidden = [], []
    a = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        if i < n_layers - 1:
            a = np.maximum(z, 0.0)
            hidden.append(a)
    return BatchTrace(x=x, pre=pre, hidden=hidden, logits=pre[-1])


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def _energy_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1, keepdims=True)
    return -(m[:, 0] + np.log(np.sum(np.exp(a - m), axis=1)))


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of logit rows against integer labels."""
    z = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


@dataclass
class Grads:
    """Parameter gradients mirroring a net's weight/bias lists."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def zeros_like(net) -> "Grads":
        return Grads(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def add_scaled(self, other: "Grads", scale: float = 1.0) -> None:
        for i in range(len(self.weights)):
            self.weights[i] += scale * other.weights[i]
            self.biases[i] += scale * other.biases[i]


def _backprop_mlp(
    net: LayeredNet, trace: BatchTrace, d_logits: np.ndarray, tap_coef: dict[int, np.ndarray]
) -> Grads:
    """Reverse pass given dL/dlogits and per-sample dL/dE coefficients at taps.

    ``tap_coef[t]`` holds dL/dE_t per sample; it converts to an activation
    gradient through dE/da = -softmax(a) at the tapped activation.
    """
    g = Grads.zeros_like(net)
    n_layers = len(net.weights)
    d_z = d_logits
    if (n_layers - 1) in tap_coef:
        d_z = d_z + tap_coef[n_layers - 1][:, None] * (-_softmax_rows(trace.logits))
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.x if i == 0 else trace.hidden[i - 1]
        g.weights[i] = a_prev.T @ d_z
        g.biases[i] = np.sum(d_z, axis=0)
        if i == 0:
            break
        d_a = d_z @ net.weights[i].T
        if (i - 1) in tap_coef:
            d_a = d_a + tap_coef[i - 1][:, None] * (-_softmax_rows(trace.hidden[i - 1]))
        d_z = d_a * (trace.pre[i - 1] > 0.0)
    return g


def _hinge_terms(energies: np.ndarray, m_in: float, m_out: float, side: str):
    """Per-sample hinge value and dLoss/dE for one batch at one tap."""
    if side == "id":
        act = np.maximum(energies - m_in, 0.0)
        return act**2, 2.0 * act
    act = np.maximum(m_out - energies, 0.0)
    return act**2, -2.0 * act


def _grad_ce_rebo(net: LayeredNet, x, y, x_ood, spec: CeReboLoss):
    labels = np.asarray(y, dtype=np.int64)
    trace = forward_batch(net, x)
    n = trace.x.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must align with the ID batch")
    bad = [t for t in spec.layer_set if not (0 <= t < net.n_taps)]
    if bad:
        raise ValueError(f"layer_set indices {sorted(bad)} out of range for {net.n_taps} taps")

    probs = _softmax_rows(trace.logits)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits *= spec.ce_weight / n
    ce = ce_loss(trace.logits, labels)

    hinge_total = 0.0
    per_layer = np.zeros(net.n_taps)
    id_coef: dict[int, np.ndarray] = {}
    for t in spec.layer_set:
        e = _energy_rows(trace.taps[t])
        h, d_e = _hinge_terms(e, spec.m_in, spec.m_out, "id")
        per_layer[t] += float(np.mean(h))
        hinge_total += float(np.mean(h))
        id_coef[t] = spec.lam * d_e / n
    grads = _backprop_mlp(net, trace, d_logits, id_coef)

    x_ood = np.asarray(x_ood, dtype=np.float64)
    if x_ood.ndim != 2 or x_ood.shape[0] == 0:
        raise ValueError("seen-OoD batch must be a non-empty 2-D array")
    trace_ood = forward_batch(net, x_ood)
    n_ood = trace_ood.x.shape[0]
    ood_coef: dict[int, np.ndarray] = {}
    for t in spec.layer_set:
        e = _energy_rows(trace_ood.taps[t])
        h, d_e = _hinge_terms(e, spec.m_in, spec.m_out, "ood")
        per_layer[t] += float(np.mean(h))
        hinge_total += float(np.mean(h))
        ood_coef[t] = spec.lam * d_e / n_ood
    if ood_coef:
        grads_ood = _backprop_mlp(
            net, trace_ood, np.zeros_like(trace_ood.logits), ood_coef
        )
        grads.add_scaled(grads_ood)

    total = spec.ce_weight * ce + spec.lam * hinge_total
    return total, grads, ce, per_layer


def _grad_ce(net: LayeredNet, x, y):
    labels = np.asarray(y, dtype=np.int64)
    trace = forward_batch(net, x)
    n = trace.x.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must align with the batch")
    probs = _softmax_rows(trace.logits)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    return ce_loss(trace.logits, labels), _backprop_mlp(net, trace, d_logits, {})


def grad(net, batch: tuple, loss_spec):
    """Exact reverse-mode gradients of the mean batch loss.

    Batch layout depends on the loss:
      CeLoss      -> (x_rows, labels) on a LayeredNet
      CeReboLoss  -> (x_rows, labels, ood_x_rows) on a LayeredNet
      ElboLoss    -> (x_rows, eps_rows) on a VaeNet, eps the reparam noise
    Returns (loss_value, Grads); raises on a non-finite loss.
    """
    if isinstance(loss_spec, CeLoss):
        loss, g = _grad_ce(net, *batch)
    elif isinstance(loss_spec, CeReboLoss):
        loss, g, _, _ = _grad_ce_rebo(net, *batch, loss_spec)
    elif isinstance(loss_spec, ElboLoss):
        loss, g = _grad_elbo(net, *batch, kl_weight=loss_spec.kl_weight)
    else:
        raise TypeError(f"unknown loss spec {loss_spec!r}")
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return loss, g


def sgd_step(net, grads: Grads, lr: float, momentum: float = 0.0, velocity=None):
    """One momentum-SGD update, in place: v = momentum*v + g; p -= lr*v.

    Returns the velocity to thread into the next call.
    """
    if velocity is None:
        velocity = Grads.zeros_like(net)
    for i in range(len(net.weights)):
        velocity.weights[i] = momentum * velocity.weights[i] + grads.weights[i]
        velocity.biases[i] = momentum * velocity.biases[i] + grads.biases[i]
        net.weights[i] -= lr * velocity.weights[i]
        net.biases[i] -= lr * velocity.biases[i]
    return velocity


def get_params(net) -> np.ndarray:
    """All parameters as one flat vector, in declaration order."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def set_params(net, flat: np.ndarray) -> None:
    i = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = flat[i : i + w.size].reshape(w.shape)
        i += w.size
        b[...] = flat[i : i + b.size]
        i += b.size
    if i != flat.size:
        raise ValueError(f"parameter vector length {flat.size}, expected {i}")


# ---------------------------------------------------------------------------
# VAE


class VaeNet:
    """Encoder input->hidden->(mu, logvar), decoder latent->hidden->input; ReLU hidden."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != 5 or len(biases) != 5:
            raise ValueError("VaeNet needs exactly 5 affine layers")
        self.weights = weights  # enc1, mu, logvar, dec1, dec2
        self.biases = biases

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.weights[1].shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.latent_dim)

    def copy(self) -> "VaeNet":
        return VaeNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_vae(input_dim: int, hidden_dim: int = 16, latent_dim: int = 4, seed: int = 0) -> VaeNet:
    rng = np.random.default_rng(seed)
    shapes = [
        (input_dim, hidden_dim),
        (hidden_dim, latent_dim),
        (hidden_dim, latent_dim),
        (latent_dim, hidden_dim),
        (hidden_dim, input_dim),
    ]
    weights, biases = [], []
    for d_in, d_out in shapes:
        s = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-s, s, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return VaeNet(weights, biases)


def vae_encode_mean(net: VaeNet, x_rows: np.ndarray) -> np.ndarray:
    h = np.maximum(x_rows @ net.weights[0] + net.biases[0], 0.0)
    return h @ net.weights[1] + net.biases[1]


def vae_decode(net: VaeNet, z_rows: np.ndarray) -> np.ndarray:
    h = np.maximum(z_rows @ net.weights[3] + net.biases[3], 0.0)
    return h @ net.weights[4] + net.biases[4]


def vae_reconstruct_mean(net: VaeNet, x_rows: np.ndarray) -> np.ndarray:
    """Deterministic reconstruction through the posterior mean latent."""
    return vae_decode(net, vae_encode_mean(net, x_rows))


def _grad_elbo(net: VaeNet, x_rows, eps_rows, kl_weight: float = 1.0):
    x = np.asarray(x_rows, dtype=np.float64)
    eps = np.asarray(eps_rows, dtype=np.float64)
    n = x.shape[0]
    if eps.shape != (n, net.latent_dim):
        raise ValueError(f"eps shape {eps.shape} must be ({n}, {net.latent_dim})")

    w, b = net.weights, net.biases
    ze = x @ w[0] + b[0]
    he = np.maximum(ze, 0.0)
    mu = he @ w[1] + b[1]
    logvar = he @ w[2] + b[2]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    zd = z @ w[3] + b[3]
    hd = np.maximum(zd, 0.0)
    xhat = hd @ w[4] + b[4]

    recon = 0.5 * np.sum((x - xhat) ** 2, axis=1)
    kl = -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)
    loss = float(np.mean(recon + kl_weight * kl))

    g = Grads.zeros_like(net)
    d_xhat = (xhat - x) / n
    g.weights[4] = hd.T @ d_xhat
    g.biases[4] = np.sum(d_xhat, axis=0)
    d_hd = d_xhat @ w[4].T
    d_zd = d_hd * (zd > 0.0)
    g.weights[3] = z.T @ d_zd
    g.biases[3] = np.sum(d_zd, axis=0)
    d_z = d_zd @ w[3].T
    d_mu = d_z + kl_weight * mu / n
    d_logvar = d_z * eps * std * 0.5 + kl_weight * (-0.5) * (1.0 - np.exp(logvar)) / n
    g.weights[1] = he.T @ d_mu
    g.biases[1] = np.sum(d_mu, axis=0)
    g.weights[2] = he.T @ d_logvar
    g.biases[2] = np.sum(d_logvar, axis=0)
    d_he = d_mu @ w[1].T + d_logvar @ w[2].T
    d_ze = d_he * (ze > 0.0)
    g.weights[0] = x.T @ d_ze
    g.biases[0] = np.sum(d_ze, axis=0)
    return loss, g


# ---------------------------------------------------------------------------
# checkpoint format: magic "LIRN", version u16, u32 layer count, u32 dims,
# then f64 parameters in declaration order (W row-major, then bias, per layer)


def save_net(net: LayeredNet, path) -> None:
    dims = net.layer_dims
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        write_u16(f, NET_FORMAT_VERSION)
        write_u32(f, len(dims))
        for d in dims:
            write_u32(f, d)
        for w, b in zip(net.weights, net.biases):
            write_f64_array(f, w)
            write_f64_array(f, b)


def load_net(path) -> LayeredNet:
    with open(path, "rb") as f:
        expect_magic(f, NET_MAGIC)
        expect_version(f, NET_FORMAT_VERSION)
        n_dims = read_u32(f, "layer count")
        if n_dims < 2:
            raise FileFormatError("field", f"need >= 2 layer dims, got {n_dims}")
        dims = [read_u32(f, "layer dim") for _ in range(n_dims)]
        if any(d < 1 for d in dims):
            raise FileFormatError("field", f"layer dims must be positive, got {dims}")
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(read_f64_array(f, d_in * d_out, "weights").reshape(d_in, d_out))
            biases.append(read_f64_array(f, d_out, "biases"))
        extra = f.read(1)
        if extra:
            raise FileFormatError("size", "trailing bytes after checkpoint payload")
    return LayeredNet(weights, biases)
