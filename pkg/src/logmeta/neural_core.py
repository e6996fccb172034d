"""Minimal dense-network numerical kernel.

Forward pass, exact analytic gradients via manual backpropagation, focal
loss, SGD/Adam steps, and a central finite-difference self-check. Loss
"heads" are pluggable: a head maps the batch's output embeddings to
(scalar loss, dLoss/dEmbeddings), which lets the same backward routine
serve squared error, prototypical focal loss, and the leave-one-out
prototypical loss used for inner adaptation. Everything is float64 and
value-semantic: no function mutates its parameter argument.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = "LOGMETA-CKPT v1"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    """Dense net: ReLU on hidden layers, identity on the output layer.

    weights[l] has shape (out_l, in_l); biases[l] has shape (out_l,).
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight rows != bias size")
            if l > 0 and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameter")

    @property
    def layer_sizes(self) -> list[int]:
        if not self.weights:
            return []
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "EncoderParams":
        return EncoderParams([W.copy() for W in self.weights],
                             [b.copy() for b in self.biases])


@dataclass
class Gradients:
    """Shape-congruent with the EncoderParams they differentiate."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    alpha: object = 1.0  # scalar, per-class array, or "balanced"

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def init_params(layer_sizes: Sequence[int], seed: int = 0) -> EncoderParams:
    """He-uniform initialization: W ~ U[-sqrt(6/fan_in), sqrt(6/fan_in)], b = 0."""
    if len(layer_sizes) < 2:
        return EncoderParams([], [])
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases)


def zeros_like_grads(p: EncoderParams) -> Gradients:
    return Gradients([np.zeros_like(W) for W in p.weights],
                     [np.zeros_like(b) for b in p.biases])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward_batch(p: EncoderParams, X: np.ndarray
                   ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Returns (output, per-layer inputs A, per-layer pre-activations Z)."""
    A = [np.asarray(X, dtype=float)]
    Z = []
    n_layers = len(p.weights)
    for l, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = A[-1] @ W.T + b
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite activation at layer {l}")
        Z.append(z)
        A.append(np.maximum(z, 0.0) if l < n_layers - 1 else z)
    return A[-1], A, Z


def forward(p: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Embed a single input vector (pure function)."""
    out, _, _ = _forward_batch(p, np.asarray(x, dtype=float)[None, :])
    return out[0]


def embed_batch(p: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Embed a batch of rows; returns an (n, e) array."""
    out, _, _ = _forward_batch(p, X)
    return out


# A loss head maps batch embeddings (n, e) -> (scalar loss, dLoss/dE (n, e)).
LossHead = Callable[[np.ndarray], tuple[float, np.ndarray]]


def backward(p: EncoderParams, X: np.ndarray, head: LossHead
             ) -> tuple[float, Gradients]:
    """Exact analytic gradients of the head loss w.r.t. every parameter.

    Args:
        p: encoder parameters (not mutated).
        X: (n, input_dim) batch; n must be >= 1.
        head: loss head applied to the batch's output embeddings.

    Returns:
        (loss, gradients) where gradients are shape-congruent with p.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    out, A, Z = _forward_batch(p, X)
    loss, dE = head(out)
    g = zeros_like_grads(p)
    delta = np.asarray(dE, dtype=float)
    n_layers = len(p.weights)
    for l in range(n_layers - 1, -1, -1):
        dZ = delta if l == n_layers - 1 else delta * (Z[l] > 0.0)
        g.weights[l] = dZ.T @ A[l]
        g.biases[l] = dZ.sum(axis=0)
        delta = dZ @ p.weights[l]
    return float(loss), g


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def resolve_alpha(alpha, labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """Resolve a FocalLossConfig alpha into a per-class weight vector.

    "balanced" means inverse class frequency on the given labels, scaled so
    the rarest present class gets weight 1.0 (all weights land in (0, 1]);
    classes absent from the batch also get 1.0.
    """
    if isinstance(alpha, str):
        if alpha != "balanced":
            raise ValueError(f"unknown alpha mode {alpha!r}")
        counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)
        counts = counts.astype(float)
        present = counts > 0
        if not present.any():
            return np.ones(n_classes)
        out = np.ones(n_classes)
        out[present] = counts[present].min() / counts[present]
        return out
    arr = np.asarray(alpha, dtype=float)
    if arr.ndim == 0:
        return np.full(n_classes, float(arr))
    if arr.shape != (n_classes,):
        raise ValueError("per-class alpha has wrong length")
    return arr.copy()


def _clamp_probs(p: np.ndarray) -> np.ndarray:
    if np.any(p < PROB_FLOOR):
        log.warning("focal loss: probability clamped to %g", PROB_FLOOR)
        return np.maximum(p, PROB_FLOOR)
    return p


def focal_loss(probs: np.ndarray, target: int, cfg: FocalLossConfig) -> float:
    """FL = -alpha_target * (1 - p_target)^gamma * ln(p_target).

    probs must sum to 1 (a per-class distribution). A zero p_target is clamped
    to 1e-12 with a warning. alpha must already be numeric here; resolve
    "balanced" against a batch first via resolve_alpha.
    """
    probs = np.asarray(probs, dtype=float)
    if isinstance(cfg.alpha, str):
        raise ValueError("resolve 'balanced' alpha against a batch first")
    alpha = resolve_alpha(cfg.alpha, np.array([target]), n_classes=probs.size)
    p_t = float(_clamp_probs(probs[[target]])[0])
    return float(-alpha[target] * (1.0 - p_t) ** cfg.gamma * np.log(p_t))


def _softmax(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _focal_terms(P: np.ndarray, targets: np.ndarray, gamma: float,
                 alpha_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row focal losses and dFL/dlogits for softmax probabilities P.

    Returns (losses (n,), G (n, C)) where G[i, j] = dFL_i / dZ[i, j] with no
    batch-mean factor applied.
    """
    n, C = P.shape
    idx = np.arange(n)
    p_t = _clamp_probs(P[idx, targets])
    a_t = alpha_vec[targets]
    one_minus = np.maximum(1.0 - p_t, 0.0)
    log_p = np.log(p_t)
    losses = -a_t * one_minus ** gamma * log_p
    # dFL/dp = alpha*gamma*(1-p)^(gamma-1)*ln p - alpha*(1-p)^gamma / p
    if gamma == 0.0:
        dfl_dp = -a_t / p_t
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            term1 = gamma * np.where(one_minus > 0.0,
                                     one_minus ** (gamma - 1.0), 0.0) * log_p
        dfl_dp = a_t * term1 - a_t * one_minus ** gamma / p_t
    # chain through softmax: dp_t/dZ_j = p_t (delta_tj - p_j)
    G = dfl_dp[:, None] * p_t[:, None] * (-P)
    G[idx, targets] += dfl_dp * p_t * 1.0
    return losses, G


# ---------------------------------------------------------------------------
# loss heads
# ---------------------------------------------------------------------------

def make_squared_error_head(targets: np.ndarray) -> LossHead:
    """Mean over the batch of ||e_i - t_i||^2."""
    T = np.asarray(targets, dtype=float)

    def head(E: np.ndarray) -> tuple[float, np.ndarray]:
        if E.shape != T.shape:
            raise ValueError("embedding/target shape mismatch")
        diff = E - T
        n = E.shape[0]
        return float((diff * diff).sum() / n), 2.0 * diff / n

    return head


def _class_stats(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ValueError("every class must appear in the support set")
    return counts


def make_proto_focal_head(n_support: int, support_labels: np.ndarray,
                          query_labels: np.ndarray, cfg: FocalLossConfig,
                          n_classes: int = 2) -> LossHead:
    """Prototypical focal loss over queries, differentiated through prototypes.

    The batch rows must be support rows (n_support of them, in support_labels
    order) followed by query rows. "balanced" alpha resolves against the
    query labels — the set actually scored by the loss.
    """
    y_s = np.asarray(support_labels, dtype=int)
    y_q = np.asarray(query_labels, dtype=int)
    if y_s.size != n_support:
        raise ValueError("support label count != n_support")
    alpha_vec = resolve_alpha(cfg.alpha, y_q, n_classes)
    counts = _class_stats(y_s, n_classes)

    def head(E: np.ndarray) -> tuple[float, np.ndarray]:
        if E.shape[0] != n_support + y_q.size:
            raise ValueError("batch rows != support + query counts")
        S, Q = E[:n_support], E[n_support:]
        protos = np.zeros((n_classes, E.shape[1]))
        for c in range(n_classes):
            protos[c] = S[y_s == c].mean(axis=0)
        diff = Q[:, None, :] - protos[None, :, :]          # (nq, C, e)
        d2 = (diff * diff).sum(axis=2)
        P = _softmax(-d2)
        losses, G = _focal_terms(P, y_q, cfg.gamma, alpha_vec)
        nq = y_q.size
        loss = float(losses.mean())
        G = G / nq                                          # mean factor
        # dZ/dQ_i = -2 (Q_i - mu_c); dZ/dmu_c = +2 (Q_i - mu_c)
        dQ = -2.0 * (G[:, :, None] * diff).sum(axis=1)
        dmu = 2.0 * (G[:, :, None] * diff).sum(axis=0)      # (C, e)
        dS = np.zeros_like(S)
        for c in range(n_classes):
            dS[y_s == c] = dmu[c] / counts[c]
        return loss, np.vstack([dS, dQ])

    return head


def make_loo_proto_focal_head(labels: np.ndarray, cfg: FocalLossConfig,
                              n_classes: int = 2) -> LossHead:
    """Leave-one-out prototypical focal loss over a support-only batch.

    Each point is scored against prototypes built from the remaining support
    points (its own class prototype excludes it), which keeps the support
    loss informative. Every class needs >= 2 members. "balanced" alpha
    resolves against the support labels.
    """
    y = np.asarray(labels, dtype=int)
    counts = _class_stats(y, n_classes)
    if np.any(counts < 2):
        raise ValueError("leave-one-out prototypes need >= 2 points per class")
    alpha_vec = resolve_alpha(cfg.alpha, y, n_classes)

    def head(E: np.ndarray) -> tuple[float, np.ndarray]:
        n, e = E.shape
        if n != y.size:
            raise ValueError("batch rows != label count")
        mu = np.zeros((n_classes, e))
        for c in range(n_classes):
            mu[c] = E[y == c].mean(axis=0)
        dE = np.zeros_like(E)
        total = 0.0
        for i in range(n):
            c_i = y[i]
            protos_i = mu.copy()
            protos_i[c_i] = (counts[c_i] * mu[c_i] - E[i]) / (counts[c_i] - 1.0)
            diff = E[i] - protos_i                          # (C, e)
            d2 = (diff * diff).sum(axis=1)
            P = _softmax(-d2[None, :])
            losses, G = _focal_terms(P, y[[i]], cfg.gamma, alpha_vec)
            total += float(losses[0])
            g = G[0] / n                                    # mean factor
            dE[i] += -2.0 * (g[:, None] * diff).sum(axis=0)
            dproto = 2.0 * g[:, None] * diff                # (C, e)
            for c in range(n_classes):
                members = y == c
                if c == c_i:
                    members = members.copy()
                    members[i] = False
                    dE[members] += dproto[c] / (counts[c] - 1.0)
                else:
                    dE[members] += dproto[c] / counts[c]
        return total / n, dE

    return head


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(p: EncoderParams, g: Gradients, lr: float) -> EncoderParams:
    if lr <= 0:
        raise ValueError("lr must be > 0")
    return EncoderParams(
        [W - lr * gW for W, gW in zip(p.weights, g.weights)],
        [b - lr * gb for b, gb in zip(p.biases, g.biases)])


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    t: int = 0


def init_adam(p: EncoderParams) -> AdamState:
    return AdamState(
        m_w=[np.zeros_like(W) for W in p.weights],
        v_w=[np.zeros_like(W) for W in p.weights],
        m_b=[np.zeros_like(b) for b in p.biases],
        v_b=[np.zeros_like(b) for b in p.biases])


def adam_step(p: EncoderParams, g: Gradients, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[EncoderParams, AdamState]:
    """One Adam update with bias correction. Value semantics throughout."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_w, new_b = [], []
    m_w, v_w, m_b, v_b = [], [], [], []
    for W, gW, m, v in zip(p.weights, g.weights, state.m_w, state.v_w):
        m2 = beta1 * m + (1.0 - beta1) * gW
        v2 = beta2 * v + (1.0 - beta2) * gW * gW
        new_w.append(W - lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + eps))
        m_w.append(m2)
        v_w.append(v2)
    for b, gb, m, v in zip(p.biases, g.biases, state.m_b, state.v_b):
        m2 = beta1 * m + (1.0 - beta1) * gb
        v2 = beta2 * v + (1.0 - beta2) * gb * gb
        new_b.append(b - lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + eps))
        m_b.append(m2)
        v_b.append(v2)
    return EncoderParams(new_w, new_b), AdamState(m_w, v_w, m_b, v_b, t)


# ---------------------------------------------------------------------------
# finite-difference self-check
# ---------------------------------------------------------------------------

def finite_diff_check(p: EncoderParams, X: np.ndarray, head: LossHead,
                      eps: float = 1e-4) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    The relative error uses a scale-aware floor so that dead-ReLU zeros do
    not register while a corrupted gradient on any live parameter reads ~1:
    |analytic - numeric| / max(|numeric|, 1e-3 * max|numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    if p.n_params == 0:
        return 0.0
    _, g = backward(p, X, head)

    def loss_at(q: EncoderParams) -> float:
        out, _, _ = _forward_batch(q, np.asarray(X, dtype=float))
        return float(head(out)[0])

    numeric_w = [np.zeros_like(W) for W in p.weights]
    numeric_b = [np.zeros_like(b) for b in p.biases]
    for l, W in enumerate(p.weights):
        for idx in np.ndindex(W.shape):
            q = p.copy()
            q.weights[l][idx] += eps
            up = loss_at(q)
            q.weights[l][idx] -= 2 * eps
            down = loss_at(q)
            numeric_w[l][idx] = (up - down) / (2 * eps)
    for l, b in enumerate(p.biases):
        for idx in np.ndindex(b.shape):
            q = p.copy()
            q.biases[l][idx] += eps
            up = loss_at(q)
            q.biases[l][idx] -= 2 * eps
            down = loss_at(q)
            numeric_b[l][idx] = (up - down) / (2 * eps)

    all_numeric = np.concatenate(
        [a.ravel() for a in numeric_w] + [a.ravel() for a in numeric_b])
    scale = np.abs(all_numeric).max()
    floor = max(1e-3 * scale, 1e-8)
    worst = 0.0
    for a, n in zip(g.weights + g.biases, numeric_w + numeric_b):
        denom = np.maximum(np.abs(n), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(p: EncoderParams, path, seed: int = 0,
                    config_digest: str = "", extras: dict | None = None) -> None:
    """Versioned header + row-major little-endian float64 dumps; bit-exact."""
    sizes = ",".join(str(s) for s in p.layer_sizes)
    lines = [CHECKPOINT_MAGIC,
             f"layer_sizes={sizes}",
             f"seed={seed}",
             f"config_digest={config_digest}"]
    for key in sorted(extras or {}):
        lines.append(f"extra.{key}={extras[key]}")
    lines.append("end-header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for W, b in zip(p.weights, p.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    with open(path, "rb") as fh:
        header: dict[str, str] = {}
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            if line == "end-header":
                break
            if not line:
                raise ValueError(f"truncated checkpoint header: {path}")
            key, _, value = line.partition("=")
            header[key] = value
        sizes_text = header.get("layer_sizes", "")
        sizes = [int(s) for s in sizes_text.split(",")] if sizes_text else []
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w_bytes = fh.read(fan_out * fan_in * 8)
            b_bytes = fh.read(fan_out * 8)
            if len(w_bytes) != fan_out * fan_in * 8 or len(b_bytes) != fan_out * 8:
                raise ValueError(f"truncated checkpoint payload: {path}")
            weights.append(np.frombuffer(w_bytes, dtype="<f8")
                           .reshape(fan_out, fan_in).copy())
            biases.append(np.frombuffer(b_bytes, dtype="<f8").copy())
    return EncoderParams(weights, biases), header
