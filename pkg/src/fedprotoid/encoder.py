"""Two-layer perceptron encoder, classifier heads, losses and parameter updates.

Every loss returns its value together with analytic gradients; the
encoder backward pass turns a feature gradient into parameter gradients.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Optional, Tuple, TypeVar

import numpy as np

from .numerics import as_features, pairwise_sq_dist

_HEADER = struct.Struct("<4i")


@dataclass
class ModelParams:
    """Encoder weights. Flattened order: w1 (row-major), b1, w2 (row-major), b2."""

    w1: np.ndarray  # (d_in, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_hidden, d_feat)
    b2: np.ndarray  # (d_feat,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        d_in, d_hidden = self.w1.shape
        if self.b1.shape != (d_hidden,) or self.w2.shape[0] != d_hidden:
            raise ValueError("inconsistent hidden dimension")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("inconsistent feature dimension")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_feat(self) -> int:
        return self.w2.shape[1]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.d_in, self.d_hidden, self.d_feat

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    @classmethod
    def from_flat(cls, vec, d_in: int, d_hidden: int, d_feat: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        sizes = [d_in * d_hidden, d_hidden, d_hidden * d_feat, d_feat]
        if vec.shape != (sum(sizes),):
            raise ValueError(f"expected {sum(sizes)} parameters, got {vec.shape}")
        a, b, c, _ = np.cumsum(sizes)
        return cls(
            vec[:a].reshape(d_in, d_hidden).copy(),
            vec[a:b].copy(),
            vec[b:c].reshape(d_hidden, d_feat).copy(),
            vec[c:].copy(),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, d_feat: int) -> "ModelParams":
        return cls(
            np.zeros((d_in, d_hidden)), np.zeros(d_hidden),
            np.zeros((d_hidden, d_feat)), np.zeros(d_feat),
        )

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_feat: int, rng: np.random.Generator) -> "ModelParams":
        """He-normal weights, zero biases."""
        return cls(
            rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_hidden)),
            np.zeros(d_hidden),
            rng.normal(0.0, np.sqrt(1.0 / d_hidden), (d_hidden, d_feat)),
            np.zeros(d_feat),
        )


@dataclass
class ClassifierHead:
    w: np.ndarray  # (d_feat, num_classes)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape[1] < 1:
            raise ValueError("classifier head needs a (d_feat, num_classes) matrix")

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.w.copy())

    @classmethod
    def from_centroids(cls, features: np.ndarray, labels: np.ndarray, num_classes: int) -> "ClassifierHead":
        """One column per class: the L2-normalized mean feature of that class."""
        labels = np.asarray(labels)
        d = features.shape[1]
        w = np.zeros((d, num_classes))
        for c in range(num_classes):
            mask = labels == c
            if mask.any():
                w[:, c] = features[mask].mean(axis=0)
        w = _normalize_columns(w)
        return cls(w)


def _normalize_columns(w):
    n = np.linalg.norm(w, axis=0, keepdims=True)
    return np.divide(w, n, out=np.zeros_like(w), where=n > 0)


@dataclass
class LossWeights:
    beta1: float = 0.5
    beta2: float = 0.5
    gamma1: float = 0.5
    gamma2: float = 0.5
    lam: float = 0.1
    alpha: float = 0.5
    tau: float = 0.5

    def __post_init__(self):
        if abs(self.beta1 + self.beta2 - 1.0) > 1e-9:
            raise ValueError("beta1 + beta2 must equal 1")
        if abs(self.gamma1 + self.gamma2 - 1.0) > 1e-9:
            raise ValueError("gamma1 + gamma2 must equal 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")


# ---------------------------------------------------------------- forward


@dataclass
class ForwardCache:
    X: np.ndarray
    pre: np.ndarray  # hidden pre-activation
    hidden: np.ndarray
    raw: np.ndarray  # output before normalization
    norm: np.ndarray
    features: np.ndarray


def forward_cache(params: ModelParams, X) -> ForwardCache:
    X = as_features(X, "batch")
    if X.shape[1] != params.d_in:
        raise ValueError(f"batch has {X.shape[1]} columns, encoder expects {params.d_in}")
    pre = X @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    raw = hidden @ params.w2 + params.b2
    norm = np.linalg.norm(raw, axis=1)
    features = np.divide(raw, norm[:, None], out=np.zeros_like(raw), where=norm[:, None] > 0)
    return ForwardCache(X, pre, hidden, raw, norm, features)


def forward(params: ModelParams, X) -> np.ndarray:
    """L2-normalized embeddings of the rows of X; all-zero raw rows stay zero."""
    return forward_cache(params, X).features


def backward(params: ModelParams, cache: ForwardCache, d_features: np.ndarray) -> ModelParams:
    """Parameter gradient given dL/d(features)."""
    f = cache.features
    safe = np.where(cache.norm > 0, cache.norm, 1.0)
    # d(u/|u|) = (I - f f^T) / |u|; zero rows get zero gradient
    d_raw = (d_features - f * np.sum(d_features * f, axis=1, keepdims=True)) / safe[:, None]
    d_raw[cache.norm == 0] = 0.0
    d_w2 = cache.hidden.T @ d_raw
    d_b2 = d_raw.sum(axis=0)
    d_hidden = d_raw @ params.w2.T
    d_pre = d_hidden * (cache.pre > 0)
    d_w1 = cache.X.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return ModelParams(d_w1, d_b1, d_w2, d_b2)


# ---------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss_grad(head: ClassifierHead, features, labels=None, soft_targets=None):
    """Cross-entropy of ``features @ head.w``.

    Pass integer ``labels`` for the hard variant or a row-stochastic
    ``soft_targets`` matrix for the soft variant. Returns
    ``(loss, grad_head, grad_features)``.
    """
    F = as_features(features, "features")
    m = F.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    if (labels is None) == (soft_targets is None):
        raise ValueError("pass exactly one of labels / soft_targets")
    logits = F @ head.w
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (m,):
            raise ValueError("labels must have one entry per row")
        if labels.min() < 0 or labels.max() >= head.num_classes:
            raise ValueError(f"labels must lie in [0, {head.num_classes})")
        q = np.zeros_like(p)
        q[np.arange(m), labels] = 1.0
    else:
        q = np.asarray(soft_targets, dtype=np.float64)
        if q.shape != p.shape:
            raise ValueError("soft_targets shape does not match logits")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("soft_targets rows must sum to 1")
    loss = float(-(q * log_p).sum() / m)
    d_logits = (p - q) / m
    return loss, ClassifierHead(F.T @ d_logits), d_logits @ head.w.T


def _distances(F):
    return np.sqrt(pairwise_sq_dist(F, F))


def _dist_grad(F, i, j, d, coef, out):
    """Accumulate coef * d/dF of ||f_i - f_j|| into ``out``; zero at d == 0."""
    if d > 0:
        g = coef * (F[i] - F[j]) / d
        out[i] += g
        out[j] -= g


def _hardest_pairs(D: np.ndarray, labels: np.ndarray):
    """Batch-hard mining: (anchor, hardest positive, hardest negative) indices."""
    m = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(m, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    anchors = np.flatnonzero(valid)
    if anchors.size == 0:
        raise ValueError("degenerate batch: no anchor has both a positive and a negative")
    pos = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)[anchors]
    neg = np.argmin(np.where(neg_mask, D, np.inf), axis=1)[anchors]
    return anchors, pos, neg


def triplet_loss_grad(features, labels, margin: float = 0.3):
    """Batch-hard triplet loss on Euclidean distances. Returns ``(loss, grad)``."""
    F = as_features(features, "features")
    labels = np.asarray(labels)
    D = _distances(F)
    anchors, pos, neg = _hardest_pairs(D, labels)
    d_ap = D[anchors, pos]
    d_an = D[anchors, neg]
    hinge = margin + d_ap - d_an
    loss = float(np.maximum(hinge, 0.0).mean())
    grad = np.zeros_like(F)
    coef = 1.0 / anchors.size
    for a, p, n, h, dp, dn in zip(anchors, pos, neg, hinge, d_ap, d_an):
        if h > 0:
            _dist_grad(F, a, p, dp, coef, grad)
            _dist_grad(F, a, n, dn, -coef, grad)
    return loss, grad


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def soft_triplet_loss_grad(student_feats, teacher_feats, labels):
    """Softmax-triplet consistency between student and teacher embeddings.

    Hardest positive/negative indices come from student distances; the
    teacher's probability over the same pairs is the (constant) target.
    Returns ``(loss, grad_student)``.
    """
    Fs = as_features(student_feats, "student_feats")
    Ft = as_features(teacher_feats, "teacher_feats")
    if Fs.shape[0] != Ft.shape[0]:
        raise ValueError("student and teacher batches differ in size")
    labels = np.asarray(labels)
    Ds = _distances(Fs)
    anchors, pos, neg = _hardest_pairs(Ds, labels)
    Dt = _distances(Ft)
    z_s = Ds[anchors, neg] - Ds[anchors, pos]
    z_t = Dt[anchors, neg] - Dt[anchors, pos]
    p_t = np.exp(_log_sigmoid(z_t))
    loss_a = -(p_t * _log_sigmoid(z_s) + (1.0 - p_t) * _log_sigmoid(-z_s))
    loss = float(loss_a.mean())
    dz = (np.exp(_log_sigmoid(z_s)) - p_t) / anchors.size
    grad = np.zeros_like(Fs)
    for a, p, n, g in zip(anchors, pos, neg, dz):
        _dist_grad(Fs, a, n, Ds[a, n], g, grad)
        _dist_grad(Fs, a, p, Ds[a, p], -g, grad)
    return loss, grad


# ---------------------------------------------------------------- updates

P = TypeVar("P", ModelParams, ClassifierHead)


def _fields(obj):
    return [f.name for f in dataclasses.fields(obj)]


def _check_same_shape(a, b):
    if type(a) is not type(b):
        raise ValueError(f"type mismatch: {type(a).__name__} vs {type(b).__name__}")
    for name in _fields(a):
        if getattr(a, name).shape != getattr(b, name).shape:
            raise ValueError(f"shape mismatch in {name}")


def sgd_step(params: P, grads: P, lr: float) -> P:
    _check_same_shape(params, grads)
    return type(params)(*(getattr(params, n) - lr * getattr(grads, n) for n in _fields(params)))


def ema_update(teacher: P, student: P, tau: float) -> P:
    """teacher <- tau * teacher + (1 - tau) * student."""
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    _check_same_shape(teacher, student)
    if tau == 0.0:
        return type(student)(*(getattr(student, n).copy() for n in _fields(student)))
    # increment form: a teacher equal to its student stays bitwise unchanged
    return type(teacher)(
        *(getattr(teacher, n) + (1.0 - tau) * (getattr(student, n) - getattr(teacher, n))
          for n in _fields(teacher))
    )


def add_scaled(acc: P, other: P, scale: float) -> P:
    _check_same_shape(acc, other)
    return type(acc)(*(getattr(acc, n) + scale * getattr(other, n) for n in _fields(acc)))


# ---------------------------------------------------------------- wire format


def serialize(params: ModelParams, head: Optional[ClassifierHead] = None) -> bytes:
    """Little-endian dump: four int32 dims (d_in, d_hidden, d_feat, num_classes), then float64s."""
    num_classes = 0 if head is None else head.num_classes
    if head is not None and head.w.shape[0] != params.d_feat:
        raise ValueError("head feature dimension does not match encoder")
    body = params.flatten()
    if head is not None:
        body = np.concatenate([body, head.w.ravel()])
    return _HEADER.pack(*params.dims, num_classes) + body.astype("<f8").tobytes()


def deserialize(blob: bytes) -> Tuple[ModelParams, Optional[ClassifierHead]]:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated parameter blob")
    d_in, d_hidden, d_feat, num_classes = _HEADER.unpack_from(blob)
    if min(d_in, d_hidden, d_feat) < 1 or num_classes < 0:
        raise ValueError("invalid dimensions in header")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    n = d_in * d_hidden + d_hidden + d_hidden * d_feat + d_feat
    if body.size != n + d_feat * num_classes:
        raise ValueError("parameter blob length does not match header")
    params = ModelParams.from_flat(body[:n], d_in, d_hidden, d_feat)
    head = ClassifierHead(body[n:].reshape(d_feat, num_classes)) if num_classes else None
    return params, head
