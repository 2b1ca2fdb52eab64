"""Dense kernel primitives and the biased MMD estimator with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist

MEDIAN = "median"


class KernelKind(str, Enum):
    LINEAR = "linear"
    POLY2 = "poly2"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice for the MMD loss.

    ``bandwidth`` is only read for the Gaussian kernel; the string
    ``"median"`` selects the median heuristic, recomputed on every call.
    """

    kind: KernelKind = KernelKind.GAUSSIAN
    bandwidth: Union[float, str] = MEDIAN
    poly_offset: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN:
                raise ValueError(f"unknown bandwidth sentinel {self.bandwidth!r}")
        elif not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be a positive finite number")
        if not np.isfinite(self.poly_offset):
            raise ValueError("poly_offset must be finite")

    def resolve(self, X: np.ndarray, Y: np.ndarray) -> "KernelSpec":
        """Return a copy with a numeric bandwidth (no-op for non-Gaussian kernels)."""
        if self.kind is KernelKind.GAUSSIAN and self.bandwidth == MEDIAN:
            return KernelSpec(self.kind, median_heuristic_bandwidth(X, Y), self.poly_offset)
        return self


def as_features(X, name: str = "X") -> np.ndarray:
    """Validate a feature matrix: 2-D, at least one column, finite float64."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if A.shape[1] < 1:
        raise ValueError(f"{name} must have at least one column")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _check_pair(X, Y):
    X = as_features(X, "X")
    Y = as_features(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(
            f"incompatible feature dimensions: {X.shape[1]} vs {Y.shape[1]}"
        )
    return X, Y


def pairwise_sq_dist(X, Y) -> np.ndarray:
    X, Y = _check_pair(X, Y)
    # direct differences: identical rows give exactly 0
    return cdist(X, Y, "sqeuclidean")


def median_heuristic_bandwidth(X, Y) -> float:
    X, Y = _check_pair(X, Y)
    Z = np.vstack([X, Y])
    n = Z.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least 2 rows in total")
    D = pairwise_sq_dist(Z, Z)
    iu = np.triu_indices(n, k=1)
    d = D[iu]
    d = d[d > 0.0]
    if d.size == 0:
        return 1.0
    return float(np.sqrt(np.median(d)))


def kernel_gram(X, Y, k: KernelSpec) -> np.ndarray:
    X, Y = _check_pair(X, Y)
    if k.kind is KernelKind.LINEAR:
        return X @ Y.T
    if k.kind is KernelKind.POLY2:
        return (X @ Y.T + k.poly_offset) ** 2
    k = k.resolve(X, Y)
    return np.exp(-pairwise_sq_dist(X, Y) / (2.0 * k.bandwidth ** 2))


def _moments(X):
    return X.mean(axis=0), X.T @ X / X.shape[0]


def mmd2(X, Y, k: KernelSpec) -> float:
    """Biased (V-statistic) squared MMD between the rows of X and Y.

    Linear and degree-2 kernels use the equivalent moment form
    ``|M_X - M_Y|_F^2 + 2c |mu_X - mu_Y|^2``, which avoids the cancellation
    of the Gram-mean form.
    """
    X, Y = _check_pair(X, Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("mmd2 needs non-empty inputs")
    mx, Mx = _moments(X)
    my, My = _moments(Y)
    if k.kind is KernelKind.LINEAR:
        return float(np.sum((mx - my) ** 2))
    if k.kind is KernelKind.POLY2:
        return float(np.sum((Mx - My) ** 2) + 2.0 * k.poly_offset * np.sum((mx - my) ** 2))
    k = k.resolve(X, Y)
    return float(
        kernel_gram(X, X, k).mean()
        + kernel_gram(Y, Y, k).mean()
        - 2.0 * kernel_gram(X, Y, k).mean()
    )


def mmd2_grad_wrt_X(X, Y, k: KernelSpec) -> np.ndarray:
    """Gradient of :func:`mmd2` with respect to X, bandwidth held fixed."""
    X, Y = _check_pair(X, Y)
    m, n = X.shape[0], Y.shape[0]
    if m == 0 or n == 0:
        raise ValueError("mmd2 needs non-empty inputs")
    mx, Mx = _moments(X)
    my, My = _moments(Y)
    if k.kind is KernelKind.LINEAR:
        return np.tile(2.0 * (mx - my) / m, (m, 1))
    if k.kind is KernelKind.POLY2:
        return 4.0 / m * (X @ (Mx - My) + k.poly_offset * (mx - my))
    k = k.resolve(X, Y)
    s2 = k.bandwidth ** 2
    Kxx = np.exp(-pairwise_sq_dist(X, X) / (2.0 * s2))
    Kxy = np.exp(-pairwise_sq_dist(X, Y) / (2.0 * s2))
    # d/dx_i k(x_i, z) = -k(x_i, z) (x_i - z) / s2; K_XX counts each pair twice
    gxx = -2.0 / (m * m * s2) * (Kxx.sum(axis=1)[:, None] * X - Kxx @ X)
    gxy = -1.0 / (m * n * s2) * (Kxy.sum(axis=1)[:, None] * X - Kxy @ Y)
    return gxx - 2.0 * gxy


def mmd2_and_grad(X, Y, k: KernelSpec):
    """Value and X-gradient with a single bandwidth resolution."""
    X, Y = _check_pair(X, Y)
    k = k.resolve(X, Y)
    return mmd2(X, Y, k), mmd2_grad_wrt_X(X, Y, k)
