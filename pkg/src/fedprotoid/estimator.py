"""scikit-learn style facade over the federated adaptation loop.

>>> est = FedProtoEmbedder(rounds=5).fit(source_X, source_y, target_domains=camera_arrays)
>>> embeddings = est.transform(new_rows)
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ExperimentConfig
from .encoder import forward
from .evaluation import RetrievalSplit, evaluate
from .federation import run_federation
from .synthgen import ClientData, SyntheticDomains


class FedProtoEmbedder(TransformerMixin, BaseEstimator):
    """Learns an L2-normalized embedding from a labelled source set and
    unlabelled per-camera target sets, then maps rows into that space.

    Constructor arguments mirror the experiment configuration keys; see
    :class:`~fedprotoid.config.ExperimentConfig` for their meaning.
    """

    def __init__(self, seed: int = 0, rounds: int = 60, kernel: str = "gaussian",
                 lam: float = 0.1, alpha: float = 0.5, tau: float = 0.5, lr: float = 0.2,
                 I: int = 4, B: int = 4, ppe_count: int = 1, warmup_steps: int = 200,
                 d_hidden: int = 64, d_feat: int = 32, eps: float = 0.6, min_pts: int = 4,
                 proto_fraction: float = 1.0, transmit: str = "teacher", workers: int = 1):
        self.seed = seed
        self.rounds = rounds
        self.kernel = kernel
        self.lam = lam
        self.alpha = alpha
        self.tau = tau
        self.lr = lr
        self.I = I
        self.B = B
        self.ppe_count = ppe_count
        self.warmup_steps = warmup_steps
        self.d_hidden = d_hidden
        self.d_feat = d_feat
        self.eps = eps
        self.min_pts = min_pts
        self.proto_fraction = proto_fraction
        self.transmit = transmit
        self.workers = workers

    def to_config(self) -> ExperimentConfig:
        return ExperimentConfig(**self.get_params())

    def fit(self, X, y, target_domains: Sequence = (), eval_split: Optional[RetrievalSplit] = None):
        """X, y: labelled source rows; target_domains: one array per camera client."""
        X, y = check_X_y(X, y, dtype=np.float64)
        if len(target_domains) == 0:
            raise ValueError("target_domains must hold at least one camera array")
        clients = []
        for c, Xc in enumerate(target_domains):
            Xc = check_array(Xc, dtype=np.float64)
            if Xc.shape[1] != X.shape[1]:
                raise ValueError(f"target domain {c} has {Xc.shape[1]} columns, expected {X.shape[1]}")
            clients.append(ClientData(Xc, c, np.full(len(Xc), -1)))
        cfg = self.to_config()
        self.result_ = run_federation(cfg, SyntheticDomains(X, y, clients, eval_split))
        self.params_ = self.result_.global_params
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.params_, X)

    def evaluate(self, split: RetrievalSplit) -> Tuple[float, float]:
        """(mAP, Rank-1) of the fitted embedding on a query/gallery split."""
        check_is_fitted(self, "params_")
        return evaluate(self.params_, split)
