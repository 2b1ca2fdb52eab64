"""Round-based federated adaptation with source prototypes.

One round: the server computes source prototypes with the global model
and broadcasts model + prototypes; the pseudo-client (server-side, labelled
source) and every camera client train a teacher-student pair locally; the
returned backbones are averaged into the new global model. Classifier heads
never leave their owner.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .encoder import (
    ClassifierHead,
    ModelParams,
    add_scaled,
    backward,
    ce_loss_grad,
    ema_update,
    forward,
    forward_cache,
    sgd_step,
    soft_triplet_loss_grad,
    softmax,
    triplet_loss_grad,
)
from .evaluation import RetrievalSplit, evaluate
from .numerics import KernelSpec, mmd2_and_grad
from .pseudolabel import (
    PseudoDataset,
    build_pseudo_dataset,
    dbscan,
    ppe_iterations,
    ppe_schedule,
)
from .synthgen import SyntheticDomains, generate

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 8
MMT_BACKBONES = 4

# rng stream tags
_INIT, _WARMUP, _PROTO, _PSEUDO, _CLIENT = range(5)


class DivergenceError(RuntimeError):
    """A local loss became non-finite."""


def _rng(cfg: ExperimentConfig, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag, *extra])


# ---------------------------------------------------------------- prototypes


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (K, d_feat)
    identity_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.identity_ids)


def compute_prototypes(params: ModelParams, source_X, source_y) -> PrototypeSet:
    """Per-identity mean embedding, rows in ascending identity order."""
    source_y = np.asarray(source_y)
    feats = forward(params, source_X)
    ids = np.unique(source_y)
    if ids.size == 0:
        raise ValueError("source set is empty")
    protos = np.stack([feats[source_y == k].mean(axis=0) for k in ids])
    return PrototypeSet(protos, ids)


def subsample_prototypes(ps: PrototypeSet, fraction: float, rng: np.random.Generator) -> PrototypeSet:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    K = len(ps)
    keep = max(1, int(round(fraction * K)))
    if keep == K:
        return ps
    idx = np.sort(rng.choice(K, size=keep, replace=False))
    return PrototypeSet(ps.prototypes[idx], ps.identity_ids[idx])


# ---------------------------------------------------------------- local training


@dataclass
class ClientState:
    client_id: int
    X: np.ndarray
    student: Optional[ModelParams] = None
    teacher: Optional[ModelParams] = None
    head: Optional[ClassifierHead] = None
    teacher_head: Optional[ClassifierHead] = None
    pseudo: Optional[PseudoDataset] = None

    @property
    def num_samples(self) -> int:
        return len(self.X)


@dataclass
class LocalStats:
    client_id: int
    num_clusters: int
    steps: int = 0
    skipped: bool = False
    loss_terms: Dict[str, float] = field(default_factory=dict)


@dataclass
class _Pair:
    """Student/teacher backbones and heads of one participant."""

    student: ModelParams
    teacher: ModelParams
    head: ClassifierHead
    teacher_head: ClassifierHead


TERMS = ("ce", "ce_soft", "tri", "tri_soft", "mmd", "total")


def _train_step(pair: _Pair, X, y, cfg: ExperimentConfig, kernel: Optional[KernelSpec],
                protos: Optional[np.ndarray], full_X=None) -> Dict[str, float]:
    """One SGD step on the student followed by one EMA step on the teacher."""
    w = cfg.loss_weights
    cache = forward_cache(pair.student, X)
    fs = cache.features
    ft = forward(pair.teacher, X)
    soft = softmax(ft @ pair.teacher_head.w)

    ce, g_head_h, g_ce = ce_loss_grad(pair.head, fs, labels=y)
    ce_s, g_head_s, g_ce_s = ce_loss_grad(pair.head, fs, soft_targets=soft)
    d_feat = w.beta1 * g_ce + w.beta2 * g_ce_s
    g_head = add_scaled(ClassifierHead(w.beta1 * g_head_h.w), g_head_s, w.beta2)

    tri = tri_s = 0.0
    if len(np.unique(y)) > 1:
        tri, g_tri = triplet_loss_grad(fs, y, cfg.margin)
        tri_s, g_tri_s = soft_triplet_loss_grad(fs, ft, y)
        d_feat = d_feat + w.gamma1 * g_tri + w.gamma2 * g_tri_s

    mmd = 0.0
    grads = None
    if kernel is not None and protos is not None and w.lam > 0:
        if full_X is None:
            mmd, g_mmd = mmd2_and_grad(fs, protos, kernel)
            d_feat = d_feat + w.lam * g_mmd
        else:
            full_cache = forward_cache(pair.student, full_X)
            mmd, g_mmd = mmd2_and_grad(full_cache.features, protos, kernel)
            grads = backward(pair.student, full_cache, w.lam * g_mmd)

    total = w.beta1 * ce + w.beta2 * ce_s + w.gamma1 * tri + w.gamma2 * tri_s + w.lam * mmd
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite local loss {total}")
    g = backward(pair.student, cache, d_feat)
    if grads is not None:
        g = add_scaled(g, grads, 1.0)

    pair.student = sgd_step(pair.student, g, cfg.lr)
    pair.head = sgd_step(pair.head, g_head, cfg.lr)
    pair.teacher = ema_update(pair.teacher, pair.student, cfg.tau)
    pair.teacher_head = ema_update(pair.teacher_head, pair.head, cfg.tau)
    return dict(zip(TERMS, (ce, ce_s, tri, tri_s, mmd, total)))


def _mean_terms(rows: List[Dict[str, float]]) -> Dict[str, float]:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in TERMS}


def _returned(pair: _Pair, cfg: ExperimentConfig) -> ModelParams:
    return pair.teacher if cfg.transmit == "teacher" else pair.student


def client_round(cs: ClientState, global_params: ModelParams, protos: Optional[PrototypeSet],
                 cfg: ExperimentConfig, round_idx: int = 0) -> Tuple[ModelParams, LocalStats]:
    """Local unsupervised adaptation of one camera client.

    Clusters the client's data with the received model, trains
    ``ppe_count`` pseudo-epochs of ``ceil(K_i / I)`` steps each, and returns
    the teacher (or student) backbone. A client with no clusters returns
    the global model unchanged.
    """
    rng = _rng(cfg, _CLIENT, round_idx, cs.client_id)
    kernel = cfg.kernel_spec
    if kernel is not None and cfg.lam > 0 and (protos is None or len(protos) == 0):
        raise ValueError("prototypes are required when the MMD term is active")

    feats = forward(global_params, cs.X)
    cs.pseudo = build_pseudo_dataset(dbscan(feats, cfg.eps, cfg.min_pts))
    stats = LocalStats(cs.client_id, cs.pseudo.num_clusters)
    if cs.pseudo.num_clusters == 0:
        stats.skipped = True
        log.info("client %d found no clusters; skipping round %d", cs.client_id, round_idx)
        return global_params.copy(), stats

    head = ClassifierHead.from_centroids(
        feats[cs.pseudo.sample_indices], cs.pseudo.pseudo_labels, cs.pseudo.num_clusters
    )
    pair = _Pair(global_params.copy(), global_params.copy(), head, head.copy())
    rows = []
    for _ in range(cfg.ppe_count):
        for batch in ppe_schedule(cs.pseudo, cfg.I, cfg.B, rng):
            idx = np.array([b[0] for b in batch])
            y = np.array([b[1] for b in batch])
            P = None
            full_X = None
            if protos is not None and kernel is not None:
                if cfg.mmd_mode == "full":
                    P, full_X = protos.prototypes, cs.X
                else:
                    n = min(len(idx), len(protos))
                    P = protos.prototypes[rng.choice(len(protos), size=n, replace=False)]
            rows.append(_train_step(pair, cs.X[idx], y, cfg, kernel, P, full_X))
            stats.steps += 1
    cs.student, cs.teacher = pair.student, pair.teacher
    cs.head, cs.teacher_head = pair.head, pair.teacher_head
    stats.loss_terms = _mean_terms(rows)
    return _returned(pair, cfg), stats


@dataclass
class CommLedger:
    uploaded: List[int] = field(default_factory=list)
    downloaded: List[int] = field(default_factory=list)
    prototype: List[int] = field(default_factory=list)

    def record(self, num_clients: int, param_count: int, protos_sent: int, d_feat: int,
               comm_model: str = "fedprotoid") -> Tuple[int, int, int]:
        """Book one round; the pseudo-client lives on the server and is free."""
        backbones = MMT_BACKBONES if comm_model == "mmt" else 1
        model_bytes = backbones * param_count * BYTES_PER_VALUE
        proto_bytes = 0 if comm_model == "mmt" else protos_sent * d_feat * BYTES_PER_VALUE
        up = num_clients * model_bytes
        down = num_clients * (model_bytes + proto_bytes)
        self.uploaded.append(up)
        self.downloaded.append(down)
        self.prototype.append(proto_bytes)
        return up, down, proto_bytes

    @property
    def total_uploaded(self) -> int:
        return sum(self.uploaded)

    @property
    def total_downloaded(self) -> int:
        return sum(self.downloaded)


@dataclass
class ServerState:
    global_params: ModelParams
    source_X: np.ndarray
    source_y: np.ndarray
    # pseudo-client heads persist across rounds on the server
    head: ClassifierHead
    teacher_head: ClassifierHead
    ledger: CommLedger = field(default_factory=CommLedger)
    last_pseudo_params: Optional[ModelParams] = None

    @property
    def num_classes(self) -> int:
        return self.head.num_classes


def _label_index(y: np.ndarray) -> PseudoDataset:
    ids, labels = np.unique(y, return_inverse=True)
    return PseudoDataset(np.arange(len(y)), labels.astype(np.int64), len(ids))


def pseudo_client_round(server: ServerState, cfg: ExperimentConfig,
                        round_idx: int = 0) -> Tuple[ModelParams, LocalStats]:
    """Supervised teacher-student training on the labelled source set (no MMD)."""
    rng = _rng(cfg, _PSEUDO, round_idx)
    ds = _label_index(server.source_y)
    pair = _Pair(server.global_params.copy(), server.global_params.copy(),
                 server.head.copy(), server.teacher_head.copy())
    stats = LocalStats(-1, ds.num_clusters)
    rows = []
    for _ in range(cfg.ppe_count):
        for batch in ppe_schedule(ds, cfg.I, cfg.B, rng):
            idx = np.array([b[0] for b in batch])
            y = np.array([b[1] for b in batch])
            rows.append(_train_step(pair, server.source_X[idx], y, cfg, None, None))
            stats.steps += 1
    server.head, server.teacher_head = pair.head, pair.teacher_head
    stats.loss_terms = _mean_terms(rows)
    out = _returned(pair, cfg)
    server.last_pseudo_params = out
    return out, stats


def aggregate(source_params: ModelParams, clients: Sequence[Tuple[ModelParams, float]],
              alpha: float) -> ModelParams:
    """alpha * source + (1 - alpha) * sum_i (N_i / sum N) * client_i."""
    if not clients:
        raise ValueError("need at least one client model")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    dims = source_params.dims
    for p, _ in clients:
        if p.dims != dims:
            raise ValueError("client parameter shapes differ from the source model")
    sizes = np.array([n for _, n in clients], dtype=np.float64)
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ValueError("client sample counts must be non-negative with a positive sum")
    if alpha == 1.0:
        return source_params.copy()
    weights = sizes / sizes.sum()
    mix = sum(wi * p.flatten() for (p, _), wi in zip(clients, weights))
    flat = alpha * source_params.flatten() + (1.0 - alpha) * mix
    return ModelParams.from_flat(flat, *dims)


# ---------------------------------------------------------------- driver


@dataclass
class RoundReport:
    round: int
    per_client: List[Dict]
    pseudo_client_loss: Dict[str, float]
    uploaded_bytes: int
    downloaded_bytes: int
    prototype_bytes: int
    prototypes_sent: int
    map: Optional[float]
    rank1: Optional[float]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class FederationResult:
    reports: List[RoundReport]
    global_params: ModelParams
    initial_map: Optional[float]
    initial_rank1: Optional[float]
    ledger: CommLedger


def warmup(params: ModelParams, source_X, source_y, cfg: ExperimentConfig,
           rng: np.random.Generator) -> Tuple[ModelParams, ClassifierHead]:
    """Supervised pre-training on the source (hard CE + batch-hard triplet)."""
    ds = _label_index(np.asarray(source_y))
    head = ClassifierHead.from_centroids(forward(params, source_X), ds.pseudo_labels, ds.num_clusters)
    for _ in range(cfg.warmup_steps):
        chosen = rng.choice(ds.num_clusters, size=min(cfg.I, ds.num_clusters), replace=False)
        idx, y = [], []
        for c in chosen:
            members = ds.members(c)
            idx.extend(rng.choice(members, size=cfg.B, replace=len(members) < cfg.B))
            y.extend([c] * cfg.B)
        idx, y = np.array(idx), np.array(y)
        cache = forward_cache(params, source_X[idx])
        _, g_head, d_feat = ce_loss_grad(head, cache.features, labels=y)
        if len(chosen) > 1:
            _, g_tri = triplet_loss_grad(cache.features, y, cfg.margin)
            d_feat = d_feat + g_tri
        params = sgd_step(params, backward(params, cache, d_feat), cfg.lr)
        head = sgd_step(head, g_head, cfg.lr)
    return params, head


def init_server(cfg: ExperimentConfig, data: SyntheticDomains) -> ServerState:
    params = ModelParams.init(data.d_in, cfg.d_hidden, cfg.d_feat, _rng(cfg, _INIT))
    params, head = warmup(params, data.source_X, data.source_y, cfg, _rng(cfg, _WARMUP))
    return ServerState(params, data.source_X, np.asarray(data.source_y), head, head.copy())


def run_federation(cfg: ExperimentConfig, data: Optional[SyntheticDomains] = None,
                   on_round: Optional[Callable[[RoundReport], None]] = None) -> FederationResult:
    """Warm-up followed by ``cfg.rounds`` federated rounds. Deterministic given ``cfg``."""
    if data is None:
        data = generate(cfg.data)
    server = init_server(cfg, data)
    clients = [ClientState(i, c.X) for i, c in enumerate(data.clients)]
    split: Optional[RetrievalSplit] = data.eval_split
    init_map = init_r1 = None
    if split is not None:
        init_map, init_r1 = evaluate(server.global_params, split)
    log.info("warm-up done: mAP=%s rank1=%s", init_map, init_r1)

    reports: List[RoundReport] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            reports.append(_one_round(r, cfg, server, clients, split, pool))
            if on_round is not None:
                on_round(reports[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(reports, server.global_params, init_map, init_r1, server.ledger)


def _one_round(r, cfg, server: ServerState, clients, split, pool) -> RoundReport:
    g = server.global_params
    proto_model = g
    if cfg.proto_source == "pseudo_client" and server.last_pseudo_params is not None:
        proto_model = server.last_pseudo_params
    protos = compute_prototypes(proto_model, server.source_X, server.source_y)
    protos = subsample_prototypes(protos, cfg.proto_fraction, _rng(cfg, _PROTO, r))
    up, down, pbytes = server.ledger.record(
        len(clients), g.param_count, len(protos), g.d_feat, cfg.comm_model
    )

    theta_s, s_stats = pseudo_client_round(server, cfg, r)
    work = lambda cs: client_round(cs, g, protos, cfg, r)  # noqa: E731
    results = list(pool.map(work, clients)) if pool is not None else [work(cs) for cs in clients]

    server.global_params = aggregate(
        theta_s, [(p, cs.num_samples) for (p, _), cs in zip(results, clients)], cfg.alpha
    )
    m = r1 = None
    if split is not None:
        m, r1 = evaluate(server.global_params, split)
    per_client = [
        {"client_id": st.client_id, "K_i": st.num_clusters, "steps": st.steps,
         "skipped": st.skipped, "loss_terms": st.loss_terms}
        for _, st in results
    ]
    log.info("round %d: mAP=%.4f rank1=%.4f clusters=%s", r, m or 0.0, r1 or 0.0,
             [st.num_clusters for _, st in results])
    return RoundReport(r, per_client, s_stats.loss_terms, up, down, pbytes, len(protos), m, r1)
