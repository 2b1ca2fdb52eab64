"""Acceptance criteria. Each test records one PASS/FAIL line, printed in the
pytest terminal summary; the assertion then enforces the stated tolerance.
"""

import time

import numpy as np
import pytest

import fedprotoid.federation as fed
from fedprotoid.cli import main
from fedprotoid.config import ExperimentConfig, dump_config
from fedprotoid.encoder import (
    ClassifierHead,
    ModelParams,
    backward,
    ce_loss_grad,
    ema_update,
    forward,
    forward_cache,
    soft_triplet_loss_grad,
    triplet_loss_grad,
)
from fedprotoid.evaluation import retrieval_metrics
from fedprotoid.federation import (
    ClientState,
    aggregate,
    client_round,
    compute_prototypes,
    init_server,
    run_federation,
)
from fedprotoid.numerics import KernelSpec, mmd2, mmd2_grad_wrt_X
from fedprotoid.pseudolabel import dbscan, ppe_iterations
from fedprotoid.synthgen import SynthSpec, generate

from .oracles import (
    average_precision_definition,
    central_diff,
    dbscan_naive,
    max_rel_err,
    mmd2_double_sum,
    param_grad_fd,
    partition,
    sq_dist_loop,
)

RESULTS = []
KINDS = ("linear", "poly2", "gaussian")


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    RESULTS.append((n, line))
    print(line)
    return ok


@pytest.fixture(scope="module")
def default_data():
    return generate(ExperimentConfig(seed=0).data)


def test_c01_mmd_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(200):
        m, n, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
        X, Y = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        kind = KINDS[i % 3]
        worst = max(worst, abs(mmd2(X, Y, KernelSpec(kind)) - mmd2_double_sum(X, Y, kind)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 5.0
    record(1, ok, f"200 instances, max abs err {worst:.2e} (<=1e-10), {elapsed:.2f}s (<5s)")
    assert ok


def _unit(rng, m, d):
    F = rng.normal(size=(m, d))
    return F / np.linalg.norm(F, axis=1, keepdims=True)


def _grad_errors(seed):
    rng = np.random.default_rng(seed)
    m, d, C = 8, int(rng.integers(2, 6)), int(rng.integers(2, 6))
    F, head = _unit(rng, m, d), ClassifierHead(rng.normal(size=(d, C)))
    y_cls = rng.integers(0, C, m)
    q = rng.dirichlet(np.ones(C), size=m)
    y_tri = np.repeat(np.arange(4), 2)
    errs = {}

    _, gh, gf = ce_loss_grad(head, F, labels=y_cls)
    errs["ce_hard"] = max(
        max_rel_err(gf, central_diff(lambda Z: ce_loss_grad(head, Z, labels=y_cls)[0], F)),
        max_rel_err(gh.w, central_diff(lambda W: ce_loss_grad(ClassifierHead(W), F, labels=y_cls)[0], head.w)),
    )
    _, gh, gf = ce_loss_grad(head, F, soft_targets=q)
    errs["ce_soft"] = max(
        max_rel_err(gf, central_diff(lambda Z: ce_loss_grad(head, Z, soft_targets=q)[0], F)),
        max_rel_err(gh.w, central_diff(lambda W: ce_loss_grad(ClassifierHead(W), F, soft_targets=q)[0], head.w)),
    )
    T = rng.normal(size=(m, d))
    _, g = triplet_loss_grad(T, y_tri, margin=1.0)
    errs["triplet"] = max_rel_err(g, central_diff(lambda Z: triplet_loss_grad(Z, y_tri, 1.0)[0], T))
    Tt = rng.normal(size=(m, d))
    _, g = soft_triplet_loss_grad(T, Tt, y_tri)
    errs["soft_triplet"] = max_rel_err(
        g, central_diff(lambda Z: soft_triplet_loss_grad(Z, Tt, y_tri)[0], T))

    p0 = ModelParams.init(3, 6, d, rng)
    p = ModelParams(p0.w1, rng.normal(0, 0.1, 6), p0.w2, rng.normal(0, 0.1, d))
    X, P = rng.normal(size=(6, 3)), _unit(rng, 5, d)
    k = KernelSpec(KINDS[seed % 3]).resolve(forward(p, X), P)
    cache = forward_cache(p, X)
    g = backward(p, cache, mmd2_grad_wrt_X(cache.features, P, k)).flatten()
    errs["mmd_encoder"] = max_rel_err(g, param_grad_fd(lambda r: mmd2(forward(r, X), P, k), p))
    return errs


def test_c02_gradient_suite():
    worst = {}
    for seed in range(50):
        for name, e in _grad_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    ok = all(e < 1e-4 for e in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"50 instances each, max rel err: {detail} (<1e-4)")
    assert ok


def test_c03_ema_closed_form():
    rng = np.random.default_rng(3)
    worst = 0.0
    for tau in (0.0, 0.5, 0.999):
        student = ModelParams.init(4, 5, 3, rng)
        teacher = ModelParams.init(4, 5, 3, rng)
        gap0 = np.linalg.norm(teacher.flatten() - student.flatten())
        for t in range(1, 101):
            teacher = ema_update(teacher, student, tau)
            gap = np.linalg.norm(teacher.flatten() - student.flatten())
            worst = max(worst, abs(gap - tau ** t * gap0))
    ok = worst <= 1e-10
    record(3, ok, f"tau in {{0, 0.5, 0.999}}, t<=100, max deviation {worst:.2e} (<=1e-10)")
    assert ok


def test_c04_aggregation():
    rng = np.random.default_rng(4)
    src, a, b = (ModelParams.init(5, 7, 3, rng) for _ in range(3))
    same = aggregate(src, [(a, 100), (b, 300)], 1.0).flatten().tobytes() == src.flatten().tobytes()
    mixed = aggregate(src, [(a, 100), (b, 300)], 0.0).flatten()
    err = float(np.max(np.abs(mixed - (0.25 * a.flatten() + 0.75 * b.flatten()))))
    ok = same and err <= 1e-12
    record(4, ok, f"alpha=1 bitwise={same}; alpha=0 weight error {err:.1e} (<=1e-12)")
    assert ok


def test_c05_dbscan_oracle():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 81))
        k = int(rng.integers(1, 5))
        centers = rng.uniform(-4, 4, (k, 2))
        X = centers[rng.integers(0, k, n)] + rng.normal(0, 0.5, (n, 2))
        eps, min_pts = float(rng.uniform(0.2, 1.0)), int(rng.integers(1, 7))
        if partition(dbscan(X, eps, min_pts)) != partition(dbscan_naive(X.tolist(), eps, min_pts)):
            mismatches += 1
    ok = mismatches == 0
    record(5, ok, f"100 instances (n<=80, d=2), {mismatches} partition mismatches")
    assert ok


def test_c06_ppe_accounting(monkeypatch):
    steps = []
    real = fed.sgd_step

    def counting(params, grads, lr):
        if isinstance(params, ModelParams):
            steps.append(1)
        return real(params, grads, lr)

    monkeypatch.setattr(fed, "sgd_step", counting)
    rng = np.random.default_rng(6)
    bad = 0
    for i in range(20):
        spec = SynthSpec(num_source_ids=10, num_target_ids=int(rng.integers(4, 12)), cameras=2,
                         latent_dim=6, seed=i)
        cfg = ExperimentConfig(seed=i, warmup_steps=20, d_hidden=16, d_feat=8, data=spec,
                               I=int(rng.integers(1, 6)), B=int(rng.integers(2, 5)),
                               ppe_count=int(rng.integers(1, 4)),
                               eps=float(rng.uniform(0.4, 0.9)), min_pts=int(rng.integers(2, 5)))
        data = generate(spec)
        g = init_server(cfg, data).global_params
        protos = compute_prototypes(g, data.source_X, data.source_y)
        cs = ClientState(0, data.clients[0].X)
        K = len(set(dbscan(forward(g, cs.X), cfg.eps, cfg.min_pts).tolist()) - {-1})
        expected = cfg.ppe_count * ppe_iterations(K, cfg.I) if K else 0
        steps.clear()
        client_round(cs, g, protos, cfg)
        bad += len(steps) != expected
    ok = bad == 0
    record(6, ok, f"20 configs, {bad} step-count mismatches vs ppe_count*ceil(K/I)")
    assert ok


def test_c07_kernel_ordering(default_data):
    start = time.perf_counter()
    cfg = ExperimentConfig(seed=0)
    best = {}
    for kernel in ("none", "linear", "poly2", "gaussian"):
        res = run_federation(cfg.replace(kernel=kernel), default_data)
        best[kernel] = max(r.map for r in res.reports)
    elapsed = time.perf_counter() - start
    gap = 100 * (best["gaussian"] - best["none"])
    ok = (best["gaussian"] > best["none"] and best["poly2"] < best["none"]
          and gap >= 3.0 and elapsed < 300)
    table = " ".join(f"{k}={100 * v:.1f}" for k, v in best.items())
    record(7, ok, f"best mAP {table}; gaussian-none={gap:+.1f} (>=3), "
                  f"poly2<none={best['poly2'] < best['none']}, {elapsed:.0f}s (<300s)")
    assert ok


def test_c08_proto_fraction(default_data):
    cfg = ExperimentConfig(seed=0)
    full = max(r.map for r in run_federation(cfg, default_data).reports)
    tenth = max(r.map for r in run_federation(cfg.replace(proto_fraction=0.1), default_data).reports)
    diff = 100 * abs(full - tenth)
    ok = diff <= 5.0
    record(8, ok, f"best mAP fraction 1.0={100 * full:.1f}, 0.1={100 * tenth:.1f}, "
                  f"|diff|={diff:.1f} (<=5)")
    assert ok


def test_c09_communication(default_data):
    cfg = ExperimentConfig(seed=0, rounds=2)
    fp = run_federation(cfg, default_data)
    mmt = run_federation(cfg.replace(comm_model="mmt"), default_data)
    n = len(default_data.clients)
    backbone = fp.global_params.param_count * fed.BYTES_PER_VALUE
    per_client_fp = [u / n for u in fp.ledger.uploaded]
    per_client_mmt = [u / n for u in mmt.ledger.uploaded]
    ratio = mmt.ledger.total_uploaded / fp.ledger.total_uploaded
    proto_ok = all(p < backbone for p in fp.ledger.prototype)
    ok = (all(u == backbone for u in per_client_fp)
          and all(u == 4 * backbone for u in per_client_mmt) and ratio == 4.0 and proto_ok)
    record(9, ok, f"upload/client/round {per_client_fp[0]:.0f}B (1 backbone={backbone}B), "
                  f"mmt {per_client_mmt[0]:.0f}B, ratio {ratio}, "
                  f"prototype {fp.ledger.prototype[0]}B < params {backbone}B")
    assert ok


def test_c10_determinism(tmp_path):
    path = tmp_path / "default.toml"
    path.write_text(dump_config(ExperimentConfig(seed=0)))
    codes = [main(["run", str(path), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("report.jsonl", "summary.json"))
    ok = codes == [0, 0] and same
    record(10, ok, f"two default runs, exit codes {codes}, byte-identical reports={same}")
    assert ok


def test_c11_retrieval_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n_ids, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        q_ids, q_cams = np.arange(n_ids), rng.integers(0, 3, n_ids)
        extra = int(rng.integers(0, 8))
        g_ids = np.concatenate([q_ids, rng.integers(0, n_ids, extra)])
        g_cams = np.concatenate([(q_cams + 1) % 3, rng.integers(0, 3, extra)])
        q = rng.integers(-2, 3, (n_ids, d)).astype(float)
        g = rng.integers(-2, 3, (len(g_ids), d)).astype(float)
        m, r1 = retrieval_metrics(q, q_ids, q_cams, g, g_ids, g_cams)
        D = sq_dist_loop(q.tolist(), g.tolist())
        rows = [average_precision_definition(D[i], q_ids[i], q_cams[i], g_ids, g_cams)
                for i in range(n_ids)]
        worst = max(worst, abs(m - np.mean([r[0] for r in rows])),
                    abs(r1 - np.mean([r[1] for r in rows])))
    ids = np.arange(4)
    pm, pr = retrieval_metrics(np.eye(4), ids, np.zeros(4), np.vstack([np.eye(4)] * 2),
                               np.tile(ids, 2), np.ones(8))
    ok = worst <= 1e-12 and pm == 1.0 and pr == 1.0
    record(11, ok, f"100 splits, max err {worst:.1e} (<=1e-12); perfect features mAP={pm}, Rank-1={pr}")
    assert ok
