"""Synthetic labelled source domain and camera-partitioned target domain.

Each identity owns a latent vector ``z``. A sample seen by camera ``c`` is
``A_c z + b_c + noise``; source cameras use the identity map, target
cameras get random affine maps whose distance from identity grows with
``shift_strength``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .evaluation import RetrievalSplit

# per unit of shift_strength: spread of the random linear mixing around the
# identity, and of the per-camera offset
MIX_SCALE = 0.3
OFFSET_SCALE = 0.8


@dataclass(frozen=True)
class SynthSpec:
    num_source_ids: int = 64
    num_target_ids: int = 30
    cameras: int = 6
    samples_per_id_per_camera: int = 4
    latent_dim: int = 16
    shift_strength: float = 1.0
    noise_std: float = 0.3
    source_samples_per_id: int = 8
    eval_samples_per_id_per_camera: int = 3
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_source_ids": self.num_source_ids,
            "num_target_ids": self.num_target_ids,
            "cameras": self.cameras,
            "samples_per_id_per_camera": self.samples_per_id_per_camera,
            "latent_dim": self.latent_dim,
            "source_samples_per_id": self.source_samples_per_id,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.eval_samples_per_id_per_camera < 0:
            raise ValueError("eval_samples_per_id_per_camera must be >= 0")
        if not self.shift_strength >= 0:
            raise ValueError("shift_strength must be non-negative")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class ClientData:
    X: np.ndarray
    camera: int
    # ground truth, kept for evaluation and diagnostics only
    true_ids: np.ndarray


@dataclass
class SyntheticDomains:
    source_X: np.ndarray
    source_y: np.ndarray
    clients: List[ClientData]
    eval_split: RetrievalSplit | None

    @property
    def d_in(self) -> int:
        return self.source_X.shape[1]


def camera_maps(spec: SynthSpec, rng: np.random.Generator):
    d = spec.latent_dim
    maps = []
    for _ in range(spec.cameras):
        A = np.eye(d) + spec.shift_strength * MIX_SCALE * rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        b = spec.shift_strength * OFFSET_SCALE * rng.normal(0.0, 1.0, d)
        maps.append((A, b))
    return maps


def generate(spec: SynthSpec) -> SyntheticDomains:
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim
    z_src = rng.normal(size=(spec.num_source_ids, d))
    z_tgt = rng.normal(size=(spec.num_target_ids, d))
    maps = camera_maps(spec, rng)

    source_y = np.repeat(np.arange(spec.num_source_ids), spec.source_samples_per_id)
    source_X = z_src[source_y] + spec.noise_std * rng.normal(size=(len(source_y), d))

    # target ids live after the source ids
    offset = spec.num_source_ids
    n_train = spec.samples_per_id_per_camera
    n_eval = spec.eval_samples_per_id_per_camera
    clients = []
    q_rows, q_ids, q_cams, g_rows, g_ids, g_cams = [], [], [], [], [], []
    for c, (A, b) in enumerate(maps):
        ids = np.repeat(np.arange(spec.num_target_ids), n_train + n_eval)
        X = z_tgt[ids] @ A.T + b + spec.noise_std * rng.normal(size=(len(ids), d))
        slot = np.tile(np.arange(n_train + n_eval), spec.num_target_ids)
        train = slot < n_train
        clients.append(ClientData(X[train], c, ids[train] + offset))
        if n_eval:
            is_query = slot == n_train
            is_gallery = slot > n_train
            q_rows.append(X[is_query]); q_ids.append(ids[is_query] + offset)
            g_rows.append(X[is_gallery]); g_ids.append(ids[is_gallery] + offset)
            q_cams.append(np.full(is_query.sum(), c)); g_cams.append(np.full(is_gallery.sum(), c))

    split = None
    if n_eval >= 2 and spec.cameras >= 2:
        split = RetrievalSplit(
            np.vstack(q_rows), np.concatenate(q_ids), np.concatenate(q_cams),
            np.vstack(g_rows), np.concatenate(g_ids), np.concatenate(g_cams),
        )
    return SyntheticDomains(source_X, source_y, clients, split)


# ------------------------------------------------------------------ binary dump
#
# int32 header: d_in, n_source, n_clients, n_query, n_gallery
# int32[n_clients]: client row counts
# float64 blocks: source, clients..., query, gallery
# int32 blocks: source labels, per client (camera, ids...), query ids, query
# cams, gallery ids, gallery cams
# All little-endian.

_HDR = struct.Struct("<5i")


def dump(data: SyntheticDomains, path) -> None:
    split = data.eval_split
    nq = 0 if split is None else len(split.query)
    ng = 0 if split is None else len(split.gallery)
    parts = [
        _HDR.pack(data.d_in, len(data.source_X), len(data.clients), nq, ng),
        np.array([len(c.X) for c in data.clients], dtype="<i4").tobytes(),
        data.source_X.astype("<f8").tobytes(),
    ]
    parts += [c.X.astype("<f8").tobytes() for c in data.clients]
    if split is not None:
        parts += [split.query.astype("<f8").tobytes(), split.gallery.astype("<f8").tobytes()]
    parts.append(data.source_y.astype("<i4").tobytes())
    for c in data.clients:
        parts.append(np.concatenate([[c.camera], c.true_ids]).astype("<i4").tobytes())
    if split is not None:
        for arr in (split.query_ids, split.query_cams, split.gallery_ids, split.gallery_cams):
            parts.append(arr.astype("<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path) -> SyntheticDomains:
    blob = Path(path).read_bytes()
    d, ns, nc, nq, ng = _HDR.unpack_from(blob)
    pos = _HDR.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    sizes = take("<i4", nc)
    source_X = take("<f8", ns * d).reshape(ns, d)
    client_X = [take("<f8", n * d).reshape(n, d) for n in sizes]
    query = take("<f8", nq * d).reshape(nq, d)
    gallery = take("<f8", ng * d).reshape(ng, d)
    source_y = take("<i4", ns)
    clients = []
    for X, n in zip(client_X, sizes):
        meta = take("<i4", n + 1)
        clients.append(ClientData(X, int(meta[0]), meta[1:]))
    split = None
    if nq:
        q_ids, q_cams = take("<i4", nq), take("<i4", nq)
        g_ids, g_cams = take("<i4", ng), take("<i4", ng)
        split = RetrievalSplit(query, q_ids, q_cams, gallery, g_ids, g_cams)
    if pos != len(blob):
        raise ValueError("trailing bytes in dataset file")
    return SyntheticDomains(source_X, source_y, clients, split)
