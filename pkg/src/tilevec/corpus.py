"""Corpora: file ingestion, seeded synthetic generation, fp64 ground truth.

The synthetic generator produces L2-normalized Gaussian-mixture vectors and
is the reproducible default (identical bytes for identical specs).  Ground
truth is fp64 brute force and is the single recall oracle for every
experiment; it is checksum-guarded so it regenerates whenever the vectors or
queries change.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class Corpus:
    vectors: np.ndarray           # (n, dim) fp32
    queries: np.ndarray           # (q, dim) fp32
    gt_ids: np.ndarray | None = None   # (q, k) int64, fp64 brute force
    gt_k: int = 0
    checksum: str = ""
    spec: str = ""

    def __post_init__(self):
        if not self.checksum:
            self.checksum = corpus_checksum(self.vectors, self.queries)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def ids(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int64)

    def ensure_ground_truth(self, k: int = 10) -> np.ndarray:
        fresh = corpus_checksum(self.vectors, self.queries)
        if self.gt_ids is None or self.gt_k < k or fresh != self.checksum:
            self.checksum = fresh
            self.gt_ids = brute_force_topk(self.vectors, self.queries, k)
            self.gt_k = k
        return self.gt_ids[:, :k]


def corpus_checksum(vectors: np.ndarray, queries: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(queries, dtype="<f4").tobytes())
    return h.hexdigest()


def brute_force_topk(vectors: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Exact fp64 inner-product top-k, ties broken by smaller id."""
    x = vectors.astype(np.float64)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    ids = np.arange(x.shape[0])
    for i, q in enumerate(queries.astype(np.float64)):
        scores = x @ q
        order = np.lexsort((ids, -scores))
        out[i] = order[:k]
    return out


def _normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (rows / norms).astype(np.float32)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 10000
    dim: int = 256
    clusters: int = 64
    seed: int = 7
    spread: float = 0.35
    n_queries: int = 1000

    @classmethod
    def parse(cls, text: str) -> "SyntheticSpec":
        """Parse 'n=10000,dim=256,clusters=64,seed=7' style specs."""
        kwargs = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise InputError(f"bad synthetic spec fragment {part!r}")
            key, value = part.split("=", 1)
            key = key.strip()
            if key not in cls.__dataclass_fields__:
                raise InputError(f"unknown synthetic spec key {key!r}")
            kwargs[key] = float(value) if key == "spread" else int(value)
        return cls(**kwargs)

    def describe(self) -> str:
        return (f"synthetic:n={self.n},dim={self.dim},clusters={self.clusters},"
                f"seed={self.seed},spread={self.spread},n_queries={self.n_queries}")


def synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Seeded Gaussian mixture, unit-normalized; byte-identical per spec."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.clusters, spec.dim))
    assign = rng.integers(0, spec.clusters, size=spec.n)
    vectors = centers[assign] + spec.spread * rng.standard_normal((spec.n, spec.dim))
    q_assign = rng.integers(0, spec.clusters, size=spec.n_queries)
    queries = centers[q_assign] + spec.spread * rng.standard_normal(
        (spec.n_queries, spec.dim))
    return Corpus(_normalize(vectors), _normalize(queries), spec=spec.describe())


def read_fvecs(path) -> np.ndarray:
    """Read dim-prefixed fp32 vectors (int32 LE dim then dim floats, repeated)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob:
        raise InputError(f"{path}: empty vector file")
    rows = []
    off = 0
    dim = None
    while off < len(blob):
        if off + 4 > len(blob):
            raise InputError(f"{path}: truncated record header at byte {off}")
        (d,) = struct.unpack_from("<i", blob, off)
        if d <= 0:
            raise InputError(f"{path}: bad dimension {d} at byte {off}")
        if dim is None:
            dim = d
        elif d != dim:
            raise InputError(f"{path}: inconsistent dim {d} != {dim} at byte {off}")
        off += 4
        need = 4 * d
        if off + need > len(blob):
            raise InputError(f"{path}: truncated vector payload at byte {off}")
        rows.append(np.frombuffer(blob, dtype="<f4", count=d, offset=off).copy())
        off += need
    return np.vstack(rows)


def write_fvecs(path, vectors: np.ndarray):
    v = np.ascontiguousarray(vectors, dtype="<f4")
    with open(path, "wb") as fh:
        for row in v:
            fh.write(struct.pack("<i", row.size))
            fh.write(row.tobytes())


def read_raw_fp32(path) -> np.ndarray:
    """Raw fp32 matrix with a sidecar '<path>.dims' file holding the dim."""
    sidecar = f"{path}.dims"
    if not os.path.exists(sidecar):
        raise InputError(f"{sidecar}: sidecar dims file missing")
    with open(sidecar) as fh:
        text = fh.read().split()
    if not text:
        raise InputError(f"{sidecar}: empty sidecar")
    dim = int(text[0])
    if dim <= 0:
        raise InputError(f"{sidecar}: bad dim {dim}")
    data = np.fromfile(path, dtype="<f4")
    if data.size % dim:
        good = data.size - data.size % dim
        raise InputError(
            f"{path}: trailing partial record at byte {4 * good} "
            f"({4 * (data.size % dim)} of {4 * dim} bytes)")
    return data.reshape(-1, dim)


def ingest(path_or_spec: str, fmt: str, n_queries: int = 100,
           query_seed: int = 1) -> Corpus:
    """Load a corpus.  Formats: 'synthetic' (spec string), 'fvecs', 'raw'.

    File-based corpora draw their query set by sampling rows with a seeded
    RNG (queries stay inside the distribution without shipping a second file).
    """
    if fmt == "synthetic":
        return synthetic_corpus(SyntheticSpec.parse(path_or_spec))
    if fmt == "fvecs":
        vectors = read_fvecs(path_or_spec)
    elif fmt == "raw":
        vectors = read_raw_fp32(path_or_spec)
    else:
        raise InputError(f"unknown corpus format {fmt!r}")
    rng = np.random.default_rng(query_seed)
    take = min(n_queries, vectors.shape[0])
    queries = vectors[rng.choice(vectors.shape[0], size=take, replace=False)]
    return Corpus(vectors.astype(np.float32), queries.astype(np.float32),
                  spec=f"{fmt}:{path_or_spec}")
