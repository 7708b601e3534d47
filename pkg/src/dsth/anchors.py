"""Anchor-graph approximation of the visual similarity graph.

The affinity between samples is ``S = V diag(1/degree) V^T`` where row
``n`` of ``V`` holds the normalised Gaussian weights of sample ``n`` on its
``s`` nearest anchors and ``degree = V^T 1``.  Every row of ``S`` sums to
one, so the graph Laplacian is ``I - S`` and can be applied to an
``L x N`` matrix in ``O(L N (s + K))`` without forming anything ``N x N``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import FormatError, read_matrix, write_matrix

log = logging.getLogger(__name__)

DSPA_MAGIC = b"DSPA"
_DSPA_HEADER = struct.Struct("<4sIIQ")
_TRIPLET = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f4")])


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # d_x x K, one anchor per column
    distortion: float
    history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.anchors.shape[1]


@dataclass(frozen=True)
class AnchorModel:
    anchor_set: AnchorSet
    embedding: sp.csr_matrix  # N x K
    degree: np.ndarray  # K
    s: int
    sigma: float
    seed: int = 0
    dropped: tuple[int, ...] = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return self.embedding.shape[0]

    @property
    def k(self) -> int:
        return self.embedding.shape[1]


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, ``N x K``, for row-major inputs."""
    d2 = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a chosen centre
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(x, k: int, max_iter: int = 100, seed: int = 0) -> AnchorSet:
    """Lloyd's k-means with k-means++ seeding on the columns of ``x``.

    Iterates until the assignment stops changing or ``max_iter`` is hit.
    A cluster that empties is re-seeded with the point farthest from its
    current centre.  ``history`` records the distortion (sum of squared
    distances) after every assignment step and is non-increasing.
    """
    points = np.asarray(x, dtype=np.float64).T
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"kmeans: need 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, k, rng)
    assign = None
    history = []
    for _ in range(max(1, max_iter)):
        d2 = _sq_distances(points, centers)
        new_assign = np.argmin(d2, axis=1)
        dist = d2[np.arange(n), new_assign]
        counts = np.bincount(new_assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            new_assign[far] = c
            dist[far] = 0.0
            counts = np.bincount(new_assign, minlength=k)
        history.append(float(dist.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, points)
        filled = counts > 0
        # clusters that stayed empty (coincident points) keep their centre
        centers[filled] = sums[filled] / counts[filled, None]
    d2 = _sq_distances(points, centers)
    final = float(d2[np.arange(n), np.argmin(d2, axis=1)].sum())
    if final < history[-1]:
        history.append(final)
    return AnchorSet(anchors=centers.T.copy(), distortion=history[-1], history=tuple(history))


def _nearest(points: np.ndarray, anchors: np.ndarray, s: int):
    d2 = _sq_distances(points, anchors)
    order = np.argsort(d2, axis=1, kind="stable")[:, :s]
    return order, np.take_along_axis(d2, order, axis=1)


def estimate_bandwidth(x, anchors: AnchorSet, s: int) -> float:
    """Mean squared distance from each sample to its ``s``-th nearest anchor."""
    if s < 1 or s > anchors.k:
        raise ValueError(f"s must lie in [1, K={anchors.k}], got {s}")
    _, d2 = _nearest(np.asarray(x, dtype=np.float64).T, anchors.anchors.T, s)
    sigma = float(d2[:, -1].mean())
    return sigma if sigma > 0 else 1.0


def _embed_rows(points: np.ndarray, anchors: np.ndarray, s: int, sigma: float) -> sp.csr_matrix:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = anchors.shape[0]
    if s < 1 or s > k:
        raise ValueError(f"s must lie in [1, K={k}], got {s}")
    order, d2 = _nearest(points, anchors, s)
    # shifting by the nearest distance cancels in the normalisation and
    # keeps the nearest weight at exactly 1, so nothing underflows to 0/0
    w = np.exp(-(d2 - d2[:, :1]) / sigma)
    w /= w.sum(axis=1, keepdims=True)
    n = points.shape[0]
    indptr = np.arange(0, n * s + 1, s)
    m = sp.csr_matrix((w.ravel(), order.ravel(), indptr), shape=(n, k))
    m.sort_indices()
    m.eliminate_zeros()
    return m


def anchor_embedding(v, anchors: AnchorSet | np.ndarray, s: int, sigma: float) -> np.ndarray:
    """Dense length-K weights of one vector on its ``s`` nearest anchors."""
    a = anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    row = _embed_rows(np.asarray(v, dtype=np.float64).reshape(1, -1), a.T, s, sigma)
    return row.toarray()[0]


def build_anchor_model(
    x,
    k: int = 300,
    s: int = 5,
    sigma: float | None = None,
    max_iter: int = 100,
    seed: int = 0,
) -> AnchorModel:
    """Cluster ``x`` into ``k`` anchors and embed every sample on them."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    if not 1 <= s <= k <= n:
        raise ValueError(f"need 1 <= s <= k <= N, got s={s}, k={k}, N={n}")
    anchor_set = kmeans(x, k, max_iter=max_iter, seed=seed)
    if sigma is None:
        sigma = estimate_bandwidth(x, anchor_set, s)
    points = x.T
    v = _embed_rows(points, anchor_set.anchors.T, s, sigma)
    degree = np.asarray(v.sum(axis=0)).ravel()
    original = np.arange(anchor_set.k)
    dropped = []
    # re-embedding after a drop can starve another coincident anchor, so repeat
    while np.any(degree <= 0):
        keep = degree > 0
        dropped.extend(int(i) for i in original[~keep])
        original = original[keep]
        anchor_set = AnchorSet(
            anchor_set.anchors[:, keep], anchor_set.distortion, anchor_set.history
        )
        if s > anchor_set.k:
            raise ValueError(f"only {anchor_set.k} anchors support samples, fewer than s={s}")
        v = _embed_rows(points, anchor_set.anchors.T, s, sigma)
        degree = np.asarray(v.sum(axis=0)).ravel()
    if dropped:
        log.info("dropped %d anchors that support no samples", len(dropped))
    return AnchorModel(
        anchor_set, v, degree, s=s, sigma=float(sigma), seed=seed, dropped=tuple(sorted(dropped))
    )


def embed(x, model: AnchorModel) -> sp.csr_matrix:
    """Embed new columns of ``x`` with a built model's anchors and bandwidth."""
    return _embed_rows(np.asarray(x, dtype=np.float64).T, model.anchor_set.anchors.T, model.s, model.sigma)


def apply_laplacian(m, model: AnchorModel) -> np.ndarray:
    """Return ``m (I - V diag(1/degree) V^T)`` for an ``L x N`` matrix ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != model.n:
        raise ValueError(f"apply_laplacian: expected L x {model.n}, got {m.shape}")
    v = model.embedding
    mv = (v.T @ m.T).T  # L x K
    mv /= model.degree
    return m - (v @ mv.T).T


def save_anchor_model(model: AnchorModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(model.anchor_set.anchors, d / "anchors.dmat")
    write_matrix(model.degree[None, :], d / "degree.dmat")
    coo = model.embedding.tocoo()
    order = np.lexsort((coo.col, coo.row))
    trip = np.empty(coo.nnz, dtype=_TRIPLET)
    trip["row"], trip["col"], trip["value"] = coo.row[order], coo.col[order], coo.data[order]
    with open(d / "embedding.dspa", "wb") as fh:
        fh.write(_DSPA_HEADER.pack(DSPA_MAGIC, model.n, model.k, coo.nnz))
        fh.write(trip.tobytes())
    meta = {"k": model.k, "s": model.s, "sigma": model.sigma, "seed": model.seed}
    (d / "anchors.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_sparse(path) -> sp.csr_matrix:
    data = Path(path).read_bytes()
    if len(data) < _DSPA_HEADER.size:
        raise FormatError("truncated DSPA header", len(data))
    magic, n, k, nnz = _DSPA_HEADER.unpack_from(data)
    if magic != DSPA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DSPA_MAGIC!r}", 0)
    expected = _DSPA_HEADER.size + nnz * _TRIPLET.itemsize
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {nnz} triplets", min(len(data), expected))
    trip = np.frombuffer(data, dtype=_TRIPLET, count=nnz, offset=_DSPA_HEADER.size)
    if nnz and (trip["row"].max() >= n or trip["col"].max() >= k):
        raise FormatError("triplet index out of range", _DSPA_HEADER.size)
    return sp.csr_matrix(
        (trip["value"].astype(np.float64), (trip["row"], trip["col"])), shape=(n, k)
    )


def load_anchor_model(directory) -> AnchorModel:
    """Load a saved model; weights are renormalised after the float32 round trip."""
    d = Path(directory)
    meta = json.loads((d / "anchors.json").read_text())
    anchors = read_matrix(d / "anchors.dmat")
    v = read_sparse(d / "embedding.dspa")
    rows = np.asarray(v.sum(axis=1)).ravel()
    v = sp.csr_matrix(sp.diags(1.0 / rows) @ v)
    degree = np.asarray(v.sum(axis=0)).ravel()
    return AnchorModel(
        AnchorSet(np.array(anchors), distortion=float("nan")),
        v,
        degree,
        s=int(meta["s"]),
        sigma=float(meta["sigma"]),
        seed=int(meta.get("seed", 0)),
    )
