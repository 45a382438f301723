"""Item index over student item vectors with exact and cell-pruned top-k
maximum-inner-product search.

Results are ordered by descending inner product, ties broken by ascending
item id, so exact search is a pure function of the index contents.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from . import tensorio
from .numerics import ShapeError

log = logging.getLogger(__name__)


def kmeans(points: np.ndarray, num_cells: int, iters: int = 20, seed: int = 0):
    """Lloyd's k-means with k-means++ seeding; returns (centroids, assignment)."""
    n = points.shape[0]
    num_cells = min(num_cells, n)
    rng = np.random.default_rng([seed, 400])
    sq = np.sum(points * points, axis=1)
    centers = np.empty((num_cells, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.maximum(sq - 2.0 * points @ centers[0] + centers[0] @ centers[0], 0.0)
    for c in range(1, num_cells):
        total = d2.sum()
        j = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[c] = points[j]
        d2 = np.minimum(d2, np.maximum(sq - 2.0 * points @ centers[c] + centers[c] @ centers[c], 0.0))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = sq[:, None] - 2.0 * points @ centers.T + np.sum(centers * centers, axis=1)[None, :]
        assign = np.argmin(dist, axis=1)
        for c in range(num_cells):
            members = assign == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
    dist = sq[:, None] - 2.0 * points @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    return centers, np.argmin(dist, axis=1).astype(np.int64)


def _rank(ids: np.ndarray, scores: np.ndarray, k: int):
    """Top-k of (ids, scores) by (-score, id)."""
    k = min(k, ids.shape[0])
    if k < ids.shape[0]:
        kth = np.partition(scores, -k)[-k]
        keep = scores >= kth
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[j]), float(scores[j])) for j in order]


class RetrievalIndex:
    def __init__(self, ids, vectors, checkpoint_hash: str = "", centroids=None, assignment=None):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float64)
        if ids.ndim != 1 or vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
            raise ShapeError(f"ids {ids.shape} and vectors {vectors.shape} do not align")
        if ids.size == 0:
            raise ValueError("cannot index an empty item set")
        uniq, counts = np.unique(ids, return_counts=True)
        if (counts > 1).any():
            raise ValueError(f"duplicate item id {int(uniq[counts > 1][0])}")
        # canonical storage order makes saved files independent of insertion order
        order = np.argsort(ids, kind="stable")
        self.ids = ids[order]
        self.vectors = np.ascontiguousarray(vectors[order])
        self.checkpoint_hash = checkpoint_hash
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=np.float64)
        self.assignment = None if assignment is None else np.asarray(assignment, dtype=np.int64)[order]
        self._stats = None

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def mode(self) -> str:
        return "exact" if self.centroids is None else "ivf"

    @property
    def num_cells(self) -> int:
        return 0 if self.centroids is None else int(self.centroids.shape[0])

    def quantize(self, num_cells: int, iters: int = 20, seed: int = 0) -> "RetrievalIndex":
        centroids, assignment = kmeans(self.vectors, num_cells, iters, seed)
        self.centroids, self.assignment = centroids, assignment
        self._stats = None
        return self

    def _check_query(self, query):
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ShapeError(f"query of shape {q.shape} does not match index dim {self.dim}")
        return q

    def topk(self, user_vector, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._check_query(user_vector)
        return _rank(self.ids, self.vectors @ q, k)

    def topk_batch(self, queries, k: int) -> np.ndarray:
        """Exact top-k ids for many queries at once, shape (n_queries, min(k, n))."""
        Q = np.asarray(queries, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[1] != self.dim:
            raise ShapeError(f"queries {Q.shape} do not match index dim {self.dim}")
        k = min(k, len(self))
        scores = Q @ self.vectors.T
        out = np.empty((Q.shape[0], k), dtype=np.int64)
        for r in range(Q.shape[0]):
            out[r] = [i for i, _ in _rank(self.ids, scores[r], k)]
        return out

    def _cell_stats(self):
        # member count, mean and covariance per cell; derived from the stored
        # vectors and assignment so index files stay unchanged
        if self._stats is None:
            d = self.dim
            counts = np.bincount(self.assignment, minlength=self.num_cells)
            means = np.zeros((self.num_cells, d))
            covs = np.zeros((self.num_cells, d, d))
            for c in np.flatnonzero(counts):
                members = self.vectors[self.assignment == c]
                means[c] = members.mean(axis=0)
                centered = members - means[c]
                covs[c] = centered.T @ centered / members.shape[0]
            self._stats = (counts, means, covs)
        return self._stats

    def expected_hits(self, query, k: int) -> np.ndarray:
        """Expected number of the query's top-k items in each cell.

        Scores inside cell c are modelled as normal with the mean and variance
        of q . v over its members; t solves sum_c n_c P(score > t) = k and the
        estimate for cell c is n_c P(score > t).
        """
        counts, means, covs = self._cell_stats()
        q = self._check_query(query)
        if k >= len(self):
            return counts.astype(np.float64)
        mu = means @ q
        sd = np.sqrt(np.maximum(np.einsum("i,cij,j->c", q, covs, q), 0.0))
        sd = np.maximum(sd, 1e-12 * (np.abs(mu).max() + 1.0))
        live = counts > 0

        def excess(t):
            return float(np.sum(counts[live] * ndtr((mu[live] - t) / sd[live]))) - k

        span = 40.0 * sd[live].max()
        t = brentq(excess, mu[live].min() - span, mu[live].max() + span, xtol=1e-12 * (span + 1.0))
        hits = counts * ndtr((mu - t) / sd)
        hits[~live] = 0.0
        return hits

    def probe_cells(self, query, nprobe: int, k: int) -> np.ndarray:
        """The ``nprobe`` cells expected to hold most of the query's top-k items.

        Ranking cells by centroid inner product alone ignores how widely a
        cell's scores spread, so a tight cell with a good mean would beat a
        broad cell whose upper tail holds many of the best items.
        """
        if self.centroids is None:
            raise RuntimeError("index was built without quantization")
        if nprobe < 1:
            raise ValueError("nprobe must be >= 1")
        if nprobe > self.num_cells:
            log.warning("nprobe %d exceeds %d cells; clamped", nprobe, self.num_cells)
            nprobe = self.num_cells
        hits = self.expected_hits(query, k)
        return np.lexsort((np.arange(hits.size), -hits))[:nprobe]

    def topk_pruned(self, user_vector, k: int, nprobe: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._check_query(user_vector)
        cells = self.probe_cells(q, nprobe, k)
        members = np.isin(self.assignment, cells)
        return _rank(self.ids[members], self.vectors[members] @ q, k)

    def to_tensors(self):
        tensors = {"vectors": self.vectors, "ids": self.ids}
        if self.centroids is not None:
            tensors["centroids"] = self.centroids
            tensors["assignment"] = self.assignment
        return tensors

    def save(self, path) -> str:
        meta = {"dim": self.dim, "count": len(self), "mode": self.mode,
                "checkpoint_hash": self.checkpoint_hash}
        return tensorio.save(path, self.to_tensors(), meta)

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        t, meta = tensorio.load(path)
        if "vectors" not in t or "ids" not in t:
            raise ValueError(f"{path} is not an index file")
        return cls(t["ids"], t["vectors"], meta.get("checkpoint_hash", ""),
                   t.get("centroids"), t.get("assignment"))


def build_index(item_ids, item_features, student, checkpoint_hash: str = "", num_cells: int = 0,
                kmeans_iters: int = 20, seed: int = 0) -> RetrievalIndex:
    """Index S(v) for every item; ``num_cells > 0`` adds the coarse quantizer."""
    item_features = np.asarray(item_features, dtype=np.int64)
    if item_features.shape[0] == 0:
        raise ValueError("cannot index an empty item set")
    index = RetrievalIndex(item_ids, student.item_vector(item_features), checkpoint_hash)
    if num_cells:
        index.quantize(num_cells, kmeans_iters, seed)
    return index


def save_vector_table(path, ids, vectors, meta: dict | None = None) -> str:
    """Item-vector table (item id -> d floats); ``RetrievalIndex(ids, vectors)`` rebuilds an index from it."""
    return tensorio.save(path, {"ids": np.asarray(ids, dtype=np.int64),
                                "vectors": np.asarray(vectors, dtype=np.float64)},
                         {"kind": "item_vectors", **(meta or {})})


def load_vector_table(path):
    t, meta = tensorio.load(path)
    if meta.get("kind") != "item_vectors":
        raise ValueError(f"{path} is not an item-vector table")
    return t["ids"], t["vectors"], meta


def recall_at_k(exact, approx) -> float:
    e = {i for i, _ in exact}
    return len(e & {i for i, _ in approx}) / max(len(e), 1)
