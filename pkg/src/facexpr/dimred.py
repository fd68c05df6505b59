"""Spectral dimensionality reduction with automatic dimension selection.

Pipeline: build a symmetrized kNN graph, embed the training points via the
generalized eigenproblem L v = lambda D v on the graph Laplacian
(L = D - W, D = diag of row sums), and pick the target dimension with the
Levina-Bickel maximum-likelihood intrinsic-dimension estimator computed
from nearest-neighbor distance ratios.

The eigensolve is dense (whiten by D^{-1/2}, then a symmetric
eigendecomposition); point counts here are at most a few thousand, so
exactness wins over scalability. Out-of-sample points are projected by a
kernel-weighted average of their nearest training points' coordinates,
with an exact shortcut for points that are themselves training points.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .data_io import PATCH_IDS, register_model
from .util import derived_seed

# fixed salt for the deterministic perturbation of duplicate rows
_DEDUP_SALT = 0x0FACE


@dataclass
class NeighborGraph:
    """Symmetrized kNN graph with either binary or heat-kernel weights."""

    n: int
    weights: np.ndarray          # dense symmetric (n, n), zero diagonal
    knn_k: int
    kernel: str                  # "binary" | "heat"
    t: float | None = None       # heat-kernel bandwidth (squared distance)
    repaired_edges: list = field(default_factory=list)

    def degrees(self):
        return self.weights.sum(axis=1)

    def edges(self):
        """Unordered weighted edge list [(i, j, w)] with i < j."""
        ii, jj = np.nonzero(np.triu(self.weights, k=1))
        return [(int(i), int(j), float(self.weights[i, j]))
                for i, j in zip(ii, jj)]


@dataclass
class DimEstimate:
    """Levina-Bickel intrinsic-dimension estimate."""

    d_hat: float
    d: int
    k_range: tuple
    per_point: np.ndarray | None = None


def _perturb_duplicates(points):
    """Deterministically jitter exact-duplicate rows so distances are > 0."""
    points = np.asarray(points, dtype=np.float64)
    _, first_idx, inverse = np.unique(points, axis=0, return_index=True,
                                      return_inverse=True)
    dup = np.ones(len(points), dtype=bool)
    dup[first_idx] = False
    if not dup.any():
        return points
    if len(first_idx) == 1:
        raise ValidationError("all points are identical")
    scale = max(1.0, float(np.abs(points).max()))
    out = points.copy()
    for i in np.nonzero(dup)[0]:
        rng = np.random.default_rng(derived_seed(_DEDUP_SALT, i))
        out[i] = out[i] + rng.standard_normal(points.shape[1]) * 1e-9 * scale
    return out


def _connected_components(weights):
    n = len(weights)
    labels = np.full(n, -1, dtype=np.int64)
    current = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = current
        while stack:
            i = stack.pop()
            for j in np.nonzero(weights[i] > 0)[0]:
                if labels[j] < 0:
                    labels[j] = current
                    stack.append(j)
        current += 1
    return labels, current


def knn_graph(points, k, kernel="heat", t=None):
    """Symmetrized union kNN graph over the rows of `points`.

    Edge (i, j) exists iff j is among the k nearest neighbors of i or vice
    versa. Binary weights are 1; heat weights are exp(-|xi-xj|^2 / t) with
    t defaulting to the squared median kNN distance. A disconnected graph
    is repaired by joining the closest cross-component pair until
    connected (eigen-embedding needs connectivity).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be an (n, D) matrix")
    n = len(points)
    if not 1 <= k < n:
        raise ValidationError(f"need 1 <= k < n, got k={k}, n={n}")
    if kernel not in ("binary", "heat"):
        raise ValidationError(f"unknown kernel '{kernel}'")

    pts = _perturb_duplicates(points)
    dist = cdist(pts, pts)
    order = np.argsort(dist, axis=1, kind="stable")
    neighbor_idx = order[:, 1:k + 1]          # self sits at column 0
    knn_dists = np.take_along_axis(dist, neighbor_idx, axis=1)

    if kernel == "heat" and t is None:
        t = float(np.median(knn_dists)) ** 2
    if kernel == "heat" and t <= 0:
        raise ValidationError(f"heat kernel needs t > 0, got {t}")

    adj = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    adj[rows, neighbor_idx.ravel()] = True
    adj |= adj.T
    np.fill_diagonal(adj, False)

    def weight_of(d):
        return 1.0 if kernel == "binary" else math.exp(-(d * d) / t)

    weights = np.zeros((n, n), dtype=np.float64)
    if kernel == "binary":
        weights[adj] = 1.0
    else:
        weights[adj] = np.exp(-(dist[adj] ** 2) / t)

    repaired = []
    labels, ncomp = _connected_components(weights)
    while ncomp > 1:
        cross = dist.copy()
        same = labels[:, None] == labels[None, :]
        cross[same] = np.inf
        i, j = np.unravel_index(np.argmin(cross), cross.shape)
        w = weight_of(dist[i, j])
        weights[i, j] = weights[j, i] = w
        repaired.append((int(i), int(j)))
        labels, ncomp = _connected_components(weights)

    return NeighborGraph(n=n, weights=weights, knn_k=k, kernel=kernel,
                         t=None if kernel == "binary" else t,
                         repaired_edges=repaired)


@register_model
@dataclass
class Embedding:
    """Fitted graph embedding supporting out-of-sample projection.

    coords columns are the generalized eigenvectors of (L, D) for the d
    smallest non-trivial eigenvalues, normalized so v^T D v = 1, sign fixed
    so each column's first non-negligible component is positive.
    """

    model_kind = "embedding"

    training_points: np.ndarray
    coords: np.ndarray
    eigenvalues: np.ndarray
    knn_k: int
    kernel: str
    t: float | None
    d: int
    seed = None

    def project(self, x):
        return embed_out_of_sample(self, x)

    def dims(self):
        n, input_dim = self.training_points.shape
        return {"n": n, "input_dim": input_dim, "d": self.d}

    def to_state(self, store):
        return {
            "training_points": store.add(self.training_points),
            "coords": store.add(self.coords),
            "eigenvalues": store.add(self.eigenvalues),
            "knn_k": self.knn_k,
            "kernel": self.kernel,
            "t": self.t,
            "d": self.d,
        }

    @classmethod
    def from_state(cls, meta):
        return cls(training_points=meta["training_points"],
                   coords=meta["coords"],
                   eigenvalues=meta["eigenvalues"],
                   knn_k=int(meta["knn_k"]), kernel=meta["kernel"],
                   t=meta["t"], d=int(meta["d"]))


def _fix_signs(vectors):
    """Make the first non-negligible component of each column positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        tol = 1e-8 * np.abs(col).max()
        nz = np.nonzero(np.abs(col) > tol)[0]
        if len(nz) and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def eigenmap_fit(graph, points, d):
    """Embed training points via L v = lambda D v on the given graph.

    Returns the d smallest non-trivial generalized eigenpairs; the trivial
    constant eigenvector (lambda = 0) is excluded. Residuals are verified
    to 1e-6 before returning.
    """
    points = np.asarray(points, dtype=np.float64)
    n = graph.n
    if len(points) != n:
        raise ValidationError(f"graph has {n} nodes but {len(points)} points given")
    if not 1 <= d <= n - 1:
        raise ValidationError(f"need 1 <= d <= n-1 = {n - 1}, got d={d}")

    w_mat = graph.weights
    degrees = w_mat.sum(axis=1)
    if np.any(degrees <= 0):
        raise NumericalError("graph has an isolated node")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    # whitened Laplacian: I - D^{-1/2} W D^{-1/2}
    a_mat = np.eye(n) - (inv_sqrt[:, None] * w_mat) * inv_sqrt[None, :]
    eigvals, eigvecs = scipy.linalg.eigh(a_mat)
    if eigvals[1] <= 1e-10:
        raise NumericalError(
            "second eigenvalue is numerically zero; graph is not connected")

    coords = _fix_signs(inv_sqrt[:, None] * eigvecs[:, 1:d + 1])
    lams = eigvals[1:d + 1].copy()

    lap = np.diag(degrees) - w_mat
    for j in range(d):
        v = coords[:, j]
        resid = np.linalg.norm(lap @ v - lams[j] * (degrees * v))
        if resid / np.linalg.norm(v) >= 1e-6:
            raise NumericalError(
                f"eigensolver residual {resid:.2e} too large for eigenpair {j}")

    return Embedding(training_points=points.copy(), coords=coords,
                     eigenvalues=lams, knn_k=graph.knn_k,
                     kernel=graph.kernel, t=graph.t, d=d)


def embed_out_of_sample(emb, x):
    """Project a new point into the embedding's coordinate space.

    A point equal (within 1e-12) to a training point returns that point's
    stored coordinates exactly; otherwise the kernel-weighted average over
    the knn_k nearest training points is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (emb.training_points.shape[1],):
        raise ValidationError(
            f"expected vector of dim {emb.training_points.shape[1]}, "
            f"got shape {x.shape}")
    dists = np.linalg.norm(emb.training_points - x, axis=1)
    nearest = int(np.argmin(dists))
    if dists[nearest] <= 1e-12:
        return emb.coords[nearest].copy()
    order = np.argsort(dists, kind="stable")[:emb.knn_k]
    if emb.kernel == "binary":
        weights = np.ones(len(order))
    else:
        weights = np.exp(-(dists[order] ** 2) / emb.t)
    total = weights.sum()
    if total == 0.0:
        raise NumericalError(
            "all kernel weights underflowed to zero for out-of-sample point")
    return (weights @ emb.coords[order]) / total


def mle_intrinsic_dimension(points, k_range=(6, 12)):
    """Levina-Bickel MLE of intrinsic dimension.

    For each point, m_k(x) = [ (1/(k-1)) * sum_{j<k} log(T_k(x)/T_j(x)) ]^{-1}
    with T_j the distance to the j-th nearest neighbor. The estimate
    averages m_k over all points and over k in [k1, k2], then rounds
    (half up) to an integer >= 1.
    """
    points = np.asarray(points, dtype=np.float64)
    k1, k2 = int(k_range[0]), int(k_range[1])
    n = len(points)
    if not 2 <= k1 <= k2:
        raise ValidationError(f"need 2 <= k1 <= k2, got {k_range}")
    if k2 >= n:
        raise ValidationError(f"need k2 < n, got k2={k2}, n={n}")

    pts = _perturb_duplicates(points)
    dist = cdist(pts, pts)
    dist.sort(axis=1)
    t_mat = dist[:, 1:k2 + 1]                  # (n, k2) neighbor distances
    if np.any(t_mat <= 0):
        raise NumericalError("zero nearest-neighbor distance after perturbation")
    log_t = np.log(t_mat)
    cum = np.cumsum(log_t, axis=1)

    estimates = np.empty((k2 - k1 + 1, n))
    for row, k in enumerate(range(k1, k2 + 1)):
        # sum_{j=1}^{k-1} log(T_k / T_j) = (k-1) log T_k - sum_{j<k} log T_j
        denom = (k - 1) * log_t[:, k - 1] - cum[:, k - 2]
        if np.any(denom <= 0):
            raise NumericalError(
                f"degenerate neighbor-distance ratios at k={k}")
        estimates[row] = (k - 1) / denom

    per_point = estimates.mean(axis=0)
    d_hat = float(per_point.mean())
    return DimEstimate(d_hat=d_hat, d=max(1, int(math.floor(d_hat + 0.5))),
                       k_range=(k1, k2), per_point=per_point)


def fit_reduction_pipeline(per_patch_features, k=7, k_range=(6, 12),
                           kernel="heat", dim_override=None):
    """Fit one (Embedding, DimEstimate) per patch on training data.

    per_patch_features maps patch_id -> (n, D_p) matrix; all patches must
    cover the same n samples in the same order. dim_override forces the
    embedding dimension (the MLE estimate is still computed and reported).
    """
    if not per_patch_features:
        raise ValidationError("no patches given")
    sizes = {patch: len(m) for patch, m in per_patch_features.items()}
    if len(set(sizes.values())) != 1:
        raise ValidationError(f"patches cover different sample counts: {sizes}")

    out = {}
    for patch in PATCH_IDS:
        if patch not in per_patch_features:
            continue
        mat = np.asarray(per_patch_features[patch], dtype=np.float64)
        est = mle_intrinsic_dimension(mat, k_range)
        d = int(dim_override) if dim_override is not None else est.d
        graph = knn_graph(mat, k, kernel=kernel)
        out[patch] = (eigenmap_fit(graph, mat, d), est)
    unknown = set(per_patch_features) - set(PATCH_IDS)
    if unknown:
        raise ValidationError(f"unknown patch ids: {sorted(unknown)}")
    return out
