"""Scikit-learn style estimator wrapping the fault-tolerant K-means engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .abft import Threshold
from .gemm import fused_assign, true_sq_dists
from .kmeans import KMeansConfig, lloyd
from .tiles import TileConfig, parse_tile


class FTKMeans(ClusterMixin, BaseEstimator):
    """K-means with a checksum-protected assignment kernel.

    Parameters
    ----------
    n_clusters : int, default=8
        Number of clusters.
    init : {'kmeanspp', 'random-sample'}, default='kmeanspp'
        Seeding strategy (D^2 sampling or distinct uniform rows).
    max_iter : int, default=300
        Iteration cap for Lloyd's loop.
    tol : float, default=1e-4
        Relative centroid movement below which the run is converged.
    random_state : int or None, default=None
        Seed for initialization (None behaves as 0; runs are always
        deterministic given the same data and parameters).
    ft_mode : {'off', 'abft', 'abft+dmr'}, default='off'
        Protection level: none, checksum-protected assignment, or
        additionally duplicated centroid-update accumulators.
    tile : TileConfig, str, default='auto'
        Tile sizes for the assignment kernel. 'auto' consults ``tune_table``
        when given, else the built-in default; a string like
        ``"128,64,16,32,64,16"`` pins block and sub sizes explicitly.
    delta_rel : float or None, default=None
        Checksum threshold scale (None picks the precision default:
        1e-4 single, 1e-10 double).
    inject : str or None, default=None
        Fault-injection campaign for experiments, e.g. ``"fixed:3@sign"``.
    threads : int or None, default=None
        Worker threads (None: FTKM_THREADS or the machine's count).
    tune_table : TuneTable or None, default=None
        Tile selection table used when ``tile='auto'``.

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
        Sum of squared distances to the assigned centroids.
    n_iter_ : int
    converged_ : bool
    detection_report_ : DetectionReport
        Checksum/DMR events observed while fitting.
    """

    def __init__(
        self,
        n_clusters=8,
        init="kmeanspp",
        max_iter=300,
        tol=1e-4,
        random_state=None,
        ft_mode="off",
        tile="auto",
        delta_rel=None,
        inject=None,
        threads=None,
        tune_table=None,
    ):
        self.n_clusters = n_clusters
        self.init = init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.ft_mode = ft_mode
        self.tile = tile
        self.delta_rel = delta_rel
        self.inject = inject
        self.threads = threads
        self.tune_table = tune_table

    def _validate_data_matrix(self, X):
        X = check_array(X, dtype=(np.float32, np.float64), order="C")
        return X

    def _config(self, dtype):
        tile = self.tile
        if isinstance(tile, str) and tile != "auto":
            tile = parse_tile(tile, dtype)
        elif not (tile == "auto" or isinstance(tile, TileConfig)):
            raise ValueError(f"tile must be 'auto', a spec string or TileConfig, got {tile!r}")
        thr = Threshold(self.delta_rel) if self.delta_rel is not None else None
        return KMeansConfig(
            k=self.n_clusters,
            max_iters=self.max_iter,
            tol=self.tol,
            seed=0 if self.random_state is None else int(self.random_state),
            ft_mode=self.ft_mode,
            init=self.init,
            tile=tile,
            threshold=thr,
            threads=self.threads,
            tune_table=self.tune_table,
        )

    def fit(self, X, y=None):
        """Run Lloyd's iteration on X."""
        X = self._validate_data_matrix(X)
        result = lloyd(X, self._config(X.dtype), fault_spec=self.inject)
        self.cluster_centers_ = result.centroids
        self.labels_ = result.assignments
        self.inertia_ = result.inertia
        self.n_iter_ = result.iters
        self.converged_ = result.converged
        self.detection_report_ = result.report
        self.timings_ = result.timings
        return self

    def predict(self, X):
        """Nearest fitted centroid for each row of X."""
        check_is_fitted(self, "cluster_centers_")
        X = self._validate_data_matrix(X)
        centers = np.ascontiguousarray(self.cluster_centers_, dtype=X.dtype)
        return fused_assign(X, centers, threads=self.threads).assignments

    def transform(self, X):
        """Squared distances to every fitted centroid (M x n_clusters)."""
        check_is_fitted(self, "cluster_centers_")
        X = self._validate_data_matrix(X)
        c = self.cluster_centers_.astype(np.float64)
        x = X.astype(np.float64)
        d = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * (x @ c.T)
        return np.maximum(d, 0.0)

    def score(self, X, y=None):
        """Negative inertia of X under the fitted centroids."""
        check_is_fitted(self, "cluster_centers_")
        X = self._validate_data_matrix(X)
        centers = np.ascontiguousarray(self.cluster_centers_, dtype=X.dtype)
        res = fused_assign(X, centers, threads=self.threads)
        return -float(true_sq_dists(res, X).sum())
