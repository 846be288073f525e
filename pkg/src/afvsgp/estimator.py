"""scikit-learn compatible regressors for the barrier-derivative discrepancy.

Every estimator takes ``X = [xi | u]`` where the last ``control_dim`` columns are
the control and the rest is the state feature vector; the target is the scalar
discrepancy. Besides ``predict`` they expose ``predict_affine(Xi)`` returning the
per-state ``(b_vec, Sigma)`` pair, so that for ``ubar = [1, u]`` the mean is
``b_vec @ ubar`` and the variance ``ubar @ Sigma @ ubar``.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import online
from .kernels import CompositeKernel, augment
from .sparse_gp import (
    ModelState,
    TrainingWindow,
    fit_offline,
    jittered_cholesky,
    predict_batch,
    rebuild_caches,
    train_hyperparameters,
)


class _DiscrepancyRegressor(RegressorMixin, BaseEstimator):
    def _split(self, X):
        m = self.control_dim
        if X.shape[1] <= m:
            raise ValueError(f"X needs state features plus {m} control columns")
        return X[:, :-m], augment(X[:, -m:])

    def _init_kernel(self, input_dim: int) -> CompositeKernel:
        if self.kernel is not None:
            return self.kernel
        return CompositeKernel.from_values(
            self.control_dim, input_dim, self.signal_variance, self.lengthscale
        )

    def predict_affine(self, Xi):
        """Per-row ``(b_vec, Sigma)`` at state features ``Xi``."""
        raise NotImplementedError

    def predict(self, X, return_std: bool = False):
        check_is_fitted(self)
        X = check_array(X)
        xi, ubar = self._split(X)
        b, S = self.predict_affine(xi)
        mean = np.einsum("ni,ni->n", b, ubar)
        if not return_std:
            return mean
        var = np.einsum("ni,nij,nj->n", ubar, S, ubar)
        return mean, np.sqrt(np.maximum(var, 0.0))


class AFVSGPRegressor(_DiscrepancyRegressor):
    """Sparse GP with forgetting and online inducing-set adaptation.

    ``fit`` trains hyperparameters on the preliminary window (its length becomes
    the window size); ``partial_fit`` streams further samples through
    :func:`afvsgp.online.step` with hyperparameters frozen.

    Parameters
    ----------
    control_dim : int
        Number of trailing control columns in ``X``.
    n_inducing : int
        Inducing inputs picked from the preliminary window.
    phi : float
        Forgetting factor in ``(0, 1]``.
    epsilon : float
        Insertion threshold on the weighted window residual.
    max_inducing : int, optional
        Eviction cap; defaults to ``n_inducing``.
    adapt : bool
        If false, ``partial_fit`` only slides the window.
    min_residual : float
        Relative residual below which a candidate inducing input counts as a
        duplicate of the current set.
    normalize_y : bool
        Centre and scale targets by the statistics of the ``fit`` data. ``noise``
        and ``signal_variance`` are then in standardized units.
    """

    def __init__(
        self,
        control_dim: int = 1,
        n_inducing: int = 20,
        phi: float = 0.98,
        epsilon: float = 1.0,
        max_inducing: int | None = None,
        noise: float = 0.1,
        signal_variance: float = 1.0,
        lengthscale: float = 1.0,
        kernel: CompositeKernel | None = None,
        optimize: bool = True,
        restarts: int = 3,
        max_iter: int = 300,
        inducing_init: str = "recent",
        adapt: bool = True,
        min_residual: float = 1e-6,
        normalize_y: bool = True,
        random_state: int = 0,
    ):
        self.control_dim = control_dim
        self.n_inducing = n_inducing
        self.phi = phi
        self.epsilon = epsilon
        self.max_inducing = max_inducing
        self.noise = noise
        self.signal_variance = signal_variance
        self.lengthscale = lengthscale
        self.kernel = kernel
        self.optimize = optimize
        self.restarts = restarts
        self.max_iter = max_iter
        self.inducing_init = inducing_init
        self.adapt = adapt
        self.min_residual = min_residual
        self.normalize_y = normalize_y
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        xi, ubar = self._split(X)
        self.state_ = fit_offline(
            xi,
            ubar,
            y,
            min(self.n_inducing, len(y)),
            self.phi,
            self._init_kernel(xi.shape[1]),
            self.noise,
            restarts=self.restarts,
            seed=self.random_state,
            max_iter=self.max_iter,
            inducing=self.inducing_init,
            optimize=self.optimize,
            min_residual=self.min_residual,
            normalize=self.normalize_y,
        )
        self.config_ = online.AdaptationConfig(
            self.epsilon,
            max(2, self.max_inducing or self.n_inducing),
            min_residual=self.min_residual,
        )
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_state(cls, state: ModelState, **params) -> "AFVSGPRegressor":
        """Wrap an existing model state (e.g. a loaded snapshot)."""
        est = cls(control_dim=state.control_dim, phi=state.phi, kernel=state.kernel,
                  noise=state.noise, n_inducing=state.M, **params)
        est.state_ = state
        est.config_ = online.AdaptationConfig(
            est.epsilon, max(2, est.max_inducing or state.M), min_residual=est.min_residual
        )
        est.n_features_in_ = state.kernel.input_dim + state.control_dim
        return est

    def partial_fit(self, X, y):
        check_is_fitted(self)
        X, y = check_X_y(X, y, y_numeric=True)
        xi, ubar = self._split(X)
        for row_xi, row_u, target in zip(xi, ubar, y):
            if self.adapt:
                online.step(self.state_, row_xi, row_u, target, self.config_)
            else:
                self.state_.last_event = {}
                online.ingest_sample(self.state_, row_xi, row_u, target)
        return self

    def predict_affine(self, Xi):
        check_is_fitted(self)
        return predict_batch(self.state_, check_array(Xi))

    @property
    def last_event(self) -> dict:
        return self.state_.last_event

    def novelty(self) -> float:
        return online.score_candidate(self.state_).P_th


class SparseGPRegressor(AFVSGPRegressor):
    """Plain variational sparse GP: no forgetting, fixed inducing set.

    ``partial_fit`` appends to an ever-growing training set and recomputes every
    cache from scratch, ``O(N M^2)`` per update.
    """

    def __init__(
        self,
        control_dim: int = 1,
        n_inducing: int = 20,
        noise: float = 0.1,
        signal_variance: float = 1.0,
        lengthscale: float = 1.0,
        kernel: CompositeKernel | None = None,
        optimize: bool = True,
        restarts: int = 3,
        max_iter: int = 300,
        inducing_init: str = "stride",
        max_window: int = 1_000_000,
        min_residual: float = 1e-6,
        normalize_y: bool = True,
        random_state: int = 0,
    ):
        super().__init__(
            control_dim=control_dim,
            n_inducing=n_inducing,
            phi=1.0,
            noise=noise,
            signal_variance=signal_variance,
            lengthscale=lengthscale,
            kernel=kernel,
            optimize=optimize,
            restarts=restarts,
            max_iter=max_iter,
            inducing_init=inducing_init,
            adapt=False,
            min_residual=min_residual,
            normalize_y=normalize_y,
            random_state=random_state,
        )
        self.max_window = max_window

    def fit(self, X, y):
        super().fit(X, y)
        st = self.state_
        st.window = TrainingWindow(max(self.max_window, len(st.window)), st.window.xi,
                                   st.window.ubar, st.window.z)
        return self

    def partial_fit(self, X, y):
        check_is_fitted(self)
        X, y = check_X_y(X, y, y_numeric=True)
        xi, ubar = self._split(X)
        st = self.state_
        for row_xi, row_u, target in zip(xi, ubar, y):
            st.window.push(row_xi, row_u, target)
        rebuild_caches(st)
        st.last_event = {}
        return self


class DenseGPRegressor(_DiscrepancyRegressor):
    """Exact GP with the compound kernel, trained once and frozen."""

    def __init__(
        self,
        control_dim: int = 1,
        noise: float = 0.1,
        signal_variance: float = 1.0,
        lengthscale: float = 1.0,
        kernel: CompositeKernel | None = None,
        optimize: bool = True,
        restarts: int = 3,
        max_iter: int = 300,
        normalize_y: bool = True,
        random_state: int = 0,
    ):
        self.control_dim = control_dim
        self.noise = noise
        self.signal_variance = signal_variance
        self.lengthscale = lengthscale
        self.kernel = kernel
        self.optimize = optimize
        self.restarts = restarts
        self.max_iter = max_iter
        self.normalize_y = normalize_y
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        xi, ubar = self._split(X)
        self.y_mean_, self.y_scale_ = 0.0, 1.0
        if self.normalize_y:
            self.y_mean_ = float(y.mean())
            self.y_scale_ = float(y.std()) if y.std() > 0 else 1.0
        y = (y - self.y_mean_) / self.y_scale_
        kernel, noise = self._init_kernel(xi.shape[1]), self.noise
        if self.optimize:
            # inducing set = training set makes the collapsed bound the exact evidence
            kernel, noise, _ = train_hyperparameters(
                kernel, noise, xi, ubar, y, np.ones(len(y)), xi, ubar,
                self.restarts, self.random_state, self.max_iter,
            )
        K = kernel(xi, ubar, xi, ubar) + noise * np.eye(len(y))
        self.chol_, _ = jittered_cholesky(K, "dense K")
        self.alpha_ = linalg.cho_solve((self.chol_, True), y)
        self.xi_, self.ubar_, self.y_ = xi, ubar, y
        self.kernel_, self.noise_ = kernel, noise
        self.n_features_in_ = X.shape[1]
        return self

    def predict_affine(self, Xi):
        check_is_fitted(self)
        Xi = check_array(Xi)
        G = self.kernel_.base_grams(Xi, self.xi_)  # (m+1, n, N)
        kU = np.transpose(G, (1, 0, 2)) * self.ubar_.T[None]  # (n, m+1, N)
        b = kU @ self.alpha_
        n, w, N = kU.shape
        V = linalg.solve_triangular(self.chol_, kU.reshape(n * w, N).T, lower=True)
        V = V.T.reshape(n, w, N)
        Sigma = -V @ np.transpose(V, (0, 2, 1))
        idx = np.arange(w)
        Sigma[:, idx, idx] += self.kernel_.base_diag(Xi)
        b *= self.y_scale_
        b[:, 0] += self.y_mean_
        return b, Sigma * self.y_scale_**2
