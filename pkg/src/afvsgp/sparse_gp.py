"""Variational sparse GP with exponential forgetting over a fixed-size window.

Samples in the window are weighted by ``phi ** age`` (newest sample has weight 1),
which enters the likelihood as a per-sample noise variance ``noise / weight``.
With inducing inputs ``O`` the cached posterior quantities are::

    S    = K_oxi @ diag(w) @ K_xio
    A    = K_oo + S / noise          (B = inv(A))
    zLK  = K_oxi @ diag(w) @ z
    alpha = B @ zLK / noise,  D = B - inv(K_oo)

(``alpha`` and ``D`` are formed in whitened coordinates, see
:func:`posterior_factors`) and predictions at a query state split into a part affine in the augmented
control (``b_vec``) and a quadratic one (``Sigma``).
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import CompositeKernel, cross_vector

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

# box on log-hyperparameters during training; keeps Gram matrices away from
# numerically degenerate corners
LOG_SIGNAL_BOUNDS = (-12.0, 12.0)
LOG_LENGTH_BOUNDS = (np.log(1e-3), np.log(1e3))
LOG_NOISE_BOUNDS = (np.log(1e-8), np.log(1e4))


class NumericalError(ArithmeticError):
    """A matrix factorization failed even after jitter escalation."""


class ModelError(ValueError):
    """The model cannot be built from the given data/configuration."""


def jittered_cholesky(A, name: str = "matrix"):
    """Lower Cholesky factor of ``A + jitter * I`` for the smallest working jitter.

    The ladder is relative to the mean diagonal of ``A``. Returns ``(L, jitter)``
    with the absolute jitter that was added.
    """
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    eye = np.eye(A.shape[0])
    scale = float(np.mean(np.abs(np.diag(A)))) if A.size else 1.0
    scale = scale if scale > 0 and np.isfinite(scale) else 1.0
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            return linalg.cholesky(A + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            continue
    raise NumericalError(f"{name} is not positive definite even with jitter {JITTER_LADDER[-1]:g}")


def jittered_inverse(A, name: str = "matrix", return_jitter: bool = False):
    """Inverse of a symmetric matrix through a jittered Cholesky factorization."""
    L, jitter = jittered_cholesky(A, name)
    inv = linalg.cho_solve((L, True), np.eye(L.shape[0]))
    inv = 0.5 * (inv + inv.T)
    if jitter > 0:
        log.debug("inverted %s with jitter %g", name, jitter)
    return (inv, jitter) if return_jitter else inv


def whitening(Kuu) -> np.ndarray:
    """``L^-1`` for the jittered Cholesky factor ``Kuu = L L^T``."""
    L, _ = jittered_cholesky(Kuu, "K_oo")
    return linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)


def whitened_gram(Li, Kfu, w, z=None):
    """``L^-1 S L^-T`` formed from the weighted cross-Gram without ever building ``S``.

    With targets ``z`` also returns ``L^-1 zLK``.
    """
    V = Li @ Kfu.T
    Phi = V * np.sqrt(w)
    out = Phi @ Phi.T
    out = 0.5 * (out + out.T)
    return out if z is None else (out, V @ (w * z))


def posterior_factors(Kuu, zLK, noise: float, S=None, Kfu=None, w=None, Li=None, S_white=None,
                      z_white=None):
    """``B = inv(Kuu + S / noise)``, ``alpha = B zLK / noise`` and ``D = B - inv(Kuu)``.

    Everything goes through the Cholesky factor ``Kuu = L L^T``: the precision is
    ``L (I + L^-1 S L^-T / noise) L^T`` and the inner matrix has every eigenvalue
    at least 1, so a very small noise variance does not wreck the result the way
    inverting the sum directly does. ``alpha`` and ``D`` are assembled in the
    whitened coordinates instead of from ``B``. When the weighted cross-Gram
    ``Kfu``/``w`` is given the inner matrix is formed from it rather than from ``S``,
    which is much more accurate when ``Kuu`` is badly conditioned; a maintained
    ``S_white = L^-1 S L^-T`` (with ``z_white = L^-1 zLK``) serves the same
    purpose. A precomputed :func:`whitening` of ``Kuu`` may be passed as ``Li``.
    """
    Li = whitening(Kuu) if Li is None else Li
    eye = np.eye(Li.shape[0])
    if S_white is None:
        S_white = Li @ S @ Li.T if Kfu is None else whitened_gram(Li, Kfu, w)
    inner = eye + S_white / noise
    Lc, _ = jittered_cholesky(inner, "B_phi^-1")
    Ci = linalg.cho_solve((Lc, True), eye)
    B = Li.T @ Ci @ Li
    D = Li.T @ (Ci - eye) @ Li
    z_white = Li @ zLK if z_white is None else z_white
    alpha = Li.T @ linalg.cho_solve((Lc, True), z_white) / noise
    return 0.5 * (B + B.T), alpha, 0.5 * (D + D.T)


def forgetting_weights(n: int, phi: float) -> np.ndarray:
    """Window weights ordered oldest to newest: ``phi**(n-1), ..., phi, 1``."""
    return phi ** np.arange(n - 1, -1, -1, dtype=float)


@dataclass
class TrainingWindow:
    """FIFO of augmented samples ``(xi, ubar, z)`` holding at most ``capacity`` rows."""

    capacity: int
    xi: np.ndarray
    ubar: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        self.ubar = np.atleast_2d(np.asarray(self.ubar, dtype=float))
        self.z = np.asarray(self.z, dtype=float).ravel()
        if self.capacity < 1:
            raise ModelError("window capacity must be positive")
        if not (len(self.xi) == len(self.ubar) == len(self.z)):
            raise ModelError("window arrays disagree in length")
        if len(self.z) > self.capacity:
            raise ModelError("window holds more samples than its capacity")
        if len(self.z) and not np.all(self.ubar[:, 0] == 1.0):
            raise ModelError("every augmented control needs a leading 1")

    def __len__(self):
        return len(self.z)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def push(self, xi, ubar, z):
        """Append a sample; returns the evicted ``(xi, ubar, z)`` or ``None``."""
        ubar = np.asarray(ubar, dtype=float).ravel()
        if ubar[0] != 1.0:
            raise ValueError("augmented control needs a leading 1")
        evicted = None
        if self.full:
            evicted = (self.xi[0].copy(), self.ubar[0].copy(), float(self.z[0]))
            self.xi, self.ubar, self.z = self.xi[1:], self.ubar[1:], self.z[1:]
        self.xi = np.vstack((self.xi, np.asarray(xi, dtype=float).ravel()))
        self.ubar = np.vstack((self.ubar, ubar))
        self.z = np.append(self.z, float(z))
        return evicted


@dataclass
class Prediction:
    """Posterior of the discrepancy at one state, as a function of ``ubar``.

    ``mean(ubar) = b_vec @ ubar`` and ``variance(ubar) = ubar @ Sigma @ ubar``.
    Both also accept the bare control ``u`` and prepend the ``1`` themselves.
    """

    b_vec: np.ndarray
    Sigma: np.ndarray

    def _bar(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).ravel()
        if u.size == self.b_vec.size - 1:
            return np.r_[1.0, u]
        if u.size != self.b_vec.size:
            raise ValueError(f"expected a control of length {self.b_vec.size - 1} or {self.b_vec.size}")
        return u

    def mean(self, ubar) -> float:
        return float(self.b_vec @ self._bar(ubar))

    def variance(self, ubar) -> float:
        ub = self._bar(ubar)
        v = float(ub @ self.Sigma @ ub)
        if v < 0:
            if v < -1e-8 * max(1.0, float(np.abs(self.Sigma).max())):
                log.warning("negative predictive variance %.3e clamped to zero", v)
            v = 0.0
        return v


@dataclass
class ModelState:
    """Hyperparameters, training window, inducing set and all derived caches."""

    kernel: CompositeKernel
    noise: float
    phi: float
    window: TrainingWindow
    xi_o: np.ndarray
    ubar_o: np.ndarray
    # constant prior mean and output scale; the GP models (z - y_mean) / y_scale
    y_mean: float = 0.0
    y_scale: float = 1.0
    # caches (see module docstring)
    Kuu: np.ndarray = field(default=None, repr=False)
    Kuu_inv: np.ndarray = field(default=None, repr=False)
    Luu_inv: np.ndarray = field(default=None, repr=False)
    S_white: np.ndarray = field(default=None, repr=False)
    z_white: np.ndarray = field(default=None, repr=False)
    S: np.ndarray = field(default=None, repr=False)
    A: np.ndarray = field(default=None, repr=False)
    B: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)
    D: np.ndarray = field(default=None, repr=False)
    zLK: np.ndarray = field(default=None, repr=False)
    Kfu: np.ndarray = field(default=None, repr=False)
    wk_sum: float = 0.0
    fallbacks: int = 0
    training_report: object = field(default=None, repr=False, compare=False)
    last_event: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.phi <= 1:
            raise ModelError("forgetting factor must lie in (0, 1]")
        if not self.noise > 0:
            raise ModelError("noise variance must be positive")
        if not self.y_scale > 0:
            raise ModelError("output scale must be positive")
        self.xi_o = np.atleast_2d(np.asarray(self.xi_o, dtype=float))
        self.ubar_o = np.atleast_2d(np.asarray(self.ubar_o, dtype=float))
        if len(self.xi_o) < 1:
            raise ModelError("the model needs at least one inducing point")
        if self.Kuu is None:
            rebuild_caches(self)

    @property
    def M(self) -> int:
        return len(self.xi_o)

    @property
    def P(self) -> int:
        return self.window.capacity

    @property
    def weights(self) -> np.ndarray:
        return forgetting_weights(len(self.window), self.phi)

    @property
    def control_dim(self) -> int:
        return self.kernel.control_dim

    def standardize(self, z):
        return (np.asarray(z, dtype=float) - self.y_mean) / self.y_scale

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def batch_caches(kernel: CompositeKernel, noise, phi, window: TrainingWindow, xi_o, ubar_o,
                 y_mean: float = 0.0, y_scale: float = 1.0) -> dict:
    """All cached matrices computed from scratch, ``O(P M^2)``."""
    w = forgetting_weights(len(window), phi)
    Kuu = kernel(xi_o, ubar_o, xi_o, ubar_o)
    Kfu = kernel(window.xi, window.ubar, xi_o, ubar_o)
    S = (Kfu.T * w) @ Kfu
    S = 0.5 * (S + S.T)
    zs = (window.z - y_mean) / y_scale
    zLK = Kfu.T @ (w * zs)
    Li = whitening(Kuu)
    S_white, z_white = whitened_gram(Li, Kfu, w, zs)
    B, alpha, D = posterior_factors(Kuu, zLK, noise, Li=Li, S_white=S_white, z_white=z_white)
    return {
        "Kuu": Kuu,
        "Kuu_inv": jittered_inverse(Kuu, "K_oo"),
        "Luu_inv": Li,
        "S_white": S_white,
        "z_white": z_white,
        "S": S,
        "A": Kuu + S / noise,
        "B": B,
        "alpha": alpha,
        "D": D,
        "zLK": zLK,
        "Kfu": Kfu,
        "wk_sum": float(w @ kernel.diag(window.xi, window.ubar)),
    }


def rebuild_caches(state: ModelState) -> ModelState:
    for name, value in batch_caches(
        state.kernel, state.noise, state.phi, state.window, state.xi_o, state.ubar_o,
        state.y_mean, state.y_scale,
    ).items():
        setattr(state, name, value)
    return state


def predict_batch(state: ModelState, xi_star):
    """Vectorized :func:`predict`: returns ``b`` of shape ``(n, m+1)`` and ``Sigma`` ``(n, m+1, m+1)``."""
    xs = np.atleast_2d(np.asarray(xi_star, dtype=float))
    kU = cross_vector(state.kernel, xs, state.xi_o, state.ubar_o)  # (n, m+1, M)
    b = kU @ state.alpha
    Sigma = kU @ state.D @ np.transpose(kU, (0, 2, 1))
    idx = np.arange(state.control_dim + 1)
    Sigma[:, idx, idx] += state.kernel.base_diag(xs)
    Sigma = 0.5 * (Sigma + np.transpose(Sigma, (0, 2, 1)))
    if state.y_scale != 1.0 or state.y_mean != 0.0:
        b *= state.y_scale
        b[:, 0] += state.y_mean
        Sigma *= state.y_scale**2
    return b, Sigma


def predict(state: ModelState, xi_star) -> Prediction:
    b, S = predict_batch(state, np.asarray(xi_star, dtype=float).reshape(1, -1))
    return Prediction(b[0], S[0])


def predict_mean_var(state: ModelState, xi_star, ubar_star):
    """Scalar predictive mean and variance at paired rows of ``xi_star``/``ubar_star``."""
    b, S = predict_batch(state, xi_star)
    ub = np.atleast_2d(ubar_star)
    mean = np.einsum("ni,ni->n", b, ub)
    var = np.einsum("ni,nij,nj->n", ub, S, ub)
    return mean, np.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# collapsed bound
# ---------------------------------------------------------------------------


def forgetting_bound(
    kernel: CompositeKernel,
    noise: float,
    xi,
    ubar,
    z,
    weights,
    xi_o,
    ubar_o,
    with_grad: bool = False,
):
    """Forgetting-weighted collapsed variational bound.

    ``log N(z | 0, Q + noise * W^-1) - c(noise) - tr / (2 noise)`` where
    ``Q = K_xio K_oo^-1 K_oxi``, ``tr = sum_t w_t (k_tt - q_tt)`` and
    ``c(noise) = sum_t (w_t - 1) log(2 pi noise) / (2 noise)``. The constant
    keeps the unusual ``1 / (2 noise)`` scaling (a plain weighted likelihood
    would use ``1/2``); it vanishes for ``phi = 1``, where the bound is the
    usual Titsias bound.

    With ``with_grad`` returns ``(value, grad)`` where ``grad`` is taken with
    respect to ``[kernel.theta, log(noise)]``. Everything is ``O(P M^2)``.
    """
    s = float(noise)
    z = np.asarray(z, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    P = z.size
    Kuu = kernel(xi_o, ubar_o, xi_o, ubar_o)
    Kfu = kernel(xi, ubar, xi_o, ubar_o)
    kd = kernel.diag(xi, ubar)
    Lu, _ = jittered_cholesky(Kuu, "K_oo")
    Vt = linalg.solve_triangular(Lu, Kfu.T, lower=True)  # Lu^-1 K_oxi, (M, P)
    sw = np.sqrt(w)
    V = Vt * sw
    M = Vt.shape[0]
    LA, _ = jittered_cholesky(np.eye(M) + V @ V.T / s, "I + V V^T / noise")
    zp = sw * z
    t = linalg.solve_triangular(LA, V @ zp, lower=True)
    quad = zp @ zp / s - t @ t / s**2
    logdet = P * np.log(s) + 2 * np.log(np.diag(LA)).sum() - np.log(w).sum()
    log_n = -0.5 * (P * np.log(2 * np.pi) + logdet + quad)
    q = (Vt**2).sum(0)
    resid = w @ (kd - q)
    wsum = (w - 1.0).sum()
    value = log_n - wsum * np.log(2 * np.pi * s) / (2 * s) - resid / (2 * s)
    if not with_grad:
        return float(value)

    def c_inv(X):
        # C^-1 X with C = noise W^-1 + Q, via Woodbury on the scaled system
        Y = sw[:, None] * X
        inner = linalg.cho_solve((LA, True), V @ Y)
        return sw[:, None] * (Y / s - V.T @ inner / s**2)

    Vtil = linalg.solve_triangular(Lu.T, Vt, lower=False).T  # K_xio K_oo^-1, (P, M)
    alpha = c_inv(z[:, None])[:, 0]
    GV = np.outer(alpha, alpha @ Vtil) - c_inv(Vtil)
    G_fu = GV + (w[:, None] * Vtil) / s
    G_uu = -0.5 * (Vtil.T @ GV) - (Vtil.T * w) @ Vtil / (2 * s)
    G_uu = 0.5 * (G_uu + G_uu.T)
    g_kernel = (
        kernel.gram_vjp(xi, ubar, xi_o, ubar_o, G_fu)
        + kernel.gram_vjp(xi_o, ubar_o, xi_o, ubar_o, G_uu)
        + kernel.diag_vjp(ubar, -w / (2 * s))
    )
    tr_cinv_winv = P / s - (linalg.solve_triangular(LA, V, lower=True) ** 2).sum() / s**2
    d_logn = 0.5 * (alpha**2 @ (1.0 / w) - tr_cinv_winv)
    d_const = -0.5 * wsum * (1.0 - np.log(2 * np.pi * s)) / s**2
    d_trace = resid / (2 * s**2)
    g_noise = s * (d_logn + d_const + d_trace)
    return float(value), np.append(g_kernel, g_noise)


def collapsed_bound(state: ModelState) -> float:
    win = state.window
    return forgetting_bound(
        state.kernel, state.noise, win.xi, win.ubar, state.standardize(win.z), state.weights,
        state.xi_o, state.ubar_o,
    )


def dense_log_marginal(kernel: CompositeKernel, noise, xi, ubar, z) -> float:
    """Exact GP log marginal likelihood with the compound kernel."""
    z = np.asarray(z, dtype=float)
    K = kernel(xi, ubar, xi, ubar) + noise * np.eye(z.size)
    L, _ = jittered_cholesky(K, "dense K")
    a = linalg.solve_triangular(L, z, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * z.size * np.log(2 * np.pi))


# ---------------------------------------------------------------------------
# offline training
# ---------------------------------------------------------------------------


def _bounds(kernel: CompositeKernel):
    per = np.r_[LOG_SIGNAL_BOUNDS[0], np.full(kernel.input_dim, LOG_LENGTH_BOUNDS[0])]
    lo = np.r_[np.tile(per, kernel.control_dim + 1), LOG_NOISE_BOUNDS[0]]
    per = np.r_[LOG_SIGNAL_BOUNDS[1], np.full(kernel.input_dim, LOG_LENGTH_BOUNDS[1])]
    hi = np.r_[np.tile(per, kernel.control_dim + 1), LOG_NOISE_BOUNDS[1]]
    return lo, hi


def gradient_ascent(fg, x0, lo, hi, max_iter=300, gtol=1e-6):
    """Projected gradient ascent with Barzilai-Borwein steps and Armijo backtracking.

    ``fg(x)`` returns ``(value, grad)``. Returns ``(x, value, n_iter, converged)``.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g = fg(x)
    if not np.isfinite(f):
        return x, f, 0, False
    step = 1.0 / max(1.0, np.linalg.norm(g))
    for it in range(1, max_iter + 1):
        pg = np.clip(x + g, lo, hi) - x
        if np.linalg.norm(pg) < gtol:
            return x, f, it, True
        for _ in range(40):
            x_new = np.clip(x + step * g, lo, hi)
            try:
                f_new, g_new = fg(x_new)
            except (NumericalError, FloatingPointError, linalg.LinAlgError):
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f + 1e-4 * g @ (x_new - x):
                break
            step *= 0.5
        else:
            return x, f, it, False
        s_k, y_k = x_new - x, g_new - g
        x, f, g = x_new, f_new, g_new
        sy = s_k @ y_k
        step = (s_k @ s_k) / -sy if sy < 0 else step * 2.0
        step = float(np.clip(step, 1e-8, 1e3))
    pg = np.clip(x + g, lo, hi) - x
    return x, f, max_iter, bool(np.linalg.norm(pg) < gtol)


def select_inducing(n: int, M: int, how: str = "recent") -> np.ndarray:
    """Indices of the initial inducing inputs among ``n`` window samples."""
    if how == "recent":
        return np.arange(n - M, n)
    if how == "stride":
        return np.unique(np.linspace(0, n - 1, M).round().astype(int))
    raise ValueError(f"unknown inducing selection {how!r}")


def select_distinct(kernel: CompositeKernel, xi, ubar, M: int, min_residual: float = 1e-6,
                    order=None) -> np.ndarray:
    """Up to ``M`` indices, newest first by default, skipping near-duplicates.

    A candidate is kept only if its residual against the span of the already
    kept inputs exceeds ``min_residual`` times its prior variance, which bounds
    how ill-conditioned ``K_oo`` can get. Returned in ascending order.
    """
    xi = np.atleast_2d(xi)
    ubar = np.atleast_2d(ubar)
    order = np.arange(len(xi))[::-1] if order is None else np.asarray(order)
    kd = kernel.diag(xi, ubar)
    keep: list[int] = []
    L = np.zeros((0, 0))
    for i in order:
        if len(keep) == M:
            break
        if kd[i] <= 0:
            continue
        k = kernel(xi[keep], ubar[keep], xi[i : i + 1], ubar[i : i + 1])[:, 0] if keep else np.zeros(0)
        c = linalg.solve_triangular(L, k, lower=True) if keep else k
        resid = kd[i] - c @ c
        if resid <= min_residual * kd[i]:
            continue
        n = len(keep)
        L2 = np.zeros((n + 1, n + 1))
        L2[:n, :n] = L
        L2[n, :n] = c
        L2[n, n] = np.sqrt(resid)
        L = L2
        keep.append(int(i))
    if len(keep) < M:
        log.info("only %d of %d requested inducing inputs are distinct", len(keep), M)
    return np.sort(np.array(keep, dtype=int))


@dataclass
class TrainingReport:
    bound: float
    n_iter: int
    converged: bool
    restarts: list = field(default_factory=list)


def train_hyperparameters(
    kernel: CompositeKernel,
    noise: float,
    xi,
    ubar,
    z,
    weights,
    xi_o,
    ubar_o,
    restarts: int = 3,
    seed: int = 0,
    max_iter: int = 300,
    gtol: float = 1e-6,
    train_noise: bool = True,
):
    """Maximize :func:`forgetting_bound` over log-hyperparameters.

    Starts from the given values and from ``restarts`` random log-normal
    perturbations of them; the best finite result wins.
    """
    lo, hi = _bounds(kernel)
    if not train_noise:
        lo[-1] = hi[-1] = np.log(noise)

    def fg(x):
        k = kernel.with_theta(x[:-1])
        v, g = forgetting_bound(k, np.exp(x[-1]), xi, ubar, z, weights, xi_o, ubar_o, True)
        if not train_noise:
            g = g.copy()
            g[-1] = 0.0
        return v, g

    rng = np.random.default_rng(seed)
    x0 = np.append(kernel.theta, np.log(noise))
    starts = [x0] + [x0 + rng.normal(0.0, 0.5, x0.size) for _ in range(restarts)]
    best = None
    runs = []
    for s0 in starts:
        if not train_noise:
            s0 = s0.copy()
            s0[-1] = x0[-1]
        try:
            x, f, it, ok = gradient_ascent(fg, s0, lo, hi, max_iter, gtol)
        except (NumericalError, FloatingPointError, linalg.LinAlgError) as exc:
            log.warning("restart failed: %s", exc)
            continue
        runs.append((f, it, ok))
        if np.isfinite(f) and (best is None or f > best[1]):
            best = (x, f, it, ok)
    if best is None:
        raise ModelError("hyperparameter optimization produced no finite bound")
    x, f, it, ok = best
    if not ok:
        warnings.warn(
            f"hyperparameter ascent stopped before convergence after {it} iterations; using best iterate",
            RuntimeWarning,
            stacklevel=2,
        )
    return kernel.with_theta(x[:-1]), float(np.exp(x[-1])), TrainingReport(f, it, ok, runs)


def fit_offline(
    xi,
    ubar,
    z,
    M: int,
    phi: float,
    kernel: CompositeKernel,
    noise: float = 0.1,
    restarts: int = 3,
    seed: int = 0,
    max_iter: int = 300,
    inducing: str = "recent",
    optimize: bool = True,
    train_noise: bool = True,
    min_residual: float = 1e-6,
    normalize: bool = False,
) -> ModelState:
    """Train hyperparameters on a preliminary window and build the model.

    The whole data set becomes the training window (capacity ``P = len(z)``);
    inducing inputs are picked from it (``"recent"``: the ``M`` newest samples,
    ``"stride"``: evenly spaced) and stay fixed during training. Near-duplicate
    picks are skipped (see :func:`select_distinct`), first under the initial
    kernel and again under the trained one.

    With ``normalize`` the targets are centred and scaled by their sample mean
    and standard deviation first; ``noise`` and the kernel then live in those
    standardized units.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    ubar = np.atleast_2d(np.asarray(ubar, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    P = z.size
    if not 1 <= M <= P:
        raise ModelError(f"need 1 <= M <= P, got M={M}, P={P}")
    if not 0 < phi <= 1:
        raise ModelError("forgetting factor must lie in (0, 1]")
    if ubar.shape[1] != kernel.control_dim + 1 or xi.shape[1] != kernel.input_dim:
        raise ModelError("data dimensions do not match the kernel")
    if inducing == "recent":
        order = None
    elif inducing == "stride":
        order = np.r_[select_inducing(P, M, "stride"), np.arange(P)[::-1]]
        order = order[np.sort(np.unique(order, return_index=True)[1])]
    else:
        raise ValueError(f"unknown inducing selection {inducing!r}")
    y_mean, y_scale = 0.0, 1.0
    if normalize:
        y_mean = float(z.mean())
        y_scale = float(z.std()) if z.std() > 0 else 1.0
    zs = (z - y_mean) / y_scale
    idx = select_distinct(kernel, xi, ubar, M, min_residual, order)
    w = forgetting_weights(P, phi)
    report = None
    if optimize:
        kernel, noise, report = train_hyperparameters(
            kernel, noise, xi, ubar, zs, w, xi[idx], ubar[idx], restarts, seed, max_iter,
            train_noise=train_noise,
        )
        idx = select_distinct(kernel, xi, ubar, M, min_residual, order)
    state = ModelState(kernel, noise, phi, TrainingWindow(P, xi, ubar, z), xi[idx], ubar[idx],
                       y_mean, y_scale)
    state.training_report = report
    return state
