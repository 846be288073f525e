"""Streaming updates of a :class:`~afvsgp.sparse_gp.ModelState` in ``O(M^3)`` per sample.

Each step slides the training window, scores how much of the (forgetting-weighted)
window the inducing set fails to explain, optionally inserts the new sample as an
inducing input, and evicts the least informative inducing input once the set
grows past ``M_max``. All caches are updated incrementally; whenever an update
loses positive definiteness the state is rebuilt from the window instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .sparse_gp import (
    ModelError,
    ModelState,
    NumericalError,
    posterior_factors,
    rebuild_caches,
    whitened_gram,
    whitening,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoveltyScores:
    P_th: float
    per_point: np.ndarray
    candidate_residual: float = float("nan")


@dataclass(frozen=True)
class AdaptationConfig:
    epsilon: float
    M_max: int
    eviction_policy: str = "argmin"
    # relative floor on the candidate's own projection residual; below it the
    # candidate duplicates the span of the inducing set and is not inserted
    min_residual: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.M_max < 2:
            raise ValueError("M_max must be at least 2")
        if self.eviction_policy != "argmin":
            raise ValueError(f"unknown eviction policy {self.eviction_policy!r}")


def _refresh(state: ModelState, keep_B: bool = False, same_inducing: bool = False) -> bool:
    """Recompute ``B``/``alpha``/``D`` from ``Kuu``, ``S`` and ``zLK`` in ``O(M^3)``.

    With ``same_inducing`` the cached whitening of ``Kuu`` and the whitened
    cross-Gram (already updated by the caller) are reused; otherwise both are
    recomputed, the latter from ``Kfu`` in ``O(P M^2)``.
    """
    try:
        if not same_inducing or state.Luu_inv is None:
            state.Luu_inv = whitening(state.Kuu)
            state.S_white, state.z_white = whitened_gram(
                state.Luu_inv, state.Kfu, state.weights, state.standardize(state.window.z)
            )
        B, alpha, D = posterior_factors(state.Kuu, state.zLK, state.noise, Li=state.Luu_inv,
                                        S_white=state.S_white, z_white=state.z_white)
    except NumericalError:
        return False
    if not keep_B:
        state.B = B
    state.alpha, state.D = alpha, D
    return True


def _fallback(state: ModelState, why: str) -> ModelState:
    state.fallbacks += 1
    log.info("incremental update lost positive definiteness (%s); rebuilding from window", why)
    rebuild_caches(state)
    state.last_event["fallback"] = True
    return state


def ingest_sample(state: ModelState, xi, ubar, z) -> ModelState:
    """Slide the window by one sample and update the caches in place.

    With window weights ``w`` and the oldest sample ``(k_old, z_old)`` at weight
    ``phi**(P-1)``::

        S_new   = phi * S + k_new k_new^T - phi**P k_old k_old^T
        zLK_new = phi * zLK + z_new k_new - phi**P z_old k_old
        A_new   = K_oo + S_new / noise
                = (1 - phi) K_oo + phi A + (k_new k_new^T - phi**P k_old k_old^T) / noise

    which is the batch definition of the caches on the shifted window. The
    whitened ``L^-1 S L^-T`` gets the same rank-one updates with ``L^-1 k``.
    """
    xi = np.asarray(xi, dtype=float).ravel()
    ubar = np.asarray(ubar, dtype=float).ravel()
    phi = state.phi
    k_new = state.kernel(xi[None], ubar[None], state.xi_o, state.ubar_o)[0]
    kd_new = float(state.kernel.diag(xi[None], ubar[None])[0])
    n_before = len(state.window)
    evicted = state.window.push(xi, ubar, z)
    Li = state.Luu_inv
    S = phi * state.S + np.outer(k_new, k_new)
    v_new = Li @ k_new
    T = phi * state.S_white + np.outer(v_new, v_new)
    zs_new = float(state.standardize(z))
    zLK = phi * state.zLK + zs_new * k_new
    zw = phi * state.z_white + zs_new * v_new
    wk = phi * state.wk_sum + kd_new
    Kfu = state.Kfu
    if evicted is not None:
        w_old = phi ** (n_before - 1)
        k_old = Kfu[0]
        kd_old = float(state.kernel.diag(evicted[0][None], evicted[1][None])[0])
        zs_old = float(state.standardize(evicted[2]))
        v_old = Li @ k_old
        S -= phi * w_old * np.outer(k_old, k_old)
        T -= phi * w_old * np.outer(v_old, v_old)
        zLK -= phi * w_old * zs_old * k_old
        zw -= phi * w_old * zs_old * v_old
        wk -= phi * w_old * kd_old
        Kfu = Kfu[1:]
    state.Kfu = np.vstack((Kfu, k_new))
    state.S = 0.5 * (S + S.T)
    state.S_white = 0.5 * (T + T.T)
    state.z_white = zw
    state.zLK = zLK
    state.wk_sum = wk
    state.A = state.Kuu + state.S / state.noise
    if not _refresh(state, same_inducing=True):
        return _fallback(state, "ingest")
    return state


def score_candidate(state: ModelState, xi=None, ubar=None) -> NoveltyScores:
    """Forgetting-weighted projection residual of the window onto the inducing set.

    ``P_th = sum_t w_t (k_tt - k_to K_oo^-1 k_ot)`` and, per inducing input ``j``,
    ``P_thm[j] = sum_t w_t k_tj (K_oo^-1 k_ot)_j`` so that
    ``P_th = sum_t w_t k_tt - sum_j P_thm[j]``. Both come from the cached
    weighted cross-Gram in ``O(M^2)``. The candidate (already in the window) is
    also scored on its own when ``xi``/``ubar`` are given.
    """
    per_point = np.einsum("ij,ji->i", state.Kuu_inv, state.S)
    P_th = float(state.wk_sum - per_point.sum())
    resid = float("nan")
    if xi is not None:
        xi = np.asarray(xi, dtype=float).reshape(1, -1)
        ubar = np.asarray(ubar, dtype=float).reshape(1, -1)
        k = state.kernel(xi, ubar, state.xi_o, state.ubar_o)[0]
        resid = float(state.kernel.diag(xi, ubar)[0] - k @ state.Kuu_inv @ k)
    return NoveltyScores(P_th, per_point, resid)


def bordered_inverse(Ainv: np.ndarray, b: np.ndarray, c: float, Ab=None, schur=None):
    """Inverse of ``[[A, b], [b^T, c]]`` given ``inv(A)``; ``None`` if the Schur complement is not positive.

    ``Ab = inv(A) b`` and the Schur complement ``c - b^T inv(A) b`` may be
    supplied when the caller can compute them more accurately.
    """
    Ab = Ainv @ b if Ab is None else Ab
    schur = c - b @ Ab if schur is None else schur
    if not schur > 0:
        return None, schur
    M = Ainv.shape[0]
    out = np.empty((M + 1, M + 1))
    out[:M, :M] = Ainv + np.outer(Ab, Ab) / schur
    out[:M, M] = out[M, :M] = -Ab / schur
    out[M, M] = 1.0 / schur
    return out, schur


def _precision_border(state: ModelState, k_on, k_nn: float, kc, s_col):
    """``x = inv(A) b`` and the Schur complement of the grown precision ``A``.

    ``A = G^T G`` for ``G`` stacking the Cholesky factor of ``K_oo`` over the
    weighted cross-Gram ``W^1/2 K_xi,o / sqrt(noise)``, so the Schur complement is
    the squared residual of the new column of ``G`` after projecting out the old
    ones. Summing squares avoids the cancellation in ``c - b^T x`` when
    ``S / noise`` dominates. ``x`` gets one step of iterative refinement.
    """
    s = state.noise
    b = k_on + s_col / s
    x = state.B @ b
    x += state.B @ (b - state.A @ x)
    Li = state.Luu_inv if state.Luu_inv is not None else whitening(state.Kuu)
    L = linalg.solve_triangular(Li, np.eye(len(Li)), lower=True)
    a = Li @ k_on
    r_top = a - L.T @ x
    r_win = kc - state.Kfu @ x
    schur = r_top @ r_top + max(k_nn - a @ a, 0.0) + state.weights @ r_win**2 / s
    return x, float(schur)


def add_inducing(state: ModelState, xi, ubar, min_residual: float = 1e-6) -> ModelState:
    """Append a sample to the inducing set via block-matrix inversion.

    The precision ``A`` grows by the border ``b = k_o,new + K_oxi W k_xi,new / noise``
    and corner ``k_new,new + k_new,xi W k_xi,new / noise``. Candidates whose own
    residual against the inducing span is below ``min_residual * k_new,new``
    are rejected and the state is returned unchanged.
    """
    xi = np.asarray(xi, dtype=float).reshape(1, -1)
    ubar = np.asarray(ubar, dtype=float).reshape(1, -1)
    kern, s = state.kernel, state.noise
    k_on = kern(state.xi_o, state.ubar_o, xi, ubar)[:, 0]
    k_nn = float(kern.diag(xi, ubar)[0])
    Kuu_inv, schur = bordered_inverse(state.Kuu_inv, k_on, k_nn)
    if Kuu_inv is None or schur <= min_residual * k_nn:
        log.info("rejected inducing insertion: Schur complement %.3e", schur)
        state.last_event["rejected"] = True
        return state
    w = state.weights
    kc = kern(state.window.xi, state.window.ubar, xi, ubar)[:, 0]
    s_col = state.Kfu.T @ (w * kc)
    s_nn = float(w @ kc**2)
    x, schur_B = _precision_border(state, k_on, k_nn, kc, s_col)
    B, _ = bordered_inverse(state.B, k_on + s_col / s, k_nn + s_nn / s, x, schur_B)
    M = state.M
    Kuu = np.empty((M + 1, M + 1))
    Kuu[:M, :M] = state.Kuu
    Kuu[:M, M] = Kuu[M, :M] = k_on
    Kuu[M, M] = k_nn
    S = np.empty((M + 1, M + 1))
    S[:M, :M] = state.S
    S[:M, M] = S[M, :M] = s_col
    S[M, M] = s_nn
    state.xi_o = np.vstack((state.xi_o, xi))
    state.ubar_o = np.vstack((state.ubar_o, ubar))
    state.Kuu, state.Kuu_inv, state.S = Kuu, Kuu_inv, S
    state.A = Kuu + S / s
    state.zLK = np.append(state.zLK, kc @ (w * state.standardize(state.window.z)))
    state.Kfu = np.hstack((state.Kfu, kc[:, None]))
    if B is None:
        return _fallback(state, "insert")
    state.B = B
    if not _refresh(state, keep_B=True):
        return _fallback(state, "insert")
    return state


def _drop_inverse(Cinv: np.ndarray, j: int) -> np.ndarray | None:
    """Inverse of a matrix with row/column ``j`` removed, from the full inverse."""
    keep = np.delete(np.arange(Cinv.shape[0]), j)
    d = Cinv[j, j]
    if not d > 0:
        return None
    c = Cinv[keep, j]
    out = Cinv[np.ix_(keep, keep)] - np.outer(c, c) / d
    return 0.5 * (out + out.T)


def remove_inducing(state: ModelState, index: int) -> ModelState:
    """Delete inducing input ``index`` and shrink every cache accordingly."""
    if state.M <= 1:
        raise ModelError("cannot remove the last inducing point")
    j = int(index)
    keep = np.delete(np.arange(state.M), j)
    Kuu_inv = _drop_inverse(state.Kuu_inv, j)
    B = _drop_inverse(state.B, j)
    state.xi_o = state.xi_o[keep]
    state.ubar_o = state.ubar_o[keep]
    state.Kuu = state.Kuu[np.ix_(keep, keep)]
    state.S = state.S[np.ix_(keep, keep)]
    state.A = state.A[np.ix_(keep, keep)]
    state.zLK = state.zLK[keep]
    state.Kfu = state.Kfu[:, keep]
    if Kuu_inv is None or B is None:
        return _fallback(state, "remove")
    state.Kuu_inv, state.B = Kuu_inv, B
    if not _refresh(state, keep_B=True):
        return _fallback(state, "remove")
    return state


def step(state: ModelState, xi, ubar, z, config: AdaptationConfig) -> ModelState:
    """One streaming update: slide window, maybe insert, maybe evict.

    A summary of what happened is left in ``state.last_event``.
    """
    state.last_event = {}
    ingest_sample(state, xi, ubar, z)
    scores = score_candidate(state)
    event = {"P_th": scores.P_th, "inserted": False, "evicted": None}
    if scores.P_th > config.epsilon:
        M0 = state.M
        add_inducing(state, xi, ubar, config.min_residual)
        event["inserted"] = state.M > M0
    if state.M > config.M_max:
        per_point = score_candidate(state).per_point
        j = int(np.argmin(per_point))
        remove_inducing(state, j)
        event["evicted"] = j
    event["M"] = state.M
    state.last_event.update(event)
    return state
