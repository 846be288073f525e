"""Squared-exponential base kernels and the affine dot product compound kernel.

The compound kernel acts on augmented inputs ``(xi, ubar)`` where ``ubar = [1, u]``::

    k((xi, ubar), (xi', ubar')) = sum_i ubar_i * k_i(xi, xi') * ubar'_i

so any GP built on it has a mean affine in ``u`` and a variance quadratic in ``u``.
Hyperparameters are handled in log space; the flat parameter vector is laid out
per base kernel as ``[log signal_variance, log lengthscale_1, ..., log lengthscale_d]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist


def augment(u) -> np.ndarray:
    """Prepend the affine ``1`` slot to a control vector (or a batch of them)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1)
    if u.ndim == 1:
        return np.concatenate(([1.0], u))
    return np.hstack((np.ones((u.shape[0], 1)), u))


def _check_ubar(ubar: np.ndarray, width: int) -> np.ndarray:
    ubar = np.atleast_2d(np.asarray(ubar, dtype=float))
    if ubar.shape[1] != width:
        raise ValueError(f"augmented control must have length {width}, got {ubar.shape[1]}")
    if not np.all(ubar[:, 0] == 1.0):
        raise ValueError("augmented control must carry a leading 1")
    return ubar


@dataclass(frozen=True)
class BaseKernel:
    """ARD squared-exponential kernel ``s * exp(-0.5 * sum(((x - y) / l) ** 2))``."""

    signal_variance: float
    lengthscales: tuple[float, ...]

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if len(ls) == 0 or min(ls) <= 0:
            raise ValueError("lengthscales must be a non-empty vector of positive reals")

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)

    def _scaled(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of dimension {self.input_dim}, got {X.shape[1]}")
        return X / np.asarray(self.lengthscales)

    def sqdist(self, A, B) -> np.ndarray:
        # pairwise differences (not the |a|^2 + |b|^2 - 2ab expansion) keep
        # K(A, A) exactly symmetric with an exact diagonal
        return cdist(self._scaled(A), self._scaled(B), "sqeuclidean")

    def __call__(self, A, B) -> np.ndarray:
        return self.signal_variance * np.exp(-0.5 * self.sqdist(A, B))

    def diag(self, A) -> np.ndarray:
        return np.full(np.atleast_2d(A).shape[0], self.signal_variance)


def eval_base(k: BaseKernel, x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape or x.size != k.input_dim:
        raise ValueError("input dimensions do not match the lengthscale vector")
    r = (x - y) / np.asarray(k.lengthscales)
    return k.signal_variance * float(np.exp(-0.5 * r @ r))


@dataclass(frozen=True)
class CompositeKernel:
    """Affine dot product kernel built from ``control_dim + 1`` base kernels."""

    base_kernels: tuple[BaseKernel, ...]

    def __post_init__(self):
        kernels = tuple(self.base_kernels)
        object.__setattr__(self, "base_kernels", kernels)
        if len(kernels) < 2:
            raise ValueError("need at least two base kernels (drift slot plus one control)")
        dims = {k.input_dim for k in kernels}
        if len(dims) != 1:
            raise ValueError("all base kernels must share the same input dimension")

    @classmethod
    def from_values(cls, control_dim: int, input_dim: int, signal_variance=1.0, lengthscale=1.0):
        """Identical base kernels with the given scalar (or per-kernel) settings."""
        sv = np.broadcast_to(np.asarray(signal_variance, dtype=float), (control_dim + 1,))
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (control_dim + 1, input_dim))
        return cls(tuple(BaseKernel(s, tuple(row)) for s, row in zip(sv, ls)))

    @property
    def control_dim(self) -> int:
        return len(self.base_kernels) - 1

    @property
    def input_dim(self) -> int:
        return self.base_kernels[0].input_dim

    @property
    def n_params(self) -> int:
        return (self.control_dim + 1) * (self.input_dim + 1)

    # -- log-parameter vector -------------------------------------------------
    @property
    def theta(self) -> np.ndarray:
        return np.concatenate(
            [np.log(np.r_[k.signal_variance, k.lengthscales]) for k in self.base_kernels]
        )

    def with_theta(self, theta) -> "CompositeKernel":
        theta = np.asarray(theta, dtype=float).reshape(self.control_dim + 1, self.input_dim + 1)
        vals = np.exp(theta)
        return CompositeKernel(tuple(BaseKernel(row[0], tuple(row[1:])) for row in vals))

    # -- evaluation ------------------------------------------------------------
    def base_grams(self, A, B) -> np.ndarray:
        """Stack of base-kernel Gram matrices, shape ``(m + 1, len(A), len(B))``."""
        return np.stack([k(A, B) for k in self.base_kernels])

    def base_diag(self, A) -> np.ndarray:
        """Per-kernel prior variances ``k_i(x, x)``, shape ``(len(A), m + 1)``."""
        n = np.atleast_2d(A).shape[0]
        return np.tile([k.signal_variance for k in self.base_kernels], (n, 1))

    def __call__(self, xa, ua, xb, ub) -> np.ndarray:
        width = self.control_dim + 1
        ua, ub = _check_ubar(ua, width), _check_ubar(ub, width)
        G = self.base_grams(xa, xb)
        return np.einsum("ai,iab,bi->ab", ua, G, ub)

    def diag(self, x, ubar) -> np.ndarray:
        ubar = _check_ubar(ubar, self.control_dim + 1)
        return (ubar**2 * self.base_diag(x)).sum(1)

    def gram_vjp(self, xa, ua, xb, ub, coef) -> np.ndarray:
        """Gradient of ``sum(coef * K(a, b))`` with respect to :attr:`theta`."""
        ua = np.atleast_2d(ua)
        ub = np.atleast_2d(ub)
        xa = np.atleast_2d(np.asarray(xa, dtype=float))
        xb = np.atleast_2d(np.asarray(xb, dtype=float))
        out = np.empty((self.control_dim + 1, self.input_dim + 1))
        for i, k in enumerate(self.base_kernels):
            H = coef * np.outer(ua[:, i], ub[:, i]) * k(xa, xb)
            ls2 = np.asarray(k.lengthscales) ** 2
            out[i, 0] = H.sum()
            # sum_ab H_ab (xa_ad - xb_bd)^2 for every d
            cross = np.einsum("ad,ab,bd->d", xa, H, xb)
            out[i, 1:] = (H.sum(1) @ xa**2 + H.sum(0) @ xb**2 - 2.0 * cross) / ls2
        return out.ravel()

    def diag_vjp(self, ubar, coef) -> np.ndarray:
        """Gradient of ``sum(coef * diag(K))`` with respect to :attr:`theta`."""
        ubar = np.atleast_2d(ubar)
        out = np.zeros((self.control_dim + 1, self.input_dim + 1))
        sv = np.array([k.signal_variance for k in self.base_kernels])
        out[:, 0] = (coef[:, None] * ubar**2).sum(0) * sv
        return out.ravel()


def eval_adp(k: CompositeKernel, xi_a, ubar_a, xi_b, ubar_b) -> float:
    width = k.control_dim + 1
    ua = np.asarray(ubar_a, dtype=float).ravel()
    ub = np.asarray(ubar_b, dtype=float).ravel()
    if ua.size != width or ub.size != width:
        raise ValueError(f"augmented controls must have length {width}")
    return float(k(np.atleast_2d(xi_a), ua[None], np.atleast_2d(xi_b), ub[None])[0, 0])


def gram(k: CompositeKernel, xi_a, ubar_a, xi_b=None, ubar_b=None) -> np.ndarray:
    if xi_b is None:
        xi_b, ubar_b = xi_a, ubar_a
    return k(xi_a, ubar_a, xi_b, ubar_b)


def cross_vector(k: CompositeKernel, xi_star, xi_o, ubar_o) -> np.ndarray:
    """Per-slot cross covariances between query states and the inducing set.

    Entry ``[i, j]`` is ``k_i(xi_star, xi_o[j]) * ubar_o[j, i]``, so that
    ``ubar_star @ cross_vector(...)`` is the compound-kernel row against the
    inducing inputs. A batch of queries (2-D ``xi_star``) returns shape
    ``(n, m + 1, M)``.
    """
    ubar_o = _check_ubar(ubar_o, k.control_dim + 1)
    xs = np.asarray(xi_star, dtype=float)
    single = xs.ndim == 1
    G = k.base_grams(np.atleast_2d(xs), xi_o)  # (m+1, n, M)
    out = np.transpose(G, (1, 0, 2)) * ubar_o.T[None]
    return out[0] if single else out


def central_difference(fn: Callable[[np.ndarray], float], theta, step: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        grad[j] = (fn(theta + e) - fn(theta - e)) / (2 * step)
    return grad


def hyperparameter_gradient(k: CompositeKernel, bound_fn, step: float = 1e-5) -> np.ndarray:
    """Gradient of ``bound_fn`` with respect to ``k.theta``.

    ``bound_fn(kernel)`` may return the bound alone, in which case central
    differences are used, or a ``(value, gradient)`` pair.
    """
    out = bound_fn(k)
    if isinstance(out, tuple):
        value, grad = out
    else:
        value = out
        grad = central_difference(lambda th: _as_value(bound_fn(k.with_theta(th))), k.theta, step)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite bound or gradient at theta={np.array2string(k.theta, precision=3)}"
        )
    return np.asarray(grad, dtype=float)


def _as_value(out) -> float:
    return out[0] if isinstance(out, tuple) else out


def kernel_from_dict(d: dict) -> CompositeKernel:
    return CompositeKernel(
        tuple(BaseKernel(b["signal_variance"], tuple(b["lengthscales"])) for b in d["base_kernels"])
    )


def kernel_to_dict(k: CompositeKernel) -> dict:
    return {
        "base_kernels": [
            {"signal_variance": b.signal_variance, "lengthscales": list(b.lengthscales)}
            for b in k.base_kernels
        ]
    }


__all__: Sequence[str] = [
    "BaseKernel",
    "CompositeKernel",
    "augment",
    "central_difference",
    "cross_vector",
    "eval_adp",
    "eval_base",
    "gram",
    "hyperparameter_gradient",
    "kernel_from_dict",
    "kernel_to_dict",
]
