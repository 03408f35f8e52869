"""Kernels, covariance assembly and the Nystrom conditional mean.

Kernel inputs here are raw phase-domain coordinates (the same units as the
inducing locations ``z``); mapping radians onto that domain is the job of
:class:`nopdecomp.shape_stage.PatternInducingPoints`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

# Library defaults for the SE kernel and observation noise.
BETA_SE = 1.0
ALPHA_SE = 2.0e3
SIGMA_DEFAULT = 10.0 ** -0.8
JITTER_DEFAULT = 1e-8


class KernelError(LinAlgError):
    """Covariance factorization failed (ill-conditioned or indefinite)."""


@dataclass(frozen=True)
class KernelParams:
    kind: str = "se"
    beta: float = BETA_SE
    alpha: object = ALPHA_SE  # float for se; per-dimension sequence for periodic
    jitter: float = JITTER_DEFAULT * BETA_SE

    def __post_init__(self):
        if self.kind not in ("se", "periodic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if self.kind == "se" and a.size != 1:
            raise ValueError("se kernel takes a scalar alpha")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be finite and positive")
        if not (np.all(np.isfinite(a)) and np.all(a > 0)):
            raise ValueError("alpha must be finite and positive")
        if not (0.0 <= self.jitter <= 1e-4):
            raise ValueError("jitter must lie in [0, 1e-4]")

    @property
    def alphas(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.alpha, dtype=float))

    @classmethod
    def periodic(cls, alpha, beta: float = 1.0, jitter: float = JITTER_DEFAULT) -> "KernelParams":
        return cls("periodic", beta, tuple(np.atleast_1d(alpha).tolist()), jitter)


@dataclass(frozen=True)
class CovMatrices:
    K_NN: np.ndarray
    K_NM: np.ndarray
    K_MM: np.ndarray


def se_kernel(x, x2, p: KernelParams):
    if p.kind != "se":
        raise ValueError("se_kernel needs an se KernelParams")
    d = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return p.beta * np.exp(-0.5 * float(p.alpha) * d * d)


def periodic_kernel(x, x2, p: KernelParams):
    """beta * exp(-1/2 sum_k alpha_k sin^2(pi |x_k - x'_k|)) for K-vectors."""
    if p.kind != "periodic":
        raise ValueError("periodic_kernel needs a periodic KernelParams")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    a = p.alphas
    if x.shape[-1] != a.size or x2.shape[-1] != a.size:
        raise ValueError(f"dimension mismatch: inputs {x.shape[-1]}/{x2.shape[-1]}, alpha {a.size}")
    s = np.sin(np.pi * np.abs(x - x2))
    return p.beta * np.exp(-0.5 * np.sum(a * s * s, axis=-1))


def _as_rows(v, p: KernelParams) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if p.kind == "se":
        return v.reshape(-1)
    dim = p.alphas.size
    if v.ndim == 1:
        v = v.reshape(-1, 1) if dim == 1 else v.reshape(1, -1)
    if v.shape[1] != dim:
        raise ValueError(f"dimension mismatch: inputs have {v.shape[1]} columns, alpha {dim}")
    return v


def assemble_cov(a, b, p: KernelParams, *, add_jitter: bool | None = None) -> np.ndarray:
    """Cross-covariance matrix k(a_i, b_j).

    Jitter is added to the diagonal when ``b`` is ``a`` (identity or equal
    contents) unless ``add_jitter`` says otherwise.
    """
    A = _as_rows(a, p)
    B = _as_rows(b, p)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("kernel inputs must be finite")
    if p.kind == "se":
        d = A[:, None] - B[None, :]
        K = p.beta * np.exp(-0.5 * float(p.alpha) * d * d)
    else:
        s = np.sin(np.pi * np.abs(A[:, None, :] - B[None, :, :]))
        K = p.beta * np.exp(-0.5 * np.einsum("ijk,k->ij", s * s, p.alphas))
    if add_jitter is None:
        add_jitter = A.shape == B.shape and (a is b or np.array_equal(A, B))
    if add_jitter and p.jitter > 0:
        K = K + p.jitter * np.eye(K.shape[0])
    return K


def kernel_grad_x(a, b, p: KernelParams) -> np.ndarray:
    """d k(a_i, b_j) / d a_i for 1-D inputs (se or 1-D periodic)."""
    A = np.asarray(a, dtype=float).reshape(-1)
    B = np.asarray(b, dtype=float).reshape(-1)
    d = A[:, None] - B[None, :]
    if p.kind == "se":
        K = p.beta * np.exp(-0.5 * float(p.alpha) * d * d)
        return -float(p.alpha) * d * K
    a1 = p.alphas
    if a1.size != 1:
        raise ValueError("kernel_grad_x supports 1-D inputs only")
    s = np.sin(np.pi * d)
    K = p.beta * np.exp(-0.5 * a1[0] * s * s)
    # d/dd sin^2(pi|d|) = pi sin(2 pi d)
    return -0.5 * a1[0] * np.pi * np.sin(2 * np.pi * d) * K


def chol(K: np.ndarray, what: str = "K_MM"):
    try:
        return cho_factor(K, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise KernelError(
            f"Cholesky factorization of {what} failed; the matrix is not numerically "
            f"positive definite (increase jitter or spread the inducing inputs): {exc}"
        ) from exc


def nystrom_weights(z, alpha_u, p: KernelParams) -> np.ndarray:
    """w = (K_MM + jitter I)^{-1} alpha_u via Cholesky."""
    K_MM = assemble_cov(z, z, p, add_jitter=True)
    return cho_solve(chol(K_MM), np.asarray(alpha_u, dtype=float))


def nystrom_mean(phi, z, alpha_u, p: KernelParams, *, weights=None) -> np.ndarray:
    """K_NM K_MM^{-1} alpha_u evaluated at inputs ``phi``."""
    w = nystrom_weights(z, alpha_u, p) if weights is None else weights
    return assemble_cov(phi, z, p, add_jitter=False) @ w


def nystrom_mean_jacobian(phi, z, alpha_u, p: KernelParams, *, weights=None,
                          full: bool = False) -> np.ndarray:
    """d nystrom_mean_i / d phi_j.

    Only the diagonal is nonzero, so by default the length-N diagonal is
    returned; ``full=True`` gives the N x N matrix.
    """
    w = nystrom_weights(z, alpha_u, p) if weights is None else weights
    g = kernel_grad_x(phi, z, p) @ w
    return np.diag(g) if full else g
