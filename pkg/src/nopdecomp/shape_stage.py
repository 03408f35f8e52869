"""Shape estimation given amplitude/phase tracks.

Each shape is carried by pattern inducing points: fixed phase locations ``z``
on ``[0, L)`` (cycles) with a Gaussian ``q(u) = N(alpha_u, Sigma_u)`` over
the shape values there. Data phases (radians) are wrapped into one central
period ``[offset, offset + 1)`` with ``offset = (L - 1) / 2``; the rest of the
grid is padding so the SE interpolant behaves at the period seam.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp_kernels import (
    ALPHA_SE,
    BETA_SE,
    JITTER_DEFAULT,
    SIGMA_DEFAULT,
    KernelError,
    KernelParams,
    assemble_cov,
    chol,
    kernel_grad_x,
)
from .signal_model import TWO_PI

MAX_JOINT_M = 10**6


def uniform_grid(M: int, L: float = 2.0) -> np.ndarray:
    return np.arange(M) * (float(L) / M)


@dataclass
class PatternInducingPoints:
    z: np.ndarray
    alpha_u: np.ndarray
    sigma_u_diag: np.ndarray
    L: float = 2.0
    kernel: KernelParams = field(default_factory=KernelParams)
    sigma_u: np.ndarray | None = None  # full covariance, when available

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.alpha_u = np.asarray(self.alpha_u, dtype=float)
        self.sigma_u_diag = np.asarray(self.sigma_u_diag, dtype=float)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not (self.z.ndim == 1 and self.alpha_u.shape == self.z.shape
                and self.sigma_u_diag.shape == self.z.shape):
            raise ValueError("z, alpha_u and sigma_u_diag must be equal-length vectors")
        if np.any(np.diff(self.z) <= 0) or self.z[0] < 0 or self.z[-1] >= self.L:
            raise ValueError("z must be strictly increasing inside [0, L)")
        if not np.all(np.isfinite(self.sigma_u_diag)) or np.any(self.sigma_u_diag < 0):
            raise ValueError("sigma_u_diag must be finite and non-negative")
        if not np.all(np.isfinite(self.alpha_u)):
            raise ValueError("alpha_u must be finite")

    @property
    def M(self) -> int:
        return self.z.size

    @property
    def offset(self) -> float:
        return 0.5 * (self.L - 1.0)

    def inputs(self, phi) -> np.ndarray:
        """Kernel inputs for phases in radians."""
        return np.mod(np.asarray(phi, dtype=float) / TWO_PI, 1.0) + self.offset

    def image_inputs(self, x) -> np.ndarray:
        """One periodic image of each central-period input inside [0, L)."""
        x = np.asarray(x, dtype=float)
        up = x + 1.0
        return np.where(up < self.L, up, x - 1.0)

    @cached_property
    def _chol(self):
        return chol(assemble_cov(self.z, self.z, self.kernel, add_jitter=True))

    @cached_property
    def weights(self) -> np.ndarray:
        return cho_solve(self._chol, self.alpha_u)

    @cached_property
    def _band(self) -> int:
        """Half-width (in grid steps) of the SE kernel support, or 0 if not banded."""
        if self.kernel.kind != "se" or self.M < 16:
            return 0
        h = self.z[1] - self.z[0]
        if not np.allclose(np.diff(self.z), h, rtol=1e-10, atol=0):
            return 0
        # exp(-alpha r^2 / 2) < 1e-20 beyond r
        r = np.sqrt(2 * 46.0 / float(self.kernel.alpha))
        w = int(np.ceil(r / h)) + 1
        return w if 2 * w + 1 < self.M else 0

    def _eval(self, x, grad: bool):
        x = np.asarray(x, dtype=float).reshape(-1)
        w = self._band
        if not w:
            m = assemble_cov(x, self.z, self.kernel, add_jitter=False) @ self.weights
            if not grad:
                return m, None
            return m, kernel_grad_x(x, self.z, self.kernel) @ self.weights
        h = self.z[1] - self.z[0]
        # windows of the zero-padded weights, one row per nearest grid index
        j0 = np.clip(np.rint((x - self.z[0]) / h).astype(int), -w, self.M - 1 + w)
        d = (x - self.z[0] - j0 * h)[:, None] - self._offsets
        a = float(self.kernel.alpha)
        k = self.kernel.beta * np.exp(-0.5 * a * d * d)
        Wj = self._windows[j0 + w]
        m = np.einsum("ij,ij->i", k, Wj)
        return m, (None if not grad else -a * np.einsum("ij,ij,ij->i", d, k, Wj))

    @cached_property
    def _offsets(self) -> np.ndarray:
        w = self._band
        return np.arange(-w, w + 1) * (self.z[1] - self.z[0])

    @cached_property
    def _windows(self) -> np.ndarray:
        w = self._band
        wp = np.concatenate([np.zeros(2 * w), self.weights, np.zeros(2 * w)])
        return np.lib.stride_tricks.sliding_window_view(wp, 2 * w + 1)

    def mean_at_inputs(self, x) -> np.ndarray:
        return self._eval(x, False)[0]

    def mean(self, phi) -> np.ndarray:
        """Shape estimate at phases ``phi`` (radians)."""
        return self.mean_at_inputs(self.inputs(phi))

    def mean_and_grad(self, phi):
        """Shape estimate and its derivative with respect to phi (radians)."""
        m, g = self._eval(self.inputs(phi), True)
        return m, g / TWO_PI

    def shape_on_grid(self, n: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """(cycles in [0, 1), shape values) over one period."""
        c = np.arange(n) / n
        return c, self.mean(TWO_PI * c)

    def with_values(self, alpha_u, sigma_u_diag=None, sigma_u=None) -> "PatternInducingPoints":
        sd = self.sigma_u_diag if sigma_u_diag is None else sigma_u_diag
        return replace(self, alpha_u=np.asarray(alpha_u, dtype=float),
                       sigma_u_diag=np.asarray(sd, dtype=float), sigma_u=sigma_u)

    def copy(self) -> "PatternInducingPoints":
        return replace(self, z=self.z.copy(), alpha_u=self.alpha_u.copy(),
                       sigma_u_diag=self.sigma_u_diag.copy(),
                       sigma_u=None if self.sigma_u is None else self.sigma_u.copy())


def make_inducing(M: int = 64, L: float = 2.0, kernel: KernelParams | None = None,
                  values=None) -> PatternInducingPoints:
    """Uniform inducing grid, optionally filled from a 1-periodic function of cycles."""
    kernel = kernel or KernelParams()
    z = uniform_grid(M, L)
    alpha = np.zeros(M) if values is None else np.asarray(values(z), dtype=float)
    return PatternInducingPoints(z, alpha, np.ones(M), float(L), kernel)


def inducing_from_shape(shape, M: int = 64, L: float = 2.0,
                        kernel: KernelParams | None = None) -> PatternInducingPoints:
    """Inducing values sampled from a ShapeFunction (or any 1-periodic callable)."""
    ind = make_inducing(M, L, kernel)
    vals = np.asarray(shape(ind.z - ind.offset), dtype=float)
    return ind.with_values(vals, np.zeros(M))


# --------------------------------------------------------------------------
# posterior over inducing values

def _posterior_from_features(y, F, K_MM, sigma):
    """q(u) for y ~ N(F K_MM^{-1} u, sigma^2 I), u ~ N(0, K_MM).

    Solved in whitened coordinates u = L w (K_MM = L L^T): with
    G = F L^{-T} = U diag(s) V^T, the posterior of w is a ridge regression,
    mean V diag(s / (s^2 + sigma^2)) U^T y and covariance
    I - V diag(s^2 / (s^2 + sigma^2)) V^T. This equals the usual
    sigma^{-2} K_MM Sigma K_MN y / K_MM Sigma K_MM form without ever
    building K_MN K_NM, whose conditioning is the square of G's.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s2 = float(sigma) ** 2
    L = chol(K_MM)[0]
    L = np.tril(L)
    G = solve_triangular(L, F.T, lower=True).T
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    w = Vt.T @ ((s / (s * s + s2)) * (U.T @ np.asarray(y, dtype=float)))
    Sw = np.eye(G.shape[1]) - (Vt.T * (s * s / (s * s + s2))) @ Vt
    alpha = L @ w
    S = L @ Sw @ L.T
    S = 0.5 * (S + S.T)
    return alpha, S


def variational_posterior(y, phi, z, sigma: float = SIGMA_DEFAULT, p: KernelParams | None = None):
    """Optimal q(u) for fixed latent inputs.

    ``phi`` and ``z`` are kernel inputs: vectors for a 1-D kernel, or an
    N x K matrix against the joint M x K grid for the periodic kernel.
    Returns ``(alpha_u, Sigma_u)``.
    """
    p = p or KernelParams()
    K_MM = assemble_cov(z, z, p, add_jitter=True)
    K_NM = assemble_cov(phi, z, p, add_jitter=False)
    return _posterior_from_features(y, K_NM, K_MM, sigma)


def amplitude_weighted_posterior(y, phi, amp, z_list: Sequence, sigma: float = SIGMA_DEFAULT,
                                 p: KernelParams | Sequence[KernelParams] | None = None,
                                 joint: bool = False):
    """Per-component posteriors with rows of K_NM,k scaled by a_k(t_i).

    ``phi`` and ``amp`` are N x K (kernel inputs and amplitudes); ``z_list``
    holds one inducing-input vector per component. The components share one
    Gaussian likelihood, so the solve is joint over the stacked inducing
    values. Returns a list of ``(alpha_u_k, Sigma_u_k)``, or with ``joint``
    the stacked ``(alpha, Sigma, edges)`` including cross-covariances.
    """
    phi = np.asarray(phi, dtype=float)
    amp = np.asarray(amp, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if amp.ndim == 1:
        amp = amp[:, None]
    K = phi.shape[1]
    if amp.shape != phi.shape or len(z_list) != K:
        raise ValueError("phi, amp and z_list disagree on the number of components")
    params = list(p) if isinstance(p, (list, tuple)) else [p or KernelParams()] * K
    blocks, feats = [], []
    for k in range(K):
        K_MM = assemble_cov(z_list[k], z_list[k], params[k], add_jitter=True)
        K_NM = assemble_cov(phi[:, k], z_list[k], params[k], add_jitter=False)
        blocks.append(K_MM)
        feats.append(amp[:, k:k + 1] * K_NM)
    sizes = [b.shape[0] for b in blocks]
    K_blk = np.zeros((sum(sizes), sum(sizes)))
    edges = np.concatenate([[0], np.cumsum(sizes)])
    for k, b in enumerate(blocks):
        K_blk[edges[k]:edges[k + 1], edges[k]:edges[k + 1]] = b
    alpha, S = _posterior_from_features(y, np.hstack(feats), K_blk, sigma)
    if joint:
        return alpha, S, edges
    return [(alpha[edges[k]:edges[k + 1]], S[edges[k]:edges[k + 1], edges[k]:edges[k + 1]])
            for k in range(K)]


def elbo(y, phi, z, sigma: float = SIGMA_DEFAULT, p: KernelParams | None = None) -> float:
    """Collapsed variational lower bound on log p(y | phi).

    log N(y; 0, Q_NN + sigma^2 I) - Tr(K_NN - Q_NN) / (2 sigma^2), with
    Q_NN = K_NM K_MM^{-1} K_MN. Used for monitoring only.
    """
    p = p or KernelParams()
    y = np.asarray(y, dtype=float)
    N = y.size
    s2 = float(sigma) ** 2
    K_MM = assemble_cov(z, z, p, add_jitter=True)
    K_NM = assemble_cov(phi, z, p, add_jitter=False)
    L_mm = chol(K_MM)[0]
    V = solve_triangular(L_mm, K_NM.T, lower=True)  # M x N, Q_NN = V^T V
    B = np.eye(V.shape[0]) + (V @ V.T) / s2
    L_b = chol(0.5 * (B + B.T), "I + V V^T / sigma^2")[0]
    c = solve_triangular(L_b, V @ y, lower=True) / s2
    logdet = 2.0 * np.sum(np.log(np.diag(L_b))) + N * np.log(s2)
    quad = (y @ y) / s2 - c @ c
    kdiag = np.full(N, p.beta)
    trace = float(np.sum(kdiag) - np.sum(V * V))
    return float(-0.5 * (N * np.log(2 * np.pi) + logdet + quad) - 0.5 * trace / s2)


def exact_log_marginal(y, phi, sigma: float, p: KernelParams) -> float:
    """Dense log N(y; 0, K_NN + sigma^2 I); reference for small problems."""
    y = np.asarray(y, dtype=float)
    K = assemble_cov(phi, phi, p, add_jitter=False) + float(sigma) ** 2 * np.eye(y.size)
    L_k = chol(K, "K_NN + sigma^2 I")[0]
    a = solve_triangular(L_k, y, lower=True)
    return float(-0.5 * (y.size * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L_k))) + a @ a))


# --------------------------------------------------------------------------
# joint grid and ANOVA separation

@dataclass(frozen=True)
class JointGrid:
    Z: np.ndarray    # M x K
    tau: np.ndarray  # M x K integer indices into each z_k
    sizes: tuple

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def K(self) -> int:
        return self.Z.shape[1]


def build_joint_grid(z_list: Sequence) -> JointGrid:
    """Mixed-radix product grid; the last component varies fastest."""
    if len(z_list) < 1:
        raise ValueError("need at least one component grid")
    zs = [np.asarray(z, dtype=float).reshape(-1) for z in z_list]
    sizes = tuple(z.size for z in zs)
    M = int(np.prod(sizes, dtype=np.int64))
    if M > MAX_JOINT_M:
        raise ValueError(f"joint grid would have {M} rows (> {MAX_JOINT_M}); "
                         "use per-component posteriors instead")
    tau = np.indices(sizes).reshape(len(sizes), -1).T
    Z = np.column_stack([zs[k][tau[:, k]] for k in range(len(zs))])
    return JointGrid(Z, tau, sizes)


def anova_separate(alpha_u, sigma_u_diag, grid: JointGrid):
    """Main-effects split of a joint inducing vector.

    Returns ``(parts, grand_mean)`` where ``parts[k] = (alpha_k, var_k)``.
    ``sum_k alpha_k[tau(m, k)]`` is the least-squares additive fit of
    ``alpha_u``; the variances are those of the per-level means.
    """
    alpha_u = np.asarray(alpha_u, dtype=float)
    var = np.asarray(sigma_u_diag, dtype=float)
    if alpha_u.shape != (grid.M,) or var.shape != (grid.M,):
        raise ValueError(f"expected vectors of length {grid.M}")
    K = grid.K
    grand = float(alpha_u.mean())
    parts = []
    for k in range(K):
        Mk = grid.sizes[k]
        count = grid.M // Mk
        sums = np.bincount(grid.tau[:, k], weights=alpha_u, minlength=Mk)
        vsums = np.bincount(grid.tau[:, k], weights=var, minlength=Mk)
        a_k = sums / count - (K - 1) / K * grand
        parts.append((a_k, vsums / count**2))
    return parts, grand


def additive_reconstruction(parts, grid: JointGrid) -> np.ndarray:
    return sum(parts[k][0][grid.tau[:, k]] for k in range(grid.K))


# --------------------------------------------------------------------------
# stage-two driver

def _gauge_fix(ind: PatternInducingPoints, alpha, S):
    """Zero-mean, unit-L2 rescaling; returns (inducing, scale)."""
    trial = ind.with_values(alpha, np.clip(np.diag(S), 0, None), S)
    _, vals = trial.shape_on_grid(256)
    mean = float(vals.mean())
    alpha = alpha - mean
    vals = vals - mean
    scale = float(np.sqrt(np.mean(vals * vals)))
    if not scale > 0:
        return trial, 0.0
    S = S / scale**2
    return ind.with_values(alpha / scale, np.clip(np.diag(S), 0, None), S), scale


def _mean_functional(ind: PatternInducingPoints, n: int = 256) -> np.ndarray:
    """c with c @ alpha_u = period average of the Nystrom mean."""
    x = ind.inputs(TWO_PI * np.arange(n) / n)
    k = assemble_cov(x, ind.z, ind.kernel, add_jitter=False).mean(axis=0)
    return cho_solve(ind._chol, k)


def condition_zero_mean(alpha, S, edges, inducing):
    """Condition the joint Gaussian on every shape having zero period mean."""
    K = len(inducing)
    C = np.zeros((K, alpha.size))
    for k, ind in enumerate(inducing):
        C[k, edges[k]:edges[k + 1]] = _mean_functional(ind)
    SC = S @ C.T
    G = C @ SC
    G = 0.5 * (G + G.T) + 1e-14 * np.trace(G) / K * np.eye(K)
    gain = np.linalg.solve(G, SC.T).T
    alpha = alpha - gain @ (C @ alpha)
    S = S - gain @ SC.T
    return alpha, 0.5 * (S + S.T)


def update_shapes(y, phi, amp, inducing: Sequence[PatternInducingPoints],
                  sigma: float = SIGMA_DEFAULT, mode: str = "per_component",
                  use_images: bool = True, normalize: bool = True, zero_mean: bool = True):
    """One shape-stage update.

    ``phi`` (radians) and ``amp`` are N x K tracks. Returns
    ``(new_inducing, amp_scale, info)``; ``amp_scale[k]`` multiplies the
    amplitude track of component k when ``normalize`` pushed the shape scale
    into it.

    With ``zero_mean`` (per-component mode) the joint posterior is
    conditioned on zero-mean shapes before it is split. Removing the means
    afterwards instead would change the fit whenever the data cannot tell
    how a constant is shared between components.
    """
    y = np.asarray(y, dtype=float)
    phi = np.atleast_2d(np.asarray(phi, dtype=float).T).T
    amp = np.atleast_2d(np.asarray(amp, dtype=float).T).T
    K = phi.shape[1]
    info: dict = {}
    if mode == "per_component":
        X = np.column_stack([inducing[k].inputs(phi[:, k]) for k in range(K)])
        Y, A, s = y, amp, sigma
        if use_images and all(ind.L >= 2 for ind in inducing):
            Xi = np.column_stack([inducing[k].image_inputs(X[:, k]) for k in range(K)])
            X = np.vstack([X, Xi])
            Y = np.concatenate([y, y])
            A = np.vstack([amp, amp])
            s = sigma * np.sqrt(2.0)
        alpha, S, edges = amplitude_weighted_posterior(
            Y, X, A, [ind.z for ind in inducing], s, [ind.kernel for ind in inducing], joint=True)
        if zero_mean:
            alpha, S = condition_zero_mean(alpha, S, edges, inducing)
        post = [(alpha[edges[k]:edges[k + 1]], S[edges[k]:edges[k + 1], edges[k]:edges[k + 1]])
                for k in range(K)]
    elif mode == "joint":
        if not all(ind.kernel.kind == "periodic" for ind in inducing):
            raise ValueError("joint mode needs periodic-kernel inducing points")
        grid = build_joint_grid([ind.z for ind in inducing])
        alphas = np.concatenate([ind.kernel.alphas for ind in inducing])
        pj = KernelParams.periodic(alphas, inducing[0].kernel.beta, inducing[0].kernel.jitter)
        X = np.column_stack([inducing[k].inputs(phi[:, k]) for k in range(K)])
        # amplitudes are taken as constant here; scale the data by their mean
        abar = np.mean(amp, axis=0)
        a_u, S_u = variational_posterior(y / max(float(abar.mean()), 1e-12), X, grid.Z, sigma, pj)
        parts, grand = anova_separate(a_u, np.diag(S_u), grid)
        info["grand_mean"] = grand
        post = [(a - a.mean(), np.diag(v)) for a, v in parts]
    else:
        raise ValueError(f"unknown shape-stage mode {mode!r}")

    new, scales = [], np.ones(K)
    for k in range(K):
        alpha, S = post[k]
        if normalize:
            ind_k, scale = _gauge_fix(inducing[k], alpha, S)
            scales[k] = scale
        else:
            ind_k = inducing[k].with_values(alpha, np.clip(np.diag(S), 0, None), S)
        new.append(ind_k)
    return new, scales, info


# --------------------------------------------------------------------------
# CSV IO

def write_inducing_csv(path, ind: PatternInducingPoints) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z", "alpha_u", "var_u"])
        for z, a, v in zip(ind.z, ind.alpha_u, ind.sigma_u_diag):
            w.writerow([f"{z:.17g}", f"{a:.17g}", f"{v:.17g}"])


def read_inducing_csv(path, L: float = 2.0, kernel: KernelParams | None = None
                      ) -> PatternInducingPoints:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["z", "alpha_u", "var_u"]:
            raise ValueError(f"{path}: expected header 'z,alpha_u,var_u', got {header!r}")
        arr = np.asarray([[float(v) for v in r] for r in reader if r], dtype=float)
    return PatternInducingPoints(arr[:, 0], arr[:, 1], arr[:, 2], L, kernel or KernelParams())


__all__ = [
    "ALPHA_SE", "BETA_SE", "JITTER_DEFAULT", "KernelError", "PatternInducingPoints", "JointGrid",
    "uniform_grid", "make_inducing", "inducing_from_shape", "variational_posterior",
    "amplitude_weighted_posterior", "elbo", "exact_log_marginal", "build_joint_grid",
    "anova_separate", "additive_reconstruction", "update_shapes", "write_inducing_csv",
    "read_inducing_csv",
]
