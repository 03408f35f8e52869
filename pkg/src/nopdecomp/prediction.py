"""Posterior prediction of latent tracks and of the signal at new times.

Each fitted track (phase or amplitude of one component) gets a Gaussian
process prior over time: an SE kernel whose lengthscale is a few sample
intervals and whose variance is the empirical variance of the track after
removing a linear trend. Predictions use the standard GP conditional; the
signal is then formed by plugging the predicted tracks into the fitted
shapes, with the shape uncertainty of the inducing values propagated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .gp_kernels import KernelError, assemble_cov
from .driver import NopResult


@dataclass(frozen=True)
class TimeKernel:
    lengthscale_samples: float = 5.0
    noise_floor: float = 1e-6     # relative to the track variance
    var_floor: float = 1e-12

    def __post_init__(self):
        if not (self.lengthscale_samples > 0 and self.noise_floor >= 0 and self.var_floor > 0):
            raise ValueError("invalid time-kernel parameters")


@dataclass
class PredictiveGaussian:
    mean: np.ndarray
    covariance: np.ndarray
    extrapolated: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance must be d x d")

    @property
    def var(self) -> np.ndarray:
        return np.clip(np.diag(self.covariance), 0.0, None)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def _se_time(a, b, var, ell):
    d = np.asarray(a, dtype=float)[:, None] - np.asarray(b, dtype=float)[None, :]
    return var * np.exp(-0.5 * (d / ell) ** 2)


def _chol_escalate(A, what: str, decades: int = 3):
    scale = max(float(np.mean(np.abs(np.diag(A)))), 1e-300)
    for j in [0.0] + [scale * 1e-12 * 10 ** i for i in range(decades + 1)]:
        try:
            return cho_factor(A + j * np.eye(A.shape[0]), lower=True)
        except LinAlgError:
            continue
    raise KernelError(f"factorization of {what} failed after jitter escalation")


def gp_track(t0, times, y, tk: TimeKernel | None = None) -> PredictiveGaussian:
    """GP regression of one track on time (linear trend as a fixed mean)."""
    tk = tk or TimeKernel()
    t = np.asarray(times, dtype=float)
    t0 = np.asarray(t0, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float)
    coef = np.polyfit(t, y, 1) if t.size > 1 else np.array([0.0, y.mean()])
    r = y - np.polyval(coef, t)
    var = max(float(np.var(r)), tk.var_floor)
    dt = float(np.median(np.diff(t))) if t.size > 1 else 1.0
    ell = tk.lengthscale_samples * dt
    K = _se_time(t, t, var, ell) + tk.noise_floor * var * np.eye(t.size)
    cf = _chol_escalate(K, "K_NN")
    Kd = _se_time(t0, t, var, ell)
    mean = np.polyval(coef, t0) + Kd @ cho_solve(cf, r)
    cov = _se_time(t0, t0, var, ell) - Kd @ cho_solve(cf, Kd.T)
    cov = 0.5 * (cov + cov.T)
    ext = (t0 < t[0] - dt) | (t0 > t[-1] + dt)
    return PredictiveGaussian(mean, cov, ext)


def predict_latents(t0, result: NopResult, times, tk: TimeKernel | None = None):
    """Per-component predictive Gaussians for phase and amplitude."""
    tr = result.tracks
    phi0 = [gp_track(t0, times, tr.phi[:, k], tk) for k in range(tr.K)]
    a0 = [gp_track(t0, times, tr.amp[:, k], tk) for k in range(tr.K)]
    return phi0, a0


def _shape_moments(ind, phi):
    """Shape mean at phases and its covariance, with q(u) propagated."""
    x = ind.inputs(phi)
    K_dM = assemble_cov(x, ind.z, ind.kernel, add_jitter=False)
    K_dd = assemble_cov(x, x, ind.kernel, add_jitter=False)
    W = cho_solve(ind._chol, K_dM.T)                   # K_MM^{-1} K_Md
    S = ind.sigma_u if ind.sigma_u is not None else np.diag(ind.sigma_u_diag)
    mean = K_dM @ ind.weights
    cov = K_dd - K_dM @ W + W.T @ S @ W
    return mean, 0.5 * (cov + cov.T)


def predict_signal(t0, result: NopResult, times, tk: TimeKernel | None = None,
                   mode: str = "plugin", n_phase_samples: int = 64, seed: int = 0,
                   include_noise: bool = False) -> PredictiveGaussian:
    """Predictive signal distribution at ``t0``.

    ``mode="plugin"`` evaluates the shapes at the predicted mean phases;
    ``mode="sample"`` averages over draws of the phases (law of total
    covariance).
    """
    phi0, a0 = predict_latents(t0, result, times, tk)
    d = phi0[0].mean.size if phi0 else 0
    mean = np.zeros(d)
    cov = np.zeros((d, d))
    for k, ind in enumerate(result.inducing):
        a = a0[k].mean
        if mode == "plugin":
            m, C = _shape_moments(ind, phi0[k].mean)
            mean += a * m
            cov += np.outer(a, a) * C
        elif mode == "sample":
            draws = sample_gaussian(phi0[k], n_phase_samples, seed + k)
            ms, Cs = zip(*(_shape_moments(ind, ph) for ph in draws))
            ms = np.array(ms)
            mk = ms.mean(axis=0)
            Ck = np.mean(Cs, axis=0) + np.cov(ms.T, bias=True).reshape(d, d)
            mean += a * mk
            cov += np.outer(a, a) * Ck
        else:
            raise ValueError(f"unknown mode {mode!r}")
    if include_noise:
        cov = cov + result.sigma ** 2 * np.eye(d)
    ext = phi0[0].extrapolated if phi0 else None
    return PredictiveGaussian(mean, 0.5 * (cov + cov.T), ext)


def sample_gaussian(pg: PredictiveGaussian, count: int, seed: int = 0) -> np.ndarray:
    d = pg.mean.size
    if count == 0:
        return np.zeros((0, d))
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    if not np.any(pg.covariance):
        return np.repeat(pg.mean[None, :], count, axis=0)
    Lc = np.tril(_chol_escalate(pg.covariance, "predictive covariance")[0])
    return pg.mean + rng.standard_normal((count, d)) @ Lc.T


def sample_signal(t0, result: NopResult, times, count: int, seed: int = 0,
                  tk: TimeKernel | None = None) -> np.ndarray:
    """``count`` draws of the signal at ``t0`` (count x d)."""
    return sample_gaussian(predict_signal(t0, result, times, tk), count, seed)


def write_prediction_csv(path, t0, pg: PredictiveGaussian) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t0", "mean", "var"])
        for t, m, v in zip(np.asarray(t0).reshape(-1), pg.mean, pg.var):
            w.writerow([f"{t:.12g}", f"{m:.12g}", f"{v:.12g}"])


def write_latents_csv(path, t0, phi0, a0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["t0"]
        for k in range(1, len(phi0) + 1):
            head += [f"phi_{k}_mean", f"phi_{k}_var", f"amp_{k}_mean", f"amp_{k}_var"]
        w.writerow(head)
        for i, t in enumerate(np.asarray(t0).reshape(-1)):
            row = [f"{t:.12g}"]
            for p, a in zip(phi0, a0):
                row += [f"{p.mean[i]:.12g}", f"{p.var[i]:.12g}", f"{a.mean[i]:.12g}", f"{a.var[i]:.12g}"]
            w.writerow(row)


__all__ = [
    "TimeKernel", "PredictiveGaussian", "gp_track", "predict_latents", "predict_signal",
    "sample_gaussian", "sample_signal", "write_prediction_csv", "write_latents_csv",
]
