"""Amplitude and phase estimation given shapes.

The record is cut into overlapping patches. On each patch the amplitude and
phase of every component are low-degree polynomials in centered time, fitted
by least squares against the current shape estimates with Adam. Patch
solutions are then stitched into global tracks.

Inside :func:`fit_patch` the amplitude coefficients enter the residual
linearly, so for a given set of phase coefficients they are obtained by a
linear least-squares solve and Adam only moves the phase coefficients
(variable projection). The gradient of the projected objective equals the
partial gradient in C at the optimal B.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .gp_kernels import KernelParams
from .shape_stage import PatternInducingPoints
from .signal_model import TWO_PI, SampledSignal
from .smoothing import moving_average, robust_smooth


class PatchFitError(RuntimeError):
    """Every restart of a patch fit diverged; ``state`` is the last finite fit."""

    def __init__(self, msg: str, state: "PatchFit | None" = None):
        super().__init__(msg)
        self.state = state


class AssociationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchPolicy:
    periods_per_patch: float = 5.0
    overlap_fraction: float = 0.5
    min_length: int = 8

    def __post_init__(self):
        if not self.periods_per_patch > 0:
            raise ValueError("periods_per_patch must be positive")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.min_length < 2:
            raise ValueError("min_length must be >= 2")


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 2000
    grad_tol: float = 1e-8
    restarts: int = 4
    seed: int = 0
    jitter: float = 0.05      # std of the multiplicative jitter on C's linear term
    patience: int = 100       # steps without 1% improvement before halving the step
    scan: int = 8             # phase-constant grid per component before Adam; 0 disables

    def __post_init__(self):
        if not (self.step_size > 0 and self.max_steps > 0 and self.grad_tol > 0):
            raise ValueError("step_size, max_steps and grad_tol must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.restarts < 1 or self.patience < 1 or self.jitter < 0 or self.scan < 0:
            raise ValueError("restarts and patience must be >= 1; jitter, scan >= 0")


@dataclass(frozen=True)
class Patch:
    index_range: tuple
    times: np.ndarray
    values: np.ndarray
    t_center: float
    index: int = 0

    @property
    def start(self) -> int:
        return self.index_range[0]

    @property
    def end(self) -> int:
        return self.index_range[1]

    @property
    def n(self) -> int:
        return self.end - self.start

    @property
    def tau(self) -> np.ndarray:
        return self.times - self.t_center


@dataclass
class PatchFit:
    """Polynomial coefficients (lowest order first, in centered time).

    ``B`` is ``(amp_degree + 1) x K``, ``C`` is ``(d + 1) x K``.
    """

    B: np.ndarray
    C: np.ndarray
    d: int
    residual: float = np.inf
    converged: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.d not in (0, 1, 2):
            raise ValueError("d must be 0, 1 or 2")
        if self.C.shape[0] != self.d + 1:
            raise ValueError(f"C must have d + 1 = {self.d + 1} rows")
        if self.B.shape[1] != self.C.shape[1]:
            raise ValueError("B and C disagree on K")

    @property
    def K(self) -> int:
        return self.C.shape[1]

    @property
    def amp_degree(self) -> int:
        return self.B.shape[0] - 1

    def phase(self, tau) -> np.ndarray:
        return _vander(tau, self.d) @ self.C

    def amp(self, tau) -> np.ndarray:
        return _vander(tau, self.amp_degree) @ self.B

    def phase_rate(self, tau) -> np.ndarray:
        """d phi / dt in rad per time unit."""
        tau = np.asarray(tau, dtype=float)
        out = np.zeros((tau.size, self.K))
        for j in range(1, self.d + 1):
            out += j * np.outer(tau ** (j - 1), self.C[j])
        return out

    def frequency_positive(self, tau) -> bool:
        return bool(np.all(self.phase_rate(tau) > 0))


@dataclass
class StageOneResult:
    phi: np.ndarray
    amp: np.ndarray
    phi_var: np.ndarray
    amp_var: np.ndarray

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float).T).T
        shape = self.phi.shape
        for name in ("amp", "phi_var", "amp_var"):
            v = np.atleast_2d(np.asarray(getattr(self, name), dtype=float).T).T
            if v.shape != shape:
                raise ValueError(f"{name} has shape {v.shape}, expected {shape}")
            setattr(self, name, v)
        if np.any(np.diff(self.phi, axis=0) < 0):
            raise ValueError("phase tracks must be non-decreasing")
        if np.any(self.amp < 0) or np.any(self.phi_var < 0) or np.any(self.amp_var < 0):
            raise ValueError("amplitudes and variances must be non-negative")

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def inst_freq(self, times) -> np.ndarray:
        """Instantaneous frequency in cycles per time unit."""
        t = np.asarray(times, dtype=float)
        if t.size < 2:
            return np.zeros_like(self.phi)
        return np.gradient(self.phi, t, axis=0, edge_order=2) / TWO_PI

    @classmethod
    def from_tracks(cls, phi, amp) -> "StageOneResult":
        phi = np.atleast_2d(np.asarray(phi, dtype=float).T).T
        amp = np.atleast_2d(np.asarray(amp, dtype=float).T).T
        z = np.zeros_like(phi)
        return cls(phi, amp, z, z.copy())


def _vander(tau, deg: int) -> np.ndarray:
    return np.vander(np.asarray(tau, dtype=float).reshape(-1), deg + 1, increasing=True)


# --------------------------------------------------------------------------
# patches

def make_patches(signal: SampledSignal, freq_hint, policy: PatchPolicy | None = None) -> list[Patch]:
    """Overlapping patches of about ``periods_per_patch`` periods of the slowest component."""
    policy = policy or PatchPolicy()
    hint = np.atleast_1d(np.asarray(freq_hint, dtype=float))
    if hint.size == 0 or not np.all(hint > 0):
        raise ValueError("freq_hint must be positive")
    N = signal.n
    t = signal.times
    fs = (N - 1) / (t[-1] - t[0]) if N > 1 else 1.0
    length = int(round(policy.periods_per_patch / float(hint.min()) * fs))
    length = int(np.clip(length, min(policy.min_length, N), N))
    step = max(1, int(round(length * (1.0 - policy.overlap_fraction))))
    starts = list(range(0, max(N - length, 0) + 1, step))
    if starts[-1] + length < N:
        starts.append(N - length)
    out = []
    for i, s in enumerate(starts):
        e = s + length
        tt = t[s:e]
        out.append(Patch((s, e), tt, signal.values[s:e], 0.5 * (tt[0] + tt[-1]), i))
    return out


# --------------------------------------------------------------------------
# objective

def _shapes(inducing, phi):
    ms, gs = [], []
    for k, ind in enumerate(inducing):
        m, g = ind.mean_and_grad(phi[:, k])
        ms.append(m)
        gs.append(g)
    return np.column_stack(ms), np.column_stack(gs)


def patch_objective(patch: Patch, B, C, inducing: Sequence[PatternInducingPoints],
                    p: KernelParams | None = None):
    """Squared residual of the patch model and its gradients in B and C.

    ``p``, when given, overrides the kernel stored in every inducing set.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if p is not None:
        inducing = [replace(ind, kernel=p) for ind in inducing]
    tau = patch.tau
    Pa = _vander(tau, B.shape[0] - 1)
    Pc = _vander(tau, C.shape[0] - 1)
    phi = Pc @ C
    amp = Pa @ B
    m, dm = _shapes(inducing, phi)
    r = patch.values - np.sum(amp * m, axis=1)
    gB = -2.0 * Pa.T @ (r[:, None] * m)
    gC = -2.0 * Pc.T @ (r[:, None] * amp * dm)
    return float(r @ r), gB, gC


# --------------------------------------------------------------------------
# optimizer

class _Projected:
    """Objective in scaled phase coefficients with B profiled out."""

    def __init__(self, patch: Patch, inducing, d: int, da: int):
        self.y = np.asarray(patch.values, dtype=float)
        tau = patch.tau
        self.hw = float(np.max(np.abs(tau))) or 1.0
        s = tau / self.hw
        self.Pc = _vander(s, d)
        self.Pa = _vander(s, da)
        self.inducing = inducing
        self.K = len(inducing)
        self.da = da
        # C_scaled[j] = C[j] * hw**j
        self.cs = self.hw ** np.arange(d + 1)
        self.as_ = self.hw ** np.arange(da + 1)

    def to_scaled(self, C):
        return C * self.cs[:, None]

    def from_scaled(self, Cs):
        return Cs / self.cs[:, None]

    def solve_B(self, m):
        G = np.hstack([self.Pa * m[:, k:k + 1] for k in range(self.K)])
        b, *_ = np.linalg.lstsq(G, self.y, rcond=None)
        return b.reshape(self.K, self.da + 1).T, G @ b

    def __call__(self, Cs):
        phi = self.Pc @ Cs
        m, dm = _shapes(self.inducing, phi)
        Bs, fit = self.solve_B(m)
        r = self.y - fit
        amp = self.Pa @ Bs
        g = -2.0 * self.Pc.T @ (r[:, None] * amp * dm)
        return float(r @ r), g, Bs

    def B_unscaled(self, Bs):
        return Bs / self.as_[:, None]


def _scan_constants(obj: _Projected, Cs, n: int, sweeps: int = 2):
    """Coordinate-wise grid search over the phase constants."""
    best, _, _ = obj(Cs)
    if n <= 1:
        return Cs, best
    shifts = TWO_PI * np.arange(1, n) / n
    for _ in range(sweeps):
        for k in range(obj.K):
            base = Cs[0, k]
            for s in shifts:
                trial = Cs.copy()
                trial[0, k] = base + s
                v, _, _ = obj(trial)
                if v < best * (1 - 1e-9):
                    best, Cs = v, trial
    return Cs, best


def _adam(obj: _Projected, Cs, opt: OptimizerConfig):
    """Adam with halving of the step on plateaus; returns the best iterate."""
    m = np.zeros_like(Cs)
    v = np.zeros_like(Cs)
    lr = opt.step_size
    f, g, Bs = obj(Cs)
    if not np.isfinite(f):
        return None
    best = (f, Cs.copy(), Bs)
    history = [f]
    last_gain, ref = 0, f
    converged = bool(np.max(np.abs(g)) < opt.grad_tol)
    step = 0
    while not converged and step < opt.max_steps:
        step += 1
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        mh = m / (1 - opt.beta1 ** step)
        vh = v / (1 - opt.beta2 ** step)
        Cs = Cs - lr * mh / (np.sqrt(vh) + 1e-300 + 1e-12 * np.sqrt(np.max(vh)))
        f, g, Bs = obj(Cs)
        if not np.isfinite(f):
            break
        if f < best[0]:
            best = (f, Cs.copy(), Bs)
        history.append(best[0])
        if best[0] < 0.99 * ref:
            ref, last_gain = best[0], step
        elif step - last_gain >= opt.patience:
            lr *= 0.5
            last_gain, ref = step, best[0]
            # restart the moments from the best point
            Cs = best[1].copy()
            f, g, Bs = obj(Cs)
            m[:] = 0.0
            v[:] = 0.0
            if lr < opt.step_size * 1e-7:
                break
        if np.max(np.abs(g)) < opt.grad_tol or best[0] == 0.0:
            converged = True
    return best, history, converged


def fit_patch(patch: Patch, init: PatchFit, inducing: Sequence[PatternInducingPoints],
              p: KernelParams | None = None, opt: OptimizerConfig | None = None) -> PatchFit:
    """Best least-squares patch fit over ``opt.restarts`` starts.

    Restart 0 starts from ``init``; later restarts jitter the linear phase
    coefficient multiplicatively. Fits whose phase rate is not positive on the
    patch are rejected; if all are rejected ``init`` is returned unconverged.
    """
    opt = opt or OptimizerConfig()
    if p is not None:
        inducing = [replace(ind, kernel=p) for ind in inducing]
    if init.K != len(inducing):
        raise ValueError("init and inducing disagree on K")
    if not init.frequency_positive(patch.tau):
        raise ValueError("init violates frequency positivity on the patch")
    v0, gB0, gC0 = patch_objective(patch, init.B, init.C, inducing)
    if max(np.max(np.abs(gB0)), np.max(np.abs(gC0))) < opt.grad_tol:
        return replace(init, residual=v0, converged=True, history=[v0])

    obj = _Projected(patch, inducing, init.d, init.amp_degree)
    Cs0 = obj.to_scaled(init.C)
    if opt.scan:
        Cs0, _ = _scan_constants(obj, Cs0, opt.scan)

    best_fit = None
    n_diverged = 0
    for r in range(opt.restarts):
        Cs = Cs0.copy()
        if r > 0 and init.d >= 1:
            rng = np.random.default_rng([opt.seed, patch.index, r])
            Cs[1] *= 1.0 + opt.jitter * rng.standard_normal(init.K)
        out = _adam(obj, Cs, opt)
        if out is None:
            n_diverged += 1
            continue
        (f, Cb, Bs), history, conv = out
        fit = PatchFit(obj.B_unscaled(Bs), obj.from_scaled(Cb), init.d, f, conv, history)
        if not fit.frequency_positive(patch.tau):
            continue
        if best_fit is None or f < best_fit.residual:
            best_fit = fit
    if n_diverged == opt.restarts:
        raise PatchFitError(f"all {opt.restarts} restarts diverged on patch {patch.index}", init)
    if best_fit is None:
        return replace(init, residual=v0, converged=False, history=[v0])
    if best_fit.residual > v0:
        return replace(init, residual=v0, converged=False, history=best_fit.history)
    return best_fit


def init_fit(patch: Patch, tracks: StageOneResult, d: int, amp_degree: int) -> PatchFit:
    """Polynomial fit of existing tracks on a patch (the warm start for fit_patch)."""
    sl = slice(patch.start, patch.end)
    tau = patch.tau
    hw = float(np.max(np.abs(tau))) or 1.0
    s = tau / hw
    phi = tracks.phi[sl]
    amp = tracks.amp[sl]
    dd = min(d, max(tau.size - 1, 0))
    C = np.zeros((d + 1, tracks.K))
    Cf = np.polynomial.polynomial.polyfit(s, phi, dd) if tau.size > 1 else phi[:1]
    C[:dd + 1] = np.atleast_2d(Cf)
    da = min(amp_degree, max(tau.size - 1, 0))
    B = np.zeros((amp_degree + 1, tracks.K))
    Bf = np.polynomial.polynomial.polyfit(s, amp, da) if tau.size > 1 else amp[:1]
    B[:da + 1] = np.atleast_2d(Bf)
    sc = hw ** np.arange(d + 1)
    fit = PatchFit(B / (hw ** np.arange(amp_degree + 1))[:, None], C / sc[:, None], d)
    if not fit.frequency_positive(tau) and d >= 1:
        # fall back to the mean rate, which is positive for non-decreasing tracks
        rate = np.maximum((phi[-1] - phi[0]) / max(tau[-1] - tau[0], 1e-300), 1e-9)
        C = np.zeros((d + 1, tracks.K))
        C[0] = phi.mean(axis=0)
        C[1] = rate
        fit = PatchFit(fit.B, C, d)
    return fit


# --------------------------------------------------------------------------
# stitching

def _associate(prev_f, new_f) -> tuple:
    K = prev_f.size
    costs = []
    for perm in itertools.permutations(range(K)):
        # squared distance: the L1 cost ties whenever one pair nests inside the other
        costs.append((float(np.sum((prev_f - new_f[list(perm)]) ** 2)), perm))
    costs.sort(key=lambda c: c[0])
    if K > 1 and costs[1][0] - costs[0][0] <= 1e-12 * max(1.0, costs[0][0]) \
            and costs[1][1] != costs[0][1]:
        raise AssociationError("component association ambiguous")
    return costs[0][1]


def _taper(n: int) -> np.ndarray:
    return np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2


def stitch_global(fits: Sequence[PatchFit], patches: Sequence[Patch], signal: SampledSignal,
                  smooth: bool = True) -> StageOneResult:
    """Global tracks from patch fits.

    Components are matched across patches by mean frequency over the overlap,
    phase constants are aligned by multiples of 2 pi, overlaps are blended
    with raised-cosine weights and the result is smoothed.
    """
    if len(fits) != len(patches) or not fits:
        raise ValueError("need one fit per patch")
    N = signal.n
    covered = np.zeros(N, bool)
    for pt in patches:
        covered[pt.start:pt.end] = True
    if not covered.all():
        raise ValueError("patches do not cover the record")
    K = fits[0].K
    phis, amps = [], []
    prev = None
    for pt, fit in zip(patches, fits):
        tau = pt.tau
        ph = fit.phase(tau)
        am = fit.amp(tau)
        rate = fit.phase_rate(tau)
        if prev is not None and K > 1:
            ps, pph, prate = prev
            lo, hi = max(ps.start, pt.start), min(ps.end, pt.end)
            if hi > lo:
                f_prev = prate[lo - ps.start:hi - ps.start].mean(axis=0)
                f_new = rate[lo - pt.start:hi - pt.start].mean(axis=0)
            else:
                f_prev, f_new = prate.mean(axis=0), rate.mean(axis=0)
            perm = list(_associate(f_prev, f_new))
            ph, am, rate = ph[:, perm], am[:, perm], rate[:, perm]
        # amp >= 0 by convention: -s(x) = s(x + 1/2) holds for half-wave
        # symmetric shapes, and the shape stage absorbs the shift otherwise
        neg = am.mean(axis=0) < 0
        am[:, neg] = -am[:, neg]
        ph[:, neg] += np.pi
        if prev is not None:
            ps, pph, _ = prev
            lo, hi = max(ps.start, pt.start), min(ps.end, pt.end)
            if hi > lo:
                diff = np.mean(pph[lo - ps.start:hi - ps.start] - ph[lo - pt.start:hi - pt.start], axis=0)
            else:
                # no overlap: extrapolate the previous patch linearly to our first sample
                slope = (pph[-1] - pph[-2]) / (ps.times[-1] - ps.times[-2]) if ps.n > 1 else 0.0
                diff = pph[-1] + slope * (pt.times[0] - ps.times[-1]) - ph[0]
            ph = ph + TWO_PI * np.round(diff / TWO_PI)
        phis.append(ph)
        amps.append(am)
        prev = (pt, ph, rate)

    num_p = np.zeros((N, K))
    num_a = np.zeros((N, K))
    den = np.zeros(N)
    for pt, ph, am in zip(patches, phis, amps):
        w = _taper(pt.n)
        num_p[pt.start:pt.end] += w[:, None] * ph
        num_a[pt.start:pt.end] += w[:, None] * am
        den[pt.start:pt.end] += w
    phi_raw = num_p / den[:, None]
    amp_raw = num_a / den[:, None]

    if smooth and len(patches) > 1:
        phi_s = np.column_stack([robust_smooth(phi_raw[:, k])[0] for k in range(K)])
        amp_s = np.column_stack([robust_smooth(amp_raw[:, k])[0] for k in range(K)])
    else:
        phi_s, amp_s = phi_raw.copy(), amp_raw.copy()
    win = patches[0].n
    phi_var = np.column_stack([moving_average((phi_raw[:, k] - phi_s[:, k]) ** 2, win) for k in range(K)])
    amp_var = np.column_stack([moving_average((amp_raw[:, k] - amp_s[:, k]) ** 2, win) for k in range(K)])
    phi_s = np.maximum.accumulate(phi_s, axis=0)
    amp_s = np.clip(amp_s, 0.0, None)
    return StageOneResult(phi_s, amp_s, phi_var, amp_var)


def run_stage_one(signal: SampledSignal, tracks: StageOneResult,
                  inducing: Sequence[PatternInducingPoints], patches: Sequence[Patch],
                  d: int = 1, amp_degree: int | None = None, opt: OptimizerConfig | None = None,
                  smooth: bool = True):
    """Fit every patch from the current tracks and stitch. Returns ``(result, fits)``."""
    amp_degree = d if amp_degree is None else amp_degree
    fits = []
    for pt in patches:
        init = init_fit(pt, tracks, d, amp_degree)
        fits.append(fit_patch(pt, init, inducing, None, opt))
    return stitch_global(fits, patches, signal, smooth), fits


__all__ = [
    "PatchFitError", "AssociationError", "PatchPolicy", "OptimizerConfig", "Patch", "PatchFit",
    "StageOneResult", "make_patches", "patch_objective", "fit_patch", "init_fit",
    "stitch_global", "run_stage_one",
]
