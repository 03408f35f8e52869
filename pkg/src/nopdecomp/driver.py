"""The alternating two-stage NOP loop, initializers and result bundles."""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import hilbert

from .baselines import EstimatorError, integrate_ridge, periodogram_peaks, stft_ridges
from .gp_kernels import SIGMA_DEFAULT, KernelParams
from .phase_amplitude import (
    OptimizerConfig,
    PatchPolicy,
    StageOneResult,
    make_patches,
    run_stage_one,
)
from .shape_stage import (
    PatternInducingPoints,
    make_inducing,
    read_inducing_csv,
    update_shapes,
    write_inducing_csv,
)
from .signal_model import TWO_PI, SampledSignal
from .smoothing import moving_average

log = logging.getLogger(__name__)

SHAPES_FIRST = 1
PHASES_FIRST = 0


class NopError(RuntimeError):
    """A stage failed; ``state`` is the last consistent NopState."""

    def __init__(self, msg: str, state: "NopState"):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class NopConfig:
    K: int
    J: int = 20
    eps: float = 1e-4
    h: int = PHASES_FIRST
    d: int = 1
    amp_degree: int | None = None   # None: same as d
    patch: PatchPolicy = field(default_factory=PatchPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    kernel: KernelParams = field(default_factory=KernelParams)
    sigma: float = SIGMA_DEFAULT
    M: int = 64
    L: float = 2.0
    seed: int = 0
    shape_mode: str = "per_component"
    smooth: bool = True

    def __post_init__(self):
        if self.K < 1 or self.J < 1:
            raise ValueError("K and J must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.h not in (0, 1):
            raise ValueError("h must be 0 (phases first) or 1 (shapes first)")
        if self.d not in (0, 1, 2) or (self.amp_degree is not None and self.amp_degree not in (0, 1, 2)):
            raise ValueError("polynomial degrees must be 0, 1 or 2")
        if not self.sigma > 0 or self.M < 2 or self.L < 1:
            raise ValueError("need sigma > 0, M >= 2, L >= 1")

    @property
    def amp_deg(self) -> int:
        return self.d if self.amp_degree is None else self.amp_degree


@dataclass
class NopInit:
    """Starting point: tracks are always needed to seed the patch fits; shapes
    default to a sine on every component when absent."""

    tracks: StageOneResult
    inducing: list | None = None


@dataclass
class NopState:
    j: int
    eps0: float
    eps1: float
    eps2: float
    tracks: StageOneResult
    inducing: list
    history: list = field(default_factory=list)


@dataclass
class NopResult:
    tracks: StageOneResult
    inducing: list
    converged: bool
    iterations_used: int
    history: list
    sigma: float = SIGMA_DEFAULT

    @property
    def K(self) -> int:
        return self.tracks.K

    def components(self) -> np.ndarray:
        """N x K reconstructed components a_k s_k(phi_k)."""
        return np.column_stack([self.tracks.amp[:, k] * self.inducing[k].mean(self.tracks.phi[:, k])
                                for k in range(self.K)])

    def reconstruction(self) -> np.ndarray:
        return self.components().sum(axis=1)

    def inst_freq(self, times) -> np.ndarray:
        return self.tracks.inst_freq(times)


# --------------------------------------------------------------------------
# initialization

def init_sine(z_list: Sequence, L: float = 2.0, kernel: KernelParams | None = None
              ) -> list[PatternInducingPoints]:
    """alpha_u = sin(2 pi z) scaled to unit RMS over the grid; prior variances 1."""
    out = []
    for z in z_list:
        z = np.asarray(z, dtype=float)
        v = np.sin(TWO_PI * z)
        v = v / np.sqrt(np.mean(v * v))
        out.append(PatternInducingPoints(z, v, np.ones(z.size), float(L), kernel or KernelParams()))
    return out


def split_frequencies(f_mean, K: int, rel: float = 0.02) -> np.ndarray:
    """Deterministic symmetric offsets around one shared frequency."""
    k = np.arange(1, K + 1)
    return np.asarray(f_mean, dtype=float)[..., None] * (1 + (k - (K + 1) / 2) * rel)


def _tracks_from_freqs(times, freqs_hz, amps) -> StageOneResult:
    t = np.asarray(times, dtype=float)
    phi = TWO_PI * np.outer(t - t[0], freqs_hz)
    amp = np.broadcast_to(np.asarray(amps, dtype=float), phi.shape).copy()
    return StageOneResult.from_tracks(phi, amp)


def _drop_harmonics(est, K: int, tol: float):
    """Keep the K strongest peaks that are not near an integer multiple
    (2, 3, ...) of a stronger kept peak."""
    order = np.argsort(est.amplitudes)[::-1]
    kept = []
    for i in order:
        f = est.frequencies[i]
        if any(abs(f - n * est.frequencies[j]) < tol for j in kept
               for n in range(2, int(0.5 / max(est.frequencies[j], 1e-12)) + 1)):
            continue
        kept.append(i)
        if len(kept) == K:
            break
    kept = np.array(sorted(kept), dtype=int)
    return replace(est, frequencies=est.frequencies[kept], amplitudes=est.amplitudes[kept],
                   flags=est.flags if kept.size == K else tuple(set(est.flags) | {"under_resolved"}))


def init_from_fft(signal: SampledSignal, K: int, rel_offset: float = 0.02):
    """Constant-frequency tracks at periodogram peaks.

    When fewer than K peaks are resolvable every component starts from the
    strongest peak with symmetric offsets. Returns ``(tracks, freqs_hz)``.
    """
    fs = signal.sample_rate
    est = periodogram_peaks(signal.values, K + 4)
    if est.K == 0:
        raise EstimatorError("degenerate spectrum: no periodogram peak")
    est = _drop_harmonics(est, K, 2.0 / signal.n)
    if est.K < K:
        freqs = split_frequencies(est.frequencies[np.argmax(est.amplitudes)], K, rel_offset)
        amps = np.full(K, est.amplitudes.max() / K)
    else:
        freqs = est.frequencies.copy()
        amps = est.amplitudes.copy()
        if np.unique(freqs).size < K:
            freqs = split_frequencies(freqs.mean(), K, rel_offset)
    freqs_hz = np.sort(freqs) * fs
    return _tracks_from_freqs(signal.times, freqs_hz, amps), freqs_hz


def init_bandpass_tf(signal: SampledSignal, K: int, band_hints=None, window_len: int | None = None,
                     hop: int = 1, merge: bool | None = None, rel_offset: float = 0.02):
    """Tracks from STFT ridges.

    With ``band_hints`` (one ``(lo, hi)`` Hz pair per component) each band is
    isolated by FFT masking and tracked separately. Otherwise K ridges are
    extracted jointly; if they are not separated by at least one frequency
    bin on average (or ``merge`` is set), every component starts from the
    energy-averaged ridge with symmetric offsets.

    Returns ``(tracks, ridge)`` where ``ridge`` is the N x K frequency
    initialization in Hz.
    """
    y = np.asarray(signal.values, dtype=float)
    N = y.size
    if N < 32:
        raise ValueError("init_bandpass_tf needs N >= 32")
    if not np.any(np.abs(y - y.mean()) > 0):
        raise EstimatorError("degenerate spectrum: all energy at DC")
    fs = signal.sample_rate
    wl = window_len or int(np.clip(N // 4, 16, 256))
    t = signal.times
    env = np.abs(hilbert(y - y.mean()))
    env = moving_average(env, wl)
    if band_hints is not None:
        if len(band_hints) != K:
            raise ValueError("need one band per component")
        F = np.fft.rfftfreq(N, 1 / fs)
        Y = np.fft.rfft(y)
        ridge, amps = [], []
        for lo, hi in band_hints:
            yb = np.fft.irfft(np.where((F >= lo) & (F <= hi), Y, 0), N)
            r = stft_ridges(yb, wl, hop, 1, fs, t0=t[0])
            ridge.append(r.at(t)[:, 0])
            amps.append(moving_average(np.abs(hilbert(yb)), wl))
        ridge = np.column_stack(ridge)
        amp = np.column_stack(amps)
    else:
        r = stft_ridges(y, wl, hop, K, fs, t0=t[0])
        fr = r.at(t)
        bin_hz = fs / wl
        separated = K == 1 or np.mean(np.abs(np.diff(np.sort(fr, axis=1), axis=1))) >= bin_hz
        if merge or (merge is None and not separated):
            fr = split_frequencies(np.interp(t, r.times, r.merged()), K, rel_offset)
        ridge = fr
        amp = np.repeat((env / K)[:, None], K, axis=1)
    ridge = np.maximum(ridge, 1e-6 * fs)
    phi = integrate_ridge(t, ridge)
    return StageOneResult.from_tracks(phi, np.maximum(amp, 0.0)), ridge


def init_dechirp(signal: SampledSignal, K: int, rates=None, pad: int = 8):
    """Linear-chirp tracks from a dechirped periodogram search.

    For each trial chirp rate (Hz/s) the analytic residual is multiplied by
    the conjugate quadratic phase and its zero-padded FFT peak is taken. The
    strongest (rate, frequency) pair is fitted by least squares, subtracted
    and the search repeated K times. The default rate grid spans
    ``+-fs / (4 T)`` with step ``1 / T**2`` (at most a quarter cycle of
    quadratic phase mismatch over the record).

    Suited to crossing chirps, where short-window ridges cannot separate the
    components. Returns ``(tracks, ridge)`` with ``ridge`` the N x K
    frequency initialization in Hz, columns ordered by starting frequency.
    """
    y = np.asarray(signal.values, dtype=float)
    if not np.any(np.abs(y - y.mean()) > 0):
        raise EstimatorError("degenerate spectrum: all energy at DC")
    t = np.asarray(signal.times, dtype=float)
    fs = signal.sample_rate
    tm = 0.5 * (t[0] + t[-1])
    tc = t - tm
    T = t[-1] - t[0] + 1 / fs
    if rates is None:
        step = 1.0 / T ** 2
        n = int(np.ceil(fs / (4 * T) / step))
        rates = step * np.arange(-n, n + 1)
    rates = np.asarray(rates, dtype=float)
    nfft = pad * y.size
    F = np.fft.fftfreq(nfft, 1 / fs)
    pos = (F > 0) & (F < fs / 2)
    resid = y - y.mean()
    params = []
    for _ in range(K):
        z = hilbert(resid)
        X = np.abs(np.fft.fft(z * np.exp(-1j * np.pi * rates[:, None] * tc ** 2), nfft, axis=1))
        X[:, ~pos] = 0.0
        i, j = np.unravel_index(np.argmax(X), X.shape)
        f = F[j]
        if 0 < j < nfft - 1:
            a, b, c = X[i, j - 1], X[i, j], X[i, j + 1]
            den = a - 2 * b + c
            if den < 0:
                f += 0.5 * (a - c) / den * (fs / nfft)
        th = TWO_PI * (f * tc + 0.5 * rates[i] * tc ** 2)
        B = np.column_stack([np.cos(th), np.sin(th)])
        ab, *_ = np.linalg.lstsq(B, resid, rcond=None)
        resid = resid - B @ ab
        params.append((f, rates[i], float(np.hypot(*ab)), float(np.arctan2(ab[1], ab[0]))))
    params.sort(key=lambda p: p[0] - p[1] * (tm - t[0]))
    phi = np.column_stack([TWO_PI * (f * tc + 0.5 * r * tc ** 2) - psi for f, r, _, psi in params])
    amp = np.repeat(np.array([[p[2] for p in params]]), t.size, axis=0)
    ridge = np.column_stack([f + r * tc for f, r, _, _ in params])
    return StageOneResult.from_tracks(phi, amp), np.maximum(ridge, 1e-6 * fs)


INITIALIZERS = {"fft": init_from_fft, "tf": init_bandpass_tf, "chirp": init_dechirp}


# --------------------------------------------------------------------------
# loop

def convergence_check(state: NopState, config: NopConfig) -> bool:
    """True when the loop should continue."""
    return (state.j < config.J and state.eps1 > config.eps and state.eps2 > config.eps
            and abs(state.eps1 - state.eps0) > config.eps)


def _rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def _residual(signal: SampledSignal, tracks: StageOneResult, inducing) -> float:
    fit = sum(tracks.amp[:, k] * inducing[k].mean(tracks.phi[:, k]) for k in range(tracks.K))
    return _rms(signal.values - fit)


def run_nop(signal: SampledSignal, config: NopConfig, init: NopInit) -> NopResult:
    K = config.K
    if init.tracks.K != K or init.tracks.n != signal.n:
        raise ValueError("initial tracks must be N x K")
    inducing = init.inducing
    if inducing is None:
        inducing = init_sine([make_inducing(config.M, config.L).z for _ in range(K)],
                             config.L, config.kernel)
    if len(inducing) != K:
        raise ValueError("need one inducing set per component")
    opt = replace(config.optimizer, seed=config.seed)
    hint = np.mean(init.tracks.inst_freq(signal.times), axis=0) if signal.n > 1 else np.ones(K)
    if not np.all(hint > 0):
        raise ValueError("initial tracks must have positive mean frequency")
    patches = make_patches(signal, hint, config.patch)
    state = NopState(0, 2.0, 1.0, 1.0, init.tracks, list(inducing))

    def stage2(tracks, ind):
        new, scales, info = update_shapes(signal.values, tracks.phi, tracks.amp, ind,
                                          config.sigma, config.shape_mode)
        s = np.where(scales > 0, scales, 1.0)
        tracks = StageOneResult(tracks.phi, tracks.amp * s, tracks.phi_var, tracks.amp_var * s * s)
        return tracks, new

    def stage1(tracks, ind):
        res, _ = run_stage_one(signal, tracks, ind, patches, config.d, config.amp_deg, opt,
                               config.smooth)
        return res

    while convergence_check(state, config):
        prev = state.tracks
        tracks, ind = state.tracks, state.inducing
        try:
            if config.h == PHASES_FIRST:
                tracks, ind = stage2(tracks, ind)
                tracks = stage1(tracks, ind)
                r1 = r2 = _residual(signal, tracks, ind)
            else:
                tracks = stage1(tracks, ind)
                r1 = _residual(signal, tracks, ind)
                tracks, ind = stage2(tracks, ind)
                r2 = _residual(signal, tracks, ind)
        except Exception as exc:
            raise NopError(f"iteration {state.j + 1} failed: {exc}", state) from exc
        state.eps0 = state.eps1
        state.eps1 = _rms(tracks.phi - prev.phi)
        state.eps2 = _rms(tracks.amp - prev.amp)
        state.j += 1
        state.tracks, state.inducing = tracks, ind
        state.history.append({"j": state.j, "eps1": state.eps1, "eps2": state.eps2,
                              "stage1_residual": r1, "stage2_residual": r2})
        log.info("iteration %d: eps1=%.3g eps2=%.3g residual=%.3g", state.j, state.eps1,
                 state.eps2, r2)
        if state.j == 1 and state.eps2 <= config.eps and state.eps1 > config.eps:
            warnings.warn("loop stopped after one iteration because the amplitude change "
                          "alone fell below eps", RuntimeWarning, stacklevel=2)
    converged = state.j < config.J or not convergence_check(replace(state, j=0), config)
    return NopResult(state.tracks, state.inducing, bool(converged), state.j, state.history,
                     config.sigma)


# --------------------------------------------------------------------------
# result bundle

def save_result(result: NopResult, times, out_dir, kernel: KernelParams | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    t = np.asarray(times, dtype=float)
    tr = result.tracks
    with open(os.path.join(out_dir, "tracks.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["t"]
        for k in range(1, tr.K + 1):
            head += [f"phi_{k}", f"amp_{k}", f"phi_var_{k}", f"amp_var_{k}"]
        w.writerow(head)
        for i in range(tr.n):
            row = [f"{t[i]:.17g}"]
            for k in range(tr.K):
                row += [f"{v:.17g}" for v in (tr.phi[i, k], tr.amp[i, k], tr.phi_var[i, k], tr.amp_var[i, k])]
            w.writerow(row)
    for k, ind in enumerate(result.inducing, start=1):
        write_inducing_csv(os.path.join(out_dir, f"shape_{k}.csv"), ind)
    with open(os.path.join(out_dir, "diagnostics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "eps1", "eps2", "stage1_residual", "stage2_residual"])
        for h in result.history:
            w.writerow([h["j"]] + [f"{h[c]:.12g}" for c in ("eps1", "eps2", "stage1_residual",
                                                               "stage2_residual")])
    kern = kernel or result.inducing[0].kernel
    meta = {"K": tr.K, "L": result.inducing[0].L, "sigma": result.sigma,
            "converged": result.converged, "iterations_used": result.iterations_used,
            "kernel": {"kind": kern.kind, "beta": kern.beta,
                       "alpha": list(np.atleast_1d(kern.alpha).tolist()), "jitter": kern.jitter}}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_result(out_dir):
    """Inverse of :func:`save_result`. Returns ``(result, times)``."""
    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    kd = meta["kernel"]
    alpha = kd["alpha"][0] if kd["kind"] == "se" else tuple(kd["alpha"])
    kernel = KernelParams(kd["kind"], kd["beta"], alpha, kd["jitter"])
    data = np.genfromtxt(os.path.join(out_dir, "tracks.csv"), delimiter=",", names=True)
    data = np.atleast_1d(data)
    K = int(meta["K"])
    cols = lambda name: np.column_stack([data[f"{name}_{k}"] for k in range(1, K + 1)])
    tracks = StageOneResult(cols("phi"), cols("amp"), cols("phi_var"), cols("amp_var"))
    inducing = [read_inducing_csv(os.path.join(out_dir, f"shape_{k}.csv"), meta["L"], kernel)
                for k in range(1, K + 1)]
    history = []
    with open(os.path.join(out_dir, "diagnostics.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            history.append({k: (int(v) if k == "j" else float(v)) for k, v in row.items()})
    res = NopResult(tracks, inducing, bool(meta["converged"]), int(meta["iterations_used"]),
                    history, float(meta["sigma"]))
    return res, np.asarray(data["t"], dtype=float)


__all__ = [
    "NopError", "NopConfig", "NopInit", "NopState", "NopResult", "init_sine", "init_from_fft",
    "init_bandpass_tf", "init_dechirp", "INITIALIZERS", "split_frequencies", "convergence_check", "run_nop", "save_result",
    "load_result", "SHAPES_FIRST", "PHASES_FIRST",
]
