"""Classical frequency estimators and time-frequency ridges.

Subspace methods work on the real signal with a 2K-dimensional signal
subspace (each real tone is a conjugate pair) and report the K positive
frequencies. Frequencies are in cycles per sample unless noted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, eigh, hankel
from scipy.optimize import minimize_scalar
from scipy.signal import find_peaks


@dataclass(frozen=True)
class FrequencyEstimate:
    frequencies: np.ndarray
    amplitudes: np.ndarray | None = None
    method: str = ""
    unit: str = "cycles/sample"
    flags: tuple = ()

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float).reshape(-1)
        order = np.argsort(f, kind="stable")
        object.__setattr__(self, "frequencies", f[order])
        if self.amplitudes is not None:
            a = np.asarray(self.amplitudes, dtype=float).reshape(-1)[order]
            object.__setattr__(self, "amplitudes", a)
        if self.unit not in ("cycles/sample", "rad/sample"):
            raise ValueError(f"unknown unit {self.unit!r}")
        top = 0.5 if self.unit == "cycles/sample" else np.pi
        if np.any(f < 0) or np.any(f > top + 1e-12):
            raise ValueError("frequencies must lie in [0, Nyquist]")

    @property
    def K(self) -> int:
        return self.frequencies.size

    def in_units(self, unit: str) -> "FrequencyEstimate":
        if unit == self.unit:
            return self
        s = 2 * np.pi if unit == "rad/sample" else 1 / (2 * np.pi)
        return FrequencyEstimate(self.frequencies * s, self.amplitudes, self.method, unit, self.flags)

    @property
    def under_resolved(self) -> bool:
        return "under_resolved" in self.flags


class EstimatorError(RuntimeError):
    pass


def _empty(method: str) -> FrequencyEstimate:
    return FrequencyEstimate(np.zeros(0), None, method)


# --------------------------------------------------------------------------
# subspace methods

def _fb_covariance(y, m: int) -> np.ndarray:
    """Forward-backward averaged sample autocorrelation of order m."""
    y = np.asarray(y, dtype=float)
    N = y.size
    X = hankel(y[:m], y[m - 1:])           # m x (N - m + 1) snapshots
    R = X @ X.T / (N - m + 1)
    R = 0.5 * (R + R[::-1, ::-1])
    return 0.5 * (R + R.T)


def _check_subspace(y, K: int, subarray: int | None):
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.size
    m = N // 2 if subarray is None else int(subarray)
    if not (m < N and 2 * K < m):
        raise ValueError(f"need 2K < subarray < N (K={K}, subarray={m}, N={N})")
    return y, m


def _music_denominator(y, K: int, subarray: int | None):
    y, m = _check_subspace(y, K, subarray)
    try:
        _, V = eigh(_fb_covariance(y, m))
    except LinAlgError as exc:
        raise EstimatorError(f"eigendecomposition failed: {exc}") from exc
    En = V[:, : m - 2 * K]                 # eigh sorts ascending
    n = np.arange(m)

    def denom(f):
        f = np.atleast_1d(f)
        E = np.exp(-2j * np.pi * np.outer(n, f))
        return np.sum(np.abs(En.T @ E) ** 2, axis=0)

    return denom


def _on_grid(denom, grid_size: int):
    grid = np.arange(grid_size + 1) * (0.5 / grid_size)
    d = np.concatenate([denom(grid[i:i + 4096]) for i in range(0, grid.size, 4096)])
    return grid, 1.0 / np.maximum(d, 1e-300)


def music_spectrum(y, K: int, grid_size: int = 2 ** 14, subarray: int | None = None):
    """MUSIC pseudospectrum on ``grid_size + 1`` points of [0, 0.5] cycles/sample."""
    return _on_grid(_music_denominator(y, K, subarray), grid_size)


def music(y, K: int, grid_size: int = 2 ** 14, subarray: int | None = None,
          refine: bool = True) -> FrequencyEstimate:
    """MUSIC pseudospectrum peaks, refined by a bounded 1-D search."""
    if K == 0:
        return _empty("music")
    denom = _music_denominator(y, K, subarray)
    grid, P = _on_grid(denom, grid_size)
    pk, _ = find_peaks(np.concatenate([[0.0], P, [0.0]]))
    pk = pk - 1
    if pk.size < K:
        raise EstimatorError(f"MUSIC found {pk.size} peaks, fewer than K={K}")
    top = pk[np.argsort(P[pk])[::-1][:K]]
    step = grid[1] - grid[0]
    freqs = []
    for i in top:
        f0 = grid[i]
        if refine:
            lo, hi = max(f0 - step, 0.0), min(f0 + step, 0.5)
            res = minimize_scalar(lambda f: float(denom(f)[0]), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-13})
            if res.success and denom(res.x)[0] <= 1.0 / P[i]:
                f0 = float(res.x)
        freqs.append(f0)
    return FrequencyEstimate(np.array(freqs), None, "music")


def esprit(y, K: int, subarray: int | None = None) -> FrequencyEstimate:
    """Least-squares ESPRIT on the 2K-dimensional real-signal subspace."""
    if K == 0:
        return _empty("esprit")
    y, m = _check_subspace(y, K, subarray)
    w, V = eigh(_fb_covariance(y, m))
    Es = V[:, -2 * K:]
    if w[-2 * K] <= 1e-14 * max(w[-1], 1e-300):
        raise EstimatorError("signal subspace is rank deficient")
    Phi, *_ = np.linalg.lstsq(Es[:-1], Es[1:], rcond=None)
    ang = np.angle(np.linalg.eigvals(Phi))
    pos = np.sort(ang[ang > 1e-12])
    if pos.size < K:
        # real eigenvalues (tones at 0 or Nyquist) count once
        rest = np.sort(np.abs(ang[ang <= 1e-12]))[::-1]
        pos = np.concatenate([pos, rest[: K - pos.size]])
    elif pos.size > K:
        pos = pos[np.argsort(np.abs(pos - np.pi / 2))[:K]]
    return FrequencyEstimate(pos[:K] / (2 * np.pi), None, "esprit")


# --------------------------------------------------------------------------
# maximum entropy

def burg_ar(y, order: int, demean: bool = True):
    """Burg recursion. Returns ``(a, E)`` with ``a`` the AR polynomial
    ``[1, a_1, ..., a_p]`` and ``E`` the final prediction-error power."""
    x = np.asarray(y, dtype=float).reshape(-1)
    if demean:
        x = x - x.mean()
    N = x.size
    if not 0 <= order < N:
        raise ValueError(f"order must satisfy 0 <= order < N (order={order}, N={N})")
    a = np.array([1.0])
    E = float(x @ x) / N
    f = x.copy()
    b = x.copy()
    for m in range(order):
        ff = f[m + 1:]
        bb = b[m:-1]
        den = ff @ ff + bb @ bb
        if den <= 0:
            break
        k = -2.0 * (ff @ bb) / den
        f_new = ff + k * bb
        b_new = bb + k * ff
        f[m + 1:] = f_new
        b[m + 1:] = b_new
        a = np.concatenate([a, [0.0]]) + k * np.concatenate([a, [0.0]])[::-1]
        E *= 1.0 - k * k
    return a, E


def burg_spectrum(y, order: int | None = None, grid_size: int = 2 ** 14, demean: bool = True):
    """AR power spectrum on ``grid_size + 1`` points of [0, 0.5]."""
    y = np.asarray(y, dtype=float).reshape(-1)
    order = y.size // 3 if order is None else int(order)
    a, E = burg_ar(y, order, demean)
    # a noiseless line spectrum drives E to exactly zero; keep the shape
    E = max(E, np.finfo(float).eps * float(np.mean(y * y)))
    f = np.arange(grid_size + 1) * (0.5 / grid_size)
    H = np.polynomial.polynomial.polyval(np.exp(-2j * np.pi * f), a)
    return f, E / np.abs(H) ** 2


def _top_peaks(f, P, K: int, method: str, strict: bool = True) -> FrequencyEstimate:
    pk, _ = find_peaks(np.concatenate([[-np.inf], P, [-np.inf]]))
    pk = pk - 1
    if pk.size < K and strict:
        raise EstimatorError(f"{method}: found {pk.size} peaks, fewer than K={K}")
    top = pk[np.argsort(P[pk])[::-1][:K]]
    return FrequencyEstimate(f[top], P[top], method)


def burg_me(y, K: int, order: int | None = None, grid_size: int = 2 ** 14):
    """Burg spectrum and its K largest peaks. Returns ``(freqs, spectrum, estimate)``."""
    f, P = burg_spectrum(y, order, grid_size)
    if K == 0:
        return f, P, _empty("me")
    return f, P, _top_peaks(f, P, K, "me")


# --------------------------------------------------------------------------
# periodogram

def periodogram_peaks(y, K: int, pad: int = 8, rel_height: float = 0.3,
                      strict: bool = False) -> FrequencyEstimate:
    """Zero-padded FFT magnitude peaks with parabolic interpolation.

    Local maxima below ``rel_height`` times the largest one (rectangular-window
    sidelobes sit at about 0.22) are ignored. With fewer than K resolvable
    peaks the estimate carries the ``under_resolved`` flag, or raises when
    ``strict``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.size
    if N < 4:
        raise ValueError("periodogram needs N >= 4")
    if K == 0:
        return _empty("fft")
    nfft = pad * N
    X = np.abs(np.fft.rfft(y, nfft))
    X[0] = 0.0
    pk, _ = find_peaks(X)
    pk = pk[X[pk] >= rel_height * X.max()] if pk.size else pk
    pk = pk[np.argsort(X[pk])[::-1][:K]]
    flags = ()
    if pk.size < K:
        if strict:
            raise EstimatorError(f"fft: {pk.size} resolvable peaks, fewer than K={K}")
        flags = ("under_resolved",)
    freqs, amps = [], []
    for i in pk:
        if 0 < i < X.size - 1:
            a, b, c = X[i - 1], X[i], X[i + 1]
            den = a - 2 * b + c
            delta = 0.5 * (a - c) / den if den != 0 else 0.0
            peak = b - 0.25 * (a - c) * delta
        else:
            delta, peak = 0.0, X[i]
        freqs.append((i + delta) / nfft)
        amps.append(2.0 * peak / N)
    return FrequencyEstimate(np.clip(freqs, 0, 0.5), np.array(amps), "fft", flags=flags)


def periodogram(y, pad: int = 8):
    """Zero-padded power spectrum ``|FFT|^2 / N`` on [0, 0.5] cycles/sample."""
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.fft.rfft(y, pad * y.size)
    return np.fft.rfftfreq(pad * y.size), np.abs(X) ** 2 / y.size


def line_amplitudes(y, frequencies) -> np.ndarray:
    """Least-squares real amplitudes of cosines at fixed frequencies
    (cycles/sample). Components at 0 or Nyquist have no sine term."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(frequencies, dtype=float).reshape(-1)
    t = np.arange(y.size)
    arg = 2 * np.pi * np.outer(t, f)
    X = np.column_stack([np.cos(arg), np.sin(arg)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return np.hypot(coef[:f.size], coef[f.size:])


def write_spectrum_csv(path, freqs, power) -> None:
    """``freq,power`` rows with 12 significant digits."""
    with open(path, "w", newline="") as fh:
        fh.write("freq,power\n")
        for f, p in zip(freqs, power):
            fh.write(f"{f:.12g},{p:.12g}\n")


# --------------------------------------------------------------------------
# time-frequency ridges

@dataclass
class RidgeTrack:
    times: np.ndarray
    freq: np.ndarray     # frames x K, cycles per time unit
    energy: np.ndarray   # frames x K
    band: tuple = (0.0, 0.5)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freq = np.atleast_2d(np.asarray(self.freq, dtype=float).T).T
        self.energy = np.atleast_2d(np.asarray(self.energy, dtype=float).T).T
        if not (np.all(np.isfinite(self.freq)) and np.all(np.isfinite(self.energy))):
            raise ValueError("ridge values must be finite")

    @property
    def K(self) -> int:
        return self.freq.shape[1]

    def merged(self) -> np.ndarray:
        """Energy-weighted single ridge."""
        w = np.maximum(self.energy, 0.0)
        s = w.sum(axis=1)
        out = np.where(s > 0, (w * self.freq).sum(axis=1) / np.where(s > 0, s, 1.0),
                       self.freq.mean(axis=1))
        return out

    def at(self, t) -> np.ndarray:
        """Ridge frequencies interpolated to times ``t`` (N x K)."""
        return np.column_stack([np.interp(t, self.times, self.freq[:, k]) for k in range(self.K)])


def stft_magnitude(y, window_len: int, hop: int, n_tapers: int = 3, nfft: int | None = None):
    """Hann STFT magnitude averaged over ``n_tapers`` time-shifted windows.

    Returns ``(frame_centers, bin_freqs, S)`` with ``S`` of shape bins x frames,
    frequencies in cycles per sample.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.size
    if not 2 <= window_len <= N:
        raise ValueError("window_len must lie in [2, N]")
    nfft = nfft or 4 * window_len
    half = window_len // 2
    shift = max(1, window_len // 8)
    offs = (np.arange(n_tapers) - (n_tapers - 1) / 2) * shift
    centers = np.arange(0, N, max(1, int(hop)))
    ypad = np.concatenate([np.zeros(half + window_len), y, np.zeros(half + window_len)])
    win = np.hanning(window_len + 2)[1:-1]
    S = np.zeros((nfft // 2 + 1, centers.size))
    for o in offs:
        idx = (centers + int(round(o)) - half + half + window_len)[:, None] + np.arange(window_len)
        frames = ypad[idx] * win
        S += np.abs(np.fft.rfft(frames, nfft, axis=1)).T
    return centers, np.fft.rfftfreq(nfft), S / len(offs)


def _frame_peaks(col, K: int, rel_height: float) -> np.ndarray:
    """Bins of the K largest local maxima above ``rel_height`` of the frame
    maximum; a merged frame repeats its strongest peak."""
    pk, _ = find_peaks(np.concatenate([[0.0], col, [0.0]]))
    pk = pk - 1
    pk = pk[col[pk] >= rel_height * col.max()]
    pk = pk[np.argsort(col[pk])[::-1][:K]]
    if pk.size < K:
        pk = np.concatenate([pk, np.full(K - pk.size, pk[0] if pk.size else int(np.argmax(col)))])
    return np.sort(pk)


def stft_ridges(y, window_len: int, hop: int, K: int, fs: float = 1.0,
                continuity_bins: float = 2.0, t0: float = 0.0,
                rel_height: float = 0.1) -> RidgeTrack:
    """Per-frame K ridges by peak picking with a frame-to-frame continuity window.

    Each frame's K strongest peaks (at least ``rel_height`` of the frame
    maximum) are assigned to the running tracks by least total movement.
    A track whose assigned peak jumps by more than ``continuity_bins``
    (natural bins, 1 / window_len) follows the local maximum instead.
    Crossing tracks therefore come out sorted (they touch and bounce),
    which is what :func:`disambiguate_crossover` expects.
    """
    centers, f, S = stft_magnitude(y, window_len, hop)
    nb = S.shape[0]
    pad_factor = (nb - 1) * 2 / window_len
    reach = max(1, int(round(continuity_bins * pad_factor)))
    S = S.copy()
    S[0] = 0.0
    floor = 1e-12 * max(S.max(), 1e-300)
    if S.max() <= 0:
        raise EstimatorError("degenerate spectrum: no energy away from DC")
    freq = np.zeros((centers.size, K))
    energy = np.zeros((centers.size, K))
    perms = [np.array(q) for q in itertools.permutations(range(K))]
    prev = None
    for j in range(centers.size):
        col = S[:, j]
        if prev is None and col.max() <= floor:
            continue
        if col.max() > floor:
            pk = _frame_peaks(col, K, rel_height)
        if prev is None:
            cur = np.sort(pk)
        elif col.max() <= floor:
            cur = prev.copy()
        else:
            # assign the frame's peaks to the tracks by least total movement;
            # a track whose peak lies out of reach follows its local maximum
            q = min(perms, key=lambda q: (int(np.sum(np.abs(pk[q] - prev))), tuple(q)))
            cur = pk[q]
            for k in range(K):
                if abs(cur[k] - prev[k]) > reach:
                    lo, hi = max(prev[k] - reach, 1), min(prev[k] + reach + 1, nb)
                    cur[k] = lo + int(np.argmax(col[lo:hi]))
        for k in range(K):
            i = cur[k]
            if 0 < i < nb - 1 and col[i] > 0:
                a, b, c = col[i - 1], col[i], col[i + 1]
                den = a - 2 * b + c
                dlt = 0.5 * (a - c) / den if den < 0 else 0.0
            else:
                dlt = 0.0
            freq[j, k] = (i + dlt) / (2 * (nb - 1))
            energy[j, k] = col[i] ** 2
        if prev is None:
            # back-fill any leading silent frames
            freq[:j] = freq[j]
        prev = cur
    return RidgeTrack(t0 + centers / fs, freq * fs, energy, (0.0, 0.5 * fs),
                      {"window_len": window_len, "hop": hop})


def integrate_ridge(times, freq, phi0=0.0) -> np.ndarray:
    """Trapezoidal phase (radians) from an instantaneous-frequency track (cycles)."""
    t = np.asarray(times, dtype=float)
    f = np.atleast_2d(np.asarray(freq, dtype=float).T).T
    inc = 0.5 * (f[1:] + f[:-1]) * np.diff(t)[:, None]
    ph = 2 * np.pi * np.vstack([np.zeros((1, f.shape[1])), np.cumsum(inc, axis=0)])
    return ph + phi0


def disambiguate_crossover(tracks, ratio: float = 0.25, persist: int = 3) -> np.ndarray:
    """Relabel two frequency tracks so that they cross instead of bouncing.

    ``tracks`` is a 2 x N array (or a RidgeTrack with K=2). Values are sorted
    per time point, crossover candidates are runs of at least ``persist``
    samples where the gap falls below ``ratio`` times its median, and the
    assignment is swapped at the gap minimum of every run.
    """
    if isinstance(tracks, RidgeTrack):
        arr = tracks.freq.T
    else:
        arr = np.asarray(tracks, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise ValueError("pairwise only: disambiguate_crossover takes exactly 2 tracks")
    lo = np.min(arr, axis=0)
    hi = np.max(arr, axis=0)
    gap = hi - lo
    thr = ratio * np.median(gap)
    below = gap < thr
    crossings = []
    i, n = 0, gap.size
    while i < n:
        if below[i]:
            j = i
            while j < n and below[j]:
                j += 1
            if j - i >= persist:
                crossings.append(i + int(np.argmin(gap[i:j])))
            i = j
        else:
            i += 1
    swap = np.zeros(n, bool)
    for c in crossings:
        swap[c + 1:] = ~swap[c + 1:]
    a = np.where(swap, hi, lo)
    b = np.where(swap, lo, hi)
    return np.vstack([a, b])


def crossover_points(tracks, ratio: float = 0.25, persist: int = 3) -> list[int]:
    """Sample indices where :func:`disambiguate_crossover` swaps labels."""
    out = disambiguate_crossover(tracks, ratio, persist)
    lo = np.min(out, axis=0)
    swapped = out[0] != lo
    return [int(i) for i in np.flatnonzero(np.diff(swapped.astype(int)) != 0)]


__all__ = [
    "FrequencyEstimate", "EstimatorError", "RidgeTrack", "music", "music_spectrum", "esprit",
    "burg_ar", "burg_spectrum", "burg_me", "periodogram", "periodogram_peaks",
    "line_amplitudes", "write_spectrum_csv", "stft_magnitude", "stft_ridges",
    "integrate_ridge", "disambiguate_crossover", "crossover_points",
]
