"""Signal model f(t) = sum_k a_k(t) s_k(phi_k(t)) and synthetic test signals.

Phases are stored in radians everywhere. Shape functions are 1-periodic in
cycles, so a shape is evaluated at ``phi / (2*pi)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

TWO_PI = 2.0 * np.pi

TrackFn = Union[Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray]


@dataclass(frozen=True)
class SampledSignal:
    """Observed record ``values`` at strictly increasing ``times``."""

    times: np.ndarray
    values: np.ndarray
    sample_rate: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if t.ndim != 1 or y.shape != t.shape:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if t.size < 2:
            raise ValueError("a signal needs at least two samples")
        if not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        if not (self.sample_rate > 0 and np.isfinite(self.sample_rate)):
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(y)):
            raise ValueError("values must be finite")

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def is_uniform(self) -> bool:
        dt = np.diff(self.times)
        return bool(np.allclose(dt, 1.0 / self.sample_rate, rtol=1e-9, atol=0.0))

    @classmethod
    def uniform(cls, values, sample_rate: float, t0: float = 0.0) -> "SampledSignal":
        values = np.asarray(values, dtype=float)
        times = t0 + np.arange(values.size) / sample_rate
        return cls(times, values, float(sample_rate))


@dataclass(frozen=True)
class ShapeFunction:
    """Zero-mean, unit-L2 1-periodic waveform as a truncated Fourier series.

    ``s(t) = sum_n c_n cos(2 pi n t) + d_n sin(2 pi n t)`` for n = 1..H.
    Build instances through :func:`normalize_shape` unless the coefficients
    are already normalized.
    """

    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.cos_coeffs, dtype=float))
        d = np.atleast_1d(np.asarray(self.sin_coeffs, dtype=float))
        h = max(c.size, d.size)
        c = np.pad(c, (0, h - c.size))
        d = np.pad(d, (0, h - d.size))
        object.__setattr__(self, "cos_coeffs", c)
        object.__setattr__(self, "sin_coeffs", d)
        if h == 0:
            raise ValueError("degenerate shape")
        norm2 = 0.5 * float(np.sum(c * c + d * d))
        if abs(norm2 - 1.0) > 1e-12:
            raise ValueError(f"shape is not unit L2 (norm^2 = {norm2!r}); use normalize_shape")

    @property
    def harmonics(self) -> int:
        return self.cos_coeffs.size

    def __call__(self, t):
        return eval_shape(self, t)

    def at_phase(self, phi):
        """Evaluate at phase ``phi`` given in radians."""
        return eval_shape(self, np.asarray(phi, dtype=float) / TWO_PI)

    def shifted(self, delta: float) -> "ShapeFunction":
        """Return ``t -> s(t + delta)`` (delta in cycles)."""
        n = np.arange(1, self.harmonics + 1)
        cs, sn = np.cos(TWO_PI * n * delta), np.sin(TWO_PI * n * delta)
        c, d = self.cos_coeffs, self.sin_coeffs
        return ShapeFunction(c * cs + d * sn, d * cs - c * sn)


def eval_shape(shape: ShapeFunction, t):
    t = np.asarray(t, dtype=float)
    # reduce first so that s(t + 1) == s(t) holds to the last bit
    tt = np.mod(t, 1.0)[..., None]
    n = np.arange(1, shape.harmonics + 1)
    arg = TWO_PI * n * tt
    return np.cos(arg) @ shape.cos_coeffs + np.sin(arg) @ shape.sin_coeffs


def normalize_shape(cos_coeffs=(), sin_coeffs=()) -> ShapeFunction:
    """Scale raw Fourier coefficients to a unit-L2 shape."""
    c = np.atleast_1d(np.asarray(cos_coeffs, dtype=float))
    d = np.atleast_1d(np.asarray(sin_coeffs, dtype=float))
    h = max(c.size, d.size)
    c = np.pad(c, (0, h - c.size))
    d = np.pad(d, (0, h - d.size))
    norm2 = 0.5 * float(np.sum(c * c + d * d))
    if h == 0 or norm2 == 0.0:
        raise ValueError("degenerate shape")
    scale = 1.0 / np.sqrt(norm2)
    return ShapeFunction(c * scale, d * scale)


def cosine_shape() -> ShapeFunction:
    return normalize_shape([1.0], [])


def sine_shape() -> ShapeFunction:
    return normalize_shape([], [1.0])


# Fixed non-sinusoidal stand-ins for the two example shapes.
EG_RAW = {
    1: ([1.0, 0.45, 0.0], [0.0, 0.2, 0.15]),
    2: ([0.0, 0.3, 0.2], [1.0, 0.0, 0.25]),
}


def eg_shape(k: int) -> ShapeFunction:
    c, d = EG_RAW[k]
    return normalize_shape(c, d)


def _as_track(fn: TrackFn) -> Callable[[np.ndarray], np.ndarray]:
    if callable(fn):
        return fn
    coeffs = np.asarray(fn, dtype=float)
    # polynomial coefficients, lowest degree first
    return lambda t: np.polynomial.polynomial.polyval(t, coeffs)


@dataclass
class ComponentSpec:
    """One oscillatory component: amplitude(t), phase(t) in radians, shape.

    ``amplitude`` and ``phase`` are callables of time or polynomial
    coefficient sequences (lowest degree first). ``phase_unit`` may be
    ``"cycles"``; it is converted to radians on construction.
    """

    amplitude: TrackFn
    phase: TrackFn
    shape: ShapeFunction
    phase_unit: str = "radians"
    _amp: Callable = field(init=False, repr=False)
    _phase: Callable = field(init=False, repr=False)

    def __post_init__(self):
        if self.phase_unit not in ("radians", "cycles"):
            raise ValueError("phase_unit must be 'radians' or 'cycles'")
        self._amp = _as_track(self.amplitude)
        raw = _as_track(self.phase)
        if self.phase_unit == "cycles":
            self._phase = lambda t: TWO_PI * np.asarray(raw(t), dtype=float)
        else:
            self._phase = raw

    def amp(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self._amp(t), dtype=float), t.shape).copy()

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self._phase(t), dtype=float), t.shape).copy()

    def inst_freq(self, t, dt: float = 1e-6):
        """Instantaneous frequency in Hz (cycles per time unit)."""
        t = np.asarray(t, dtype=float)
        return (self.phi(t + dt) - self.phi(t - dt)) / (2 * dt) / TWO_PI

    def evaluate(self, t):
        return self.amp(t) * self.shape.at_phase(self.phi(t))


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise.

    ``additive_gaussian`` adds N(0, sigma^2); ``phase_uniform`` adds an
    i.i.d. Uniform[0, 2*pi*sigma] draw to every phase sample (sigma=1 is the
    full [0, 2*pi] range).
    """

    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "additive_gaussian", "phase_uniform"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if (self.sigma == 0) != (self.kind == "none"):
            raise ValueError("sigma = 0 iff kind = 'none'")

    @classmethod
    def gaussian(cls, sigma: float, seed: int = 0) -> "NoiseSpec":
        if sigma == 0:
            return cls()
        return cls("additive_gaussian", float(sigma), int(seed))


def synthesize(components: Sequence[ComponentSpec], times, noise: NoiseSpec = NoiseSpec(),
               sample_rate: float | None = None) -> SampledSignal:
    if len(components) == 0:
        raise ValueError("need at least one component")
    t = np.asarray(times, dtype=float)
    if sample_rate is None:
        sample_rate = 1.0 / float(np.median(np.diff(t)))
    rng = np.random.default_rng(noise.seed)
    y = np.zeros_like(t)
    for comp in components:
        phi = comp.phi(t)
        if np.any(np.diff(phi) <= 0):
            raise ValueError("phase must be strictly increasing")
        if noise.kind == "phase_uniform":
            phi = phi + rng.uniform(0.0, TWO_PI * noise.sigma, size=t.shape)
        y += comp.amp(t) * comp.shape.at_phase(phi)
    if noise.kind == "additive_gaussian":
        y += rng.normal(0.0, noise.sigma, size=t.shape)
    return SampledSignal(t, y, float(sample_rate))


# --------------------------------------------------------------------------
# experiment signals

EXPERIMENT_IDS = ("f1_cos", "f1_shape", "f2", "f3_cos", "f3_shape", "f4_close", "f5_cross", "f6")


@dataclass
class ExperimentSignal:
    components: list
    times: np.ndarray
    sample_rate: float
    noise: NoiseSpec
    params: dict

    def synthesize(self) -> SampledSignal:
        return synthesize(self.components, self.times, self.noise, self.sample_rate)

    def clean(self) -> SampledSignal:
        return synthesize(self.components, self.times, NoiseSpec(), self.sample_rate)

    @property
    def K(self) -> int:
        return len(self.components)


def _pair_shapes(kind: str):
    if kind in ("cos", "trig"):
        return cosine_shape(), sine_shape()
    if kind in ("eg", "shape"):
        return eg_shape(1), eg_shape(2)
    raise ValueError(f"unknown shape instantiation {kind!r}")


def _trig_amp(shape: ShapeFunction) -> float:
    # unit-L2 cos/sin are sqrt(2)*cos; scale so the component is a plain cos/sin
    return 1.0 / np.sqrt(2.0) if shape.harmonics == 1 else 1.0


def builtin_experiment_signal(name: str, sigma: float = 0.0, seed: int = 0,
                              noise_kind: str = "additive_gaussian", **params) -> ExperimentSignal:
    """Exact synthetic construction of a named experiment signal.

    Parameters accepted per id (defaults in brackets):

    * ``f1_cos`` / ``f1_shape``: ``delta0`` [10/1024], ``N`` [100]; 1 Hz.
    * ``f2``: ``N`` [64]; 1 Hz; amplitudes (0.5, 1), frequencies (0.1, 0.15) rad/s.
    * ``f3_cos`` / ``f3_shape``: ``delta0`` [0], ``N`` [100], ``fs`` [100 Hz].
    * ``f4_close``: ``N`` [1024], ``fs`` [100 Hz], ``offset`` [0.3 rad/s].
    * ``f5_cross``: ``N`` [200], ``fs`` [100 Hz], ``f_lo`` [3], ``f_hi`` [7] Hz,
      ``shapes`` ["cos"].
    * ``f6``: ``N`` [100], ``fs`` [100 Hz].

    ``sigma`` is the noise standard deviation (or the phase-noise scale when
    ``noise_kind="phase_uniform"``).
    """
    if name not in EXPERIMENT_IDS:
        raise ValueError(f"unknown experiment signal {name!r}")
    noise = NoiseSpec() if sigma == 0 else NoiseSpec(noise_kind, float(sigma), int(seed))
    used = dict(params)

    if name in ("f1_cos", "f1_shape"):
        delta0 = float(params.get("delta0", 10 / 1024))
        n = int(params.get("N", 100))
        fs = 1.0
        s1, s2 = _pair_shapes("cos" if name == "f1_cos" else "eg")
        w1 = 38.8 / 1024
        w2 = (38.8 / 1024) + delta0
        comps = [
            ComponentSpec(_trig_amp(s1), [0.0, w1], s1, phase_unit="cycles"),
            ComponentSpec(_trig_amp(s2), [0.0, w2], s2, phase_unit="cycles"),
        ]
        used.update(delta0=delta0, N=n, freqs=(w1, w2))
    elif name == "f2":
        n = int(params.get("N", 64))
        fs = 1.0
        s = sine_shape()
        comps = [
            ComponentSpec(0.5 / np.sqrt(2.0), [0.0, 0.1], s),
            ComponentSpec(1.0 / np.sqrt(2.0), [0.0, 0.15], s),
        ]
        used.update(N=n, freqs=(0.1 / TWO_PI, 0.15 / TWO_PI))
    elif name in ("f3_cos", "f3_shape"):
        delta0 = float(params.get("delta0", 0.0))
        n = int(params.get("N", 100))
        fs = float(params.get("fs", 100.0))
        s1, s2 = _pair_shapes("cos" if name == "f3_cos" else "eg")
        comps = [
            ComponentSpec(_trig_amp(s1), [0.0, 10 / 10.24, 230 / 10.24**2], s1, phase_unit="cycles"),
            ComponentSpec(_trig_amp(s2), [0.0, 10 / 10.24 + delta0, 250 / 10.24**2], s2,
                          phase_unit="cycles"),
        ]
        used.update(delta0=delta0, N=n, fs=fs)
    elif name == "f4_close":
        n = int(params.get("N", 1024))
        fs = float(params.get("fs", 100.0))
        offset = float(params.get("offset", 0.3))
        s1, s2 = _pair_shapes(params.get("shapes", "cos"))
        # omega(t) = 2 pi (10 + 230 t / 10.24) / 10.24 rad/s, integrated
        base = [0.0, TWO_PI * 10 / 10.24, TWO_PI * 115 / 10.24**2]
        comps = [
            ComponentSpec(_trig_amp(s1), base, s1),
            ComponentSpec(_trig_amp(s2), [base[0], base[1] + offset, base[2]], s2),
        ]
        used.update(N=n, fs=fs, offset=offset)
    elif name == "f5_cross":
        n = int(params.get("N", 200))
        fs = float(params.get("fs", 100.0))
        f_lo = float(params.get("f_lo", 3.0))
        f_hi = float(params.get("f_hi", 7.0))
        s1, s2 = _pair_shapes(params.get("shapes", "cos"))
        T = n / fs
        rate = (f_hi - f_lo) / T
        comps = [
            ComponentSpec(_trig_amp(s1), [0.0, f_lo, rate / 2], s1, phase_unit="cycles"),
            ComponentSpec(_trig_amp(s2), [0.0, f_hi, -rate / 2], s2, phase_unit="cycles"),
        ]
        used.update(N=n, fs=fs, f_lo=f_lo, f_hi=f_hi, crossing_time=T / 2)
    else:  # f6
        n = int(params.get("N", 100))
        fs = float(params.get("fs", 100.0))
        w1, w2 = 3.88 / 1.024, 4.88 / 1.024
        comps = [
            ComponentSpec(1.0, [0.0, w1], eg_shape(1), phase_unit="cycles"),
            ComponentSpec(1.0, [0.0, w2], eg_shape(2), phase_unit="cycles"),
        ]
        used.update(N=n, fs=fs, freqs=(w1, w2))

    times = np.arange(n) / fs
    return ExperimentSignal(comps, times, fs, noise, used)


# --------------------------------------------------------------------------
# CSV IO

def write_signal_csv(path, signal: SampledSignal) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y"])
        for t, y in zip(signal.times, signal.values):
            w.writerow([f"{t:.17g}", f"{y:.17g}"])


def read_signal_csv(path, sample_rate: float | None = None) -> SampledSignal:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:2] != ["t", "y"]:
            raise ValueError(f"{path}: expected header 't,y', got {header!r}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    arr = np.asarray(rows, dtype=float)
    if arr.shape[0] < 2:
        raise ValueError(f"{path}: need at least two samples")
    t, y = arr[:, 0], arr[:, 1]
    if sample_rate is None:
        sample_rate = 1.0 / float(np.median(np.diff(t)))
    return SampledSignal(t, y, float(sample_rate))
