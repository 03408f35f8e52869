"""Experiment harness: parameter sweeps, error metrics and long-format tables.

A sweep is described by an :class:`ExperimentSpec` (usually loaded from an
INI file) and produces an :class:`ErrorReport`, one row per
(method, parameter point, realization, metric) plus mean/variance rows over
realizations. Every cell draws its noise and optimizer seeds from
``(seed, cell index)`` so the report is a pure function of the spec.
"""

from __future__ import annotations

import configparser
import csv
import itertools
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .baselines import (
    burg_me,
    disambiguate_crossover,
    esprit,
    integrate_ridge,
    music,
    periodogram_peaks,
    stft_ridges,
)
from .driver import INITIALIZERS, NopConfig, NopInit, run_nop
from .gp_kernels import ALPHA_SE, SIGMA_DEFAULT, KernelParams
from .phase_amplitude import OptimizerConfig, PatchPolicy
from .signal_model import TWO_PI, builtin_experiment_signal

log = logging.getLogger(__name__)

EXPERIMENTS = {
    "fig1_gap_sweep": "f1",
    "fig2_sample_sweep": "f2",
    "fig3_close_freq": "f3",
    "fig4_crossover": "f5_cross",
    "fig5_shapes": "f6",
    "custom": None,
}
METHODS = ("nop", "music", "esprit", "me", "fft", "ridge")
FREQ_METRICS = ("freq_err", "freq_err_max", "freq_err_rad")
TRACK_METRICS = ("freq_rmse", "phase_err", "phase_err_head", "phase_err_tail",
                 "drift_head", "drift_tail")
NOP_METRICS = ("shape_rmse", "comp_rmse", "recon_rmse", "iterations")
LABEL_METRICS = ("label_acc",)

# NOP settings per experiment; spec overrides are applied on top.
_NOP_BASE = dict(J=20, eps=1e-4, h=1, d=1, amp_degree=0, M=128, init="fft",
                 periods_per_patch=1e6, max_steps=5000, sigma_model=None, alpha=None)
_NOP_DEFAULTS = {
    "fig1_gap_sweep": dict(max_steps=10000),
    "fig2_sample_sweep": dict(),
    "fig3_close_freq": dict(d=2, init="tf"),
    "fig4_crossover": dict(d=2, init="chirp"),
    "fig5_shapes": dict(),
    "custom": dict(),
}
_DEFAULT_N = {"fig4_crossover": 200}
FIG1_DELTA0 = tuple(np.array([1, 2, 5, 10]) / 1024)
# linspace(-5, 5, 10) / 10.24 written as exact ratios, so configs can list the same floats
FIG3_DELTA0 = tuple((1000.0 * np.arange(10) - 4500.0) / 9216.0)
NOISELESS_TRIG_SIGMA = 1e-5
NOISY_ALPHA = 100.0     # smoother shape prior once there is noise to overfit


@dataclass(frozen=True)
class ExperimentSpec:
    """Sweep description.

    ``delta0`` is the spectral-gap grid (fig1: cycles/s, fig3: Hz), ``sigma``
    the noise level grid and ``N`` the record-length grid (default: 200 for
    the crossing chirps, 100 otherwise). ``shapes`` picks
    the trigonometric (``"cos"``) or non-sinusoidal (``"eg"``) instantiation
    where the experiment has both. ``nop`` holds overrides of the NOP
    settings (``M``, ``J``, ``eps``, ``d``, ``h``, ``amp_degree``,
    ``sigma_model``, ``alpha``, ``max_steps``, ``periods_per_patch``, ``init``).
    """

    id: str
    delta0: tuple = (0.0,)
    sigma: tuple = (0.0,)
    N: tuple | None = None        # None: the signal's native length
    realizations: int = 1
    seed: int = 0
    methods: tuple = ("nop",)
    shapes: str = "cos"
    noise_kind: str = "additive_gaussian"
    signal: str | None = None     # builtin signal id, only for id="custom"
    nop: dict = field(default_factory=dict)
    name: str | None = None

    def __post_init__(self):
        if self.id not in EXPERIMENTS:
            raise ValueError(f"unknown experiment id {self.id!r}")
        if self.N is None:
            object.__setattr__(self, "N", (_DEFAULT_N.get(self.id, 100),))
        for g in ("delta0", "sigma", "N", "methods"):
            v = tuple(getattr(self, g))
            if not v:
                raise ValueError(f"grid {g!r} must be nonempty")
            object.__setattr__(self, g, v)
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.id == "custom" and not self.signal:
            raise ValueError("custom experiments need a 'signal' id")
        unknown = set(self.nop) - set(_NOP_BASE)
        if unknown:
            raise ValueError(f"unknown nop settings {sorted(unknown)}")

    @property
    def label(self) -> str:
        return self.name or self.id

    def signal_id(self) -> str:
        base = EXPERIMENTS[self.id]
        if self.id == "custom":
            return self.signal
        if base in ("f1", "f3"):
            return f"{base}_{'cos' if self.shapes in ('cos', 'trig') else 'shape'}"
        return base

    def grid(self):
        return list(itertools.product(self.delta0, self.sigma, self.N))

    def metrics(self, method: str) -> tuple:
        m = FREQ_METRICS
        if method in ("nop", "ridge"):
            m = m + TRACK_METRICS
        if method == "nop":
            m = m + NOP_METRICS
        if self.id == "fig4_crossover" and method in ("nop", "ridge"):
            m = m + LABEL_METRICS
        return m

    def nop_settings(self, noise_sigma: float) -> dict:
        s = {**_NOP_BASE, **_NOP_DEFAULTS[self.id], **self.nop}
        if s["sigma_model"] is None:
            trig = self.shapes in ("cos", "trig") and self.id != "fig5_shapes"
            s["sigma_model"] = (NOISELESS_TRIG_SIGMA if noise_sigma == 0 and trig
                                else max(SIGMA_DEFAULT, noise_sigma))
        if s["alpha"] is None:
            s["alpha"] = ALPHA_SE if noise_sigma == 0 else NOISY_ALPHA
        return s


@dataclass
class ErrorReport:
    """Long-format rows ``(experiment, method, (delta0, sigma, N), realization,
    metric, value, tag)``; ``realization`` is an int or ``"mean"``/``"var"``."""

    rows: list = field(default_factory=list)

    def select(self, method=None, metric=None, realization=None, **params):
        out = []
        for r in self.rows:
            exp, meth, (d0, sg, n), real, met, val, tag = r
            if method is not None and meth != method:
                continue
            if metric is not None and met != metric:
                continue
            if realization is not None and real != realization:
                continue
            p = {"delta0": d0, "sigma": sg, "N": n}
            if any(p[k] != v for k, v in params.items()):
                continue
            out.append(r)
        return out

    def values(self, method, metric, **params) -> np.ndarray:
        return np.array([r[5] for r in self.select(method, metric, **params)
                         if isinstance(r[3], int)], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for exp, meth, (d0, sg, n), real, met, val, tag in sorted(self.rows, key=_row_key):
                w.writerow([exp, meth, _g(d0), _g(sg), int(n), real, met, _g(val), tag])


CSV_HEADER = ["experiment", "method", "delta0", "sigma", "N", "realization", "metric", "value", "tag"]


def _g(x) -> str:
    x = float(x)
    return "nan" if np.isnan(x) else f"{x:.12g}"


def _row_key(r):
    real = r[3]
    rk = (0, real, "") if isinstance(real, int) else (1, 0, real)
    return (r[0], r[1], r[2], rk, r[4])


# --------------------------------------------------------------------------
# metrics

def _wrap(x):
    return np.angle(np.exp(1j * np.asarray(x, dtype=float)))


def aligned_phase_error(est, true, ref=slice(None)) -> np.ndarray:
    """Pointwise |phase error| after removing the best constant offset mod 2 pi.

    The offset is the circular mean of the difference over the samples
    ``ref`` (all by default). Anchoring on the start of the record exposes
    drift that grows away from it.
    """
    d = np.asarray(est, dtype=float) - np.asarray(true, dtype=float)
    c = np.angle(np.mean(np.exp(1j * d[ref])))
    return np.abs(_wrap(d - c))


def frequency_error(est, true, reduce=np.mean) -> float:
    """Mean (or ``reduce``) absolute error of sorted mean frequencies."""
    return float(reduce(np.abs(np.sort(np.asarray(est, dtype=float))
                               - np.sort(np.asarray(true, dtype=float)))))


def match_components(est_freq, true_freq, by: str = "mean") -> np.ndarray:
    """Permutation ``p`` with est column ``p[k]`` matched to truth column k.

    ``by="mean"`` sorts by mean frequency; ``by="track"`` minimizes the
    summed squared track difference over all permutations (used when mean
    frequencies coincide, e.g. crossing chirps).
    """
    est_freq = np.atleast_2d(np.asarray(est_freq, dtype=float).T).T
    true_freq = np.atleast_2d(np.asarray(true_freq, dtype=float).T).T
    K = true_freq.shape[1]
    if by == "mean":
        p = np.empty(K, dtype=int)
        p[np.argsort(true_freq.mean(axis=0))] = np.argsort(est_freq.mean(axis=0))
        return p
    best = min(itertools.permutations(range(K)),
               key=lambda q: float(np.sum((est_freq[:, list(q)] - true_freq) ** 2)))
    return np.array(best, dtype=int)


def shape_rmse(values, shape, n: int = 1024) -> float:
    """RMSE between a shape sampled on ``len(values)`` uniform cycles and a
    ShapeFunction, minimized over circular shifts."""
    v = np.asarray(values, dtype=float)
    c = np.arange(n) / n
    est = np.interp(c, np.arange(v.size + 1) / v.size, np.append(v, v[0]))
    ref = shape(c)
    xc = np.real(np.fft.ifft(np.fft.fft(est) * np.conj(np.fft.fft(ref)))) / n
    s = int(np.argmax(xc))
    return float(np.sqrt(np.mean((np.roll(est, -s) - ref) ** 2)))


def crossover_labels(freq_tracks) -> np.ndarray:
    """Per-sample label (0/1) of the first track after relabeling at crossings."""
    arr = np.asarray(freq_tracks, dtype=float)
    out = disambiguate_crossover(arr)
    return (out[0] != arr[0]).astype(int)


# --------------------------------------------------------------------------
# cell execution

@dataclass(frozen=True)
class _Cell:
    index: int
    method: str
    point: tuple
    realization: int
    noise_seed: int
    run_seed: int


def _seed(*words) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


def _cells(spec: ExperimentSpec) -> list:
    cells = []
    i = 0
    for g, point in enumerate(spec.grid()):
        for r in range(spec.realizations):
            ns = _seed(spec.seed, g, r)
            for meth in spec.methods:
                cells.append(_Cell(i, meth, point, r, ns, _seed(spec.seed, g, r, i)))
                i += 1
    return cells


def _signal(spec: ExperimentSpec, point, noise_seed: int):
    d0, sg, n = point
    sid = spec.signal_id()
    params = {"N": int(n)}
    if sid.startswith(("f1", "f3")):
        params["delta0"] = float(d0)
    return builtin_experiment_signal(sid, sigma=float(sg), seed=noise_seed,
                                     noise_kind=spec.noise_kind, **params)


def _nop(spec: ExperimentSpec, sig, noise_sigma: float, seed: int):
    s = spec.nop_settings(noise_sigma)
    cfg = NopConfig(K=2, J=int(s["J"]), eps=float(s["eps"]), h=int(s["h"]), d=int(s["d"]),
                    amp_degree=int(s["amp_degree"]), M=int(s["M"]),
                    sigma=float(s["sigma_model"]), seed=seed % 2 ** 32,
                    kernel=KernelParams(alpha=float(s["alpha"])),
                    patch=PatchPolicy(periods_per_patch=float(s["periods_per_patch"])),
                    optimizer=OptimizerConfig(max_steps=int(s["max_steps"])))
    tracks, _ = INITIALIZERS[s["init"]](sig, cfg.K)
    return run_nop(sig, cfg, NopInit(tracks))


def _baseline(method: str, y, K: int):
    if method == "music":
        return music(y, K)
    if method == "esprit":
        return esprit(y, K)
    if method == "me":
        return burg_me(y, K)[2]
    return periodogram_peaks(y, K)


def _ridge(sig, K: int):
    wl = int(np.clip(sig.n // 4, 16, 256))
    r = stft_ridges(sig.values, wl, 1, K, sig.sample_rate, t0=sig.times[0])
    return r.at(sig.times)


def _track_metrics(phi_est, f_est, phi_true, f_true, out: dict):
    n = phi_true.shape[0]
    m = max(1, n // 10)
    pe = np.column_stack([aligned_phase_error(phi_est[:, k], phi_true[:, k])
                          for k in range(phi_true.shape[1])])
    out["freq_rmse"] = float(np.sqrt(np.mean((f_est - f_true) ** 2)))
    out["phase_err"] = float(np.mean(pe))
    out["phase_err_head"] = float(np.mean(pe[:m]))
    out["phase_err_tail"] = float(np.mean(pe[-m:]))
    pd = np.column_stack([aligned_phase_error(phi_est[:, k], phi_true[:, k], slice(0, m))
                          for k in range(phi_true.shape[1])])
    out["drift_head"] = float(np.mean(pd[:m]))
    out["drift_tail"] = float(np.mean(pd[-m:]))


def _relabel(f, *others):
    """Apply crossover relabeling of the two frequency tracks ``f`` (N x 2)
    to ``f`` and to companion N x 2 arrays."""
    swap = crossover_labels(np.asarray(f).T) != 0
    return tuple(np.where(swap[:, None], a[:, ::-1], a) for a in (f, *others))


def _run_cell(spec: ExperimentSpec, cell: _Cell) -> dict:
    ex = _signal(spec, cell.point, cell.noise_seed)
    sig = ex.synthesize()
    t = sig.times
    comps = ex.components
    K = len(comps)
    f_true = np.column_stack([c.inst_freq(t) for c in comps])
    phi_true = np.column_stack([c.phi(t) for c in comps])
    mean_true = f_true.mean(axis=0)
    crossing = spec.id == "fig4_crossover"
    by = "track" if crossing else "mean"
    out = {}
    if cell.method == "nop":
        res = _nop(spec, sig, float(cell.point[1]), cell.run_seed)
        f_est, phi_est = res.inst_freq(t), res.tracks.phi
        if crossing:
            f_est, phi_est = _relabel(f_est, phi_est)
        p = match_components(f_est, f_true, by)
        f_est, phi_est = f_est[:, p], phi_est[:, p]
        out["freq_err"] = frequency_error(f_est.mean(axis=0), mean_true)
        out["freq_err_max"] = frequency_error(f_est.mean(axis=0), mean_true, np.max)
        _track_metrics(phi_est, f_est, phi_true, f_true, out)
        out["shape_rmse"] = float(np.mean([shape_rmse(res.inducing[p[k]].shape_on_grid(256)[1],
                                                      comps[k].shape) for k in range(K)]))
        ctrue = np.column_stack([c.evaluate(t) for c in comps])
        out["comp_rmse"] = float(np.mean(np.sqrt(np.mean((res.components()[:, p] - ctrue) ** 2,
                                                         axis=0))))
        out["recon_rmse"] = float(np.sqrt(np.mean((res.reconstruction() - ex.clean().values) ** 2)))
        out["iterations"] = float(res.iterations_used)
        if crossing:
            out["label_acc"] = label_accuracy(f_est, f_true, t, ex.params.get("crossing_time"))
    elif cell.method == "ridge":
        fr = _ridge(sig, K)
        if crossing:
            fr, = _relabel(fr)
        p = match_components(fr, f_true, by)
        fr = fr[:, p]
        phi_est = integrate_ridge(t, fr)
        out["freq_err"] = frequency_error(fr.mean(axis=0), mean_true)
        out["freq_err_max"] = frequency_error(fr.mean(axis=0), mean_true, np.max)
        _track_metrics(phi_est, fr, phi_true, f_true, out)
        if crossing:
            out["label_acc"] = label_accuracy(fr, f_true, t, ex.params.get("crossing_time"))
    else:
        est = _baseline(cell.method, sig.values, K).in_units("cycles/sample")
        f = est.frequencies * sig.sample_rate
        if f.size < K:
            raise RuntimeError(f"{cell.method} returned {f.size} of {K} lines")
        out["freq_err"] = frequency_error(f, mean_true)
        out["freq_err_max"] = frequency_error(f, mean_true, np.max)
    out["freq_err_rad"] = TWO_PI * out["freq_err"]
    return out


def label_accuracy(f_est, f_true, times, crossing_time=None, guard: int = 3) -> float:
    """Fraction of samples whose nearest-truth label agrees with the column
    label, excluding ``guard`` samples either side of the crossing."""
    f_est = np.asarray(f_est, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    near = np.argmin(np.abs(f_est[:, :1] - f_true), axis=1)
    keep = np.ones(f_est.shape[0], dtype=bool)
    if crossing_time is not None:
        ic = int(np.argmin(np.abs(np.asarray(times) - crossing_time)))
        keep[max(0, ic - guard):ic + guard + 1] = False
    return float(np.mean(near[keep] == 0))


def _execute(args):
    spec, cell = args
    names = spec.metrics(cell.method)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            vals = _run_cell(spec, cell)
        return cell, {m: (vals.get(m, np.nan), "") for m in names}
    except Exception as exc:  # recorded, never aborts the sweep
        tag = f"error:{type(exc).__name__}"
        log.warning("cell %d (%s %s r=%d) failed: %s", cell.index, cell.method, cell.point,
                    cell.realization, exc)
        return cell, {m: (np.nan, tag) for m in names}


def _workers(n_cells: int) -> int:
    cap = os.environ.get("NOP_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_cells))


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> ErrorReport:
    cells = _cells(spec)
    jobs = [(spec, c) for c in cells]
    nw = workers or _workers(len(cells))
    if nw == 1:
        results = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(_execute, jobs))
    rep = ErrorReport()
    for cell, vals in results:
        for m, (v, tag) in vals.items():
            rep.rows.append((spec.label, cell.method, cell.point, cell.realization, m, float(v), tag))
    _aggregate(spec, rep)
    rep.rows.sort(key=_row_key)
    return rep


def _aggregate(spec: ExperimentSpec, rep: ErrorReport) -> None:
    groups = {}
    for exp, meth, point, real, met, val, tag in rep.rows:
        groups.setdefault((meth, point, met), []).append(val)
    for (meth, point, met), vals in groups.items():
        v = np.asarray(vals, dtype=float)
        ok = v[np.isfinite(v)]
        nbad = v.size - ok.size
        tag = f"failed:{nbad}" if nbad else ""
        mean = float(np.mean(ok)) if ok.size else np.nan
        var = float(np.var(ok)) if ok.size else np.nan
        rep.rows.append((spec.label, meth, point, "mean", met, mean, tag))
        rep.rows.append((spec.label, meth, point, "var", met, var, tag))


# --------------------------------------------------------------------------
# config files

def _number(s: str) -> float:
    return float(Fraction(s.strip())) if "/" in s else float(s)


def _list(s: str, conv=_number) -> tuple:
    return tuple(conv(x) for x in s.split(",") if x.strip())


def load_spec(path, seed: int | None = None) -> ExperimentSpec:
    """Read an INI sweep description (``[experiment]`` and optional ``[nop]``)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    if "experiment" not in cp:
        raise ValueError(f"{path}: missing [experiment] section")
    e = cp["experiment"]
    known = {"id", "delta0", "sigma", "n", "realizations", "seed", "methods", "shapes",
             "noise", "signal", "name"}
    extra = set(e) - known
    if extra:
        raise ValueError(f"{path}: unknown keys {sorted(extra)}")
    nop = {}
    if "nop" in cp:
        keys = {k.lower(): k for k in _NOP_BASE}
        for k, v in cp["nop"].items():
            if k not in keys:
                raise ValueError(f"{path}: unknown nop setting {k!r}")
            nop[keys[k]] = v.strip() if k == "init" else _number(v)
    return ExperimentSpec(
        id=e.get("id", "").strip(),
        delta0=_list(e.get("delta0", "0")),
        sigma=_list(e.get("sigma", "0")),
        N=_list(e["N"], lambda x: int(x)) if "N" in e else None,
        realizations=e.getint("realizations", 1),
        seed=seed if seed is not None else e.getint("seed", 0),
        methods=_list(e.get("methods", "nop"), str.strip),
        shapes=e.get("shapes", "cos").strip(),
        noise_kind=e.get("noise", "additive_gaussian").strip(),
        signal=e.get("signal"),
        nop=nop,
        name=e.get("name") or Path(path).stem,
    )


__all__ = [
    "ExperimentSpec", "ErrorReport", "run_experiment", "load_spec", "aligned_phase_error",
    "frequency_error", "match_components", "shape_rmse", "label_accuracy", "crossover_labels",
    "CSV_HEADER", "METHODS", "EXPERIMENTS",
]
