"""Command-line front end.

Subcommands::

    generate    write a builtin signal to CSV (t,y)
    decompose   run NOP on a signal CSV and write a result bundle
    superres    run one frequency estimator and print/write the lines
    experiment  run a sweep from an INI file and write <out>/<name>.csv
    predict     predictive mean/variance of a result bundle at new times

Exit status: 0 success, 1 usage error, 2 numerical failure.

Output schemas (floats with 12 significant digits unless noted):

* signal CSV: ``t,y`` (17 digits, lossless round trip)
* tracks.csv: ``t,phi_1,amp_1,phi_var_1,amp_var_1,...``
* shape_k.csv: ``z,alpha_u,var_u``
* diagnostics.csv: ``j,eps1,eps2,stage1_residual,stage2_residual``
* superres CSV: ``k,frequency,amplitude`` (cycles per time unit; subspace
  methods get least-squares amplitudes at their frequencies)
* spectrum CSV (``superres --spectrum``): ``freq,power``
* experiment CSV: ``experiment,method,delta0,sigma,N,realization,metric,value,tag``
  with ``realization`` an integer or ``mean``/``var``
* prediction CSV: ``t0,mean,var``
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .baselines import (
    EstimatorError,
    burg_me,
    burg_spectrum,
    esprit,
    line_amplitudes,
    music,
    music_spectrum,
    periodogram,
    periodogram_peaks,
    write_spectrum_csv,
)
from .driver import (
    INITIALIZERS,
    NopConfig,
    NopError,
    NopInit,
    load_result,
    run_nop,
    save_result,
)
from .experiments import load_spec, run_experiment
from .gp_kernels import KernelError
from .phase_amplitude import OptimizerConfig, PatchFitError, PatchPolicy
from .prediction import predict_signal, write_prediction_csv
from .signal_model import EXPERIMENT_IDS, builtin_experiment_signal, read_signal_csv, write_signal_csv

NUMERICAL_ERRORS = (NopError, KernelError, PatchFitError, EstimatorError, np.linalg.LinAlgError,
                    FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nopdecomp", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a builtin signal to CSV")
    g.add_argument("signal", choices=EXPERIMENT_IDS)
    g.add_argument("--out", required=True, help="output CSV path")
    g.add_argument("--sigma", type=float, default=0.0, help="noise level")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=None, help="number of samples")
    g.add_argument("--delta0", type=float, default=None)

    d = sub.add_parser("decompose", help="run NOP on a signal CSV")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="result directory")
    d.add_argument("--k", type=int, default=2)
    d.add_argument("--iters", type=int, default=20)
    d.add_argument("--eps", type=float, default=1e-4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--degree", type=int, choices=(0, 1, 2), default=1)
    d.add_argument("--fs", type=float, default=None, help="sample rate if not implied by t")
    d.add_argument("--init", choices=tuple(INITIALIZERS), default="fft")
    d.add_argument("--inducing", type=int, default=64, help="inducing points per shape")
    d.add_argument("--sigma", type=float, default=None, help="model noise level")
    d.add_argument("--periods-per-patch", type=float, default=5.0)

    s = sub.add_parser("superres", help="run one frequency estimator")
    s.add_argument("--input", required=True)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--method", choices=("nop", "music", "esprit", "me", "fft"), default="music")
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spectrum", default=None,
                   help="also write the method's spectrum as freq,power CSV (music, me, fft)")

    e = sub.add_parser("experiment", help="run a sweep from an INI config")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--seed", type=int, default=None, help="override the config seed")

    q = sub.add_parser("predict", help="predict a result bundle at new times")
    q.add_argument("--input", required=True, help="result directory")
    q.add_argument("--times", required=True,
                   help="comma list of times or a CSV whose first column is t0")
    q.add_argument("--out", default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--mode", choices=("plugin", "sample"), default="plugin")
    return p


def _write_lines(path, freqs, amps):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "frequency", "amplitude"])
        for k, (f, a) in enumerate(zip(freqs, amps), 1):
            w.writerow([k, f"{f:.12g}", f"{a:.12g}"])
    finally:
        if path:
            fh.close()


def _decompose(sig, args, out_dir=None):
    K = args.k
    if K < 1:
        raise UsageError("--k must be >= 1")
    sigma = args.sigma if getattr(args, "sigma", None) is not None else NopConfig(K=K).sigma
    cfg = NopConfig(K=K, J=getattr(args, "iters", 20), eps=getattr(args, "eps", 1e-4),
                    d=getattr(args, "degree", 1), seed=args.seed, sigma=sigma,
                    M=getattr(args, "inducing", 64),
                    patch=PatchPolicy(periods_per_patch=getattr(args, "periods_per_patch", 5.0)),
                    optimizer=OptimizerConfig(seed=args.seed))
    tracks, _ = INITIALIZERS[getattr(args, "init", "fft")](sig, K)
    res = run_nop(sig, cfg, NopInit(tracks))
    if out_dir is not None:
        save_result(res, sig.times, out_dir, cfg.kernel)
    return res


def _times_arg(s: str) -> np.ndarray:
    if os.path.exists(s):
        with open(s, newline="") as fh:
            rows = list(csv.reader(fh))
        return np.array([float(r[0]) for r in rows[1:] if r])
    return np.array([float(x) for x in s.split(",") if x.strip()])


def _run(args) -> int:
    if args.cmd == "generate":
        params = {}
        if args.n is not None:
            params["N"] = args.n
        if args.delta0 is not None:
            params["delta0"] = args.delta0
        ex = builtin_experiment_signal(args.signal, sigma=args.sigma, seed=args.seed, **params)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_signal_csv(args.out, ex.synthesize())
    elif args.cmd == "decompose":
        sig = read_signal_csv(args.input, args.fs)
        res = _decompose(sig, args, args.out)
        print(f"{args.out}: {res.iterations_used} iterations, converged={res.converged}")
    elif args.cmd == "superres":
        spec = None
        if args.spectrum:
            spec = {"music": lambda y: music_spectrum(y, args.k), "me": burg_spectrum,
                    "fft": periodogram}.get(args.method)
            if spec is None:
                raise UsageError(f"--spectrum is not available for method {args.method}")
        sig = read_signal_csv(args.input)
        if args.method == "nop":
            res = _decompose(sig, args)
            f = np.mean(res.inst_freq(sig.times), axis=0)
            a = np.mean(res.tracks.amp, axis=0)
            order = np.argsort(f)
            _write_lines(args.out, f[order], a[order])
        else:
            fn = {"music": music, "esprit": esprit, "fft": periodogram_peaks,
                  "me": lambda y, K: burg_me(y, K)[2]}[args.method]
            est = fn(sig.values, args.k).in_units("cycles/sample")
            amps = est.amplitudes
            if amps is None:
                amps = line_amplitudes(sig.values, est.frequencies)
            _write_lines(args.out, est.frequencies * sig.sample_rate, amps)
        if spec is not None:
            f, P = spec(sig.values)
            write_spectrum_csv(args.spectrum, f * sig.sample_rate, P)
    elif args.cmd == "experiment":
        spec = load_spec(args.config, args.seed)
        rep = run_experiment(spec)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = Path(args.out) / f"{spec.label}.csv"
        rep.write_csv(path)
        print(path)
    elif args.cmd == "predict":
        res, times = load_result(args.input)
        t0 = _times_arg(args.times)
        pg = predict_signal(t0, res, times, mode=args.mode, seed=args.seed)
        if args.out:
            write_prediction_csv(args.out, t0, pg)
        else:
            for t, m, v in zip(t0, pg.mean, pg.var):
                print(f"{t:.12g},{m:.12g},{v:.12g}")
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            return _run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
