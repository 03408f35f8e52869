import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nopdecomp.experiments as experiments
from nopdecomp.experiments import (
    CSV_HEADER,
    ExperimentSpec,
    aligned_phase_error,
    crossover_labels,
    frequency_error,
    label_accuracy,
    load_spec,
    match_components,
    run_experiment,
    shape_rmse,
)
from nopdecomp.signal_model import TWO_PI, cosine_shape

FAST_NOP = {"J": 2, "max_steps": 300, "M": 32}


def _key_counts(rep):
    counts = {}
    for exp, meth, point, real, met, val, tag in rep.rows:
        k = (meth, point, real, met)
        counts[k] = counts.get(k, 0) + 1
    return counts


# --------------------------------------------------------------------------
# metrics

@settings(max_examples=40)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_phase_error_ignores_global_constant(seed, c):
    r = np.random.default_rng(seed)
    true = np.cumsum(r.uniform(0.1, 0.5, 80))
    est = true + 0.05 * r.normal(size=80)
    np.testing.assert_allclose(aligned_phase_error(est + c, true + c), aligned_phase_error(est, true),
                               atol=1e-9)
    np.testing.assert_allclose(aligned_phase_error(est + c, true), aligned_phase_error(est, true),
                               atol=1e-9)


def test_phase_error_of_wrapped_copy_is_zero():
    true = np.linspace(0, 30, 50)
    np.testing.assert_allclose(aligned_phase_error(true + 4 * TWO_PI + 0.7, true), 0.0, atol=1e-12)


def test_anchored_phase_error_sees_drift():
    true = np.linspace(0, 30, 100)
    est = true + np.linspace(0, 0.4, 100)
    glob = aligned_phase_error(est, true)
    head = aligned_phase_error(est, true, slice(0, 10))
    assert glob[-1] == pytest.approx(0.2, abs=1e-3)
    assert head[-1] > 0.35 and head[0] < 0.05


@settings(max_examples=40)
@given(st.lists(st.floats(0, 50), min_size=2, max_size=5), st.randoms())
def test_frequency_error_relabeling(freqs, rnd):
    est = [f + 0.01 for f in freqs]
    perm = list(est)
    rnd.shuffle(perm)
    assert frequency_error(perm, freqs) == pytest.approx(frequency_error(est, freqs))
    assert frequency_error(perm, freqs, np.max) >= frequency_error(perm, freqs) - 1e-15


def test_match_components():
    t = np.linspace(0, 1, 50)
    true = np.column_stack([1 + t, 5 - t])
    est = true[:, ::-1]
    np.testing.assert_array_equal(match_components(est, true), [1, 0])
    np.testing.assert_array_equal(match_components(est, true, by="track"), [1, 0])


def test_shape_rmse_shift_invariant():
    s = cosine_shape()
    c = np.arange(200) / 200
    # shifts are searched on a 1/1024-cycle grid
    assert shape_rmse(s(c + 0.3), s) < 5e-3
    # shapes have unit RMS
    assert shape_rmse(np.zeros(200), s) == pytest.approx(1.0, rel=1e-9)


def test_labels_after_crossing():
    t = np.linspace(0, 1, 201)
    a, b = 2 + 4 * t, 6 - 4 * t
    bounced = np.vstack([np.minimum(a, b), np.maximum(a, b)])
    lab = crossover_labels(bounced)
    assert lab[:95].sum() == 0 and lab[106:].all()
    f_est = np.where(lab[:, None] == 1, bounced.T[:, ::-1], bounced.T)
    assert label_accuracy(f_est, np.column_stack([a, b]), t, 0.5) == 1.0
    assert label_accuracy(bounced.T, np.column_stack([a, b]), t, 0.5) < 0.6


# --------------------------------------------------------------------------
# specs and reports

def test_spec_validation():
    for bad in (dict(id="nope"), dict(id="fig1_gap_sweep", delta0=()),
                dict(id="fig1_gap_sweep", realizations=0), dict(id="fig1_gap_sweep", methods=("x",)),
                dict(id="custom"), dict(id="fig1_gap_sweep", nop={"bogus": 1})):
        with pytest.raises(ValueError):
            ExperimentSpec(**bad)


def test_nop_settings_per_noise():
    spec = ExperimentSpec("fig1_gap_sweep")
    assert spec.nop_settings(0.0)["sigma_model"] == experiments.NOISELESS_TRIG_SIGMA
    noisy = spec.nop_settings(0.35)
    assert noisy["sigma_model"] == 0.35 and noisy["alpha"] == experiments.NOISY_ALPHA
    assert ExperimentSpec("fig1_gap_sweep", shapes="eg").signal_id() == "f1_shape"
    assert ExperimentSpec("fig3_close_freq").nop_settings(1.0)["d"] == 2


def test_report_complete_and_deterministic():
    spec = ExperimentSpec("fig2_sample_sweep", sigma=(0.35,), N=(64, 128), realizations=2,
                          methods=("music", "esprit", "me", "fft", "ridge"), seed=3)
    a = run_experiment(spec, workers=1)
    b = run_experiment(spec, workers=1)
    assert a.rows == b.rows
    counts = _key_counts(a)
    assert set(counts.values()) == {1}
    for meth in spec.methods:
        for point in spec.grid():
            for real in (0, 1, "mean", "var"):
                for met in spec.metrics(meth):
                    assert (meth, point, real, met) in counts
    assert np.all(np.isfinite(a.values("music", "freq_err")))


def test_seed_changes_noise():
    spec = ExperimentSpec("fig2_sample_sweep", sigma=(0.35,), N=(64,), methods=("esprit",))
    a = run_experiment(spec, workers=1).values("esprit", "freq_err")
    b = run_experiment(ExperimentSpec("fig2_sample_sweep", sigma=(0.35,), N=(64,),
                                      methods=("esprit",), seed=1), workers=1).values("esprit", "freq_err")
    assert a[0] != b[0]


def test_single_realization_has_zero_variance():
    spec = ExperimentSpec("fig1_gap_sweep", delta0=(10 / 1024,), methods=("music", "nop"), nop=FAST_NOP)
    rep = run_experiment(spec, workers=1)
    var = [r[5] for r in rep.select(realization="var")]
    assert var and np.all(np.asarray(var) == 0.0)


def test_failure_becomes_nan(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("synthetic")

    monkeypatch.setattr(experiments, "music", boom)
    spec = ExperimentSpec("fig2_sample_sweep", N=(64,), realizations=2, methods=("music", "esprit"))
    rep = run_experiment(spec, workers=1)
    bad = rep.select(method="music", realization=0)
    assert bad and all(np.isnan(r[5]) and r[6] == "error:LinAlgError" for r in bad)
    assert rep.select(method="music", realization="mean")[0][6] == "failed:2"
    assert np.all(np.isfinite(rep.values("esprit", "freq_err")))


def test_pool_matches_serial():
    spec = ExperimentSpec("fig2_sample_sweep", sigma=(0.35,), N=(64,), realizations=2,
                          methods=("esprit", "fft"))
    assert run_experiment(spec, workers=2).rows == run_experiment(spec, workers=1).rows


def test_csv_layout(tmp_path):
    spec = ExperimentSpec("fig2_sample_sweep", N=(64,), methods=("esprit",))
    rep = run_experiment(spec, workers=1)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + len(rep.rows)
    assert lines[1].startswith("fig2_sample_sweep,esprit,0,0,64,0,freq_err,")


def test_crossover_cell_reports_labels():
    spec = ExperimentSpec("fig4_crossover", methods=("ridge",))
    rep = run_experiment(spec, workers=1)
    assert "label_acc" in {r[4] for r in rep.rows}


# --------------------------------------------------------------------------
# config files

def test_load_spec(tmp_path):
    p = tmp_path / "fig1.cfg"
    p.write_text("[experiment]\nid = fig1_gap_sweep\ndelta0 = 1/1024, 10/1024\nsigma = 0\n"
                 "N = 100\nrealizations = 3\nseed = 4\nmethods = nop, music\n\n"
                 "[nop]\nM = 64\ninit = tf\n")
    spec = load_spec(p)
    assert spec.delta0 == (1 / 1024, 10 / 1024)
    assert spec.methods == ("nop", "music") and spec.realizations == 3 and spec.seed == 4
    assert spec.nop == {"M": 64.0, "init": "tf"}
    assert spec.label == "fig1"
    assert load_spec(p, seed=9).seed == 9


@pytest.mark.parametrize("text", ["[other]\nid = x\n", "[experiment]\nid = fig1_gap_sweep\nfoo = 1\n",
                                  "[experiment]\nid = fig1_gap_sweep\n[nop]\nbar = 2\n"])
def test_load_spec_rejects(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ValueError):
        load_spec(p)


def test_load_spec_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_spec(tmp_path / "absent.cfg")
