import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nopdecomp.signal_model import (
    EXPERIMENT_IDS,
    ComponentSpec,
    NoiseSpec,
    SampledSignal,
    ShapeFunction,
    builtin_experiment_signal,
    cosine_shape,
    eg_shape,
    eval_shape,
    normalize_shape,
    read_signal_csv,
    sine_shape,
    synthesize,
    write_signal_csv,
)

# direct Fourier sums of the stand-in coefficients at t = 0.25
EG1_AT_QUARTER = -0.7544335361543177
EG2_AT_QUARTER = 0.5827715174143585

coeffs = st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=5)


@st.composite
def shapes(draw):
    c = draw(coeffs)
    d = draw(coeffs)
    if 0.5 * (np.sum(np.square(c)) + np.sum(np.square(d))) < 1e-6:
        c = c + [1.0]
    return normalize_shape(c, d)


def test_sine_at_origin():
    assert eval_shape(sine_shape(), 0.0) == 0.0


def test_normalize_examples():
    s = normalize_shape([], [1])
    np.testing.assert_allclose(s.sin_coeffs, [np.sqrt(2)], rtol=1e-15)
    s = normalize_shape([2], [])
    np.testing.assert_allclose(s.cos_coeffs, [np.sqrt(2)], rtol=1e-15)
    s = normalize_shape([1, 0.5], [0, 0.3])
    k = 1.2216944435630521  # 1/sqrt((1 + 0.25 + 0.09)/2)
    np.testing.assert_allclose(s.cos_coeffs, [k, 0.5 * k], rtol=1e-14)
    np.testing.assert_allclose(s.sin_coeffs, [0, 0.3 * k], rtol=1e-14)


def test_degenerate_shape():
    with pytest.raises(ValueError, match="degenerate shape"):
        normalize_shape([0, 0], [0])


def test_unnormalized_rejected():
    with pytest.raises(ValueError):
        ShapeFunction([1.0], [0.0])


def test_eg_stand_ins_at_quarter():
    assert eval_shape(eg_shape(1), 0.25) == pytest.approx(EG1_AT_QUARTER, abs=1e-14)
    assert eval_shape(eg_shape(2), 0.25) == pytest.approx(EG2_AT_QUARTER, abs=1e-14)
    assert eg_shape(1).harmonics >= 3 and eg_shape(2).harmonics >= 3


@given(shapes(), st.floats(-50, 50, allow_nan=False))
def test_periodic(s, t):
    assert eval_shape(s, t + 1) - eval_shape(s, t) == pytest.approx(0, abs=1e-12)


@given(shapes())
def test_zero_mean_unit_norm(s):
    g = np.arange(4096) / 4096
    v = eval_shape(s, g)
    assert abs(v.mean()) < 1e-10
    assert np.mean(v * v) == pytest.approx(1.0, rel=1e-10)


@given(shapes(), st.floats(-1, 1, allow_nan=False))
def test_shift(s, delta):
    g = np.linspace(0, 1, 33)
    np.testing.assert_allclose(s.shifted(delta)(g), s(g + delta), atol=1e-12)


def test_f1_at_zero():
    ex = builtin_experiment_signal("f1_cos")
    assert ex.synthesize().values[0] == pytest.approx(1.0, abs=1e-15)


def test_zero_amplitude_signal():
    comps = [ComponentSpec(0.0, [0, 1.0], eg_shape(1)), ComponentSpec(0.0, [0, 2.0], sine_shape())]
    y = synthesize(comps, np.arange(50) / 10.0).values
    assert np.all(y == 0)


def test_f2_matches_sines():
    ex = builtin_experiment_signal("f2", N=64)
    t = ex.times
    np.testing.assert_allclose(ex.synthesize().values,
                               0.5 * np.sin(0.1 * t) + np.sin(0.15 * t), atol=1e-13)


def test_builtin_parameters():
    ex = builtin_experiment_signal("f1_cos", delta0=10 / 1024)
    np.testing.assert_allclose(ex.params["freqs"], (38.8 / 1024, 48.8 / 1024), rtol=1e-15)
    assert ex.sample_rate == 1.0 and ex.times.size == 100
    f2 = builtin_experiment_signal("f2", N=64)
    assert f2.times.size == 64 and f2.sample_rate == 1.0
    f6 = builtin_experiment_signal("f6", sigma=0.2)
    assert f6.sample_rate == 100.0 and f6.times.size == 100
    assert f6.noise.sigma == 0.2 and f6.noise.kind == "additive_gaussian"
    np.testing.assert_allclose(f6.params["freqs"], (3.88 / 1.024, 4.88 / 1.024))
    for name in EXPERIMENT_IDS:
        assert builtin_experiment_signal(name).K == 2


def test_unknown_id():
    with pytest.raises(ValueError):
        builtin_experiment_signal("f7")


def test_nonmonotone_phase():
    comps = [ComponentSpec(1.0, [0, -1.0], sine_shape())]
    with pytest.raises(ValueError):
        synthesize(comps, np.arange(10.0))


def test_noise_spec_invariant():
    with pytest.raises(ValueError):
        NoiseSpec("none", 0.1)
    with pytest.raises(ValueError):
        NoiseSpec("additive_gaussian", 0.0)


@given(st.integers(0, 2**63 - 1))
def test_seeded_reproducible(seed):
    ex = builtin_experiment_signal("f6", sigma=0.2, seed=seed)
    a, b = ex.synthesize().values, ex.synthesize().values
    assert a.tobytes() == b.tobytes()


def test_noiseless_bit_reproducible():
    ex = builtin_experiment_signal("f3_shape", delta0=0.1)
    assert ex.synthesize().values.tobytes() == ex.synthesize().values.tobytes()


@given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0, 6.3))
def test_superposition(w1, w2, p):
    t = np.arange(64) / 16.0
    c1 = ComponentSpec(lambda t: 1 + 0.1 * t, [p, w1], eg_shape(1), phase_unit="cycles")
    c2 = ComponentSpec(0.7, [0, w2], cosine_shape(), phase_unit="cycles")
    both = synthesize([c1, c2], t).values
    parts = synthesize([c1], t).values + synthesize([c2], t).values
    np.testing.assert_allclose(both, parts, atol=1e-13)


def test_phase_noise_literal():
    comps = [ComponentSpec(1.0, [0, 0.1], sine_shape(), phase_unit="cycles")]
    t = np.arange(2000.0)
    y = synthesize(comps, t, NoiseSpec("phase_uniform", 1.0, 3)).values
    # a full-range uniform phase draw leaves no coherent component
    assert abs(np.mean(y * np.sqrt(2) * np.sin(2 * np.pi * 0.1 * t))) < 0.1


def test_csv_roundtrip(tmp_path):
    sig = builtin_experiment_signal("f6", sigma=0.2, seed=4).synthesize()
    p = tmp_path / "s.csv"
    write_signal_csv(p, sig)
    back = read_signal_csv(p)
    assert back.values.tobytes() == sig.values.tobytes()
    assert back.sample_rate == pytest.approx(100.0)
    assert p.read_text().splitlines()[0] == "t,y"


def test_csv_bad_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("time,value\n0,1\n1,2\n")
    with pytest.raises(ValueError):
        read_signal_csv(p)


def test_sampled_signal_validation():
    with pytest.raises(ValueError):
        SampledSignal(np.array([0.0, 0.0]), np.array([1.0, 2.0]), 1.0)
    with pytest.raises(ValueError):
        SampledSignal(np.array([0.0, 1.0]), np.array([1.0, np.nan]), 1.0)
    assert SampledSignal.uniform(np.zeros(8), 4.0).is_uniform
