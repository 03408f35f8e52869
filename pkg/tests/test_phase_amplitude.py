import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nopdecomp.gp_kernels import KernelParams
from nopdecomp.phase_amplitude import (
    AssociationError,
    OptimizerConfig,
    Patch,
    PatchFit,
    PatchFitError,
    PatchPolicy,
    StageOneResult,
    fit_patch,
    init_fit,
    make_patches,
    patch_objective,
    stitch_global,
)
from nopdecomp.shape_stage import inducing_from_shape, make_inducing
from nopdecomp.signal_model import (
    TWO_PI,
    ComponentSpec,
    SampledSignal,
    builtin_experiment_signal,
    cosine_shape,
    eg_shape,
    sine_shape,
    synthesize,
)


def _signal(y, fs=1.0):
    y = np.asarray(y, dtype=float)
    return SampledSignal(np.arange(y.size) / fs, y, fs)


def _whole(sig):
    return Patch((0, sig.n), sig.times, sig.values, 0.5 * (sig.times[0] + sig.times[-1]))


# --------------------------------------------------------------------------
# patches

def test_patch_length_from_policy():
    sig = _signal(np.zeros(100))
    ps = make_patches(sig, [0.1], PatchPolicy(periods_per_patch=5))
    assert {p.n for p in ps} == {50}
    covered = np.zeros(100, bool)
    for p in ps:
        covered[p.start:p.end] = True
    assert covered.all()


def test_zero_overlap_is_disjoint():
    sig = _signal(np.zeros(100))
    ps = make_patches(sig, [0.1], PatchPolicy(periods_per_patch=2, overlap_fraction=0.0))
    assert [p.index_range for p in ps] == [(0, 20), (20, 40), (40, 60), (60, 80), (80, 100)]


def test_short_record_gives_one_patch():
    sig = _signal(np.zeros(30))
    ps = make_patches(sig, [0.01, 0.2])
    assert len(ps) == 1 and ps[0].index_range == (0, 30)


@given(st.integers(8, 400), st.floats(0.01, 0.45), st.floats(0.5, 20), st.floats(0, 0.9))
def test_patches_cover_and_overlap(n, f, periods, overlap):
    sig = _signal(np.zeros(n))
    ps = make_patches(sig, [f], PatchPolicy(periods, overlap))
    covered = np.zeros(n, bool)
    for p in ps:
        covered[p.start:p.end] = True
        assert 2 <= p.n <= n
        assert p.t_center == pytest.approx(0.5 * (p.times[0] + p.times[-1]))
    assert covered.all()
    starts = [p.start for p in ps]
    assert starts == sorted(starts)


def test_bad_hint():
    with pytest.raises(ValueError):
        make_patches(_signal(np.zeros(10)), [0.0])
    with pytest.raises(ValueError):
        PatchPolicy(overlap_fraction=1.0)


# --------------------------------------------------------------------------
# objective

def test_zero_objective():
    sig = _signal(np.zeros(40))
    ind = [inducing_from_shape(cosine_shape())]
    v, gB, gC = patch_objective(_whole(sig), np.zeros((2, 1)), np.array([[0.3], [0.5]]), ind)
    assert v == 0.0
    assert not np.any(gB) and not np.any(gC)


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.integers(1, 2), st.integers(0, 2))
def test_objective_gradient_fd(seed, K, d):
    r = np.random.default_rng(seed)
    n = 40
    sig = _signal(r.normal(size=n))
    pt = _whole(sig)
    ind = [inducing_from_shape(eg_shape(k + 1), M=64, kernel=KernelParams(alpha=300.0))
           for k in range(K)]
    B = r.normal(size=(d + 1, K))
    C = r.normal(size=(d + 1, K)) * 0.1 ** np.arange(d + 1)[:, None]
    C[min(d, 1)] += 0.3
    _, gB, gC = patch_objective(pt, B, C, ind)
    # phase steps stay below 1e-6 rad: a larger move can carry a sample across
    # the period wrap, where the SE shape is only periodic to ~1e-7
    tau_max = np.max(np.abs(pt.times - pt.t_center))

    def fd(X, which):
        g = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            h = 1e-6 * max(1.0, abs(X[idx]))
            if which == "C":
                h /= max(1.0, tau_max) ** idx[0]
            Xp, Xm = X.copy(), X.copy()
            Xp[idx] += h
            Xm[idx] -= h
            args = (Xp, C) if which == "B" else (B, Xp)
            argm = (Xm, C) if which == "B" else (B, Xm)
            g[idx] = (patch_objective(pt, *args, ind)[0] - patch_objective(pt, *argm, ind)[0]) / (2 * h)
        return g

    for g, ref in ((gB, fd(B, "B")), (gC, fd(C, "C"))):
        assert np.linalg.norm(g - ref) <= 1e-5 * max(np.linalg.norm(ref), 1.0)


def test_truth_gives_tiny_objective():
    n = 200
    t = np.arange(n) / 50.0
    y = 1.3 * sine_shape().at_phase(TWO_PI * (2.0 * t + 0.1))
    sig = SampledSignal(t, y, 50.0)
    pt = _whole(sig)
    ind = [inducing_from_shape(sine_shape(), M=128)]
    # phase in centered time: 2 pi (2 (tau + tc) + 0.1)
    tc = pt.t_center
    C = np.array([[TWO_PI * (2.0 * tc + 0.1)], [TWO_PI * 2.0]])
    v, _, _ = patch_objective(pt, np.array([[1.3]]), C, ind)
    assert v < 1e-10 * n


@pytest.mark.parametrize("kind,tol", [("periodic", 1e-10), ("se", 1e-6)])
def test_shift_reparametrization(kind, tol):
    # (phi + c, s shifted by -c) leaves the objective unchanged. A shift by
    # whole grid steps acts exactly on the inducing values; the periodic
    # kernel on one period is exactly shift-symmetric, the SE interpolant on
    # two periods only up to its edge error near the wrap point.
    r = np.random.default_rng(3)
    n = 80
    sig = _signal(r.normal(size=n))
    pt = _whole(sig)
    if kind == "periodic":
        M, per = 32, 32
        ind = inducing_from_shape(eg_shape(1), M=M, L=1.0, kernel=KernelParams.periodic([3.0]))
    else:
        M = 128
        per = M // 2
        ind = inducing_from_shape(eg_shape(1), M=M)
    B = np.array([[0.8], [0.01]])
    C = np.array([[0.4], [0.35]])
    v0 = patch_objective(pt, B, C, [ind])[0]
    for j in (1, 5, 17):
        c = TWO_PI * j / per
        shifted = ind.with_values(np.roll(ind.alpha_u, j))
        v1 = patch_objective(pt, B, C + np.array([[c], [0.0]]), [shifted])[0]
        assert abs(v1 - v0) < tol * max(1.0, v0)


# --------------------------------------------------------------------------
# fit

def test_fit_recovers_sinusoid():
    n, f = 120, 0.07
    t = np.arange(n, dtype=float)
    sig = SampledSignal(t, 0.9 * cosine_shape().at_phase(TWO_PI * f * t + 0.3), 1.0)
    pt = _whole(sig)
    ind = [inducing_from_shape(cosine_shape(), M=128)]
    init = PatchFit(np.array([[0.5]]), np.array([[0.0], [TWO_PI * f * 1.08]]), d=1)
    fit = fit_patch(pt, init, ind, opt=OptimizerConfig(max_steps=4000))
    assert fit.C[1, 0] == pytest.approx(TWO_PI * f, rel=1e-4)
    # (-B, phi + pi) is the same model for a half-wave symmetric shape
    assert abs(fit.B[0, 0]) == pytest.approx(0.9, rel=1e-3)


def test_fit_zero_signal_returns_init():
    sig = _signal(np.zeros(50))
    init = PatchFit(np.zeros((1, 1)), np.array([[0.2], [0.4]]), d=1)
    fit = fit_patch(_whole(sig), init, [inducing_from_shape(cosine_shape())])
    np.testing.assert_array_equal(fit.B, init.B)
    np.testing.assert_array_equal(fit.C, init.C)
    assert fit.converged and fit.residual == 0.0


def test_fit_two_tones():
    ex = builtin_experiment_signal("f2", N=1024)
    sig = ex.synthesize()
    pt = _whole(sig)
    ind = [inducing_from_shape(sine_shape(), M=128, kernel=KernelParams(alpha=100.0))
           for _ in range(2)]
    init = PatchFit(np.full((1, 2), 0.3), np.array([[0.0, 0.0], [0.098, 0.153]]), d=1)
    fit = fit_patch(pt, init, ind, opt=OptimizerConfig(max_steps=3000))
    np.testing.assert_allclose(np.sort(fit.C[1]), [0.1, 0.15], atol=1e-4)


def test_fit_never_increases_objective():
    r = np.random.default_rng(5)
    t = np.arange(60, dtype=float)
    y = np.cos(0.5 * t) + 0.3 * r.normal(size=60)
    pt = _whole(_signal(y))
    ind = [inducing_from_shape(cosine_shape())]
    init = PatchFit(np.array([[0.7]]), np.array([[1.0], [0.45]]), d=1)
    v0 = patch_objective(pt, init.B, init.C, ind)[0]
    fit = fit_patch(pt, init, ind, opt=OptimizerConfig(max_steps=300, restarts=2))
    assert fit.residual <= v0
    assert fit.history[-1] <= fit.history[0]


def test_amplitude_homogeneity():
    r = np.random.default_rng(11)
    t = np.arange(80, dtype=float)
    y = np.cos(0.4 * t + 0.2) + 0.2 * r.normal(size=80)
    ind = [inducing_from_shape(cosine_shape())]
    init = PatchFit(np.array([[0.5]]), np.array([[0.0], [0.41]]), d=1)
    opt = OptimizerConfig(max_steps=400, restarts=1, scan=0)
    f1 = fit_patch(_whole(_signal(y)), init, ind, opt=opt)
    f2 = fit_patch(_whole(_signal(2 * y)), PatchFit(2 * init.B, init.C, 1), ind, opt=opt)
    assert f2.residual == pytest.approx(4 * f1.residual, rel=1e-8)


def test_all_restarts_diverge():
    t = np.arange(20, dtype=float)
    pt = Patch((0, 20), t, np.full(20, np.nan), 9.5)
    init = PatchFit(np.ones((1, 1)), np.array([[0.0], [0.5]]), d=1)
    with pytest.raises(PatchFitError) as exc:
        fit_patch(pt, init, [inducing_from_shape(cosine_shape())])
    assert exc.value.state is init


def test_fit_rejects_nonpositive_init():
    pt = _whole(_signal(np.ones(20)))
    with pytest.raises(ValueError):
        fit_patch(pt, PatchFit(np.ones((1, 1)), np.array([[0.0], [-0.1]]), d=1),
                  [inducing_from_shape(cosine_shape())])


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(step_size=0.0)
    with pytest.raises(ValueError):
        PatchFit(np.ones((1, 1)), np.ones((2, 1)), d=3)


# --------------------------------------------------------------------------
# stitching

def _chirp_tracks(t, f0=0.05, rate=2e-4):
    return TWO_PI * (f0 * t + 0.5 * rate * t ** 2)


def _exact_fits(patches, phi_fn, amp=1.0, jumps=()):
    """Degree-2 fits reproducing ``phi_fn`` exactly, with 2 pi jumps per patch."""
    fits = []
    for i, p in enumerate(patches):
        c = np.polynomial.polynomial.polyfit(p.tau, phi_fn(p.times), 2)
        c[0] += TWO_PI * (jumps[i] if i < len(jumps) else 0)
        fits.append(PatchFit(np.array([[amp]]), c[:, None], d=2))
    return fits


def test_single_patch_is_polynomial():
    t = np.arange(50, dtype=float)
    sig = _signal(np.zeros(50))
    pt = _whole(sig)
    fit = PatchFit(np.array([[1.0], [0.01]]), np.array([[0.3], [0.4], [1e-3]]), d=2)
    res = stitch_global([fit], [pt], sig)
    np.testing.assert_allclose(res.phi[:, 0], fit.phase(pt.tau)[:, 0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.amp[:, 0], fit.amp(pt.tau)[:, 0], rtol=0, atol=1e-12)
    del t


def test_seam_continuity_on_chirp():
    n = 300
    t = np.arange(n, dtype=float)
    sig = _signal(np.cos(_chirp_tracks(t)))
    patches = make_patches(sig, [0.05], PatchPolicy(periods_per_patch=5, overlap_fraction=0.5))
    assert len(patches) > 2
    fits = _exact_fits(patches, _chirp_tracks, jumps=(0, 3, -2, 5, 1, 4, 0, 2))
    res = stitch_global(fits, patches, sig)
    truth = _chirp_tracks(t)
    assert np.max(np.abs(res.phi[:, 0] - truth)) < 1e-6


def test_constant_frequency_has_zero_variance():
    n = 200
    t = np.arange(n, dtype=float)
    sig = _signal(np.cos(0.3 * t))
    patches = make_patches(sig, [0.3 / TWO_PI], PatchPolicy(periods_per_patch=4))
    fits = _exact_fits(patches, lambda tt: 0.3 * tt)
    res = stitch_global(fits, patches, sig)
    assert np.max(res.phi_var) < 1e-10
    assert np.max(res.amp_var) < 1e-10


@settings(max_examples=25)
@given(st.integers(0, 10**6))
def test_stitched_phase_monotone(seed):
    r = np.random.default_rng(seed)
    n = 160
    sig = _signal(r.normal(size=n))
    patches = make_patches(sig, [0.05], PatchPolicy(periods_per_patch=3, overlap_fraction=0.3))
    fits = []
    for p in patches:
        rate = r.uniform(0.1, 1.0, size=2)
        rate.sort()
        rate[1] += 0.5
        C = np.vstack([r.uniform(0, TWO_PI, 2), rate])
        fits.append(PatchFit(np.abs(r.normal(size=(1, 2))), C, d=1))
    res = stitch_global(fits, patches, sig)
    assert np.all(np.diff(res.phi, axis=0) >= 0)
    assert np.all(res.amp >= 0) and np.all(res.phi_var >= 0)


def test_labels_follow_nearest_frequency():
    n = 120
    sig = _signal(np.zeros(n))
    patches = make_patches(sig, [0.05], PatchPolicy(periods_per_patch=3, overlap_fraction=0.5))
    fits = []
    for i, p in enumerate(patches):
        # globally consistent phases 0.3 t and 0.9 t, labels swapped on odd patches
        C = np.array([[0.3 * p.t_center, 0.9 * p.t_center], [0.3, 0.9]])
        if i % 2:
            C = C[:, ::-1]
        fits.append(PatchFit(np.ones((1, 2)), C, d=1))
    res = stitch_global(fits, patches, sig, smooth=False)
    f = res.inst_freq(sig.times) * TWO_PI
    np.testing.assert_allclose(f[:, 0], 0.3, atol=1e-9)
    np.testing.assert_allclose(f[:, 1], 0.9, atol=1e-9)


def test_association_tie():
    sig = _signal(np.zeros(60))
    patches = make_patches(sig, [0.1], PatchPolicy(periods_per_patch=3))
    fits = [PatchFit(np.ones((1, 2)), np.array([[0.0, 1.0], [0.5, 0.5]]), d=1) for _ in patches]
    with pytest.raises(AssociationError):
        stitch_global(fits, patches, sig)


def test_stage_one_result_invariants():
    with pytest.raises(ValueError):
        StageOneResult.from_tracks([0.0, 1.0, 0.5], [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        StageOneResult.from_tracks([0.0, 1.0, 2.0], [1.0, -1.0, 1.0])
    r = StageOneResult.from_tracks(np.outer(np.arange(5.0), [1.0, 2.0]), np.ones((5, 2)))
    assert r.K == 2 and r.n == 5
    np.testing.assert_allclose(r.inst_freq(np.arange(5.0)) * TWO_PI, [[1.0, 2.0]] * 5)


def test_init_fit_reproduces_polynomial_tracks():
    t = np.arange(40, dtype=float)
    phi = np.column_stack([0.2 * t + 1e-3 * t ** 2, 0.5 * t])
    tracks = StageOneResult.from_tracks(phi, np.ones_like(phi))
    sig = _signal(np.zeros(40))
    pt = _whole(sig)
    fit = init_fit(pt, tracks, 2, 0)
    np.testing.assert_allclose(fit.phase(pt.tau), phi, atol=1e-9)


def test_synthetic_component_roundtrip():
    # objective at the generating parameters of a two-component signal is ~0
    t = np.arange(150) / 30.0
    comps = [ComponentSpec(1.0, [0.0, TWO_PI * 1.1], eg_shape(1)),
             ComponentSpec(0.6, [0.0, TWO_PI * 2.3], eg_shape(2))]
    sig = synthesize(comps, t)
    pt = _whole(sig)
    ind = [inducing_from_shape(eg_shape(1), M=128), inducing_from_shape(eg_shape(2), M=128)]
    tc = pt.t_center
    C = np.array([[TWO_PI * 1.1 * tc, TWO_PI * 2.3 * tc], [TWO_PI * 1.1, TWO_PI * 2.3]])
    v, _, _ = patch_objective(pt, np.array([[1.0, 0.6]]), C, ind)
    assert v < 1e-8 * t.size
    assert make_inducing(8).M == 8
