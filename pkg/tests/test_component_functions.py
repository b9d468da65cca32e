import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfattn.component_functions import (
    RBF,
    SOFTMAX,
    ComponentFunctionSpec,
    FeatureMap,
    Kind,
    Role,
    apply_feature_map,
    build_feature_map,
    derive_oprf_A,
    estimate_norm_stat,
    estimate_psi,
    gerf,
    posrf_b,
    posrf_hyp,
    rbf_kernel,
    saderf,
    softmax_kernel,
    trigrf,
)
from rfattn.errors import ContractError, DomainError, NumericalFailure, ShapeError, UnsupportedParametersError, ValidationError
from rfattn.numerics import RngStream, gaussian
from rfattn.weight_matrices import WeightMatrixSpec, build_weight_matrix

KINDS = list(Kind)


def wm(family="base", s=64, d=4, sigma=1.0, seed=0):
    return build_weight_matrix(WeightMatrixSpec(family, s, d, sigma, seed))


def fmap(kind, family="base", s=64, d=4, sigma=1.0, seed=0, target=None, **params):
    if kind in (Kind.OPRF, "oprf") and "gerf_A" not in params:
        params["gerf_A"] = -0.05
    if kind in (Kind.SADERF, "saderf"):
        params.setdefault("gerf_A", -0.05)
        params.setdefault("psi", np.linspace(0.8, 1.2, d))
    return build_feature_map(wm(family, s, d, sigma, seed), kind, target, **params)


def ball_pairs(n, d, seed, radius=1.0):
    g = RngStream(seed).generator()
    X, Y = g.standard_normal((n, d)), g.standard_normal((n, d))
    X *= radius * g.uniform(0, 1, (n, 1)) / np.linalg.norm(X, axis=1, keepdims=True)
    Y *= radius * g.uniform(0, 1, (n, 1)) / np.linalg.norm(Y, axis=1, keepdims=True)
    return X, Y


# --------------------------------------------------------- exact kernels


def test_exact_kernel_examples():
    x = np.array([0.3, -1.2, 0.5])
    assert rbf_kernel(x, x, 0.7) == 1.0
    assert softmax_kernel(x, np.zeros(3), 4) == 1.0
    y = np.array([1.0, 0.1, -0.4])
    assert abs(rbf_kernel(x, y) - math.exp(-np.sum((x - y) ** 2) / 2)) < 1e-15
    assert abs(softmax_kernel(x, y, 9) - math.exp(x @ y / 3)) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_softmax_rbf_bridge_identity(seed, d_k):
    g = RngStream(seed).generator()
    x, y = g.standard_normal(5), g.standard_normal(5)
    xs, ys = x / d_k**0.25, y / d_k**0.25
    bridged = math.exp(xs @ xs / 2) * rbf_kernel(xs, ys) * math.exp(ys @ ys / 2)
    assert abs(softmax_kernel(x, y, d_k) - bridged) <= 1e-12 * max(1.0, bridged)


def test_exact_kernels_vectorized():
    X, Y = ball_pairs(6, 3, 1)
    assert np.allclose(rbf_kernel(X, Y), [rbf_kernel(x, y) for x, y in zip(X, Y)], rtol=1e-15)
    assert np.allclose(softmax_kernel(X, Y, 2), [softmax_kernel(x, y, 2) for x, y in zip(X, Y)], rtol=1e-15)


# ------------------------------------------------------------ raw maps


def test_trigrf_values():
    W = gaussian(RngStream(0), (16, 3))
    phi = trigrf(W, np.zeros(16), np.zeros(3))
    assert phi.shape == (32,)
    assert np.allclose(phi[:16], 1 / math.sqrt(16)) and np.allclose(phi[16:], 0)
    x = gaussian(RngStream(1), 3)
    b = RngStream(2).generator().uniform(0, 2 * math.pi, 16)
    assert abs(trigrf(W, b, x) @ trigrf(W, b, x) - 1.0) < 1e-14


def test_posrf_values():
    W = gaussian(RngStream(0), (16, 3))
    assert np.allclose(posrf_b(W, np.zeros(3)), 0.25)
    assert np.allclose(posrf_hyp(W, np.zeros(3)), 1 / math.sqrt(32))
    x = gaussian(RngStream(1), 3) * 3
    assert np.all(posrf_b(W, x) > 0) and np.all(posrf_hyp(W, x) > 0)
    h, hm = posrf_hyp(W, x), posrf_hyp(W, -x)
    assert np.allclose(h[:16], hm[16:], rtol=1e-15) and np.allclose(h[16:], hm[:16], rtol=1e-15)


def test_gerf_specializes_to_posrf_family():
    W = gaussian(RngStream(0), (32, 4))
    x = gaussian(RngStream(1), 4) * 0.5
    # A=0: B=1, C=-1, D=1, i.e. exp(w.x - |x|^2) = posrf_b(w, x) * exp(-|x|^2 / 2).
    assert np.allclose(gerf(W, x, 0.0), posrf_b(W, x) * math.exp(-0.5 * x @ x), rtol=1e-14)
    assert np.allclose(gerf(W, x, 0.0, role=Role.KEY), gerf(W, x, 0.0), rtol=0)
    hyp = posrf_hyp(W, x) * math.sqrt(2)
    assert np.allclose(gerf(W, x, 0.0), hyp[:32], rtol=1e-14)
    assert np.allclose(gerf(W, -x, 0.0), hyp[32:], rtol=1e-14)


def test_gerf_at_zero_input():
    W = gaussian(RngStream(3), (8, 2))
    A = 0.1
    want = math.sqrt(0.6) * np.exp(A * np.sum(W**2, axis=1)) / math.sqrt(8)
    assert np.allclose(gerf(W, np.zeros(2), A), want, rtol=1e-14)


def test_gerf_D_monotone():
    W = np.zeros((1, 3))
    vals = [gerf(W, np.zeros(3), A)[0] for A in np.linspace(-1, 0.2499, 50)]
    assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-2


def test_gerf_rejects_complex_branch():
    W = np.ones((2, 2))
    with pytest.raises(UnsupportedParametersError):
        gerf(W, np.zeros(2), 0.0, sign=-1)
    with pytest.raises(ValidationError):
        gerf(W, np.zeros(2), 0.25)


def test_saderf_identity_psi_is_oprf():
    W = gaussian(RngStream(0), (16, 3))
    x = gaussian(RngStream(1), 3)
    for role in Role:
        assert np.array_equal(saderf(W, x, np.ones(3), role, -0.1), gerf(W, x, -0.1, role=role))
    psi = np.array([2.0, 0.5, 1.0])
    assert np.allclose(saderf(W, x, psi, Role.QUERY, -0.1), gerf(W, psi * x, -0.1), rtol=1e-15)
    assert np.allclose(saderf(W, x, psi, Role.KEY, -0.1), gerf(W, x / psi, -0.1, role=Role.KEY), rtol=1e-15)


# ----------------------------------------------------- OPRF / SADERF stats


def test_derive_oprf_A_example():
    mpmath.mp.dps = 50
    p = (mpmath.sqrt(68) - 6) / 4
    A_ref = float((1 - 1 / p) / 8)
    assert abs(float(p) - 0.5616) < 1e-4
    assert abs(derive_oprf_A(1.0, 4) - A_ref) < 1e-15
    # Four significant figures: -0.09760 (closed form gives -0.0975970...).
    assert abs(derive_oprf_A(1.0, 4) - (-0.09760)) < 5e-6


def test_derive_oprf_A_matches_textbook_formula():
    mpmath.mp.dps = 60
    for n in (1e-6, 0.3, 7.0, 1e3, 1e6):
        for d in (1, 16, 1024):
            n_, d_ = mpmath.mpf(n), mpmath.mpf(d)
            p = (mpmath.sqrt((2 * n_ + d_) ** 2 + 8 * d_ * n_) - 2 * n_ - d_) / (4 * n_)
            A_ref = float((1 - 1 / p) / 8)
            assert abs(derive_oprf_A(n, d) - A_ref) <= 1e-12 * max(1.0, abs(A_ref))


def test_derive_oprf_A_large_norm_limit():
    # p* -> d / (2n) as n -> infinity, so A ~ -n / (4d): the bound 1 - 4A > 0 holds trivially.
    for d in (1, 8):
        n = 1e12
        assert abs(derive_oprf_A(n, d) / (-(n / (4 * d))) - 1) < 1e-3


def test_derive_oprf_A_sweep():
    for n in np.logspace(-8, 6, 80):
        for d in (1, 2, 7, 64, 1024):
            A = derive_oprf_A(float(n), d)
            assert 1 - 4 * A > 0 and A < 1 / 8


@pytest.mark.parametrize("n", [0.0, -1.0, float("inf"), float("nan")])
def test_derive_oprf_A_domain(n):
    with pytest.raises(DomainError):
        derive_oprf_A(n, 4)


def test_estimate_norm_stat():
    assert estimate_norm_stat(np.zeros((1, 3)), np.zeros((1, 3))) == 1e-8
    u = np.array([[0.5, -2.0, 1.0]])
    assert estimate_norm_stat(u, u) == 4 * float(u[0] @ u[0])
    for seed in range(5):
        g = RngStream(seed).generator()
        Q, K = g.standard_normal((4, 3)), g.standard_normal((4, 3)) + 0.5
        brute = np.mean([np.sum((q + k) ** 2) for q in Q for k in K])
        assert abs(estimate_norm_stat(Q, K) - brute) <= 1e-12 * brute
        Qc, Kc = Q - Q.mean(0), K - K.mean(0)
        brute_c = np.mean([np.sum((q + k) ** 2) for q in Qc for k in Kc])
        assert abs(estimate_norm_stat(Qc, Kc) - brute_c) <= 1e-12 * brute_c


def test_estimate_psi():
    Q = gaussian(RngStream(0), (10, 4))
    assert np.array_equal(estimate_psi(Q, Q), np.ones(4))
    assert np.allclose(estimate_psi(Q, 4 * Q), 2.0, rtol=1e-15)
    Qz = Q.copy()
    Qz[:, 1] = 0
    psi = estimate_psi(Qz, Q)
    assert np.all(np.isfinite(psi)) and psi[1] > 1


# ---------------------------------------------------------- feature map


def test_spec_validation():
    with pytest.raises(ValidationError):
        ComponentFunctionSpec("nope")
    with pytest.raises(ValidationError):
        ComponentFunctionSpec("gerf", gerf_A=0.25)
    with pytest.raises(ValidationError):
        ComponentFunctionSpec("trigrf", trig_offsets=np.array([7.0]))
    with pytest.raises(ValidationError):
        ComponentFunctionSpec("saderf", psi=np.array([1.0, 0.0]))
    with pytest.raises(ValidationError):
        ComponentFunctionSpec("gerf", gerf_sign=0)


def test_feature_map_validation():
    with pytest.raises(ValidationError):
        FeatureMap(wm(s=8), ComponentFunctionSpec("trigrf"))
    with pytest.raises(ValidationError):
        fmap("saderf", target=RBF)
    with pytest.raises(ValidationError):
        fmap("posrf", target="laplace")
    with pytest.raises(ContractError):
        build_feature_map(wm(), "oprf").apply(np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        fmap("posrf").apply(np.zeros((1, 5)))


@pytest.mark.parametrize("kind", KINDS)
def test_feature_map_shapes(kind):
    fm = fmap(kind, s=24, d=5, family="sorf")
    assert fm.output_dim == fm.num_components * 24
    assert fm.num_components == (2 if kind in (Kind.TRIGRF, Kind.POSRF_HYP) else 1)
    assert fm.component_weight == 1.0 and fm.dim == 5
    out = fm.apply(gaussian(RngStream(0), (3, 5)), Role.QUERY)
    assert out.values.shape == (3, fm.output_dim) and out.log_scale.shape == (3,)


@pytest.mark.parametrize("kind", KINDS)
def test_single_row_matches_raw_operation(kind):
    fm = fmap(kind, s=16, d=3, target=None if kind is Kind.SADERF else (RBF if kind is not Kind.POSRF else SOFTMAX))
    x = gaussian(RngStream(5), 3) * 0.7
    W = fm.weight_matrix.rows
    c = fm.component
    raw = {
        Kind.TRIGRF: lambda r: trigrf(W, c.trig_offsets, x),
        Kind.POSRF: lambda r: posrf_b(W, x),
        Kind.POSRF_HYP: lambda r: posrf_hyp(W, x),
        Kind.GERF: lambda r: gerf(W, x, 0.0, role=r),
        Kind.OPRF: lambda r: gerf(W, x, c.gerf_A, role=r),
        Kind.SADERF: lambda r: saderf(W, x, c.psi, r, c.gerf_A),
    }[kind]
    for role in Role:
        dense = fm(x[None], role)[0]
        want = raw(role)
        if kind is Kind.SADERF:  # softmax bridge folds exp(|psi-scaled x|^2 / 2) in
            xt = x * c.psi if role is Role.QUERY else x / c.psi
            want = want * math.exp(0.5 * xt @ xt)
        assert np.allclose(dense, want, rtol=1e-13, atol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_rows_are_independent(kind):
    fm = fmap(kind, s=16, d=3)
    X = gaussian(RngStream(1), (7, 3))
    perm = np.array([3, 0, 6, 1, 5, 2, 4])
    a, b = fm(X), fm(X[perm])
    assert np.allclose(a[perm], b, rtol=1e-14)


@pytest.mark.parametrize("kind", [k for k in KINDS if k is not Kind.TRIGRF])
def test_positive_kinds_are_positive(kind):
    fm = fmap(kind, s=32, d=4)
    X = gaussian(RngStream(2), (20, 4)) * 3
    for role in Role:
        assert np.all(fm.apply(X, role).values > 0)


def test_trigrf_is_sign_indefinite():
    fm = fmap("trigrf", s=32, d=4)
    assert np.any(fm(gaussian(RngStream(2), (5, 4))) < 0)


def test_stabilizer_survives_large_exponents():
    # sigma = 0.01 makes w.x reach the thousands, far past exp overflow.
    fm = fmap("posrf", s=32, d=4, sigma=0.01)
    X = gaussian(RngStream(3), (4, 4)) * 5
    out = fm.apply(X)
    assert np.all(np.isfinite(out.values)) and np.all(np.isfinite(out.log_scale))
    assert np.allclose(out.values.max(axis=1), 1.0, rtol=1e-15)
    assert np.max(out.log_scale) > 700
    with pytest.raises(NumericalFailure) as info:
        fm.apply(X, stabilize=False)
    assert info.value.row is not None and str(info.value.row) in str(info.value)


def test_non_finite_input_row_is_named():
    X = np.zeros((3, 4))
    X[2, 1] = np.inf
    with pytest.raises(NumericalFailure) as info:
        fmap("posrf").apply(X)
    assert info.value.row == 2


def test_stabilizer_is_exact_for_small_inputs():
    for kind in KINDS:
        fm = fmap(kind, s=16, d=4)
        X = gaussian(RngStream(4), (6, 4)) * 0.5
        a, b = fm.apply(X, stabilize=True).dense(), fm.apply(X, stabilize=False).dense()
        assert np.allclose(a, b, rtol=1e-13, atol=0)


def test_oprf_boundedness_contrast():
    # Matched radius R: OPRF's negative A damps large |w|, PosRF grows like e^R.
    R, d = 6.0, 4
    g = RngStream(0).generator()
    W = g.standard_normal((10**5, d))
    W *= R * g.uniform(0, 1, (10**5, 1)) ** (1 / d) / np.linalg.norm(W, axis=1, keepdims=True)
    x = np.ones(d) / 2.0
    A = derive_oprf_A(estimate_norm_stat(x[None], x[None]), d)
    assert A < 0
    assert gerf(W, x, A).max() < posrf_b(W, x).max()


# --------------------------------------------------- estimator accuracy


@pytest.mark.parametrize("kind,target", [
    ("trigrf", RBF), ("posrf", SOFTMAX), ("posrf_hyp", RBF), ("gerf", RBF),
    ("oprf", SOFTMAX), ("saderf", SOFTMAX),
])
def test_definition2_convergence(kind, target):
    d, s = 4, 8192
    X, Y = ball_pairs(20, d, 7)
    params = {"gerf_A": 0.05} if kind == "gerf" else {}
    fm = build_feature_map(wm("base", s, d, seed=3), kind, target, **params).calibrate(X, Y)
    oracle = rbf_kernel(X, Y) if target == RBF else softmax_kernel(X, Y)
    assert np.allclose(fm.target_kernel(X, Y), oracle, rtol=1e-12)
    assert np.max(np.abs(fm.estimate(X, Y) - oracle)) <= 0.05


def test_trigrf_rbf_example():
    X, Y = ball_pairs(20, 8, 2)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    Y /= np.linalg.norm(Y, axis=1, keepdims=True)
    fm = fmap("trigrf", s=4096, d=8, seed=5)
    assert np.max(np.abs(fm.estimate(X, Y) - rbf_kernel(X, Y))) <= 0.05


def test_posrf_softmax_example():
    X, Y = ball_pairs(20, 4, 3, radius=0.5)
    fm = fmap("posrf", s=8192, d=4, seed=6)
    assert np.max(np.abs(fm.estimate(X, Y) - softmax_kernel(X, Y))) <= 0.05


def test_target_kernel_general_sigma():
    # Monte Carlo mean at sigma != 1 matches the closed form.
    X, Y = ball_pairs(5, 3, 4)
    for kind in ("trigrf", "posrf", "posrf_hyp", "gerf"):
        params = {"gerf_A": 0.05} if kind == "gerf" else {}
        est = np.mean([build_feature_map(wm("base", 4096, 3, 1.7, seed=r), kind, **params).estimate(X, Y)
                       for r in range(8)], axis=0)
        tk = build_feature_map(wm("base", 8, 3, 1.7), kind, **params).target_kernel(X, Y)
        assert np.max(np.abs(est - tk)) < 0.03


def test_saderf_consistent_with_oprf():
    # Psi rescaling leaves the softmax target unchanged: the summed SADERF and
    # OPRF estimates over all pairs agree within 2 standard errors.
    d, s, reps = 4, 8192, 20
    X, Y = ball_pairs(10, d, 9)
    X, Y = 0.5 * X, 4 * Y
    sad = [build_feature_map(wm("base", s, d, seed=r), "saderf").calibrate(X, Y) for r in range(reps)]
    opr = [build_feature_map(wm("base", s, d, seed=1000 + r), "oprf").calibrate(X, Y) for r in range(reps)]
    es = np.array([f.estimate(X, Y).sum() for f in sad])
    eo = np.array([f.estimate(X, Y).sum() for f in opr])
    se = math.sqrt(es.var(ddof=1) / reps + eo.var(ddof=1) / reps)
    assert abs(es.mean() - eo.mean()) <= 2 * se
    assert np.allclose(sad[0].target_kernel(X, Y), softmax_kernel(X, Y), rtol=1e-12)


def test_saderf_psi_under_key_scaling():
    Q = gaussian(RngStream(3), (16, 4))
    fm = build_feature_map(wm("base", 4096, 4), "saderf").calibrate(0.3 * Q, 1.2 * Q)
    assert np.allclose(fm.component.psi, 2.0, rtol=1e-15)
    X, Y = 0.3 * Q[:5], 1.2 * Q[5:10]
    assert np.max(np.abs(fm.estimate(X, Y) / softmax_kernel(X, Y) - 1)) < 0.1


def test_calibrate_sets_parameters():
    X, Y = ball_pairs(10, 4, 1)
    o = build_feature_map(wm(), "oprf").calibrate(X, Y)
    assert o.component.gerf_A == derive_oprf_A(estimate_norm_stat(X, Y), 4)
    sd = build_feature_map(wm(), "saderf").calibrate(X, Y)
    psi = estimate_psi(X, Y)
    assert np.array_equal(sd.component.psi, psi)
    assert sd.component.gerf_A == derive_oprf_A(estimate_norm_stat(X * psi, Y / psi), 4)
    p = build_feature_map(wm(), "posrf")
    assert p.calibrate(X, Y) is p


def test_apply_feature_map_alias():
    fm = fmap("posrf")
    X = gaussian(RngStream(0), (3, 4))
    a, b = apply_feature_map(fm, X, Role.KEY), fm.apply(X, Role.KEY)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.log_scale, b.log_scale)


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(KINDS),
    family=st.sampled_from(["base", "orf", "sorf", "qmc", "fastfood_f"]),
    seed=st.integers(0, 2**32 - 1),
    scale=st.floats(0.01, 3.0),
)
def test_gram_matches_estimate_diagonal(kind, family, seed, scale):
    fm = fmap(kind, family=family, s=32, d=4, seed=seed)
    X = gaussian(RngStream(seed), (5, 4)) * scale
    Y = gaussian(RngStream(seed + 1), (5, 4)) * scale
    G = fm.gram(X, Y)
    assert np.allclose(np.diag(G), fm.estimate(X, Y), rtol=1e-12, atol=1e-300)
    assert np.all(np.isfinite(G))


def test_variance_ordering_orf_vs_base():
    # TrigRF variance under ORF <= Base, averaged over 100 pairs at s = d = 16.
    d, reps = 16, 200
    X, Y = ball_pairs(100, d, 0)
    var = {}
    for family in ("base", "orf"):
        est = np.array([fmap("trigrf", family, d, d, seed=r).estimate(X, Y) for r in range(reps)])
        var[family] = est.var(axis=0).mean()
    assert var["orf"] <= var["base"]
