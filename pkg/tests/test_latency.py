import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from wardrop.latency import BPR, Affine, LatencyBundle, Polynomial, regularity

FAMILIES = [
    BPR(1.0, 1.0, 0.15, 4.0),
    BPR(3.0, 2.5, 0.5, 2.0),
    BPR(2.0, 4.0, 0.15, 1.0),
    Affine(1.0, 0.0),
    Affine(0.0, 1.0),
    Affine(2.0, 1.0),
    Polynomial((1.0, 0.5, 0.0, 2.0)),
]


def test_bpr_eval_at_capacity():
    assert BPR(1.0, 1.0, 0.15, 4.0).eval(1.0) == pytest.approx(1.15)


def test_bpr_eval_free_flow():
    for f in [BPR(3.7, 11.0), BPR(1.0, 2.0, 0.9, 7.0)]:
        assert f.eval(0.0) == pytest.approx(f.t_f)


def test_affine_eval():
    assert Affine(1.0, 0.0).eval(0.5) == pytest.approx(0.5)


def test_bpr_deriv_closed_form():
    assert BPR(1.0, 1.0, 0.15, 4.0).deriv(1.0) == pytest.approx(0.6)


def test_affine_deriv_constant():
    f = Affine(2.5, 1.0)
    for x in [0.0, 0.3, 7.0]:
        assert f.deriv(x) == pytest.approx(2.5)


@pytest.mark.parametrize("f", FAMILIES)
def test_deriv_matches_finite_differences(f, rng):
    for x in rng.uniform(0.05, 5.0, size=20):
        h = 1e-6 * max(1.0, x)
        fd = (f.eval(x + h) - f.eval(x - h)) / (2 * h)
        assert f.deriv(x) == pytest.approx(fd, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("f", FAMILIES)
def test_deriv2_matches_finite_differences(f, rng):
    for x in rng.uniform(0.1, 5.0, size=10):
        h = 1e-5 * max(1.0, x)
        fd = (f.deriv(x + h) - f.deriv(x - h)) / (2 * h)
        assert f.deriv2(x) == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_bpr_integral_closed_form():
    assert BPR(1.0, 1.0, 0.15, 4.0).integral(1.0) == pytest.approx(1.03)


def test_affine_integral():
    assert Affine(1.0, 0.0).integral(2.0) == pytest.approx(2.0)


@pytest.mark.parametrize("f", FAMILIES)
def test_integral_matches_quadrature(f, rng):
    for x in rng.uniform(0.0, 6.0, size=8):
        expected, err = quad(lambda z: float(f.eval(z)), 0.0, x)
        assert float(f.integral(x)) == pytest.approx(expected, rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("f", FAMILIES)
def test_integral_derivative_is_eval(f, rng):
    # d/dx of the closed-form integral reproduces the latency itself
    for x in rng.uniform(0.01, 5.0, size=20):
        h = 1e-6 * max(1.0, x)
        fd = (f.integral(x + h) - f.integral(x - h)) / (2 * h)
        assert fd == pytest.approx(float(f.eval(x)), rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("f", FAMILIES)
def test_eval_monotone_when_flagged(f):
    xs = np.linspace(0.0, 10.0, 200)
    ys = f.eval(xs)
    if f.strictly_increasing:
        assert np.all(np.diff(ys) > 0)
    else:
        assert np.all(np.diff(ys) >= 0)


def test_negative_flow_rejected():
    for f in FAMILIES:
        with pytest.raises(ValueError):
            f.eval(-0.1)
        with pytest.raises(ValueError):
            f.integral(np.array([0.5, -2.0]))


def test_parameter_validation():
    with pytest.raises(ValueError):
        BPR(0.0, 1.0)
    with pytest.raises(ValueError):
        BPR(1.0, -2.0)
    with pytest.raises(ValueError):
        BPR(1.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        BPR(1.0, 1.0, 0.15, 0.5)
    with pytest.raises(ValueError):
        Affine(-1.0, 0.0)
    with pytest.raises(ValueError):
        Affine(0.0, 0.0)
    with pytest.raises(ValueError):
        Polynomial((0.0, -1.0))
    with pytest.raises(ValueError):
        Polynomial(())


@given(
    a=st.floats(0.0, 10.0),
    b=st.floats(0.0, 10.0),
    x=st.floats(0.0, 100.0),
)
def test_affine_integral_identity(a, b, x):
    if a == 0.0 and b == 0.0:
        return
    f = Affine(a, b)
    assert float(f.integral(x)) == pytest.approx(0.5 * a * x * x + b * x, rel=1e-12)


def test_regularity_affine_line():
    rep = regularity([Affine(2.0, 1.0)], q_max=5.0)
    assert rep.l0 == pytest.approx(2.0)
    assert rep.l1 == pytest.approx(0.0)
    assert rep.c0 == pytest.approx(11.0)
    assert rep.strictly_increasing and rep.convex


def test_regularity_bpr():
    rep = regularity([BPR(1.0, 1.0, 0.15, 4.0)], q_max=1.0)
    assert rep.l0 == pytest.approx(0.6)
    assert rep.c0 == pytest.approx(1.15)


def test_regularity_constant_not_increasing():
    rep = regularity([Affine(0.0, 1.0)], q_max=2.0)
    assert not rep.strictly_increasing


def test_regularity_bounds_dominate_samples(rng):
    fams = FAMILIES
    q_max = 7.5
    rep = regularity(fams, q_max)
    xs = rng.uniform(0.0, q_max, size=1000)
    for f in fams:
        assert np.all(np.asarray(f.deriv(xs)) <= rep.l0 + 1e-12)
        assert np.all(np.asarray(f.eval(xs)) <= rep.c0 + 1e-12)
        d2 = np.asarray(f.deriv2(xs[xs > 0]))
        assert np.all(d2 <= rep.l1 + 1e-12)


def test_regularity_rejects_bad_qmax():
    with pytest.raises(ValueError):
        regularity([Affine(1.0, 0.0)], q_max=0.0)


def test_bundle_matches_families(rng):
    bundle = LatencyBundle(FAMILIES)
    q = rng.uniform(0.0, 4.0, size=len(FAMILIES))
    for which in ["eval", "deriv", "deriv2", "integral"]:
        got = getattr(bundle, which)(q)
        want = np.array([float(getattr(f, which)(x)) for f, x in zip(FAMILIES, q)])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        bundle.marginal(q), bundle.eval(q) + q * bundle.deriv(q), rtol=1e-12
    )
    assert bundle.total_latency(q) == pytest.approx(float(q @ bundle.eval(q)))
    assert bundle.potential(q) == pytest.approx(float(np.sum(bundle.integral(q))))


def test_bundle_rejects_negative_flow():
    bundle = LatencyBundle(FAMILIES)
    q = np.zeros(len(FAMILIES))
    q[2] = -1e-3
    with pytest.raises(ValueError):
        bundle.eval(q)
