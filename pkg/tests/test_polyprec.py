import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from polypcg.eigest import SpectralBounds
from polypcg.linop import as_operator, diagonal_operator, identity_operator
from polypcg.polyprec import (MAX_NLEV, NewtonCoeffs, apply_chebyshev, apply_newton, build_chebyshev,
                              build_newton, eval_scalar, make_preconditioner,
                              preconditioned_spectrum_report, unclustering_threshold)


def dense_newton(coeffs, a):
    """Matrix oracle: P_0 = zeta_0 I, P_{j+1} = zeta_{j+1} (2 P_j - P_j A P_j)."""
    n = a.shape[0]
    P = coeffs.zetas[0] * np.eye(n)
    for z in coeffs.zetas[1:]:
        P = z * (2 * P - P @ a @ P)
    return P


# --- Newton coefficients


def test_newton_identity_spectrum():
    c = build_newton(SpectralBounds(1.0, 1.0), 3)
    assert c.zetas[0] == 1.0 and all(z == 1.0 for z in c.zetas)
    assert eval_scalar(c, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_newton_hand_values():
    c = build_newton(SpectralBounds(0.1, 1.9), 2)
    assert c.zetas[0] == pytest.approx(1.0)
    assert c.zetas[1] == pytest.approx(2 / (1 + 0.2 - 0.01), rel=1e-14)
    assert c.zetas[1] == pytest.approx(1.680672, rel=1e-6)
    z1 = c.zetas[1]
    assert c.zetas[2] == pytest.approx(2 / (1 + 2 * z1 - z1 * z1), rel=1e-14)


def test_newton_theta_bar_includes_xi():
    c = build_newton(SpectralBounds(1.0, 3.0, 0.05), 1)
    assert c.theta_bar == pytest.approx(2.0 * 1.05)
    assert c.zetas[0] == pytest.approx(1 / 2.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 0.99), st.integers(1, MAX_NLEV))
def test_zetas_in_range_and_decreasing(alpha, nlev):
    c = build_newton(SpectralBounds(alpha, 2 - alpha), nlev)
    z = np.array(c.zetas[1:])
    assert np.all(z > 1 - 1e-15) and np.all(z <= 2)
    assert np.all(np.diff(z) <= 1e-15)


def test_newton_rejects_bad_level():
    with pytest.raises(ValueError):
        build_newton(SpectralBounds(1, 2), MAX_NLEV + 1)


def test_apply_newton_base_and_fixed_point(rng):
    r = rng.standard_normal(4)
    c0 = build_newton(SpectralBounds(1.0, 3.0), 0)
    np.testing.assert_allclose(apply_newton(c0, identity_operator(4), r), r / 2)
    c1 = build_newton(SpectralBounds(1.0, 1.0), 1)
    np.testing.assert_allclose(apply_newton(c1, identity_operator(4), r), r, rtol=1e-15)


def test_apply_newton_dense_oracle(rng):
    a = random_spd(30, rng)
    ev = np.linalg.eigvalsh(a)
    c = build_newton(SpectralBounds(ev[0], ev[-1]), 3)
    r = rng.standard_normal(30)
    ref = dense_newton(c, a) @ r
    got = apply_newton(c, as_operator(a), r)
    assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)


@pytest.mark.parametrize("nlev", [0, 1, 2, 5])
def test_newton_costs_degree_products(nlev, rng):
    op = diagonal_operator(np.arange(1, 11.0))
    c = build_newton(SpectralBounds(1, 10), nlev)
    apply_newton(c, op, rng.standard_normal(10))
    assert op.counter.mvp == 2**nlev - 1 == c.degree


# --- Chebyshev


def test_chebyshev_hand_values():
    c = build_chebyshev(SpectralBounds(1.0, 3.0), 2)
    assert (c.theta_bar, c.delta, c.sigma) == (2.0, 1.0, 2.0)
    assert c.rhos[0] == 0.5 and c.rhos[1] == pytest.approx(1 / 3.5)


def test_chebyshev_degree_zero_and_one(rng):
    r = rng.standard_normal(5)
    b = SpectralBounds(1.0, 3.0)
    np.testing.assert_allclose(apply_chebyshev(build_chebyshev(b, 0), identity_operator(5), r), r / 2)
    c1 = build_chebyshev(b, 1)
    ref = (2 * c1.rhos[1] / 1.0) * (2 * r - r / 2)
    np.testing.assert_allclose(apply_chebyshev(c1, identity_operator(5), r), ref)


def test_chebyshev_xi_ratio():
    a = build_chebyshev(SpectralBounds(1.0, 3.0), 3)
    b = build_chebyshev(SpectralBounds(1.0, 3.0, 0.05), 3)
    assert b.theta_bar / a.theta_bar == pytest.approx(1.05, rel=1e-15)
    assert b.delta == a.delta


def test_chebyshev_degenerate_refused():
    with pytest.raises(ValueError, match="Newton"):
        build_chebyshev(SpectralBounds(2.0, 2.0), 3)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 10), st.floats(1.0001, 1e4), st.floats(0, 0.1), st.integers(0, 60))
def test_rhos_bounded_and_monotone(alpha, ratio, xi, m):
    c = build_chebyshev(SpectralBounds(alpha, alpha * ratio, xi), m)
    rho = np.array(c.rhos)
    assert np.all(rho > 0) and np.all(rho <= (1 / c.sigma) * (1 + 1e-12))
    assert np.all(np.diff(rho) <= 1e-15)


@pytest.mark.parametrize("m", [0, 1, 4, 9])
def test_chebyshev_costs_degree_products(m, rng):
    op = diagonal_operator(np.arange(1, 11.0))
    apply_chebyshev(build_chebyshev(SpectralBounds(1, 10), m), op, rng.standard_normal(10))
    assert op.counter.mvp == m


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from([0.0, 1e-4, 1e-2]))
def test_newton_equals_chebyshev(seed, j, xi):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    a = random_spd(n, rng, cond=float(rng.uniform(2, 1e4)))
    ev = np.linalg.eigvalsh(a)
    b = SpectralBounds(ev[0], ev[-1], xi)
    op = as_operator(a)
    r = rng.standard_normal(n)
    yn = apply_newton(build_newton(b, j), op, r)
    yc = apply_chebyshev(build_chebyshev(b, 2**j - 1), op, r)
    assert np.linalg.norm(yn - yc) <= 1e-11 * np.linalg.norm(yc)


# --- scalar map and reports


def test_eval_scalar_centre_degree_zero():
    c = build_newton(SpectralBounds(1.0, 5.0, 0.1), 0)
    assert eval_scalar(c, c.theta_bar) == pytest.approx(1.0, rel=1e-15)


def test_first_level_endpoints_coincide():
    alpha, beta = 0.1, 1.9
    c = build_newton(SpectralBounds(alpha, beta), 1)
    lo, hi = eval_scalar(c, alpha), eval_scalar(c, beta)
    assert lo == pytest.approx(hi, rel=1e-14)
    # relative to the peak at the centre, both ends land on 4 alpha beta / (alpha + beta)^2
    assert lo / eval_scalar(c, 1.0) == pytest.approx(4 * alpha * beta / (alpha + beta) ** 2, rel=1e-14)


def test_eval_scalar_matches_dense_oracle(rng):
    a = random_spd(25, rng)
    ev = np.linalg.eigvalsh(a)
    for coeffs in (build_newton(SpectralBounds(ev[0], ev[-1], 1e-3), 3),
                   build_chebyshev(SpectralBounds(ev[0], ev[-1], 1e-3), 5)):
        P = np.column_stack([
            (apply_newton if isinstance(coeffs, NewtonCoeffs) else apply_chebyshev)(coeffs, as_operator(a), e)
            for e in np.eye(25)])
        ref = np.sort(np.linalg.eigvals(P @ a).real)
        rep = preconditioned_spectrum_report(coeffs, ev)
        np.testing.assert_allclose(rep.mapped_sorted, ref, rtol=1e-10)


def test_eval_scalar_level_only_for_newton():
    with pytest.raises(ValueError):
        eval_scalar(build_chebyshev(SpectralBounds(1, 2), 2), 1.5, level=1)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1.5, 1e5), st.integers(0, 8))
def test_mapped_spectrum_contained(alpha, ratio, nlev):
    """With exact bounds and xi = 0 the image is [a, 2 - a]: positive, symmetric around 1."""
    beta = alpha * ratio
    c = build_newton(SpectralBounds(alpha, beta), nlev)
    lam = np.linspace(alpha, beta, 4001)
    v = eval_scalar(c, lam)
    assert np.all(v > 0)
    assert v.max() <= 2 - v.min() + 1e-9
    assert np.all(v / v.max() <= 1.0)


def test_report_single_eigenvalue():
    rep = preconditioned_spectrum_report(build_newton(SpectralBounds(1, 4), 2), [2.0])
    assert rep.kappa == 1.0 and math.isnan(rep.kappa10)


def test_report_empty_and_csv(tmp_path):
    rep = preconditioned_spectrum_report(build_newton(SpectralBounds(1, 4), 2), [])
    assert math.isnan(rep.kappa)
    rep.to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == "lambda_original,lambda_mapped"


def test_report_rejects_nonpositive():
    with pytest.raises(ValueError):
        preconditioned_spectrum_report(build_newton(SpectralBounds(1, 4), 2), [0.0, 1.0])


def test_unclustering_small_example():
    lam = np.array([0.1, 0.14, 0.18, 0.22, 1.0, 1.82, 1.86, 1.9])
    c = build_newton(SpectralBounds(0.1, 1.9, 0.05), 1)
    k = int(np.sum(lam / c.theta_bar <= unclustering_threshold(c)))
    assert k == 3
    mapped = eval_scalar(c, lam)
    np.testing.assert_array_equal(np.argsort(mapped)[:k], [0, 1, 2])
    # without the shift the largest eigenvalue collides with the smallest
    c0 = build_newton(SpectralBounds(0.1, 1.9), 1)
    assert eval_scalar(c0, 1.9) == pytest.approx(eval_scalar(c0, 0.1), rel=1e-14)


# --- preconditioner object


def test_make_preconditioner_picks_variant(rng):
    op = diagonal_operator(np.arange(1, 21.0))
    b = SpectralBounds(1, 20)
    assert make_preconditioner(op, b, 7).variant == "newton"
    assert make_preconditioner(op, b, 6).variant == "chebyshev"
    assert make_preconditioner(op, b, 7, "chebyshev").variant == "chebyshev"
    with pytest.raises(ValueError):
        make_preconditioner(op, b, 6, "newton")
    p = make_preconditioner(op, b, 15)
    before = op.counter.mvp
    p.apply(rng.standard_normal(20))
    assert op.counter.mvp - before == 15


def test_degenerate_spectrum_goes_through_newton():
    p = make_preconditioner(identity_operator(3), SpectralBounds(1, 1), 3, "chebyshev")
    assert p.variant == "newton"
    np.testing.assert_allclose(p.apply(np.ones(3)), np.ones(3))


def test_preconditioner_symmetric(rng):
    a = random_spd(20, rng)
    ev = np.linalg.eigvalsh(a)
    p = make_preconditioner(as_operator(a), SpectralBounds(ev[0], ev[-1], 1e-3), 9)
    P = np.column_stack([p.apply(e) for e in np.eye(20)])
    assert np.abs(P - P.T).max() <= 1e-12 * np.abs(P).max()
