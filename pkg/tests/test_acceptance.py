"""Acceptance criteria, each printed as one PASS/FAIL line (run with ``pytest -s`` to see them live)."""
import os
import time

import numpy as np
import pytest

from conftest import random_spd
from polypcg.cli import efficiency
from polypcg.dfn import factor_blocks, generate_synthetic, make_schur_operator, schur_diag
from polypcg.eigest import SpectralBounds
from polypcg.linop import as_operator
from polypcg.lowrank import CorrectedPreconditioner, build_correction
from polypcg.pcg import SolveConfig
from polypcg.polyprec import (apply_chebyshev, apply_newton, build_chebyshev, build_newton, eval_scalar,
                              make_preconditioner,
                              preconditioned_spectrum_report, unclustering_threshold)
from polypcg.solver import PrecondSpec, diagonal_test, solve_dfn, solve_spd
from polypcg.sparse import set_num_threads
from reference_values import (COLUMNS, COUNTER_TABLE_NO_UPDATE, COUNTER_TABLE_RANK_ONE, DIAG_N, DIAG_NLEV,
                              DIAG_TABLE, MISPRINTED, match_tolerance)

XIS = tuple(DIAG_TABLE)


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def diag_problem():
    op, bounds = diagonal_test(DIAG_N)
    b = np.random.default_rng(0).standard_normal(DIAG_N)
    return op, bounds, b


def _table_cells():
    lam = np.arange(1, DIAG_N + 1, dtype=np.float64)
    cells = []
    for xi in XIS:
        rep = preconditioned_spectrum_report(build_newton(SpectralBounds(1.0, DIAG_N, xi), DIAG_NLEV), lam)
        mine = (rep.smallest(1), rep.smallest(2), rep.smallest(5), rep.smallest(10), rep.kappa, rep.kappa10)
        for name, value, text in zip(COLUMNS[1:], mine, DIAG_TABLE[xi][1:]):
            cells.append((xi, name, value, text, abs(value - float(text)) <= match_tolerance(text)))
    return cells


def test_c1_spectrum_table(report):
    t0 = time.perf_counter()
    cells = _table_cells()
    elapsed = time.perf_counter() - t0
    checked = [c for c in cells if (c[0], c[1]) not in MISPRINTED]
    bad = [c for c in checked if not c[4]]
    ok = not bad and elapsed < 5.0
    report("C1 spectrum table (4 significant digits)", ok,
           f"{len(checked) - len(bad)}/{len(checked)} cells match, {elapsed:.2f}s"
           + (f"; mismatches {[(c[0], c[1], round(c[2], 6), c[3]) for c in bad]}" if bad else ""))
    assert ok


@pytest.mark.xfail(strict=True, reason="misprinted reference cell: kappa_10 must equal kappa when "
                                       "lambda_1..lambda_10 coincide")
def test_c1_misprinted_cell(report):
    cells = {(c[0], c[1]): c for c in _table_cells()}
    for key in MISPRINTED:
        xi, name, value, text, ok = cells[key]
        report(f"C1 cell {name} at xi={xi}", ok, f"computed {value:.4f}, reference {text}")
        assert ok


def test_c2_iteration_counts(report, diag_problem):
    op, bounds, b = diag_problem
    t0 = time.perf_counter()
    iters = {}
    for xi in XIS:
        res = solve_spd(op, b, PrecondSpec(degree=2**DIAG_NLEV - 1, xi=xi), SolveConfig(tol=1e-10), bounds=bounds)
        assert res.report.converged
        iters[xi] = res.report.iters
    elapsed = time.perf_counter() - t0
    ref = {xi: int(row[0]) for xi, row in DIAG_TABLE.items()}
    within = all(abs(iters[x] - ref[x]) <= 0.15 * ref[x] for x in XIS)
    best = min(iters, key=iters.get) == 1e-4
    ok = within and best and elapsed < 30
    report("C2 PCG iterations within 15%", ok,
           f"{[iters[x] for x in XIS]} vs {[ref[x] for x in XIS]}, minimum at xi=1e-4: {best}, {elapsed:.1f}s")
    assert ok


def test_c3_newton_equals_chebyshev(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for j in range(1, 7):
        n = int(rng.integers(20, 201))
        a = random_spd(n, rng, cond=float(10 ** rng.uniform(1, 4)))
        ev = np.linalg.eigvalsh(a)
        bounds = SpectralBounds(ev[0], ev[-1])
        cn, cc = build_newton(bounds, j), build_chebyshev(bounds, 2**j - 1)
        op = as_operator(a)
        for _ in range(20):
            r = rng.standard_normal(n)
            yn, yc = apply_newton(cn, op, r), apply_chebyshev(cc, op, r)
            worst = max(worst, np.linalg.norm(yn - yc) / np.linalg.norm(yc))
    ok = worst <= 1e-11
    report("C3 Newton and Chebyshev agree", ok, f"max relative difference {worst:.2e} (limit 1e-11)")
    assert ok


def test_c4a_contraction_per_level(report):
    lam = np.arange(1, DIAG_N + 1, dtype=np.float64)
    coeffs = build_newton(SpectralBounds(1.0, DIAG_N), DIAG_NLEV)
    devs = []
    for j in range(DIAG_NLEV):
        cur = eval_scalar(coeffs, lam, level=j)
        nxt = eval_scalar(coeffs, lam, level=j + 1)
        k_cur, k_nxt = cur.max() / cur.min(), nxt.max() / nxt.min()
        predicted = (2 - cur.min()) ** 2
        devs.append(abs((k_cur / k_nxt) / predicted - 1))
    ok = max(devs) <= 0.02
    report("C4a condition number contraction (2 - a_j)^2 per level", ok,
           f"max relative deviation {max(devs):.2e} over {DIAG_NLEV} levels")
    assert ok


def test_c4b_smallest_eigenvalues_unclustered(report):
    lam = np.arange(1, DIAG_N + 1, dtype=np.float64)
    coeffs = build_newton(SpectralBounds(1.0, DIAG_N, 1e-3), 1)
    tau = unclustering_threshold(coeffs)
    scaled = lam / coeffs.theta_bar
    k = int(np.sum(scaled <= tau))
    mapped = eval_scalar(coeffs, lam)
    smallest = np.sort(mapped)[:k]
    images = mapped[:k]
    ok = k >= 1 and tau < 1 and np.array_equal(smallest, images)
    report("C4b k smallest mapped values are images of the k smallest", ok, f"k = {k}, threshold {tau:.6f}")
    assert ok


def test_c4c_condition_growth(report):
    def kappa(xi):
        c = build_newton(SpectralBounds(1.0, DIAG_N, xi), 1)
        # first-level image of the left end, relative to the peak value zeta_1 at the centre
        return c.zetas[1] / eval_scalar(c, 1.0, level=1)

    base = kappa(0.0)
    err = {xi: abs(kappa(xi) / base - (1 + xi)) for xi in (1e-5, 1e-4)}
    ratio = err[1e-4] / err[1e-5]
    ok = ratio >= 5 and err[1e-4] <= 1e-4 ** 2 * 1e3
    report("C4c kappa_eta / kappa = 1 + xi + higher order", ok,
           f"errors {err[1e-5]:.2e} (xi=1e-5), {err[1e-4]:.2e} (xi=1e-4), ratio {ratio:.1f}")
    assert ok


def test_c5_counter_laws(report):
    rows = []
    op, bounds = diagonal_test(20_000)
    b = np.random.default_rng(0).standard_normal(20_000)
    for m in COUNTER_TABLE_NO_UPDATE:
        r = solve_spd(op, b, PrecondSpec(degree=m, xi=1e-3), bounds=bounds).report
        rows.append(("diag", m, 0, r))
    for m in COUNTER_TABLE_RANK_ONE:
        r = solve_spd(op, b, PrecondSpec(degree=m, xi=1e-3, lowrank=1), bounds=bounds,
                      eigvecs=np.eye(20_000, 1)).report
        rows.append(("diag", m, 1, r))
    system = generate_synthetic(30, 12, 0.5, 1.0, seed=0)
    for m in (0, 1, 3, 7, 15):
        rows.append(("dfn", m, 0, solve_dfn(system, PrecondSpec(degree=m, xi=1e-3)).report))
    bad = []
    for src, m, p, r in rows:
        c_mvp = r.mvp - r.iters * (m + 1)
        c_dot = r.ddot - 3 * r.iters
        # the projection dots of a rank-p correction are counted apart: p per application
        if not (0 <= c_mvp <= 3 and 0 <= c_dot <= 3 and r.proj_ddot == p * r.iters):
            bad.append((src, m, p, r.iters, r.mvp, r.ddot, r.proj_ddot))
    # the reference table obeys the same per-iteration ratios
    table_ok = all(mvp == it * (m + 1) and dd == 3 * it for m, (it, mvp, dd) in COUNTER_TABLE_NO_UPDATE.items())
    table_ok &= all(mvp == it * (m + 1) and dd == 4 * it for m, (it, mvp, dd) in COUNTER_TABLE_RANK_ONE.items())
    rank_one = [(r.ddot + r.proj_ddot) / r.iters for src, m, p, r in rows if p == 1]
    rank_one_ok = all(0 <= r.ddot + r.proj_ddot - 4 * r.iters <= 3 for src, m, p, r in rows if p == 1)
    ok = not bad and table_ok and rank_one_ok
    report("C5 counter laws", ok,
           f"{len(rows) - len(bad)}/{len(rows)} solves obey mvp = iters(m+1)+c, ddot = 3 iters+c; "
           f"rank-one dots/iter {min(rank_one):.2f}-{max(rank_one):.2f} (reference 4); reference ratios ok: {table_ok}")
    assert ok


def _dense_schur(s):
    A, Gh, Gu, B, C = (s.A.to_dense(), s.Gh.to_dense(), s.Gu.to_dense(), s.B.to_dense(), s.C.to_dense())
    Ai = np.linalg.inv(A)
    return Gu - s.alpha * B.T @ Ai @ C - s.alpha * C.T @ Ai @ B + C.T @ Ai @ Gh @ Ai @ C


def test_c6_schur_oracle(report):
    tol = 1e-10
    worst_apply = worst_diag = worst_res = 0.0
    sizes = []
    for seed in range(25):
        rng = np.random.default_rng(seed)
        s = generate_synthetic(int(rng.integers(2, 40)), int(rng.integers(4, 20)), float(rng.uniform(0.2, 1.0)),
                               float(rng.uniform(0.3, 2.0)), seed=seed)
        sizes.append(s.nu)
        assert s.nu <= 300
        ch = factor_blocks(s.A)
        S = _dense_schur(s)
        op = make_schur_operator(s, ch, check_admissible=False)
        worst_apply = max(worst_apply, np.abs(op.to_dense() - S).max() / np.abs(S).max())
        worst_diag = max(worst_diag, np.max(np.abs(schur_diag(s, ch) - np.diag(S)) / np.abs(np.diag(S))))
        res = solve_dfn(s, PrecondSpec(degree=7, xi=1e-3), SolveConfig(tol=tol))
        worst_res = max(worst_res, res.extra["residual"]["total"])
    ok = worst_apply <= 1e-12 and worst_diag <= 1e-12 and worst_res <= 100 * tol
    report("C6 Schur operator equals dense oracle", ok,
           f"25 systems, n_u {min(sizes)}-{max(sizes)}: apply {worst_apply:.1e}, diag {worst_diag:.1e}, "
           f"end-to-end residual {worst_res:.1e} (limit {100 * tol:.0e})")
    assert ok


def test_c7_low_rank_shift(report, diag_problem):
    op, bounds, b = diag_problem
    lam = np.arange(1, DIAG_N + 1, dtype=np.float64)
    p0 = make_preconditioner(op, bounds.with_xi(1e-4), 63)
    V = np.eye(DIAG_N, 3)
    prec = CorrectedPreconditioner(p0, build_correction(op, V))
    shift_err = 0.0
    for j in range(3):
        w = prec.apply(op.apply(V[:, j]))
        shift_err = max(shift_err, abs(w[j] - (1 + eval_scalar(p0.coeffs, lam[j]))),
                        np.linalg.norm(np.delete(w, j)))
    drops = {}
    for xi in (1e-4, 1e-3):
        plain = solve_spd(op, b, PrecondSpec(degree=63, xi=xi), bounds=bounds).report.iters
        corr = solve_spd(op, b, PrecondSpec(degree=63, xi=xi, lowrank=1), bounds=bounds,
                         eigvecs=np.eye(DIAG_N, 1)).report.iters
        drops[xi] = (plain, corr)
    ok = shift_err <= 1e-10 and all(c < p for p, c in drops.values())
    report("C7 low-rank shift", ok,
           f"eigenvalue error {shift_err:.1e}; iterations without/with rank-one correction {drops}")
    assert ok


def test_c8_determinism_and_scaling(report, diag_problem):
    op, bounds, b = diag_problem
    small_op, small_bounds = diagonal_test(20_000)
    bs = b[:20_000]
    system = generate_synthetic(60, 16, 0.5, 1.0, seed=1)
    spec = PrecondSpec(degree=15, xi=1e-3)
    diag_iters, dfn_iters, times = [], [], {}
    for t in (1, 2, 4, 8):
        set_num_threads(t)
        diag_iters.append(solve_spd(small_op, bs, PrecondSpec(degree=63, xi=1e-4), bounds=small_bounds).report.iters)
        t0 = time.perf_counter()
        dfn_iters.append(solve_dfn(system, spec).report.iters)
        times[t] = time.perf_counter() - t0
    set_num_threads(1)
    eta = efficiency(times)
    ok = len(set(diag_iters)) == 1 and len(set(dfn_iters)) == 1 and eta[1] == 1.0
    speedups = {t: round(times[1] / times[t], 2) for t in times}
    report("C8 determinism across threads", ok,
           f"diag iters {diag_iters}, DFN iters {dfn_iters}, efficiency at reference {100 * eta[1]:.0f}%; "
           f"measured speedups {speedups} on {os.cpu_count()} cores (not asserted)")
    assert ok


def test_c9_synthetic_degree_sweep(report):
    degrees = (0, 1, 3, 7, 15, 31, 63)
    sweeps = []
    for seed in range(3):
        s = generate_synthetic(40, 16, 0.5, 1.0, seed=seed)
        sweeps.append([solve_dfn(s, PrecondSpec(degree=m)).report.iters for m in degrees])
    ok = all(all(b <= a for a, b in zip(it, it[1:])) for it in sweeps)
    report("C9 iterations decrease with degree on synthetic DFN systems", ok,
           f"degrees {list(degrees)}: {sweeps}; absolute counts of the unavailable test matrices not reproduced")
    assert ok
