"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary.  Long statistical runs are marked ``slow``.
"""
import filecmp
import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats as sps

from srrtune.acquisition import MotionConfig, simulate_series_set, without_noise
from srrtune.cli import run_cli
from srrtune.forward import adjoint_mismatch, build_operator, identity_operator, stack_data
from srrtune.geometry import Grid
from srrtune.metrics import ssim
from srrtune.phantom import SequenceParams, generate_phantom, load_tissue_table, reference_hr
from srrtune.solvers import SolverConfig, solve, tikhonov1_norm, tv_norm
from srrtune.stats import ranksum_test, signedrank_test
from srrtune.tuner import (Configuration, N_SIMULATED_SERIES, _context, _Setting, balanced_subset, make_grid,
                           tune_setting)

N_PHANTOMS = 10
CONFIGURATIONS = [(1.5, 3), (1.5, 6), (3.0, 3), (3.0, 6)]


# ---------------------------------------------------------------- 1

def test_criterion1_adjoint_all_configurations(acceptance_log):
    t0 = time.perf_counter()
    worst, trials = 0.0, 0
    for fs, n in CONFIGURATIONS:
        ctx = _context(_Setting(Configuration(fs, n, 30.0, repeats=1, seed=0)), 0)
        rng = np.random.default_rng(int(fs * 10) + n)
        for _ in range(20):
            x = rng.standard_normal(ctx.H.domain_shape)
            y = rng.standard_normal(ctx.H.shape[0])
            worst = max(worst, adjoint_mismatch(ctx.H, x, y))
            trials += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 60
    acceptance_log(1, ok, f"max adjoint mismatch {worst:.2e} over {trials} trials (4 configs, 64^3), "
                          f"{elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2 and 5

@pytest.fixture(scope="module")
def paired_runs():
    """Both regularizers tuned on the same data for N_PHANTOMS phantoms at (1.5T; 3)."""
    t0 = time.perf_counter()
    out = []
    for seed in range(N_PHANTOMS):
        cfg = Configuration(1.5, 3, 30.0, repeats=1, seed=seed)
        res = {}
        for reg, kind in (("tv", "tv-style"), ("tikhonov1", "tikhonov-style")):
            grid = make_grid(kind)
            res[reg] = tune_setting(cfg, grid, reg, keep_alphas=grid.values)
        mask = _context(_Setting(cfg), 0).mask
        tv, tk = res["tv"], res["tikhonov1"]
        sim = {}
        for label, a_tv, a_tk in (("default", tv.grid.default_alpha, tk.grid.default_alpha),
                                  ("psnr", tv.alpha_star_psnr, tk.alpha_star_psnr),
                                  ("ssim", tv.alpha_star_ssim, tk.alpha_star_ssim)):
            sim[label] = ssim(tv.reconstructions[(0, a_tv)], tk.reconstructions[(0, a_tk)], mask)
        for r in res.values():
            r.reconstructions.clear()
        out.append({"tv": tv, "tikhonov1": tk, "similarity": sim})
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion2_tuned_alpha_improves_psnr(paired_runs, acceptance_log):
    runs, elapsed = paired_runs
    parts, ok = [], elapsed < 30 * 60
    for reg in ("tv", "tikhonov1"):
        gains = np.array([r[reg].gain("psnr") for r in runs])
        p = signedrank_test(gains).p_value if np.any(gains) else 1.0
        stars = sorted({r[reg].alpha_star_psnr for r in runs})
        ok &= gains.mean() > 0 and p < 0.05
        parts.append(f"{reg}: mean gain {gains.mean():+.2f} dB, p={p:.4f}, alpha* in {[round(a, 4) for a in stars]}")
    acceptance_log(2, ok, f"{len(runs)} phantoms (1.5T; 3); " + "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion5_solvers_more_similar_at_tuned_alpha(paired_runs, acceptance_log):
    runs, _ = paired_runs
    d = np.array([r["similarity"]["default"] for r in runs])
    t = np.array([r["similarity"]["psnr"] for r in runs])
    t_ssim = np.array([r["similarity"]["ssim"] for r in runs])
    p = signedrank_test(t, d).p_value if np.any(t - d) else 1.0
    ok = t.mean() > d.mean() and p < 0.05
    acceptance_log(5, ok, f"SSIM(TV, Tikhonov) default {d.mean():.4f} -> tuned {t.mean():.4f} "
                          f"(PSNR-alpha*), p={p:.4f}; with SSIM-alpha* {t_ssim.mean():.4f}")
    assert ok


# ---------------------------------------------------------------- 3

@pytest.mark.slow
def test_criterion3_alpha_star_grows_with_series(acceptance_log):
    grid = make_grid("tikhonov-style")
    stars = {3: {"psnr": [], "ssim": []}, 6: {"psnr": [], "ssim": []}}
    fidelity_grows = []
    for seed in range(N_PHANTOMS):
        for n in (3, 6):
            res = tune_setting(Configuration(1.5, n, 30.0, repeats=1, seed=seed), grid, "tikhonov1")
            stars[n]["psnr"].append(res.alpha_star_psnr)
            stars[n]["ssim"].append(res.alpha_star_ssim)
        # fidelity of the true image grows with the amount of data
        c3 = _context(_Setting(Configuration(1.5, 3, 30.0, repeats=1, seed=seed)), 0)
        c6 = _context(_Setting(Configuration(1.5, 6, 30.0, repeats=1, seed=seed)), 0)
        f3 = 0.5 * np.sum((c3.H.apply(c3.reference) - c3.y) ** 2)
        f6 = 0.5 * np.sum((c6.H.apply(c6.reference) - c6.y) ** 2)
        fidelity_grows.append(f6 > f3)
    parts, ok = [], all(fidelity_grows)
    for metric in ("psnr", "ssim"):
        a3, a6 = np.array(stars[3][metric]), np.array(stars[6][metric])
        p = ranksum_test(a6, a3).p_value
        ok &= a6.mean() > a3.mean()
        parts.append(f"{metric}: mean alpha* {a3.mean():.4f} (3) vs {a6.mean():.4f} (6), rank-sum p={p:.3g}")
    acceptance_log(3, ok, f"tikhonov1, {N_PHANTOMS} phantoms at 1.5T; " + "; ".join(parts)
                   + f"; fidelity(6) > fidelity(3) in {sum(fidelity_grows)}/{N_PHANTOMS}")
    assert ok


# ---------------------------------------------------------------- 4

@pytest.mark.slow
def test_criterion4_alpha_star_insensitive_to_ga(acceptance_log):
    grid = make_grid("tikhonov-style")
    idx = {"psnr": [], "ssim": []}
    for ga in (22, 26, 30, 34):
        for seed in range(3):
            res = tune_setting(Configuration(1.5, 3, float(ga), repeats=1, seed=seed), grid, "tikhonov1")
            idx["psnr"].append(grid.values.index(res.alpha_star_psnr))
            idx["ssim"].append(grid.values.index(res.alpha_star_ssim))
    parts, ok = [], True
    for metric, ii in idx.items():
        ii = np.array(ii)
        med = np.median(ii)
        frac = float(np.mean(np.abs(ii - med) <= 1))
        ok &= frac >= 0.8
        parts.append(f"{metric}: {frac:.0%} within one step of median alpha* {grid.values[int(round(med))]:.4f}")
    acceptance_log(4, ok, f"GA 22/26/30/34 x 3 phantoms, tikhonov1; " + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion6_solver_oracles(acceptance_log):
    checks = {}
    res = solve(identity_operator((2, 1, 1)), np.array([0.0, 1.0]), "tv",
                SolverConfig(0.2, max_iters=5000, tol=1e-12))
    checks["two-pixel TV"] = float(np.max(np.abs(res.x.ravel() - [0.2, 0.8]))) < 1e-4

    seq = SequenceParams.preset(1.5)
    grid = Grid.centered(64, 1.1)
    hr = reference_hr(generate_phantom(30, grid, seed=0), load_tissue_table(1.5), seq)
    series = simulate_series_set(hr, without_noise(seq), MotionConfig.preset("little", 0), per_orientation=1)
    H, y = build_operator(series, grid), stack_data(series)
    x = solve(H, y, "tikhonov1", SolverConfig(1e-6, max_iters=500, tol=1e-10)).x
    consistency = 10 * math.log10(y.max() ** 2 / np.mean((H.apply(x) - y) ** 2))
    checks["noiseless consistency"] = consistency > 40

    noisy = simulate_series_set(hr, seq, MotionConfig.preset("little", 0), per_orientation=1)
    Hn, yn = build_operator(noisy, grid), stack_data(noisy)
    cg = solve(Hn, yn, "tikhonov1", SolverConfig(0.01, max_iters=1000, tol=1e-6))
    checks["CG residual"] = cg.converged and cg.residual < 1e-6

    mono = []
    for seed in range(3):
        g48 = Grid.centered(48, 1.1)
        hr48 = reference_hr(generate_phantom(30, g48, seed=seed), load_tissue_table(1.5), seq)
        s48 = simulate_series_set(hr48, seq, MotionConfig.preset("little", seed), per_orientation=1, seed=seed)
        H48, y48 = build_operator(s48, g48), stack_data(s48)
        fid, reg = [], []
        for a in (0.003, 0.03, 0.3):
            xa = solve(H48, y48, "tikhonov1", SolverConfig(a, max_iters=1000, tol=1e-10)).x
            fid.append(0.5 * float(np.sum((H48.apply(xa) - y48) ** 2)))
            reg.append(tikhonov1_norm(xa))
        rng = np.random.default_rng(seed)
        yi = rng.standard_normal(32)
        fid_tv, reg_tv = [], []
        for a in (0.05, 0.1, 0.2, 0.4):
            xa = solve(identity_operator((4, 4, 2)), yi, "tv", SolverConfig(a, max_iters=20000, tol=1e-13)).x
            fid_tv.append(0.5 * float(np.sum((xa.ravel() - yi) ** 2)))
            reg_tv.append(tv_norm(xa))
        mono.append(all(np.diff(fid) > 0) and all(np.diff(reg) < 0)
                    and all(np.diff(fid_tv) > 0) and all(np.diff(reg_tv) < 0))
    checks["path monotonicity"] = all(mono)
    ok = all(checks.values())
    acceptance_log(6, ok, f"two-pixel TV x={np.round(res.x.ravel(), 6).tolist()}; consistency {consistency:.1f} dB; "
                          f"CG residual {cg.residual:.1e} in {cg.iterations} its; "
                          f"monotone on {sum(mono)}/3 instances; "
                          + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 7

def _brute_ranksum(a, b):
    pooled = np.concatenate([a, b])
    r = sps.rankdata(pooled)
    c = len(a) * (pooled.size + 1) / 2
    obs = abs(r[: len(a)].sum() - c)
    sums = [abs(r[list(ix)].sum() - c) for ix in itertools.combinations(range(pooled.size), len(a))]
    return np.mean(np.array(sums) >= obs - 1e-9)


def _brute_signed(d):
    r = sps.rankdata(np.abs(d))
    c = r.sum() / 2
    obs = abs(r[d > 0].sum() - c)
    sums = [abs(r[np.array(s, bool)].sum() - c) for s in itertools.product((0, 1), repeat=d.size)]
    return np.mean(np.array(sums) >= obs - 1e-9)


def test_criterion7_statistics_oracles(acceptance_log):
    rng = np.random.default_rng(0)
    worst, cases = 0.0, 0
    for n in range(2, 9):
        for na in range(1, n):
            for _ in range(3):
                data = np.round(rng.normal(size=n), 1)
                worst = max(worst, abs(ranksum_test(data[:na], data[na:]).p_value
                                       - _brute_ranksum(data[:na], data[na:])))
                cases += 1
    for n in range(1, 9):
        for _ in range(5):
            d = np.round(rng.normal(size=n), 1)
            d = d[d != 0]
            if d.size == 0:
                continue
            worst = max(worst, abs(signedrank_test(d).p_value - _brute_signed(d)))
            cases += 1
    p1 = ranksum_test([1, 2, 3], [4, 5, 6]).p_value
    p2 = signedrank_test([1, 2, 3]).p_value
    ok = worst < 1e-12 and p1 == pytest.approx(0.1, abs=1e-15) and p2 == pytest.approx(0.25, abs=1e-15)
    acceptance_log(7, ok, f"max |exact - enumeration| {worst:.1e} over {cases} cases (n <= 8); "
                          f"examples p={p1:g}, p={p2:g}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion8_grid_fidelity(acceptance_log):
    tk, tv = make_grid("tikhonov-style"), make_grid("tv-style")
    generated = [v for v in tk.values if v != 0.01]
    geo = np.allclose(generated, np.geomspace(1e-3, 2, 10), rtol=1e-12)
    ok = (len(tk) == 11 and tk.values[0] == 1e-3 and tk.values[-1] == 2.0 and geo and tk.default_alpha == 0.01
          and len(tv) == 8 and tv.default_alpha == 1 / 0.75
          and np.allclose(sorted(1 / np.array(tv.values)), [0.75, 1, 1.5, 2, 2.5, 3, 3.5, 5]))
    acceptance_log(8, ok, f"tikhonov-style {len(tk)} values [{tk.values[0]:g} .. {tk.values[-1]:g}] incl. 0.01, "
                          f"ratio {generated[1] / generated[0]:.5f}; tv-style {len(tv)} values, default "
                          f"{tv.default_alpha:.6f}")
    assert ok


# ---------------------------------------------------------------- 9

@pytest.mark.slow
def test_criterion9_cli_determinism_and_runtime(tmp_path, acceptance_log):
    base = ["tune", "--protocol", "setting", "--field", "1.5", "--series", "3", "--dims", "64",
            "--repeats", "3", "--seed", "11"]
    t0 = time.perf_counter()
    assert run_cli(base + ["--out", str(tmp_path / "a")]) == 0
    elapsed = time.perf_counter() - t0
    assert run_cli(base + ["--out", str(tmp_path / "b")]) == 0
    assert run_cli(base + ["--workers", "2", "--out", str(tmp_path / "c")]) == 0
    same = all(filecmp.cmp(tmp_path / "a" / f, tmp_path / d / f, shallow=False)
               for f in ("rows.csv", "summary.json") for d in ("b", "c"))
    n_rows = sum(1 for _ in open(tmp_path / "a" / "rows.csv")) - 1
    ok = same and elapsed < 600 and n_rows == 11 * 3
    acceptance_log(9, ok, f"tune (1.5T; 3; 64^3; 11 alphas x 3 repeats) {elapsed:.0f}s on 1 worker (< 600s); "
                          f"rows.csv and summary.json byte-identical across 2 serial runs and a 2-worker run: {same}")
    assert ok
