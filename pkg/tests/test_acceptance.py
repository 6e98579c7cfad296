"""Acceptance suite: one test per release criterion.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line
per criterion.  The closed-loop block re-runs five full desk-scale
optimisations (32^3 volumes, 20 initial + up to 100 guided evaluations
each) and takes several minutes; every run is seeded and deterministic.

Closed-loop thresholds were confirmed ahead of time with trial runs of
this implementation; the generator configs and loop seeds frozen below
are the recorded trial fixtures.
"""

import json
import time

import numpy as np
import pytest

from microforge.bo import (
    DesignSpace,
    LoopConfig,
    alpha_schedule,
    lhs,
    run_loop,
)
from microforge.genlat import GeneratorConfig, generate
from microforge.gp import (
    GPHyperparameters,
    _nll_and_grad,
    build_model,
    fit,
    kernel_se,
    nll,
    predict,
)
from microforge.objectives import ObjectiveSpec
from microforge.props import SolverConfig, evaluate_all, relative_diffusivity
from microforge.voxel import Microstructure, Phase


# ---------------------------------------------------------------------------
# Transport solver
# ---------------------------------------------------------------------------

def test_accept_transport_all_pore_unit():
    m = Microstructure(labels=np.zeros((32, 32, 32), dtype=np.uint8))
    t0 = time.perf_counter()
    d, tau, diag = relative_diffusivity(m, Phase.PORE, "x", SolverConfig())
    dt = time.perf_counter() - t0
    assert diag.converged
    assert d == pytest.approx(1.0, abs=1e-3), f"all-pore D_rel {d}"
    assert tau == pytest.approx(1.0, abs=1e-3), f"all-pore tau {tau}"
    assert dt < 5.0, f"all-pore solve took {dt:.2f}s"


def test_accept_transport_half_channel():
    labels = np.full((32, 32, 32), 1, dtype=np.uint8)
    labels[:, :16, :] = 0
    m = Microstructure(labels=labels)
    d, _, diag = relative_diffusivity(m, Phase.PORE, "x", SolverConfig())
    assert diag.converged
    assert d == pytest.approx(0.5, abs=5e-3), f"half-channel D_rel {d}"


def test_accept_transport_two_slab_series():
    # slab A fully pore, slab B a wall-attached half-section channel:
    # series resistance 2/(1/1 + 1/0.5) = 2/3.  Long thin domain keeps
    # the junction constriction below the tolerance.
    n_axis, n_cross = 96, 8
    labels = np.full((n_axis, n_cross, n_cross), 1, dtype=np.uint8)
    labels[: n_axis // 2] = 0
    labels[n_axis // 2:, : n_cross // 2, :] = 0
    m = Microstructure(labels=labels)
    d, _, diag = relative_diffusivity(
        m, Phase.PORE, "x", SolverConfig(max_iterations=50000, tolerance=1e-5)
    )
    assert diag.converged
    assert d == pytest.approx(2.0 / 3.0, rel=0.02), f"two-slab D_rel {d}"


def test_accept_transport_blocked_plane_short_circuit():
    labels = np.zeros((32, 32, 32), dtype=np.uint8)
    labels[16, :, :] = 1
    m = Microstructure(labels=labels)
    t0 = time.perf_counter()
    d, tau, diag = relative_diffusivity(m, Phase.PORE, "x", SolverConfig())
    dt = time.perf_counter() - t0
    assert d == 0.0, f"blocked-plane D_rel {d}"
    assert tau == float("inf")
    assert diag.iterations == 0, "connectivity screen did not short-circuit"
    assert dt < 0.1, f"blocked-plane screen took {dt:.3f}s"


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------

def test_accept_gp_noise_free_interpolation():
    rng = np.random.default_rng(3)
    x = rng.random((8, 3))
    y = np.sin(4.0 * x[:, 0]) + x[:, 1] ** 2 - 0.5 * x[:, 2]
    theta = GPHyperparameters.from_values([4.0, 4.0, 4.0], sf2=0.1, se2=0.0)
    model = build_model(x, y, theta)
    for i in range(8):
        mu, _ = predict(model, x[i])
        assert mu == pytest.approx(y[i], abs=1e-6), f"row {i}: {mu} vs {y[i]}"


def test_accept_gp_matches_dense_inverse():
    for seed, n in ((11, 4), (12, 7), (13, 10)):
        rng = np.random.default_rng(seed)
        x = rng.random((n, 2))
        y = rng.standard_normal(n)
        theta = GPHyperparameters.from_values([3.0, 5.0], sf2=1.3, se2=0.05)
        model = build_model(x, y, theta)
        k = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                k[i, j] = kernel_se(x[i], x[j], theta)
        k += (theta.se2 + model.jitter) * np.eye(n)
        k_inv = np.linalg.inv(k)
        yc = y - np.mean(y)
        for t in range(5):
            xs = rng.random(2)
            ks = np.array([kernel_se(xs, x[j], theta) for j in range(n)])
            mu_direct = float(ks @ k_inv @ yc + np.mean(y))
            var_direct = float(theta.sf2 - ks @ k_inv @ ks)
            mu, var = predict(model, xs)
            assert mu == pytest.approx(mu_direct, abs=1e-8)
            assert var == pytest.approx(max(var_direct, 0.0), abs=1e-8)


def test_accept_gp_fit_never_worse_than_start_100():
    theta0 = GPHyperparameters.from_values([1.0, 1.0], sf2=1.0, se2=0.01)
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.random((10, 2))
        y = np.cos(5.0 * x[:, 0]) + 0.3 * rng.standard_normal(10)
        model = fit(x, y, starts=3, seed=seed, warm_start=theta0)
        yc = y - np.mean(y)
        if nll(x, yc, model.theta) > nll(x, yc, theta0) + 1e-9:
            failures += 1
    assert failures == 0, f"{failures}/100 fits ended above their start"


def test_accept_gp_gradient_matches_central_differences():
    rng = np.random.default_rng(17)
    x = rng.random((9, 3))
    y = rng.standard_normal(9)
    yc = y - np.mean(y)
    for ard in (False, True):
        n_ls = 3 if ard else 1
        vec = np.concatenate([0.3 * rng.standard_normal(n_ls), [0.2, -2.0]])
        _, grad = _nll_and_grad(vec, x, yc, 3, ard)
        h = 1e-6
        for k in range(vec.size):
            dv = np.zeros_like(vec)
            dv[k] = h
            f_hi, _ = _nll_and_grad(vec + dv, x, yc, 3, ard)
            f_lo, _ = _nll_and_grad(vec - dv, x, yc, 3, ard)
            fd = (f_hi - f_lo) / (2 * h)
            assert grad[k] == pytest.approx(fd, abs=1e-5), f"ard={ard} comp {k}"


# ---------------------------------------------------------------------------
# Closed-loop behaviour at desk scale
#
# Each case re-runs a trial-confirmed seeded optimisation: 32^3 volumes,
# 20-point initial design, up to 100 guided iterations, under 15 minutes
# apiece.  The generator configs and loop seeds below are the recorded
# trial fixtures; thresholds are asserted at criterion level.
# ---------------------------------------------------------------------------

DESK_DIMS = (32, 32, 32)
DESK_CORR = (3.0, 5.0, 2.0)
DESK_GAMMA = (0.0558, 0.6809, -0.7356)

# latent weighting promoting pore over NMC over CBD; balanced fractions
GEN_BALANCED = GeneratorConfig(
    output_dims=DESK_DIMS,
    seed=7,
    corr_lengths=DESK_CORR,
    alpha=(0.8, 0.35, -0.5),
    gamma=DESK_GAMMA,
)

# same fields with doubled latent weights: sharper per-block response,
# so the initial design undersamples the interface-rich optimum
GEN_SHARP = GeneratorConfig(
    output_dims=DESK_DIMS,
    seed=7,
    corr_lengths=DESK_CORR,
    alpha=(1.6, 0.7, -1.0),
    gamma=DESK_GAMMA,
)

# small pore latent weight and a lean calibration keep every volume near
# the percolation threshold, where directional connectivity decouples
# from bulk porosity: arrangement, not pore amount, is the only lever
GEN_MARGINAL = GeneratorConfig(
    output_dims=DESK_DIMS,
    seed=7,
    corr_lengths=DESK_CORR,
    alpha=(0.35, 0.5, -0.4),
    gamma=(-0.1612, 0.7922, -0.63),
)

DESK_BUDGET_S = 900.0


def _desk_loop(spec, gen_cfg, loop_seed, i_tot=100):
    cfg = LoopConfig(
        space=DesignSpace(dim=8),
        n_init=20,
        i_tot=i_tot,
        seed=loop_seed,
        solver=SolverConfig(),
        threads=3,
        acq_starts=5,
        fit_starts=5,
    )
    t0 = time.perf_counter()
    trace = run_loop(spec, lambda z: generate(z, gen_cfg), cfg)
    dt = time.perf_counter() - t0
    assert dt < DESK_BUDGET_S, f"desk-scale run took {dt:.0f}s"
    init = [r for r in trace.records if r.phase == "init" and r.accepted]
    loop = [r for r in trace.records if r.phase == "bo" and r.accepted]
    assert len(init) >= 2, "initial design collapsed"
    assert loop, "no guided iterations accepted"
    return trace, init, loop


def test_accept_loop_case_a_ssa_maximisation():
    trace, init, loop = _desk_loop(ObjectiveSpec(kind="ssa"), GEN_SHARP, loop_seed=0)
    best = trace.best_record()
    init_best = max(r.report.ssa_nmc for r in init)
    init_phi = float(np.mean([r.report.phi_nmc for r in init]))
    ratio = best.objective / init_best
    assert ratio >= 1.2, f"SSA ratio {ratio:.3f} (init best {init_best:.4f})"
    assert best.report.phi_nmc > init_phi, (
        f"best phi_nmc {best.report.phi_nmc:.3f} vs init mean {init_phi:.3f}"
    )


def test_accept_loop_case_b_transport_maximisation():
    trace, init, loop = _desk_loop(ObjectiveSpec(kind="drel"), GEN_BALANCED, loop_seed=0)
    best = trace.best_record()

    def tau_mean(rep):
        return float(np.mean([rep.tau_x, rep.tau_y, rep.tau_z]))

    init_best = max(r.objective for r in init)
    finite = [tau_mean(r.report) for r in init if np.isfinite(tau_mean(r.report))]
    assert len(finite) >= 5, f"only {len(finite)} initial volumes percolate"
    ratio = best.objective / init_best
    assert ratio >= 1.15, f"D_rel ratio {ratio:.3f} (init best {init_best:.4f})"
    final_tau = tau_mean(best.report)
    init_tau = float(np.mean(finite))
    assert final_tau < init_tau, f"tau {final_tau:.3f} vs init mean {init_tau:.3f}"


def test_accept_loop_case_e_ssa_at_held_volume_fraction():
    trace, init, loop = _desk_loop(
        ObjectiveSpec(kind="ssa_const_vf"), GEN_BALANCED, loop_seed=2
    )
    init_best = max(r.report.ssa_nmc for r in init)
    best_ssa = max(r.report.ssa_nmc for r in init + loop)
    phi_std = float(np.std([r.report.phi_nmc for r in loop]))
    ratio = best_ssa / init_best
    assert ratio >= 1.1, f"SSA ratio {ratio:.3f} (init best {init_best:.4f})"
    assert phi_std <= 0.05, f"phi_nmc std over guided iterates {phi_std:.4f}"


def test_accept_loop_case_cprime_directional_with_penalties():
    trace, init, loop = _desk_loop(
        ObjectiveSpec(kind="drel_axis_const_others", axis="x"),
        GEN_MARGINAL,
        loop_seed=0,
    )
    init_best = max(r.report.d_rel_x for r in init)
    best_dx = max(r.report.d_rel_x for r in init + loop)
    drift_y = abs(
        float(np.mean([r.report.d_rel_y for r in loop]))
        - float(np.mean([r.report.d_rel_y for r in init]))
    )
    drift_z = abs(
        float(np.mean([r.report.d_rel_z for r in loop]))
        - float(np.mean([r.report.d_rel_z for r in init]))
    )
    ratio = best_dx / init_best
    assert ratio >= 1.1, f"D_rel,x ratio {ratio:.3f} (init best {init_best:.4f})"
    assert drift_y <= 0.05, f"D_rel,y mean drift {drift_y:.4f}"
    assert drift_z <= 0.05, f"D_rel,z mean drift {drift_z:.4f}"


def test_accept_loop_graded_porosity_profile():
    trace, init, loop = _desk_loop(
        ObjectiveSpec(kind="graded_profile"), GEN_SHARP, loop_seed=0, i_tot=30
    )
    init_best_rmse = min(-r.objective for r in init)
    loop_best_rmse = min(-r.objective for r in loop)
    ratio = loop_best_rmse / init_best_rmse
    assert ratio <= 0.5, (
        f"profile RMSE fell only to {ratio:.2f} of the initial best "
        f"({init_best_rmse:.4f} -> {loop_best_rmse:.4f})"
    )


# ---------------------------------------------------------------------------
# Loop mechanics
# ---------------------------------------------------------------------------

def test_accept_alpha_schedule_endpoints():
    assert alpha_schedule(0, 500) == pytest.approx(1.96, abs=1e-12)
    assert alpha_schedule(500, 500) == pytest.approx(0.0, abs=1e-12)


def test_accept_lhs_full_stratification_50x64():
    design = lhs(50, 64, seed=123)
    assert design.shape == (50, 64)
    for j in range(64):
        bins = np.floor(design[:, j] * 50).astype(int)
        assert sorted(bins) == list(range(50)), f"column {j} misses a bin"


def test_accept_large_volume_generation_and_solve():
    # 8x8x8 latent grid -> 128^3 volume, then one directional transport
    # solve, together inside the large-volume time budget.
    cfg = GeneratorConfig(output_dims=(128, 128, 128), seed=7)
    rng = np.random.default_rng(99)
    z = rng.uniform(-5.0, 5.0, cfg.latent_length)
    t0 = time.perf_counter()
    m = generate(z, cfg)
    d, _, diag = relative_diffusivity(m, Phase.PORE, "x", SolverConfig())
    dt = time.perf_counter() - t0
    assert m.labels.shape == (128, 128, 128)
    assert cfg.latent_length == 512
    assert 0.0 <= d <= 1.0
    assert dt < 300.0, f"large-volume path took {dt:.1f}s"


def test_accept_trace_bit_exact_reruns(tmp_path):
    def sphere(z):
        return -float(np.sum(np.square(z)))

    cfg = LoopConfig(
        space=DesignSpace(dim=3), n_init=8, i_tot=12, seed=21, threads=1
    )
    files = []
    for tag in ("one", "two"):
        trace = run_loop(sphere, None, cfg)
        jsonl = tmp_path / f"{tag}.jsonl"
        csv = tmp_path / f"{tag}.csv"
        trace.to_jsonl(jsonl)
        trace.to_csv(csv)
        files.append((jsonl.read_bytes(), csv.read_bytes()))
    assert files[0][0] == files[1][0], "trace JSONL differs between reruns"
    assert files[0][1] == files[1][1], "trace CSV differs between reruns"
