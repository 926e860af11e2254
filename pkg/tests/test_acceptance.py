"""Acceptance criteria for the primary build, one test per criterion.

Each test prints a PASS/FAIL line (collected again in the terminal summary)
and then asserts.  Tolerances are fixed here and must not be loosened.
"""
import itertools
import time
from types import SimpleNamespace

import numpy as np

from nobackstep.cli import bench_row, run_command
from nobackstep.grid import SpatialGrid, TriangleGrid, TriangleKernelGrid
from nobackstep.kernels import KernelPair, solve_inverse_kernels, solve_kernels, volterra_residual
from nobackstep.loop import KernelProvider, SimSettings, run_closed_loop, time_averaged_error
from nobackstep.neuralop import DeepONetModel, loss_and_gradients
from nobackstep.plant import REFERENCE_M, PlantConfig
from nobackstep.swapping import projection
from oracles import characteristic_kernels

VERDICTS = []

# Pinned tolerances.
KERNEL_ORACLE_FACTOR = 5.0        # sup error <= 5 dx
KERNEL_REFINE_RATIO = 1.8
DIAGONAL_TOL = 1e-14
VOLTERRA_TOL = 1e-8
FLUSH_FRACTION = 1e-3
FLUSH_AFTER = 2.0
DECAY_FRACTION = 0.1
H2_TOL = 1e-12
TRAIN_MSE = 1e-3
GRAD_TOL = 1e-4
SURROGATE_L2 = 0.10
SURROGATE_KERR = 1e-2
SPEEDUP_MIN = 10.0


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def test_kernel_solver_correctness():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    zero_ok = True
    for _ in range(10):
        a, b, c = rng.uniform(-4, 4, 3)
        k = solve_kernels((a, b, 0.0, c), 1.0, 1.0, 1.0, TriangleGrid(SpatialGrid.from_dx(0.02)))
        zero_ok &= not k.alpha.values.any() and not k.beta.values.any()
    diag_err = 0.0
    for m in rng.uniform(-4, 4, size=(10, 4)):
        for lam, mu in ((1.0, 1.0), (2.0, 1.0), (1.0, 3.0)):
            k = solve_kernels(m, lam, mu, 1.0, TriangleGrid(SpatialGrid.from_dx(0.02)))
            diag_err = max(diag_err, np.max(np.abs(k.alpha.diagonal() + m[2] / (lam + mu))))
    sols = {dx: solve_kernels(REFERENCE_M, 1.0, 1.0, 1.0, TriangleGrid(SpatialGrid.from_dx(dx)))
            for dx in (0.05, 0.025)}
    solver_time = time.perf_counter() - t0

    n_fine = 641  # dx/16 for dx = 0.025
    A, B = characteristic_kernels(REFERENCE_M, 1.0, n_fine)
    errs = {}
    for dx, k in sols.items():
        s = (n_fine - 1) // (k.tri.n_rows - 1)
        mask = np.tril(np.ones((k.tri.n_rows,) * 2, dtype=bool))
        errs[dx] = max(np.abs(k.alpha.dense() - A[::s, ::s])[mask].max(),
                       np.abs(k.beta.dense() - B[::s, ::s])[mask].max())
    ratio = errs[0.05] / errs[0.025]
    ok = (zero_ok and diag_err <= DIAGONAL_TOL and all(e <= KERNEL_ORACLE_FACTOR * dx for dx, e in errs.items())
          and ratio >= KERNEL_REFINE_RATIO and solver_time < 5.0)
    verdict("kernel solver", ok,
            f"zero-m3 kernels {'zero' if zero_ok else 'NONZERO'}, diagonal err {diag_err:.1e} (<= 1e-14), "
            f"oracle sup err {errs[0.05]:.2e} @dx=0.05 / {errs[0.025]:.2e} @dx=0.025 (<= 5dx), "
            f"halving ratio {ratio:.2f} (>= 1.8), runtime {solver_time:.2f}s (< 5s)")


def test_volterra_inversion():
    t0 = time.perf_counter()
    tri = TriangleGrid(SpatialGrid.from_dx(0.02))
    k = solve_kernels(REFERENCE_M, 1.0, 1.0, 1.0, tri)
    res = volterra_residual(k, solve_inverse_kernels(k))
    alpha = TriangleKernelGrid(tri, np.cos(2 * tri.points[:, 0] - tri.points[:, 1]))
    k0 = KernelPair(alpha, TriangleKernelGrid(tri, np.zeros(tri.size)))
    k0i = solve_inverse_kernels(k0)
    exact = np.array_equal(k0i.alpha.values, alpha.values)
    elapsed = time.perf_counter() - t0
    ok = res <= VOLTERRA_TOL and exact and elapsed < 5.0
    verdict("Volterra inversion", ok,
            f"plug-back residual {res:.2e} (<= 1e-8), beta=0 gives alpha_I == alpha: {exact}, "
            f"runtime {elapsed:.2f}s (< 5s)")


def test_adaptive_law_invariants():
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        bound = r.uniform(0.5, 4.0)
        cfg = PlantConfig(m=tuple(r.uniform(-bound, bound, 4)), m_bar=(bound,) * 4,
                          rho=tuple(r.uniform(10, 400, 4)))
        c = r.normal(size=4) * 2
        s = SimSettings(dx=0.05, dt=0.025, t_end=5.0, m_hat0=tuple(r.uniform(-bound, bound, 4)),
                        filter0=r.uniform(-2, 2), track_kernel_error=False,
                        psi0=lambda x, c=c: c[0] + c[1] * x, phi0=lambda x, c=c: c[2] * np.sin(7 * x) + c[3])
        tr = run_closed_loop(cfg, s, KernelProvider.numerical(cfg))
        worst = max(worst, np.max(np.abs(tr.m_hat)) - bound)
    proj_ok = True
    for theta, m, bound in itertools.product([-3.0, -1e-9, 0.0, 1e-9, 3.0],
                                             [-4.5, -4.0, -3.99, 0.0, 3.99, 4.0, 4.5], [4.0]):
        p = projection(theta, m, bound)
        proj_ok &= p * p <= theta * theta
        if abs(m) >= bound and theta * m < 0:
            proj_ok &= p == theta           # inward move allowed
        if abs(m) >= bound and theta * m > 0:
            proj_ok &= p == 0.0             # outward move blocked
        if abs(m) < bound:
            proj_ok &= p == theta
    ok = worst <= 0.0 and proj_ok
    verdict("adaptive-law invariants", ok,
            f"max(|m_hat| - m_bar) over 20 seeded runs = {worst:.2e} (<= 0), projection suite {'passes' if proj_ok else 'FAILS'}")


def test_non_adaptive_error_flush():
    cfg = PlantConfig()
    t0 = time.perf_counter()
    tr = run_closed_loop(cfg, SimSettings(track_kernel_error=False), KernelProvider.numerical(cfg))
    elapsed = time.perf_counter() - t0
    scale = tr.psi_norm[0] + tr.phi_norm[0]
    late = tr.t >= FLUSH_AFTER
    worst = max(tr.e_norm[late].max(), tr.tau_norm[late].max())
    ok = worst <= FLUSH_FRACTION * scale and elapsed < 30.0
    verdict("non-adaptive error flush", ok,
            f"max(|e|,|tau|) for t>=2 = {worst:.2e} vs bound {FLUSH_FRACTION * scale:.2e}, runtime {elapsed:.1f}s (< 30s)")


def test_closed_loop_stabilization():
    cfg = PlantConfig()
    t0 = time.perf_counter()
    tr = run_closed_loop(cfg, SimSettings(track_kernel_error=False), KernelProvider.numerical(cfg))
    elapsed = time.perf_counter() - t0
    n0 = tr.psi_norm[0] + tr.phi_norm[0]
    n1 = tr.psi_norm[-1] + tr.phi_norm[-1]
    h2 = np.max(np.abs(tr.r_right))
    ok = (tr.abort_index is None and n1 <= DECAY_FRACTION * n0 and h2 <= H2_TOL
          and tr.V11[-1] < tr.V11[0] and elapsed < 120.0)
    verdict("closed-loop stabilization", ok,
            f"|psi|+|phi|: {n0:.3f} -> {n1:.2e} (<= 0.1x), max|h2(1)| {h2:.1e} (<= 1e-12), "
            f"V11: {tr.V11[0]:.1f} -> {tr.V11[-1]:.1e}, runtime {elapsed:.1f}s (< 120s)")


def test_surrogate_training(desk_training):
    best = {k: min(desk_training[k][1].test) for k in ("alpha", "beta")}
    final = {k: desk_training[k][1].test[-1] for k in ("alpha", "beta")}
    rng = np.random.default_rng(0)
    model = DeepONetModel.create("alpha", hidden=5, p=4, seed=2)
    model.bias0 = 0.2
    params = rng.uniform(-4, 4, size=(3, 4))
    tri = TriangleGrid(SpatialGrid.from_dx(0.25))
    target = rng.normal(size=(3, tri.size))
    _, (grads, _) = loss_and_gradients(model, params, tri.points, target)
    worst, h = 0.0, 1e-6
    for p, g in zip(model.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_and_gradients(model, params, tri.points, target)
            p[idx] = old - h
            lm, _ = loss_and_gradients(model, params, tri.points, target)
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    secs = desk_training["seconds"]
    ok = max(best.values()) <= TRAIN_MSE and worst <= GRAD_TOL and secs < 600
    verdict("surrogate training", ok,
            f"best test MSE alpha {best['alpha']:.2e}, beta {best['beta']:.2e} (final {final['alpha']:.2e}, "
            f"{final['beta']:.2e}; need <= 1e-3), gradient check {worst:.1e} (<= 1e-4), training {secs:.0f}s (< 600s)")


def test_surrogate_closed_loop(reference_trace, neural_trace):
    a = reference_trace.psi_norm + reference_trace.phi_norm
    b = neural_trace.psi_norm + neural_trace.phi_norm
    rel = np.sqrt(np.trapezoid((a - b) ** 2, reference_trace.t) / np.trapezoid(a ** 2, reference_trace.t))
    err = time_averaged_error(neural_trace)
    ok = neural_trace.abort_index is None and rel <= SURROGATE_L2 and err <= SURROGATE_KERR
    verdict("surrogate closed loop", ok,
            f"relative L2-in-time state-norm gap {rel:.3f} (<= 0.10), "
            f"time-averaged kernel error {err:.2e} (<= 1e-2)")


def test_speedup(desk_models):
    ma, mb, _, _ = desk_models
    cfg = PlantConfig()
    args = SimpleNamespace(dt=None, steps=2000, m_hat0=(0.4,) * 4, filter0=2.0, a=2.0, b=2.0)
    rows = [bench_row(cfg, args, dx, (ma, mb)) for dx in (0.02, 0.01, 0.005)]
    speed = [r["speedup"] for r in rows]
    monotone = all(s2 > s1 for s1, s2 in zip(speed, speed[1:]))
    ok = speed[-1] >= SPEEDUP_MIN and monotone
    table = ", ".join(f"dx={r['dx']}: {r['numerical_s']:.2f}s/{r['neural_s']:.2f}s={r['speedup']:.2f}x"
                      for r in rows)
    verdict("speedup", ok, f"{table} (need >= 10x at dx=0.005 and increasing)")


def test_determinism(tmp_path):
    def bytes_of(*parts):
        return (tmp_path.joinpath(*parts)).read_bytes()

    for name in ("d1", "d2"):
        assert run_command(["gen-data", "--n", "8", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    data_same = bytes_of("d1", "samples.bin") == bytes_of("d2", "samples.bin")
    for name in ("m1", "m2"):
        assert run_command(["train", "--data", str(tmp_path / "d1"), "--kernel", "alpha", "--epochs", "40",
                            "--seed", "3", "--out", str(tmp_path / f"{name}.json")]) == 0
    model_same = bytes_of("m1.json") == bytes_of("m2.json") and bytes_of("m1.loss.csv") == bytes_of("m2.loss.csv")
    for name in ("t1", "t2"):
        assert run_command(["simulate", "--mode", "numerical", "--out", str(tmp_path / f"{name}.csv")]) == 0
    trace_same = bytes_of("t1.csv") == bytes_of("t2.csv")
    ok = data_same and model_same and trace_same
    verdict("determinism", ok,
            f"gen-data bytes identical: {data_same}, train bytes identical: {model_same}, "
            f"numerical traces identical: {trace_same}")
