import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nobackstep.errors import ConvergenceError, GridMismatchError
from nobackstep.grid import SpatialGrid, TriangleGrid, TriangleKernelGrid
from nobackstep.kernels import (NEURAL, KernelPair, backstepping_transform, boundary_input, control_law,
                                inverse_transform, solve_inverse_kernels, solve_kernels, volterra_residual)
from nobackstep.plant import REFERENCE_M
from oracles import characteristic_kernels

ORACLE_N = 641  # dx = 1/640, i.e. dx/16 for the finer test grid and dx/32 for the coarser one


@pytest.fixture(scope="module")
def oracle():
    return characteristic_kernels(REFERENCE_M, 1.0, ORACLE_N)


def tri_of(dx):
    return TriangleGrid(SpatialGrid.from_dx(dx))


def const_pair(tri, a, b):
    return KernelPair(TriangleKernelGrid(tri, np.full(tri.size, float(a))),
                      TriangleKernelGrid(tri, np.full(tri.size, float(b))))


def sup_error_vs_oracle(dx, oracle):
    A, B = oracle
    k = solve_kernels(REFERENCE_M, 1.0, 1.0, 1.0, tri_of(dx))
    s = (ORACLE_N - 1) // (k.tri.n_rows - 1)
    mask = np.tril(np.ones((k.tri.n_rows,) * 2, dtype=bool))
    ea = np.abs(k.alpha.dense() - A[::s, ::s])[mask].max()
    eb = np.abs(k.beta.dense() - B[::s, ::s])[mask].max()
    return max(ea, eb)


def test_zero_parameters_give_zero_kernels():
    k = solve_kernels((0, 0, 0, 0), 1.0, 1.0, 1.0, tri_of(0.02))
    assert not k.alpha.values.any() and not k.beta.values.any()


@settings(max_examples=20, deadline=None)
@given(m1=st.floats(-4, 4), m2=st.floats(-4, 4), m4=st.floats(-4, 4), q=st.floats(-2, 2))
def test_zero_m3_gives_zero_kernels(m1, m2, m4, q):
    k = solve_kernels((m1, m2, 0.0, m4), 1.0, 1.0, q, tri_of(0.05))
    assert not k.alpha.values.any() and not k.beta.values.any()


@settings(max_examples=25, deadline=None)
@given(m=st.tuples(*[st.floats(-4, 4)] * 4), q=st.floats(-2, 2),
       lam=st.sampled_from([0.5, 1.0, 2.0]), mu=st.sampled_from([0.5, 1.0, 3.0]))
def test_boundary_rules_exact(m, q, lam, mu):
    k = solve_kernels(m, lam, mu, q, tri_of(0.05))
    assert np.max(np.abs(k.alpha.diagonal() + m[2] / (lam + mu))) <= 1e-14
    tri = k.tri
    assert np.array_equal(k.beta.values[tri.base_index], q * lam / mu * k.alpha.values[tri.base_index])


def test_reference_diagonal(ref_kernels_02):
    assert np.all(ref_kernels_02.alpha.diagonal() == -0.5)


def test_against_characteristic_oracle(oracle):
    e_coarse = sup_error_vs_oracle(0.05, oracle)
    e_fine = sup_error_vs_oracle(0.025, oracle)
    assert e_coarse <= 5 * 0.05
    assert e_fine <= 5 * 0.025
    assert e_coarse / e_fine >= 1.8


@pytest.mark.parametrize("lam,mu", [(2.0, 1.0), (1.0, 2.0)])
def test_unequal_speeds_converge(lam, mu):
    ref = solve_kernels(REFERENCE_M, lam, mu, 1.0, TriangleGrid(SpatialGrid(321)))
    R, RB = ref.alpha.dense(), ref.beta.dense()
    errs = []
    for n in (21, 41):
        k = solve_kernels(REFERENCE_M, lam, mu, 1.0, TriangleGrid(SpatialGrid(n)))
        s = 320 // (n - 1)
        errs.append(max(np.abs(k.alpha.dense() - R[::s, ::s]).max(),
                        np.abs(np.tril(k.beta.dense() - RB[::s, ::s])).max()))
    assert errs[0] / errs[1] >= 1.8


def test_inverse_trivial_cases():
    tri = tri_of(0.05)
    k = const_pair(tri, 0.0, 0.0)
    ki = solve_inverse_kernels(k)
    assert not ki.alpha.values.any() and not ki.beta.values.any()
    x = tri.points[:, 0]
    k = KernelPair(TriangleKernelGrid(tri, np.sin(3 * x)), TriangleKernelGrid(tri, np.zeros(tri.size)))
    ki = solve_inverse_kernels(k)
    assert np.array_equal(ki.alpha.values, k.alpha.values)
    assert not ki.beta.values.any()


def test_inverse_residual(ref_kernels_02):
    ki = solve_inverse_kernels(ref_kernels_02)
    assert volterra_residual(ref_kernels_02, ki) <= 1e-8


def test_inverse_iteration_cap(ref_kernels_02):
    with pytest.raises(ConvergenceError):
        solve_inverse_kernels(ref_kernels_02, max_iter=2)


def test_control_law_trivial():
    tri = tri_of(0.02)
    n = tri.n_rows
    r = np.random.default_rng(0)
    assert control_law(const_pair(tri, 0, 0), r.normal(size=n), r.normal(size=n)) == 0.0
    U = control_law(const_pair(tri, 1.5, -0.25), np.full(n, 2.0), np.full(n, 4.0))
    assert U == pytest.approx(1.5 * 2.0 - 0.25 * 4.0, abs=1e-14)


def test_control_law_against_fine_quadrature(ref_kernels_02, oracle):
    # Filters start at 2, so with m_hat = reference values the estimates are constants.
    m1, m2, m3, m4 = REFERENCE_M
    a_val, b_val = 2 * (m1 + m2) + 2.0, 2 * (m3 + m4) + 2.0
    n = ref_kernels_02.tri.n_rows
    U = control_law(ref_kernels_02, np.full(n, a_val), np.full(n, b_val))
    A, B = oracle
    xi = np.linspace(0, 1, ORACLE_N)
    ref = a_val * np.trapezoid(A[-1], xi) + b_val * np.trapezoid(B[-1], xi)
    assert abs(U - ref) <= 1e-3 * (abs(U) + 1)


def test_boundary_input_is_consistent(ref_kernels_02):
    r = np.random.default_rng(3)
    n = ref_kernels_02.tri.n_rows
    psi_hat, phi_hat = r.normal(size=n), r.normal(size=n)
    U = boundary_input(ref_kernels_02, psi_hat, phi_hat)
    phi_hat[-1] = U
    assert control_law(ref_kernels_02, psi_hat, phi_hat) == pytest.approx(U, abs=1e-13)


def test_transform_examples():
    tri = tri_of(0.02)
    n = tri.n_rows
    r = np.random.default_rng(1)
    psi_hat, phi_hat = r.normal(size=n), r.normal(size=n)
    f2, h2 = backstepping_transform(const_pair(tri, 0, 0), psi_hat, phi_hat)
    assert np.array_equal(f2, psi_hat) and np.array_equal(h2, phi_hat)
    c = 0.7
    _, h2 = backstepping_transform(const_pair(tri, 0, c), np.zeros(n), np.ones(n))
    assert np.allclose(h2, 1 - c * tri.base.x, atol=1e-14, rtol=0)


def test_h2_at_one_matches_control(ref_kernels_02):
    r = np.random.default_rng(2)
    n = ref_kernels_02.tri.n_rows
    psi_hat, phi_hat = r.normal(size=n), r.normal(size=n)
    U = control_law(ref_kernels_02, psi_hat, phi_hat)
    _, h2 = backstepping_transform(ref_kernels_02, psi_hat, phi_hat)
    assert abs(h2[-1] - (phi_hat[-1] - U)) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_round_trip_transform(seed):
    k = solve_kernels(REFERENCE_M, 1.0, 1.0, 1.0, tri_of(0.02))
    ki = solve_inverse_kernels(k)
    x = k.tri.base.x
    r = np.random.default_rng(seed)
    c = r.normal(size=(2, 3))
    psi_hat = c[0, 0] + c[0, 1] * np.sin(2 * x + c[0, 2])
    phi_hat = c[1, 0] + c[1, 1] * np.cos(3 * x + c[1, 2])
    f2, h2 = backstepping_transform(k, psi_hat, phi_hat)
    psi_back, phi_back = inverse_transform(ki, f2, h2)
    assert np.array_equal(psi_back, psi_hat)
    assert np.max(np.abs(phi_back - phi_hat)) <= 10 * 0.02


def test_shape_mismatch(ref_kernels_02):
    with pytest.raises(GridMismatchError):
        control_law(ref_kernels_02, np.zeros(10), np.zeros(10))


def test_provenance_tag():
    tri = tri_of(0.05)
    z = TriangleKernelGrid(tri, np.zeros(tri.size))
    assert KernelPair(z, z, NEURAL).provenance == NEURAL
    with pytest.raises(ValueError):
        KernelPair(z, z, "guess")
