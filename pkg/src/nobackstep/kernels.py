"""Backstepping kernels on the triangle 0 <= xi <= x <= 1.

    mu a_x - lam a_xi = (m1 - m4) a + m3 b,     a(x, x) = -m3 / (lam + mu)
    mu b_x + mu  b_xi = m2 a,                   b(x, 0) = q (lam / mu) a(x, 0)

Both kernels are marched in x from the apex.  Information for ``a`` flows
from the diagonal toward xi = 0 and for ``b`` from xi = 0 toward the
diagonal, so every stencil looks upstream along its characteristic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError, ConvergenceError, DivergenceError, GridMismatchError
from .grid import TriangleGrid, TriangleKernelGrid, check_same_triangle

NUMERICAL = "numerical"
NEURAL = "neural"


@dataclass(frozen=True)
class KernelPair:
    alpha: TriangleKernelGrid
    beta: TriangleKernelGrid
    provenance: str = NUMERICAL

    def __post_init__(self):
        check_same_triangle(self.alpha.grid, self.beta.grid)
        if self.provenance not in (NUMERICAL, NEURAL):
            raise ConfigurationError(f"unknown kernel provenance {self.provenance!r}")

    @property
    def tri(self) -> TriangleGrid:
        return self.alpha.grid


def solve_kernels(m_hat, lam: float, mu: float, q: float, tri: TriangleGrid) -> KernelPair:
    """First-order upwind march of the kernel equations.

    For lam <= mu the alpha update is explicit (ratio lam/mu <= 1) and
    sources are taken at the upwind foot of each characteristic, so that for
    lam == mu the step is exact transport plus an Euler source term.  The
    node next to the diagonal is integrated over its true (half-cell)
    characteristic length.  For lam > mu the xi-difference is taken on the
    new row instead, which turns each row into a backward recurrence from
    the diagonal; that variant is stable for any ratio.
    """
    if not lam > 0 or not mu > 0:
        raise ConfigurationError(f"transport speeds must be positive (lam={lam}, mu={mu})")
    m1, m2, m3, m4 = (float(v) for v in m_hat)
    n = tri.n_rows
    dx = tri.dx
    r = lam / mu
    c = dx / mu
    diag = -m3 / (lam + mu)
    reflect = q * lam / mu
    implicit = r > 1.0
    lag = lam / (lam + mu)

    A = np.zeros((n, n))
    B = np.zeros((n, n))
    A[0, 0] = diag
    B[0, 0] = reflect * diag
    # Backward characteristic from (x_i, xi_{i-1}) reaches the diagonal after
    # this much "time" (x moves mu*s, xi moves lam*s).
    s_sub = dx / (lam + mu)
    for i in range(1, n):
        a_prev = A[i - 1, :i]
        b_prev = B[i - 1, :i]
        src = (m1 - m4) * a_prev + m3 * b_prev
        if implicit:
            u = (mu * a_prev + dx * src) / (lam + mu)
            row, _ = lfilter([1.0], [1.0, -lag], u[::-1], zi=[lag * diag])
            A[i, :i] = row[::-1]
        else:
            # Upwind interpolation to the characteristic foot, applied to the
            # transported value and to the source alike.
            a_new = A[i, :i]
            a_new[:-1] = (1.0 - r) * (a_prev[:-1] + c * src[:-1]) + r * (a_prev[1:] + c * src[1:])
            a_new[-1] = diag + s_sub * ((m1 - m4) * diag + m3 * b_prev[-1])
        A[i, i] = diag
        B[i, 1:i + 1] = b_prev + (c * m2) * a_prev
        B[i, 0] = reflect * A[i, 0]

    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        bad = np.flatnonzero(~(np.isfinite(A).all(axis=1) & np.isfinite(B).all(axis=1)))[0]
        raise DivergenceError(f"kernel march became non-finite at row {bad} for m_hat={tuple(m_hat)}",
                              index=int(bad))
    return KernelPair(TriangleKernelGrid(tri, tri.ragged(A)), TriangleKernelGrid(tri, tri.ragged(B)),
                      NUMERICAL)


def _volterra_term(beta_w: np.ndarray, beta_diag: np.ndarray, K: np.ndarray, dx: float) -> np.ndarray:
    """Trapezoid value of int_{xi_j}^{x_i} beta(x_i, s) K(s, xi_j) ds for all i >= j.

    ``beta_w`` is the dense lower-triangular beta scaled by dx; a full-weight
    matrix product is corrected at the two interval ends.
    """
    full = beta_w @ K
    k_diag = np.diag(K)
    ends = 0.5 * dx * (beta_diag[:, None] * K + (beta_w / dx) * k_diag[None, :])
    return np.tril(full - ends)


def solve_inverse_kernels(k: KernelPair, tol: float = 1e-10, max_iter: int = 64) -> KernelPair:
    """Successive approximation of

        a_I(x, xi) = a(x, xi) + int_xi^x b(x, s) a_I(s, xi) ds
        b_I(x, xi) = b(x, xi) + int_xi^x b(x, s) b_I(s, xi) ds
    """
    if not tol > 0:
        raise ConfigurationError(f"tol must be positive, got {tol}")
    tri = k.tri
    dx = tri.dx
    a = k.alpha.dense()
    b = k.beta.dense()
    bw = dx * b
    bd = np.diag(b).copy()
    a_i, b_i = a.copy(), b.copy()
    for it in range(1, max_iter + 1):
        a_new = a + _volterra_term(bw, bd, a_i, dx)
        b_new = b + _volterra_term(bw, bd, b_i, dx)
        change = max(np.max(np.abs(a_new - a_i)), np.max(np.abs(b_new - b_i)))
        a_i, b_i = a_new, b_new
        if not np.isfinite(change):
            raise ConvergenceError(f"Volterra iteration became non-finite at iteration {it}")
        if change < tol:
            return KernelPair(TriangleKernelGrid(tri, tri.ragged(a_i)),
                              TriangleKernelGrid(tri, tri.ragged(b_i)), k.provenance)
    raise ConvergenceError(f"Volterra iteration did not reach tol={tol} in {max_iter} iterations "
                           f"(last update {change:.3e})")


def volterra_residual(k: KernelPair, k_inv: KernelPair) -> float:
    """Sup-norm residual of the discrete inverse-kernel equations."""
    tri = k.tri
    dx = tri.dx
    a, b = k.alpha.dense(), k.beta.dense()
    a_i, b_i = k_inv.alpha.dense(), k_inv.beta.dense()
    bw, bd = dx * b, np.diag(b).copy()
    ra = a_i - a - _volterra_term(bw, bd, a_i, dx)
    rb = b_i - b - _volterra_term(bw, bd, b_i, dx)
    return float(max(np.max(np.abs(ra)), np.max(np.abs(rb))))


def _check_row(k: KernelPair, *fields) -> None:
    n = k.tri.n_rows
    for f in fields:
        if np.shape(f) != (n,):
            raise GridMismatchError(f"field with {np.shape(f)} nodes does not match kernel rows ({n})")


def control_law(k: KernelPair, psi_hat, phi_hat) -> float:
    """U = int_0^1 a(1, xi) psi_hat dxi + int_0^1 b(1, xi) phi_hat dxi."""
    _check_row(k, psi_hat, phi_hat)
    w = k.tri.base.weights
    return float(np.dot(w, k.alpha.last_row() * psi_hat) + np.dot(w, k.beta.last_row() * phi_hat))


def boundary_input(k: KernelPair, psi_hat, phi_hat) -> float:
    """Control value consistent with phi_hat(1) = U.

    The trapezoid sum of the control law contains phi_hat(1) itself with
    weight dx/2, so the boundary condition makes the law implicit in U.
    ``phi_hat`` is taken without the input contribution at x = 1 (its last
    entry is ignored).  The returned U satisfies
    ``control_law(k, psi_hat, phi_hat_with_U) == U`` up to rounding.
    """
    _check_row(k, psi_hat, phi_hat)
    phi = np.array(phi_hat, dtype=float)
    phi[-1] = 0.0
    rest = control_law(k, psi_hat, phi)
    self_weight = k.tri.base.weights[-1] * k.beta.last_row()[-1]
    if abs(1.0 - self_weight) < 1e-12:
        raise ConfigurationError("control law is singular: dx/2 * beta(1, 1) == 1")
    return rest / (1.0 - self_weight)


def _row_integrals(kernel: TriangleKernelGrid, f) -> np.ndarray:
    """Vector of int_0^{x_i} kernel(x_i, xi) f(xi) dxi over all rows."""
    tri = kernel.grid
    i, j = tri.index_arrays
    prod = tri.inner_weights * kernel.values * np.asarray(f)[j]
    return np.add.reduceat(prod, tri.base_index)


def backstepping_transform(k: KernelPair, psi_hat, phi_hat) -> tuple[np.ndarray, np.ndarray]:
    """(f2, h2) with f2 = psi_hat and h2 = phi_hat - int a psi_hat - int b phi_hat."""
    _check_row(k, psi_hat, phi_hat)
    f2 = np.array(psi_hat, dtype=float)
    h2 = np.asarray(phi_hat, dtype=float) - _row_integrals(k.alpha, psi_hat) - _row_integrals(k.beta, phi_hat)
    return f2, h2


def inverse_transform(k_inv: KernelPair, f2, h2) -> tuple[np.ndarray, np.ndarray]:
    """(psi_hat, phi_hat) from target coordinates using the inverse kernels."""
    _check_row(k_inv, f2, h2)
    phi_hat = np.asarray(h2, dtype=float) + _row_integrals(k_inv.alpha, f2) + _row_integrals(k_inv.beta, h2)
    return np.array(f2, dtype=float), phi_hat
