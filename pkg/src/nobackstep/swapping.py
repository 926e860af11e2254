"""Swapping-design filters, state estimates and projected gradient adaptive laws."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InvalidFieldError
from .grid import SpatialGrid, check_same_grid
from .plant import FieldPair, PlantConfig, advect_left, advect_right

FILTER_NAMES = ("n1", "n2", "n3", "z1", "z2", "z3")


@dataclass(frozen=True)
class FilterBank:
    """n1..n3 travel right at speed lam, z1..z3 travel left at speed mu."""

    grid: SpatialGrid
    n1: np.ndarray = field(repr=False)
    n2: np.ndarray = field(repr=False)
    n3: np.ndarray = field(repr=False)
    z1: np.ndarray = field(repr=False)
    z2: np.ndarray = field(repr=False)
    z3: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in FILTER_NAMES:
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.grid.n_points,):
                raise InvalidFieldError(f"filter {name} has shape {v.shape}")
            object.__setattr__(self, name, v)

    @classmethod
    def constant(cls, grid: SpatialGrid, value: float = 0.0) -> "FilterBank":
        return cls(grid, *(np.full(grid.n_points, float(value)) for _ in FILTER_NAMES))

    def with_boundaries(self, phi_left: float, U: float) -> "FilterBank":
        """Copy with all six boundary conditions imposed."""
        arrays = {name: getattr(self, name).copy() for name in FILTER_NAMES}
        arrays["n1"][0] = arrays["n2"][0] = 0.0
        arrays["n3"][0] = phi_left
        arrays["z1"][-1] = arrays["z2"][-1] = 0.0
        arrays["z3"][-1] = U
        return FilterBank(self.grid, **arrays)


@dataclass(frozen=True)
class ParamEstimate:
    m_hat: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m_hat, dtype=float).copy()
        b = np.asarray(self.bounds, dtype=float).copy()
        if m.shape != (4,) or b.shape != (4,):
            raise ConfigurationError("parameter estimate and bounds need 4 entries each")
        if np.any(np.abs(m) > b):
            raise ConfigurationError(f"estimate {m} lies outside its bounds {b}")
        object.__setattr__(self, "m_hat", m)
        object.__setattr__(self, "bounds", b)


@dataclass(frozen=True)
class ErrorFields:
    e_hat: np.ndarray
    tau_hat: np.ndarray
    e: np.ndarray | None = None
    tau: np.ndarray | None = None


def step_filters(bank: FilterBank, state: FieldPair, U: float, cfg: PlantConfig, dt: float,
                 phi_left: float | None = None) -> FilterBank:
    """Advance the six filters one upwind step with sources from ``state``.

    ``phi_left`` is the value imposed on n3(0); it defaults to state.phi[0].
    The closed loop passes the plant's *updated* phi(0) here so that the
    non-adaptive errors obey a pure transport law in the discrete scheme too.
    """
    check_same_grid(bank.grid, state.grid)
    dx = bank.grid.dx
    cfg.check_cfl(dt, dx)
    cr, cl = cfg.lam * dt / dx, cfg.mu * dt / dx
    psi, phi = state.psi, state.phi
    stepped = FilterBank(
        bank.grid,
        advect_right(bank.n1, cr, psi, dt),
        advect_right(bank.n2, cr, phi, dt),
        advect_right(bank.n3, cr, None, dt),
        advect_left(bank.z1, cl, psi, dt),
        advect_left(bank.z2, cl, phi, dt),
        advect_left(bank.z3, cl, None, dt),
    )
    return stepped.with_boundaries(phi[0] if phi_left is None else phi_left, U)


def estimates(bank: FilterBank, m_hat, q: float) -> tuple[np.ndarray, np.ndarray]:
    """psi_hat = n1 m1 + n2 m2 + q n3 and phi_hat = z1 m3 + z2 m4 + z3.

    Passing the true parameters gives the non-adaptive estimates.
    """
    m1, m2, m3, m4 = (m_hat.m_hat if isinstance(m_hat, ParamEstimate) else m_hat)
    psi_hat = bank.n1 * m1 + bank.n2 * m2 + q * bank.n3
    phi_hat = bank.z1 * m3 + bank.z2 * m4 + bank.z3
    return psi_hat, phi_hat


def prediction_errors(state: FieldPair, psi_hat, phi_hat, psi_bar=None, phi_bar=None) -> ErrorFields:
    n = state.grid.n_points
    for v in (psi_hat, phi_hat, psi_bar, phi_bar):
        if v is not None and np.shape(v) != (n,):
            raise InvalidFieldError(f"estimate of shape {np.shape(v)} does not match {n} grid nodes")
    e = None if psi_bar is None else state.psi - psi_bar
    tau = None if phi_bar is None else state.phi - phi_bar
    return ErrorFields(state.psi - psi_hat, state.phi - phi_hat, e, tau)


def projection(theta: float, m_hat_i: float, m_bar_i: float) -> float:
    """Zero the update when the estimate sits on/over its bound and would move outward."""
    if abs(m_hat_i) >= m_bar_i and theta * m_hat_i >= 0:
        return 0.0
    return theta


def adaptive_rates(bank: FilterBank, err: ErrorFields, rho) -> np.ndarray:
    """Unprojected update rates theta_1..theta_4."""
    g = bank.grid
    e_hat, tau_hat = err.e_hat, err.tau_hat
    n_norm = 1.0 + g.integrate(bank.n1 ** 2) + g.integrate(bank.n2 ** 2) + g.integrate(bank.n3 ** 2)
    z_norm = 1.0 + g.integrate(bank.z1 ** 2) + g.integrate(bank.z2 ** 2)
    z0_norm = 1.0 + bank.z1[0] ** 2 + bank.z2[0] ** 2
    theta = np.array([
        g.integrate(bank.n1 * e_hat) / n_norm,
        g.integrate(bank.n2 * e_hat) / n_norm,
        g.integrate(bank.z1 * tau_hat) / z_norm + bank.z1[0] * tau_hat[0] / z0_norm,
        g.integrate(bank.z2 * tau_hat) / z_norm + bank.z2[0] * tau_hat[0] / z0_norm,
    ])
    return np.asarray(rho, dtype=float) * theta


def step_adaptive_law(bank: FilterBank, err: ErrorFields, est: ParamEstimate, rho, dt: float) -> ParamEstimate:
    """Explicit Euler step of the projected law, then a hard clip to the bounds."""
    if np.any(np.asarray(rho) <= 0):
        raise ConfigurationError(f"adaptation gains must be positive: {rho}")
    theta = adaptive_rates(bank, err, rho)
    rate = np.array([projection(t, m, b) for t, m, b in zip(theta, est.m_hat, est.bounds)])
    m_new = np.clip(est.m_hat + dt * rate, -est.bounds, est.bounds)
    return replace(est, m_hat=m_new)
