"""Coupled 2x2 linear hyperbolic plant, advanced by first-order upwinding.

    psi_t + lam psi_x = m1 psi + m2 phi,     psi(0) = q phi(0)
    phi_t - mu  phi_x = m3 psi + m4 phi,     phi(1) = U
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, InvalidFieldError
from .grid import SpatialGrid

REFERENCE_M = (0.4, 0.6, 1.0, 0.8)  # coupling coefficients of the reference scenario


@dataclass(frozen=True)
class PlantConfig:
    lam: float = 1.0
    mu: float = 1.0
    q: float = 1.0
    m: tuple = REFERENCE_M
    m_bar: tuple = (4.0, 4.0, 4.0, 4.0)
    rho: tuple = (40.0, 40.0, 40.0, 40.0)

    def __post_init__(self):
        for name in ("m", "m_bar", "rho"):
            v = tuple(float(a) for a in getattr(self, name))
            if len(v) != 4:
                raise ConfigurationError(f"{name} needs 4 entries, got {len(v)}")
            object.__setattr__(self, name, v)
        if not self.lam > 0 or not self.mu > 0:
            raise ConfigurationError(f"transport speeds must be positive (lam={self.lam}, mu={self.mu})")
        if any(not b > 0 for b in self.m_bar):
            raise ConfigurationError(f"parameter bounds must be positive: {self.m_bar}")
        if any(not r > 0 for r in self.rho):
            raise ConfigurationError(f"adaptation gains must be positive: {self.rho}")
        for i, (mi, bi) in enumerate(zip(self.m, self.m_bar), start=1):
            if abs(mi) > bi:
                raise ConfigurationError(f"|m{i}| = {abs(mi)} exceeds its bound {bi}")

    def check_cfl(self, dt: float, dx: float) -> None:
        if not dt > 0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        for name, speed in (("lambda", self.lam), ("mu", self.mu)):
            if speed * dt / dx > 1.0 + 1e-12:
                raise ConfigurationError(
                    f"CFL violated for {name}: {speed}*{dt}/{dx} = {speed * dt / dx:.4g} > 1")


@dataclass(frozen=True)
class FieldPair:
    grid: SpatialGrid
    psi: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("psi", "phi"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.grid.n_points,):
                raise InvalidFieldError(f"{name} has shape {v.shape}, expected ({self.grid.n_points},)")
            object.__setattr__(self, name, v)

    @classmethod
    def from_functions(cls, grid: SpatialGrid, psi0, phi0) -> "FieldPair":
        x = grid.x
        return cls(grid, np.broadcast_to(psi0(x), x.shape).astype(float),
                   np.broadcast_to(phi0(x), x.shape).astype(float))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.psi)) and np.all(np.isfinite(self.phi)))


def advect_right(u: np.ndarray, courant: float, source: np.ndarray | None, dt: float) -> np.ndarray:
    """Upwind step of u_t + c u_x = source; node 0 is left for the caller to set."""
    out = np.empty_like(u)
    out[1:] = u[1:] - courant * (u[1:] - u[:-1])
    out[0] = u[0]
    if source is not None:
        out[1:] += dt * source[1:]
    return out


def advect_left(u: np.ndarray, courant: float, source: np.ndarray | None, dt: float) -> np.ndarray:
    """Upwind step of u_t - c u_x = source; the last node is left for the caller."""
    out = np.empty_like(u)
    out[:-1] = u[:-1] - courant * (u[:-1] - u[1:])
    out[-1] = u[-1]
    if source is not None:
        out[:-1] += dt * source[:-1]
    return out


def step_plant(state: FieldPair, cfg: PlantConfig, U: float, dt: float,
               step_index: int | None = None) -> FieldPair:
    """One explicit upwind step; sources use the old time level.

    Boundary order: interior first, then phi(1) = U, then psi(0) = q*phi(0)
    with the updated phi(0).
    """
    grid = state.grid
    dx = grid.dx
    cfg.check_cfl(dt, dx)
    m1, m2, m3, m4 = cfg.m
    psi, phi = state.psi, state.phi
    new_psi = advect_right(psi, cfg.lam * dt / dx, m1 * psi + m2 * phi, dt)
    new_phi = advect_left(phi, cfg.mu * dt / dx, m3 * psi + m4 * phi, dt)
    new_phi[-1] = U
    new_psi[0] = cfg.q * new_phi[0]
    out = FieldPair(grid, new_psi, new_phi)
    if not out.is_finite():
        where = "" if step_index is None else f" at step {step_index}"
        raise DivergenceError(f"plant state became non-finite{where}", index=step_index)
    return out
