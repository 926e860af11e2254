"""Closed-loop adaptive backstepping with a pluggable kernel provider.

One control step, from level k to k+1:

1. adaptive law from the level-k filters and prediction errors;
2. interior upwind updates of plant and filters (sources at level k,
   n3(0) from the new phi(0));
3. kernels for the new estimate (the only timed part);
4. the input U is solved so that phi(1) = z3(1) = phi_hat(1) = U holds
   exactly together with the trapezoid control law.

Step 4 makes the target-system identity h2(1) = U - U_hat an exact
discrete identity rather than an O(dt) one.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DivergenceError, FormatError
from .grid import SpatialGrid, TriangleGrid, check_same_triangle, triangle_integral
from .kernels import NEURAL, NUMERICAL, KernelPair, backstepping_transform, boundary_input, solve_kernels
from .neuralop import DeepONetModel, _atomic_write, kernel_grid_from_model
from .plant import FieldPair, PlantConfig, step_plant
from .swapping import FilterBank, ParamEstimate, estimates, prediction_errors, step_adaptive_law, step_filters

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("t", "psi_norm", "phi_norm", "U", "m1_hat", "m2_hat", "m3_hat", "m4_hat",
                 "e_hat_norm", "tau_hat_norm", "kerr_alpha", "kerr_beta", "V11", "r_left", "r_right")


class KernelProvider:
    """Produces (alpha, beta) for an estimate and accumulates wall-clock time per call."""

    def __init__(self, mode: str = NUMERICAL, lam: float = 1.0, mu: float = 1.0, q: float = 1.0,
                 model_alpha: DeepONetModel | None = None, model_beta: DeepONetModel | None = None):
        if mode not in (NUMERICAL, NEURAL):
            raise ConfigurationError(f"provider mode must be numerical or neural, got {mode!r}")
        if mode == NEURAL and (model_alpha is None or model_beta is None):
            raise ConfigurationError("neural provider needs both an alpha and a beta model")
        if mode == NEURAL and (model_alpha.kernel != "alpha" or model_beta.kernel != "beta"):
            raise ConfigurationError("model kernel tags must be alpha and beta respectively")
        self.mode = mode
        self.lam, self.mu, self.q = lam, mu, q
        self.model_alpha, self.model_beta = model_alpha, model_beta
        self.elapsed = 0.0
        self.calls = 0

    @classmethod
    def numerical(cls, cfg: PlantConfig) -> "KernelProvider":
        return cls(NUMERICAL, cfg.lam, cfg.mu, cfg.q)

    @classmethod
    def neural(cls, cfg: PlantConfig, model_alpha, model_beta) -> "KernelProvider":
        return cls(NEURAL, cfg.lam, cfg.mu, cfg.q, model_alpha, model_beta)

    def warm_up(self, tri: TriangleGrid) -> None:
        """Build the neural trunk basis for ``tri`` outside the timed region."""
        if self.mode == NEURAL:
            self.model_alpha.trunk_basis(tri)
            self.model_beta.trunk_basis(tri)

    def __call__(self, m_hat, tri: TriangleGrid) -> KernelPair:
        t0 = time.perf_counter()
        if self.mode == NUMERICAL:
            k = solve_kernels(m_hat, self.lam, self.mu, self.q, tri)
        else:
            k = kernel_grid_from_model(self.model_alpha, self.model_beta, m_hat, tri)
        self.elapsed += time.perf_counter() - t0
        self.calls += 1
        return k


@dataclass(frozen=True)
class LyapunovWeights:
    """Weights of V11; the d's default to the closed-form choice in terms of a, b, lam, mu, q."""

    a: float = 2.0
    b: float = 2.0
    d: tuple | None = None

    def __post_init__(self):
        if not (self.a > 1 and self.b > 1):
            raise ConfigurationError(f"a and b must exceed 1 (a={self.a}, b={self.b})")

    def coefficients(self, lam: float, mu: float, q: float) -> np.ndarray:
        if self.d is not None:
            return np.asarray(self.d, dtype=float)
        a, b = self.a, self.b
        d1 = d2 = math.exp(-a)
        d3 = d4 = math.exp(-b - a)
        d5 = 1.0
        d6 = (2 * d2 * lam + 2 * d5 * lam * q * q) / mu
        return np.array([d1, d2, d3, d4, d5, d6, math.exp(b + a), math.exp(b)])


def lyapunov_report(bank: FilterBank, f2, h2, e, tau, weights: LyapunovWeights,
                    lam: float, mu: float, q: float) -> np.ndarray:
    """V1..V11 as a length-11 vector (index 0 holds V1)."""
    g = bank.grid
    left = np.exp(-weights.a * g.x)   # weight for right-moving quantities
    right = np.exp(weights.b * g.x)   # weight for left-moving quantities

    def wn(v, w):
        return g.integrate(w * np.asarray(v) ** 2)

    V = np.empty(11)
    V[0], V[1], V[2] = wn(bank.n1, left), wn(bank.n2, left), wn(bank.n3, left)
    V[3], V[4], V[5] = wn(bank.z1, right), wn(bank.z2, right), wn(bank.z3, right)
    V[6], V[7] = wn(f2, left), wn(h2, right)
    V[8], V[9] = wn(e, left), wn(tau, right)
    d = weights.coefficients(lam, mu, q)
    V[10] = (d[0] * (V[0] + V[1]) + d[1] * V[2] + d[2] * (V[3] + V[4]) + d[3] * V[5]
             + d[4] * V[6] + d[5] * V[7] + d[6] * V[8] + d[7] * V[9])
    return V


def boundary_residuals(f2, h2, tau_hat, q: float, u_applied: float, u_hat: float) -> tuple[float, float]:
    """Residuals of f2(0) = q h2(0) + q tau_hat(0) and h2(1) = U_applied - U_hat."""
    r_left = f2[0] - q * h2[0] - q * tau_hat[0]
    r_right = h2[-1] - (u_applied - u_hat)
    return float(r_left), float(r_right)


@dataclass(frozen=True)
class KernelErrors:
    tri_alpha: float   # int int |alpha_num - alpha_other| over the triangle
    tri_beta: float
    mean_alpha: float  # plain mean of |entries|
    mean_beta: float


def kernel_error_metrics(k_num: KernelPair, k_other: KernelPair) -> KernelErrors:
    check_same_triangle(k_num.tri, k_other.tri)
    da = abs(k_num.alpha - k_other.alpha)
    db = abs(k_num.beta - k_other.beta)
    return KernelErrors(triangle_integral(da), triangle_integral(db),
                        float(np.mean(da.values)), float(np.mean(db.values)))


@dataclass
class SimSettings:
    dx: float = 0.02
    dt: float = 0.005
    t_end: float = 10.0
    m_hat0: tuple = (0.4, 0.4, 0.4, 0.4)
    filter0: float = 2.0
    psi0: object = lambda x: np.ones_like(x)
    phi0: object = lambda x: 2.0 * np.sin(10.0 * x) + 3.0
    weights: LyapunovWeights = field(default_factory=LyapunovWeights)
    track_kernel_error: bool = True
    keep_fields: bool = False

    @property
    def n_steps(self) -> int:
        n = round(self.t_end / self.dt)
        if n < 1 or abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ConfigurationError(f"t_end={self.t_end} is not a whole number of steps dt={self.dt}")
        return n


@dataclass
class SimTrace:
    t: np.ndarray
    psi_norm: np.ndarray
    phi_norm: np.ndarray
    U: np.ndarray
    m_hat: np.ndarray         # (steps, 4)
    e_hat_norm: np.ndarray
    tau_hat_norm: np.ndarray
    e_norm: np.ndarray        # non-adaptive errors (diagnostic)
    tau_norm: np.ndarray
    kerr_alpha: np.ndarray    # triangle metric of |alpha_num - alpha_used|
    kerr_beta: np.ndarray
    kmean_alpha: np.ndarray
    kmean_beta: np.ndarray
    V: np.ndarray             # (steps, 11)
    r_left: np.ndarray
    r_right: np.ndarray
    psi_final: np.ndarray
    phi_final: np.ndarray
    provider_time: float
    mode: str
    abort_index: int | None = None
    psi_history: np.ndarray | None = None
    phi_history: np.ndarray | None = None

    @property
    def V11(self) -> np.ndarray:
        return self.V[:, 10]

    def __len__(self):
        return len(self.t)


def time_averaged_error(trace: SimTrace) -> float:
    """(1/T) * trapezoid-in-time of the per-step triangle kernel error."""
    if len(trace) < 2:
        return float(trace.kerr_alpha[0] + trace.kerr_beta[0]) if len(trace) else 0.0
    total = trace.kerr_alpha + trace.kerr_beta
    span = trace.t[-1] - trace.t[0]
    return float(np.trapezoid(total, trace.t) / span)


def _close_boundaries(state: FieldPair, bank: FilterBank, est: ParamEstimate, k: KernelPair, q: float):
    """Impose all boundary conditions with the implicitly consistent input U."""
    bank = bank.with_boundaries(state.phi[0], 0.0)
    psi_hat, phi_hat = estimates(bank, est, q)
    U = boundary_input(k, psi_hat, phi_hat)
    bank.z3[-1] = U
    phi_hat[-1] += U
    psi, phi = state.psi.copy(), state.phi.copy()
    phi[-1] = U
    psi[0] = q * phi[0]
    return FieldPair(state.grid, psi, phi), bank, psi_hat, phi_hat, U


def run_closed_loop(cfg: PlantConfig, settings: SimSettings, provider: KernelProvider) -> SimTrace:
    grid = SpatialGrid.from_dx(settings.dx)
    tri = TriangleGrid(grid)
    cfg.check_cfl(settings.dt, grid.dx)
    n_steps = settings.n_steps
    dt, q = settings.dt, cfg.q
    provider.warm_up(tri)
    track = settings.track_kernel_error and provider.mode == NEURAL

    state = FieldPair.from_functions(grid, settings.psi0, settings.phi0)
    bank = FilterBank.constant(grid, settings.filter0)
    est = ParamEstimate(np.asarray(settings.m_hat0, dtype=float), np.asarray(cfg.m_bar))
    kernels = provider(est.m_hat, tri)
    state, bank, psi_hat, phi_hat, U = _close_boundaries(state, bank, est, kernels, q)

    rows = n_steps + 1
    rec = {name: np.full(rows, np.nan) for name in (
        "psi_norm", "phi_norm", "U", "e_hat_norm", "tau_hat_norm", "e_norm", "tau_norm",
        "kerr_alpha", "kerr_beta", "kmean_alpha", "kmean_beta", "r_left", "r_right")}
    m_rec = np.full((rows, 4), np.nan)
    V_rec = np.full((rows, 11), np.nan)
    psi_hist = np.full((rows, grid.n_points), np.nan) if settings.keep_fields else None
    phi_hist = np.full((rows, grid.n_points), np.nan) if settings.keep_fields else None
    abort = None

    def norm(v):
        return math.sqrt(grid.integrate(v * v))

    for k in range(rows):
        psi_bar, phi_bar = estimates(bank, cfg.m, q)
        err = prediction_errors(state, psi_hat, phi_hat, psi_bar, phi_bar)
        f2, h2 = backstepping_transform(kernels, psi_hat, phi_hat)
        rec["psi_norm"][k] = norm(state.psi)
        rec["phi_norm"][k] = norm(state.phi)
        rec["U"][k] = U
        m_rec[k] = est.m_hat
        rec["e_hat_norm"][k] = norm(err.e_hat)
        rec["tau_hat_norm"][k] = norm(err.tau_hat)
        rec["e_norm"][k] = norm(err.e)
        rec["tau_norm"][k] = norm(err.tau)
        V_rec[k] = lyapunov_report(bank, f2, h2, err.e, err.tau, settings.weights, cfg.lam, cfg.mu, q)
        # The applied input is computed from the provider's kernels, so U_hat == U_applied.
        rec["r_left"][k], rec["r_right"][k] = boundary_residuals(f2, h2, err.tau_hat, q, U, U)
        if track:
            ke = kernel_error_metrics(solve_kernels(est.m_hat, cfg.lam, cfg.mu, q, tri), kernels)
            rec["kerr_alpha"][k], rec["kerr_beta"][k] = ke.tri_alpha, ke.tri_beta
            rec["kmean_alpha"][k], rec["kmean_beta"][k] = ke.mean_alpha, ke.mean_beta
        else:
            for name in ("kerr_alpha", "kerr_beta", "kmean_alpha", "kmean_beta"):
                rec[name][k] = 0.0
        if psi_hist is not None:
            psi_hist[k], phi_hist[k] = state.psi, state.phi
        if k == n_steps:
            break
        try:
            new_est = step_adaptive_law(bank, err, est, cfg.rho, dt)
            new_state = step_plant(state, cfg, U, dt, step_index=k + 1)
            bank = step_filters(bank, state, U, cfg, dt, phi_left=new_state.phi[0])
            est = new_est
            kernels = provider(est.m_hat, tri)
            state, bank, psi_hat, phi_hat, U = _close_boundaries(new_state, bank, est, kernels, q)
            if not (np.isfinite(U) and state.is_finite()):
                raise DivergenceError(f"closed loop became non-finite at step {k + 1}", index=k + 1)
        except DivergenceError as exc:
            log.warning("%s", exc)
            abort = k + 1
            break

    last = rows if abort is None else abort
    t = np.arange(rows) * dt
    return SimTrace(
        t[:last], *(rec[name][:last] for name in (
            "psi_norm", "phi_norm", "U")), m_rec[:last],
        *(rec[name][:last] for name in (
            "e_hat_norm", "tau_hat_norm", "e_norm", "tau_norm", "kerr_alpha", "kerr_beta",
            "kmean_alpha", "kmean_beta")),
        V_rec[:last], rec["r_left"][:last], rec["r_right"][:last],
        state.psi.copy(), state.phi.copy(), provider.elapsed, provider.mode, abort,
        None if psi_hist is None else psi_hist[:last], None if phi_hist is None else phi_hist[:last])


def trace_rows(trace: SimTrace):
    for k in range(len(trace)):
        yield (trace.t[k], trace.psi_norm[k], trace.phi_norm[k], trace.U[k], *trace.m_hat[k],
               trace.e_hat_norm[k], trace.tau_hat_norm[k], trace.kerr_alpha[k], trace.kerr_beta[k],
               trace.V11[k], trace.r_left[k], trace.r_right[k])


def write_trace_csv(trace: SimTrace, path) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    lines += [",".join(repr(float(v)) for v in row) for row in trace_rows(trace)]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_trace_csv(path) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = [[float(v) for v in row] for row in reader if row]
    except (OSError, StopIteration, ValueError) as exc:
        raise FormatError(f"cannot read trace {path}: {exc}") from exc
    if tuple(header) != TRACE_COLUMNS:
        raise FormatError(f"{path}: unexpected trace header {header}")
    arr = np.array(data, dtype=float).reshape(-1, len(TRACE_COLUMNS))
    return {name: arr[:, i] for i, name in enumerate(TRACE_COLUMNS)}


def write_matrix_csv(matrix: np.ndarray, path, header: str | None = None) -> None:
    lines = [header] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())
