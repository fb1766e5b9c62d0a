"""Partition function of the transport-energy Gibbs density for scalar outputs.

Z = integral of exp(-beta * E(c)) over an output-space interval, with E(c)
solved on a grid and interpolated, integrated by composite Gauss-Legendre
panels, and checked against the closed-form Gaussian upper bound implied by
the spectral ceiling of the Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erfc, roots_legendre

from .energy import EnergyProblem, solve_horizontal_energy
from .errors import EnergySolveError
from .geometry import ntk_gram, spectrum
from .models import Dataset, eval_jacobian, eval_outputs


@dataclass(frozen=True)
class GibbsConfig:
    beta: float = 1.0
    domain: tuple = None        # (lo, hi) in output space; default from the spectral scale
    quad_points: int = 256      # total Gauss-Legendre nodes across panels
    grid_size: int = 65         # energy solves backing the interpolant
    segments: int = 64

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.quad_points < 64:
            raise ValueError("quad_points must be >= 64")
        if self.grid_size < 9:
            raise ValueError("grid_size must be >= 9")


@dataclass(frozen=True)
class PartitionResult:
    Z: float
    bound: float                 # (pi * C^2 / beta)^(n/2)
    tail_mass_estimate: float
    C_est: float                 # spectral ceiling over the grid representatives
    grid_c: np.ndarray
    grid_energy: np.ndarray
    lower_bound_margin: float    # min over grid of E(c) - (c - g0)^2 / C^2


def partition_function(model, data: Dataset, theta0, cfg: GibbsConfig,
                       energy_solver=solve_horizontal_energy) -> PartitionResult:
    """Quadrature of exp(-beta E) over the configured scalar-output domain."""
    if data.n != 1:
        raise ValueError("partition_function supports single-output datasets (n = 1)")
    theta0 = np.asarray(theta0, dtype=float).ravel()
    g0 = float(eval_outputs(model, theta0, data)[0])
    rep0 = spectrum(ntk_gram(eval_jacobian(model, theta0, data)))

    if cfg.domain is None:
        half = 6.0 * rep0.C_est / math.sqrt(cfg.beta)
        lo, hi = g0 - half, g0 + half
    else:
        lo, hi = float(cfg.domain[0]), float(cfg.domain[1])
        if not lo < g0 < hi:
            raise ValueError(f"domain ({lo}, {hi}) must contain the start output {g0:.6g}")

    grid = np.linspace(lo, hi, cfg.grid_size)
    energies = np.empty(cfg.grid_size)
    lambda_max_seen = rep0.lambda_max
    failed = []
    # sweep outward from the node nearest g0, warm-starting each solve
    order = np.argsort(np.abs(grid - g0))
    controls = {}
    for rank, idx in enumerate(order):
        init = None
        if rank > 0:
            nearest = min(controls, key=lambda j: abs(grid[j] - grid[idx]))
            init = controls[nearest]
        prob = EnergyProblem(model=model, data=data, theta_start=theta0,
                             c_target=[grid[idx]], segments=cfg.segments)
        sol = energy_solver(prob, init_controls=init)
        controls[idx] = sol.path.controls
        energies[idx] = sol.energy
        if not sol.converged:
            failed.append(grid[idx])
        endpoint = sol.path.thetas[-1]
        lambda_max_seen = max(lambda_max_seen,
                              spectrum(ntk_gram(eval_jacobian(model, endpoint, data))).lambda_max)
    if failed:
        raise EnergySolveError(
            "grid energy solves failed to converge at c = "
            + ", ".join(f"{c:.6g}" for c in sorted(failed)))

    C_sq = lambda_max_seen
    C_est = math.sqrt(C_sq)
    lower_margin = float(np.min(energies - (grid - g0) ** 2 / C_sq))

    density = CubicSpline(grid, energies)
    Z = _composite_gauss_legendre(lambda c: np.exp(-cfg.beta * density(c)),
                                  lo, hi, cfg.quad_points)
    bound = (math.pi * C_sq / cfg.beta) ** (data.n / 2.0)
    tail = _gaussian_tail(g0, lo, hi, cfg.beta, C_est)
    return PartitionResult(Z=Z, bound=bound, tail_mass_estimate=tail, C_est=C_est,
                           grid_c=grid, grid_energy=energies,
                           lower_bound_margin=lower_margin)


def _composite_gauss_legendre(f, lo, hi, total_points, panels: int = 16):
    order = max(2, int(math.ceil(total_points / panels)))
    nodes, weights = roots_legendre(order)
    edges = np.linspace(lo, hi, panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        total += half * float(np.dot(weights, f(mid + half * nodes)))
    return total


def _gaussian_tail(g0, lo, hi, beta, C_est):
    # exp(-beta E) <= exp(-beta (c-g0)^2 / C^2) outside the domain
    scale = C_est / math.sqrt(beta)
    right = 0.5 * math.sqrt(math.pi) * scale * erfc((hi - g0) / scale)
    left = 0.5 * math.sqrt(math.pi) * scale * erfc((g0 - lo) / scale)
    return right + left
