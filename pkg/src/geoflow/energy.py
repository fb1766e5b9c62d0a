"""Horizontal minimum-energy transport in output space, fibre geodesics, and
geodesic ridge assembly.

The canonical solve discretises the horizontal control system
theta_{k+1} = theta_k + dt * J(theta_k)^T u_k over K uniform segments of [0,1]
and minimises sum_k u_k^T K(theta_k) u_k * dt subject to the outputs reaching
a target value.  The endpoint constraint is enforced by quadratic penalty
continuation over an increasing schedule, followed by augmented-Lagrangian
multiplier updates at the final weight, which drives the endpoint residual to
the inner tolerance without pushing the penalty weight into float64 noise.
Convergence is judged on the endpoint residual together with the energy
gradient projected onto the constraint tangent space (the raw penalised
gradient measures constraint stiffness, not solution quality).  Both checks
scale with the problem: the residual tolerance with the transport distance,
the gradient tolerance with the energy magnitude times a float64 line-search
floor factor, below which quasi-Newton iterations cannot resolve objective
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import EnergySolveError, FibreError, UnsupportedScaleError
from .geometry import representative_point
from .models import Dataset, eval_jacobian, eval_outputs

DEFAULT_PENALTY_SCHEDULE = (1e2, 1e3, 1e4, 1e5)
RANK_FLOOR = 1e-8
GRAD_FLOOR_FACTOR = 100.0  # float64 line-search floor, relative to (1 + energy)


@dataclass(frozen=True)
class ControlPath:
    controls: np.ndarray   # (K, n)
    thetas: np.ndarray     # (K+1, m), theta_{k+1} = theta_k + dt * J^T u_k

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.thetas, axis=0), axis=1)


@dataclass(frozen=True)
class EnergyProblem:
    model: object
    data: Dataset
    theta_start: np.ndarray
    c_target: np.ndarray
    segments: int = 64
    penalty_schedule: tuple = DEFAULT_PENALTY_SCHEDULE
    inner_tol: float = 1e-8
    reachable_box: tuple = None   # (lo, hi) arrays from a prior run, already expanded

    def __post_init__(self):
        object.__setattr__(self, "theta_start", np.asarray(self.theta_start, dtype=float).ravel())
        object.__setattr__(self, "c_target", np.atleast_1d(np.asarray(self.c_target, dtype=float)))
        if self.segments < 8:
            raise ValueError("segments must be >= 8")
        if not self.penalty_schedule or any(mu <= 0 for mu in self.penalty_schedule):
            raise ValueError("penalty_schedule must be positive")
        if self.reachable_box is not None:
            lo, hi = self.reachable_box
            if np.any(self.c_target < lo) or np.any(self.c_target > hi):
                raise ValueError(
                    f"c_target {self.c_target} outside the recorded reachable box [{lo}, {hi}]")


@dataclass(frozen=True)
class EnergySolveResult:
    energy: float
    path_length: float
    endpoint_residual: float
    converged: bool
    path: ControlPath
    projected_grad_norm: float
    multiplier: np.ndarray
    mu_final: float


def _rollout(model, data, theta_start, U, dt):
    """Integrate the horizontal steps; fails on rank collapse along the path."""
    K = U.shape[0]
    thetas = np.empty((K + 1, theta_start.size))
    tangents = np.empty((K, theta_start.size))
    thetas[0] = theta_start
    for k in range(K):
        J = model.jacobian(thetas[k], data)
        gram = J @ J.T
        lam_min = gram[0, 0] if gram.shape[0] == 1 else float(np.linalg.eigvalsh(gram)[0])
        if lam_min <= RANK_FLOOR:
            raise EnergySolveError(
                f"Jacobian rank collapse at segment k={k} (lambda_min={lam_min:.3e})")
        b = J.T @ U[k]
        tangents[k] = b
        thetas[k + 1] = thetas[k] + dt * b
    return thetas, tangents


def _augmented_objective(model, data, theta_start, U, dt, mu, mult, c_target):
    """Value and exact adjoint gradient of energy + mult^T res + mu*||res||^2."""
    thetas, tangents = _rollout(model, data, theta_start, U, dt)
    K = U.shape[0]
    res = model.outputs(thetas[K], data) - c_target
    value = dt * float(np.sum(tangents ** 2)) + float(mult @ res) + mu * float(res @ res)
    lam = model.jacobian(thetas[K], data).T @ (mult + 2.0 * mu * res)
    grad = np.empty_like(U)
    for k in range(K - 1, -1, -1):
        Jk = model.jacobian(thetas[k], data)
        grad[k] = 2.0 * dt * (Jk @ tangents[k]) + dt * (Jk @ lam)
        lam = lam + model.output_hessian_vec(
            thetas[k], data, U[k], 2.0 * dt * tangents[k] + dt * lam)
    return value, grad, res


def _energy_grad_and_constraint_rows(model, data, theta_start, U, dt):
    """Gradient of the pure energy plus the endpoint Jacobian rows d res / d U."""
    thetas, tangents = _rollout(model, data, theta_start, U, dt)
    K, n = U.shape
    g_energy = np.empty_like(U)
    lam = np.zeros(theta_start.size)
    for k in range(K - 1, -1, -1):
        Jk = model.jacobian(thetas[k], data)
        g_energy[k] = 2.0 * dt * (Jk @ tangents[k]) + dt * (Jk @ lam)
        lam = lam + model.output_hessian_vec(
            thetas[k], data, U[k], 2.0 * dt * tangents[k] + dt * lam)
    rows = np.empty((n, K * n))
    J_end = model.jacobian(thetas[K], data)
    for i in range(n):
        lam = J_end.T[:, i].copy()
        row = np.empty_like(U)
        for k in range(K - 1, -1, -1):
            Jk = model.jacobian(thetas[k], data)
            row[k] = dt * (Jk @ lam)
            lam = lam + model.output_hessian_vec(thetas[k], data, U[k], dt * lam)
        rows[i] = row.ravel()
    return g_energy.ravel(), rows


def solve_horizontal_energy(prob: EnergyProblem, init_controls=None,
                            multiplier_iters: int = 10) -> EnergySolveResult:
    """Minimise the horizontal transport energy to the target output value.

    A warm start from a neighbouring solution runs only the last penalty stage;
    if that shortcut misses the convergence contract, the solve is redone cold.
    """
    result = _solve_horizontal_energy(prob, init_controls, multiplier_iters)
    if init_controls is not None and not result.converged:
        result = _solve_horizontal_energy(prob, None, multiplier_iters)
    return result


def _solve_horizontal_energy(prob, init_controls, multiplier_iters) -> EnergySolveResult:
    model, data = prob.model, prob.data
    K, n = prob.segments, prob.data.n
    dt = 1.0 / K
    theta_start = prob.theta_start
    g0 = eval_outputs(model, theta_start, data)

    if init_controls is not None:
        U = np.asarray(init_controls, dtype=float).reshape(K, n).copy()
        # warm continuation from a neighbouring solve: the path shape is already
        # right, so the early loose-penalty stages add nothing
        schedule = prob.penalty_schedule[-1:]
    else:
        J0 = eval_jacobian(model, theta_start, data)
        u0 = np.linalg.solve(J0 @ J0.T, prob.c_target - g0)
        U = np.tile(u0, (K, 1))
        schedule = prob.penalty_schedule

    mult = np.zeros(n)

    def run_stage(U, mu, mult, tight):
        def fun(x):
            value, grad, _ = _augmented_objective(
                model, data, theta_start, x.reshape(K, n), dt, mu, mult, prob.c_target)
            return value, grad.ravel()

        r = minimize(fun, U.ravel(), jac=True, method="L-BFGS-B",
                     options={"maxiter": 3000, "ftol": 1e-18,
                              "gtol": 1e-12 if tight else 1e-8})
        return r.x.reshape(K, n)

    for i, mu in enumerate(schedule):
        U = run_stage(U, mu, mult, tight=(i == len(schedule) - 1))
    mu = schedule[-1]
    for _ in range(multiplier_iters):
        _, _, res = _augmented_objective(model, data, theta_start, U, dt, mu, mult, prob.c_target)
        if float(np.linalg.norm(res)) < prob.inner_tol:
            break
        mult = mult + 2.0 * mu * res
        U = run_stage(U, mu, mult, tight=True)

    thetas, tangents = _rollout(model, data, theta_start, U, dt)
    endpoint_residual = float(np.linalg.norm(model.outputs(thetas[-1], data) - prob.c_target))
    energy = dt * float(np.sum(tangents ** 2))
    path = ControlPath(controls=U, thetas=thetas)
    g_energy, rows = _energy_grad_and_constraint_rows(model, data, theta_start, U, dt)
    correction = rows.T @ np.linalg.solve(rows @ rows.T, rows @ g_energy)
    projected = float(np.linalg.norm(g_energy - correction))
    residual_tol = prob.inner_tol * (1.0 + float(np.linalg.norm(prob.c_target - g0)))
    grad_tol = prob.inner_tol * GRAD_FLOOR_FACTOR * (1.0 + energy)
    converged = endpoint_residual < residual_tol and projected < grad_tol
    return EnergySolveResult(energy=energy, path_length=float(path.segment_lengths.sum()),
                             endpoint_residual=endpoint_residual, converged=converged,
                             path=path, projected_grad_norm=projected,
                             multiplier=mult, mu_final=mu)


def constant_speed_check(path: ControlPath) -> float:
    """Energy / squared length for the discretised path; 1 at constant speed."""
    seg = path.segment_lengths
    dt = 1.0 / seg.shape[0]
    energy = float(np.sum(seg ** 2)) / dt
    length = float(seg.sum())
    if length == 0.0:
        return 1.0
    return energy / length ** 2


@dataclass(frozen=True)
class FibreDistanceResult:
    d2_fibre: float
    path: np.ndarray   # points along the fibre curve, each mapping to the shared output


def fibre_distance(model, data: Dataset, theta_rep, theta, fibre_tol: float = 1e-8,
                   step: float = 1e-3) -> FibreDistanceResult:
    """Squared geodesic distance along the output fibre between two same-fibre points.

    Codimension-one fibres are traced by predictor steps along ker J with
    Gauss-Newton reprojection onto the fibre; the kernel-regime shortcut is the
    squared chord (straight fibres).
    """
    theta_rep = np.asarray(theta_rep, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    c_rep = eval_outputs(model, theta_rep, data)
    c = eval_outputs(model, theta, data)
    gap = float(np.linalg.norm(c_rep - c))
    if gap >= fibre_tol:
        raise FibreError(
            f"points lie on different fibres: output gap {gap:.3e} >= tol {fibre_tol:.1e}")
    if np.array_equal(theta_rep, theta):
        return FibreDistanceResult(d2_fibre=0.0, path=np.vstack([theta_rep, theta]))
    if getattr(model, "constant_jacobian", False):
        d = float(np.linalg.norm(theta - theta_rep))
        return FibreDistanceResult(d2_fibre=d * d, path=np.vstack([theta_rep, theta]))
    m, n = model.num_params, data.n
    if m - n != 1:
        raise UnsupportedScaleError(
            f"fibre tracing supports codimension one (m-n=1); got m={m}, n={n}")

    psi = theta_rep.copy()
    length = 0.0
    points = [psi.copy()]
    prev_dir = None
    max_steps = int(20 * (np.linalg.norm(theta - theta_rep) / step + 50))
    for _ in range(max_steps):
        remaining = float(np.linalg.norm(theta - psi))
        if remaining <= step:
            length += remaining
            points.append(theta.copy())
            return FibreDistanceResult(d2_fibre=length ** 2, path=np.vstack(points))
        J = eval_jacobian(model, psi, data)
        gram = J @ J.T
        lam_min = gram[0, 0] if n == 1 else float(np.linalg.eigvalsh(gram)[0])
        if lam_min <= RANK_FLOOR:
            raise FibreError(f"fibre continuation left the conditioning region "
                             f"(lambda_min={lam_min:.3e})")
        # 1-D kernel direction, oriented toward the target and kept continuous
        v = np.linalg.svd(J)[2][-1]
        ref = prev_dir if prev_dir is not None else theta - psi
        if float(v @ ref) < 0:
            v = -v
        prev_dir = v
        candidate = psi + step * v
        candidate = _reproject_to_fibre(model, data, candidate, c, fibre_tol)
        length += float(np.linalg.norm(candidate - psi))
        psi = candidate
        points.append(psi.copy())
    raise FibreError("fibre continuation did not reach the target point")


def _reproject_to_fibre(model, data, psi, c, fibre_tol):
    for _ in range(20):
        res = model.outputs(psi, data) - c
        if float(np.linalg.norm(res)) < min(1e-12, fibre_tol):
            return psi
        J = model.jacobian(psi, data)
        psi = psi - J.T @ np.linalg.solve(J @ J.T, res)
    res = float(np.linalg.norm(model.outputs(psi, data) - c))
    if res >= fibre_tol:
        raise FibreError(f"fibre reprojection stalled (residual {res:.3e})")
    return psi


def output_box_from_trajectory(model, data, traj, expand: float = 0.2):
    """Bounding box of a recorded run's outputs, expanded for reachability checks."""
    outputs = np.array([eval_outputs(model, s.theta, data) for s in traj.steps])
    lo, hi = outputs.min(axis=0), outputs.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    return lo - expand * span, hi + expand * span


def geodesic_ridge_value(model, data: Dataset, theta0, theta, prior_traj=None,
                         segments: int = 64,
                         penalty_schedule: tuple = DEFAULT_PENALTY_SCHEDULE) -> float:
    """Horizontal transport energy to g(theta) plus the squared fibre distance
    from the on-manifold representative of g(theta) to theta."""
    theta0 = np.asarray(theta0, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    c = eval_outputs(model, theta, data)
    box = None
    if prior_traj is not None:
        box = output_box_from_trajectory(model, data, prior_traj)
    prob = EnergyProblem(model=model, data=data, theta_start=theta0, c_target=c,
                         segments=segments, penalty_schedule=penalty_schedule,
                         reachable_box=box)
    flow_part = solve_horizontal_energy(prob)
    rep = representative_point(model, data, theta0, c)
    fibre_part = fibre_distance(model, data, rep, theta, fibre_tol=1e-8)
    return flow_part.energy + fibre_part.d2_fibre


class GeodesicEvaluator:
    """Cached geodesic-ridge evaluation along a recorded ridgeless run.

    Solves the transport energy and the representative point on a grid of
    output values spanning the prior run, then serves smooth interpolated
    values; the fibre term uses the squared chord when the query point sits
    within chord_tol of the representative (the arc-length correction is
    higher order there) and the full continuation otherwise.
    """

    def __init__(self, model, data, theta0, c_grid, energies, representatives,
                 chord_tol: float = 0.05):
        from scipy.interpolate import CubicSpline

        self.model = model
        self.data = data
        self.theta0 = np.asarray(theta0, dtype=float).ravel()
        self.c_grid = c_grid
        self.energies = energies
        self.representatives = representatives
        self.chord_tol = chord_tol
        self._energy_spline = CubicSpline(c_grid, energies)
        self._rep_spline = CubicSpline(c_grid, representatives)

    @classmethod
    def build(cls, model, data, theta0, prior_traj, grid_size: int = 33,
              segments: int = 64, penalty_schedule: tuple = DEFAULT_PENALTY_SCHEDULE,
              pad: float = 0.05):
        if data.n != 1:
            raise UnsupportedScaleError("cached geodesic evaluation supports n = 1")
        theta0 = np.asarray(theta0, dtype=float).ravel()
        outputs = np.array([eval_outputs(model, s.theta, data)[0] for s in prior_traj.steps])
        lo, hi = outputs.min(), outputs.max()
        span = max(hi - lo, 1e-9)
        grid = np.linspace(lo - pad * span, hi + pad * span, grid_size)
        g0 = eval_outputs(model, theta0, data)[0]
        energies = np.empty(grid_size)
        reps = np.empty((grid_size, theta0.size))
        # sweep outward from the node closest to the start output, warm-starting
        order = np.argsort(np.abs(grid - g0))
        controls = {}
        for rank, idx in enumerate(order):
            init = None
            if rank > 0:
                nearest = min(controls, key=lambda j: abs(grid[j] - grid[idx]))
                init = controls[nearest]
            prob = EnergyProblem(model=model, data=data, theta_start=theta0,
                                 c_target=[grid[idx]], segments=segments,
                                 penalty_schedule=penalty_schedule)
            sol = solve_horizontal_energy(prob, init_controls=init)
            controls[idx] = sol.path.controls
            energies[idx] = sol.energy
            reps[idx] = representative_point(model, data, theta0, [grid[idx]])
        return cls(model, data, theta0, grid, energies, reps)

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float).ravel()
        c = eval_outputs(self.model, theta, self.data)[0]
        if c < self.c_grid[0] or c > self.c_grid[-1]:
            raise ValueError(f"output {c:.6g} left the cached region "
                             f"[{self.c_grid[0]:.6g}, {self.c_grid[-1]:.6g}]")
        energy = float(self._energy_spline(c))
        rep = self._rep_spline(c)
        d = float(np.linalg.norm(theta - rep))
        if d < self.chord_tol:
            d2 = d * d
        else:
            d2 = fibre_distance(self.model, self.data, rep, theta,
                                fibre_tol=1e-6).d2_fibre
        return energy + d2


def prepare_geodesic_state(model, data, theta0, prior_traj, **kwargs):
    """RegState carrying a cached geodesic evaluator, for regularised runs."""
    from .regularisers import RegState

    evaluator = GeodesicEvaluator.build(model, data, theta0, prior_traj, **kwargs)
    return RegState(energy_cache=evaluator)
