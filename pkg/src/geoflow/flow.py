"""Gradient-flow integration with optional regularisation.

The integrator advances theta along -(grad L + lam * grad R) with fixed-step
Euler or classical RK4, records loss/residual/arc-length/spectral diagnostics,
and understands two special stop conditions besides the residual tolerance:
the arc-ridge stopping rule (the run is a stopped unregularised path, so the
integrator follows the pure data field and fires when 2*lam*s >= ||grad L||)
and the time horizon.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, StepSizeError
from .geometry import ntk_gram, project_tangent, spectrum
from .models import Dataset, eval_jacobian, eval_outputs
from .regularisers import (
    RegKind,
    RegState,
    RegulariserSpec,
    arc_stop_check,
    arc_update,
    reg_gradient,
)

MAX_STEP_HALVINGS = 6


@dataclass(frozen=True)
class FlowConfig:
    step_size: float = 0.01
    max_time: float = 50.0
    integrator: str = "rk4"        # "euler" | "rk4"
    residual_tol: float = 1e-8
    record_every: int = 1
    spectral_every: int = 1        # cadence (in steps) of lambda_min/max records

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1 or self.spectral_every < 1:
            raise ValueError("record_every and spectral_every must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    t: float
    theta: np.ndarray
    loss: float
    residual_norm: float
    arc_length: float
    grad_norm: float
    lambda_min: float = None
    lambda_max: float = None
    fibre_grad_norm: float = None


@dataclass(frozen=True)
class ArcStopInfo:
    t_star: float
    s_star: float
    grad_norm_star: float       # ||grad L|| evaluated at the interpolated stop point
    balance_gap: float          # |2*lam*s - ||grad L||| at the stop point


@dataclass
class TrajectoryRecord:
    steps: list
    converged: bool
    theta_final: np.ndarray
    stop_reason: str            # "residual_tol" | "arc_stop" | "max_time"
    total_arc_length: float
    n_steps: int
    step_size: float
    arc_stop: ArcStopInfo = None
    reg_state: RegState = None


def _stability_step(model, data, theta0, cfg) -> float:
    """Explicit-integrator guard: h * 2*lambda_max(K(theta0)) must stay below 1."""
    K = ntk_gram(eval_jacobian(model, theta0, data))
    lam_max = spectrum(K).lambda_max
    h = cfg.step_size
    if h * 2.0 * lam_max < 1.0:
        return h
    for _ in range(MAX_STEP_HALVINGS):
        h *= 0.5
        if h * 2.0 * lam_max < 1.0:
            warnings.warn(
                f"step_size {cfg.step_size:g} violates the stability guard "
                f"(lambda_max={lam_max:.3g}); halved to {h:g}", RuntimeWarning)
            return h
    raise StepSizeError(
        f"step_size {cfg.step_size:g} cannot satisfy the stability guard after "
        f"{MAX_STEP_HALVINGS} halvings (lambda_max={lam_max:.3g})")


def integrate(model, data: Dataset, theta0, reg, lam: float, cfg: FlowConfig,
              reg_state: RegState = None) -> TrajectoryRecord:
    """Run (regularised) gradient flow from theta0 and record the trajectory."""
    theta = np.asarray(theta0, dtype=float).ravel().copy()
    if theta.shape[0] != model.num_params:
        # surface the model's own error message
        eval_outputs(model, theta, data)
    if reg is None:
        reg = RegulariserSpec(kind=RegKind.NONE)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if reg.kind is RegKind.ARC and lam <= 0:
        raise ValueError("arc ridge requires lam > 0 for the stopping rule to fire")

    state = reg_state if reg_state is not None else RegState()
    targets = data.targets
    pure_field = reg.kind in (RegKind.NONE, RegKind.ARC) or lam == 0.0

    def data_gradient(th):
        r = model.outputs(th, data) - targets
        return model.vjp(th, data, 2.0 * r), r

    def total_field(th):
        dg, _ = data_gradient(th)
        if pure_field:
            return -dg
        return -(dg + lam * reg_gradient(reg, state, th, model, data, dg))

    h = _stability_step(model, data, theta, cfg)
    n_steps = max(1, int(math.ceil(cfg.max_time / h - 1e-12)))
    s_entry = state.s_accum  # may be nonzero when continuing a chunked run

    def diagnostics(th, want_spectral):
        lam_min = lam_max = fibre_norm = None
        if want_spectral:
            J = eval_jacobian(model, th, data)
            rep = spectrum(ntk_gram(J))
            lam_min, lam_max = rep.lambda_min, rep.lambda_max
            dg, _ = data_gradient(th)
            total = dg if pure_field else dg + lam * reg_gradient(reg, state, th, model, data, dg)
            if rep.lambda_min > 1e-10:
                fibre_norm = float(np.linalg.norm(project_tangent(J, total).v_fibre))
        return lam_min, lam_max, fibre_norm

    old_err = np.seterr(over="ignore", invalid="ignore")  # divergence is detected explicitly
    try:
        return _integrate_loop(model, data, theta, reg, lam, cfg, state, targets,
                               pure_field, total_field, diagnostics, h, n_steps, s_entry)
    finally:
        np.seterr(**old_err)


def _integrate_loop(model, data, theta, reg, lam, cfg, state, targets, pure_field,
                    total_field, diagnostics, h, n_steps, s_entry):
    records = []
    steps_done = 0
    stop_reason = "max_time"
    converged = False
    arc_stop = None
    prev = None  # (theta, s_accum, data_grad_norm) at the previous step boundary

    for k in range(n_steps + 1):
        g = model.outputs(theta, data)
        r = g - targets
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(r))):
            raise DivergenceError(
                f"non-finite state at step {k} (t={k * h:.6g})",
                last_step=records[-1] if records else None)
        loss = float(r @ r)
        residual = float(np.linalg.norm(r))
        dg = model.vjp(theta, data, 2.0 * r)
        if pure_field:
            total = dg
        else:
            total = dg + lam * reg_gradient(reg, state, theta, model, data, dg)
        grad_norm = float(np.linalg.norm(total))

        if reg.kind is RegKind.ARC and prev is not None and arc_stop_check(state, lam, float(np.linalg.norm(dg))):
            theta, s_star, arc_stop = _interpolate_arc_stop(
                model, data, lam, prev, (theta, state.s_accum, float(np.linalg.norm(dg))),
                h, (k - 1) * h)
            state.s_accum = s_star  # truncate the overshoot inside the crossing step
            g = model.outputs(theta, data)
            r = g - targets
            loss = float(r @ r)
            residual = float(np.linalg.norm(r))
            grad_norm = float(np.linalg.norm(model.vjp(theta, data, 2.0 * r)))
            lam_min, lam_max, fibre_norm = diagnostics(theta, True)
            records.append(StepRecord(t=arc_stop.t_star, theta=theta.copy(), loss=loss,
                                      residual_norm=residual, arc_length=s_star,
                                      grad_norm=grad_norm, lambda_min=lam_min,
                                      lambda_max=lam_max, fibre_grad_norm=fibre_norm))
            stop_reason = "arc_stop"
            break

        record_now = (k % cfg.record_every == 0) or k == n_steps or residual < cfg.residual_tol
        if record_now:
            lam_min, lam_max, fibre_norm = diagnostics(theta,
                                                       k % cfg.spectral_every == 0 or k == n_steps)
            records.append(StepRecord(t=k * h, theta=theta.copy(), loss=loss,
                                      residual_norm=residual, arc_length=state.s_accum,
                                      grad_norm=grad_norm, lambda_min=lam_min,
                                      lambda_max=lam_max, fibre_grad_norm=fibre_norm))

        if residual < cfg.residual_tol:
            stop_reason = "residual_tol"
            converged = True
            break
        if k == n_steps:
            break

        prev = (theta.copy(), state.s_accum, float(np.linalg.norm(dg)))
        if cfg.integrator == "euler":
            delta = h * (-total)
        else:
            k1 = -total
            k2 = total_field(theta + 0.5 * h * k1)
            k3 = total_field(theta + 0.5 * h * k2)
            k4 = total_field(theta + h * k3)
            delta = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        theta = theta + delta
        arc_update(state, delta)
        steps_done = k + 1

    return TrajectoryRecord(steps=records, converged=converged, theta_final=theta.copy(),
                            stop_reason=stop_reason,
                            total_arc_length=state.s_accum - s_entry,
                            n_steps=steps_done, step_size=h, arc_stop=arc_stop,
                            reg_state=state)


def _interpolate_arc_stop(model, data, lam, prev, curr, h, t_prev):
    """Locate the arc-ridge stopping point inside the step that crossed it.

    Linearly interpolates the accumulated length and the data-gradient norm
    between the bracketing step boundaries, then places theta on the chord.
    """
    theta_a, s_a, g_a = prev
    theta_b, s_b, g_b = curr
    f_a = 2.0 * lam * s_a - g_a
    f_b = 2.0 * lam * s_b - g_b
    tau = 0.0 if f_b == f_a else float(np.clip(-f_a / (f_b - f_a), 0.0, 1.0))
    theta_star = theta_a + tau * (theta_b - theta_a)
    s_star = s_a + tau * float(np.linalg.norm(theta_b - theta_a))
    r = model.outputs(theta_star, data) - data.targets
    grad_star = float(np.linalg.norm(model.vjp(theta_star, data, 2.0 * r)))
    info = ArcStopInfo(t_star=t_prev + tau * h, s_star=s_star, grad_norm_star=grad_star,
                       balance_gap=abs(2.0 * lam * s_star - grad_star))
    return theta_star, s_star, info


@dataclass(frozen=True)
class FibreDriftResult:
    points: list            # (t, drift_norm) for steps past the residual threshold
    reached_threshold: bool


def fibre_drift(model, data: Dataset, traj: TrajectoryRecord, eps: float) -> FibreDriftResult:
    """Cumulative post-convergence displacement projected onto ker J at each step.

    Starting from the first recorded step whose residual drops below eps, the
    displacement theta_k - theta_ref is split at theta_k; the fibre component
    measures motion invisible to the training loss.
    """
    start = None
    for i, s in enumerate(traj.steps):
        if s.residual_norm < eps:
            start = i
            break
    if start is None:
        return FibreDriftResult(points=[], reached_threshold=False)
    theta_ref = traj.steps[start].theta
    points = []
    for s in traj.steps[start:]:
        J = eval_jacobian(model, s.theta, data)
        split = project_tangent(J, s.theta - theta_ref)
        points.append((s.t, float(np.linalg.norm(split.v_fibre))))
    return FibreDriftResult(points=points, reached_threshold=True)


@dataclass(frozen=True)
class LambdaLimit:
    lam: float
    theta: np.ndarray
    converged: bool
    grad_norm: float
    time_used: float


def vanishing_lambda_limit(model, data: Dataset, theta0, reg, lambda_schedule,
                           cfg: FlowConfig, grad_tol: float = 1e-8,
                           max_extensions: int = 8) -> list:
    """Per-lambda equilibria of the regularised objective along a decreasing schedule.

    Each lambda is run fresh from theta0 until the total gradient norm falls
    below grad_tol, extending the horizon in cfg.max_time chunks up to a cap.
    Unconverged entries are returned flagged rather than dropped.
    """
    lams = [float(l) for l in lambda_schedule]
    if not lams or any(l <= 0 for l in lams) or any(b >= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda_schedule must be strictly decreasing and positive")
    if RegKind(reg.kind) is RegKind.ARC:
        raise ValueError("arc ridge equilibria are stopped paths; the vanishing "
                         "limit study applies to the static regularisers")
    out = []
    for lam in lams:
        theta = np.asarray(theta0, dtype=float).ravel()
        elapsed = 0.0
        grad_norm = math.inf
        converged = False
        for _ in range(max_extensions + 1):
            traj = integrate(model, data, theta, reg, lam, cfg)
            theta = traj.theta_final
            elapsed += traj.n_steps * traj.step_size
            grad_norm = _total_grad_norm(model, data, theta, reg, lam)
            if grad_norm < grad_tol:
                converged = True
                break
        out.append(LambdaLimit(lam=lam, theta=theta, converged=converged,
                               grad_norm=grad_norm, time_used=elapsed))
    return out


def _total_grad_norm(model, data, theta, reg, lam):
    r = model.outputs(theta, data) - data.targets
    dg = model.vjp(theta, data, 2.0 * r)
    state = RegState()
    total = dg + lam * reg_gradient(reg, state, theta, model, data, dg)
    return float(np.linalg.norm(total))


def extrapolate_limit(results, max_degree: int = 3) -> np.ndarray:
    """Polynomial-in-lambda extrapolation of converged equilibria to lambda -> 0."""
    pts = [(r.lam, r.theta) for r in results if r.converged]
    if not pts:
        raise ValueError("no converged equilibria to extrapolate")
    if len(pts) == 1:
        return pts[0][1]
    lams = np.array([p[0] for p in pts])
    thetas = np.vstack([p[1] for p in pts])
    deg = min(max_degree, len(pts) - 1)
    out = np.empty(thetas.shape[1])
    for j in range(thetas.shape[1]):
        coeffs = np.polyfit(lams, thetas[:, j], deg)
        out[j] = np.polyval(coeffs, 0.0)
    return out
