"""Regulariser values and gradients: standard/anchored ridge, the static
quadratic family, arc ridge with accumulated-length state, and geodesic ridge
backed by the horizontal energy solver.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedScaleError
from .models import eval_jacobian

GEODESIC_MAX_PARAMS = 16  # geodesic ridge is an equilibrium/limit tool for the toys


class RegKind(str, enum.Enum):
    NONE = "none"
    STANDARD = "standard"
    ANCHORED = "anchored"
    QUADRATIC_AB = "quadratic_ab"
    ARC = "arc"
    GEODESIC = "geodesic"


@dataclass(frozen=True)
class RegulariserSpec:
    kind: RegKind
    anchor: np.ndarray = None       # theta0; used by anchored/quadratic/arc/geodesic
    a: float = 1.0                  # quadratic family: ambient coefficient, > 0
    B: np.ndarray = None            # quadratic family: n x n PSD output-metric block

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.anchor is not None:
            object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float).ravel())
        if self.kind is RegKind.QUADRATIC_AB:
            if self.a <= 0:
                raise ValueError("quadratic family requires a > 0")
            if self.B is None:
                raise ValueError("quadratic family requires an output-metric matrix B")
            B = np.asarray(self.B, dtype=float)
            if B.ndim != 2 or B.shape[0] != B.shape[1]:
                raise ValueError("B must be square")
            if np.max(np.abs(B - B.T)) > 1e-12 * max(np.max(np.abs(B)), 1e-300):
                raise ValueError("B must be symmetric")
            min_eig = float(np.linalg.eigvalsh(0.5 * (B + B.T))[0])
            if min_eig < -1e-10 * max(float(np.linalg.norm(B, 2)), 1e-300):
                raise ValueError(f"B must be PSD; min eigenvalue {min_eig:.3e}")
            object.__setattr__(self, "B", B)


@dataclass
class RegState:
    """Per-run mutable regulariser state; confined to a single integration."""

    s_accum: float = 0.0
    energy_cache: object = None       # geodesic: cached evaluator / last solve
    at_interpolation: bool = False    # arc gradient requested at a critical point
    _j0: np.ndarray = None            # quadratic family: Jacobian frozen at the anchor


def _anchor_displacement(spec, theta):
    if spec.anchor is None:
        raise ValueError(f"{spec.kind.value} regulariser needs an anchor point")
    return theta - spec.anchor


def _quadratic_j0(spec, state, model, data):
    if state._j0 is None:
        state._j0 = eval_jacobian(model, spec.anchor, data)
    return state._j0


def reg_value(spec: RegulariserSpec, state: RegState, theta, model, data) -> float:
    """Regulariser value at theta for the active run."""
    theta = np.asarray(theta, dtype=float).ravel()
    kind = spec.kind
    if kind is RegKind.NONE:
        return 0.0
    if kind is RegKind.STANDARD:
        return float(theta @ theta)
    if kind is RegKind.ANCHORED:
        d = _anchor_displacement(spec, theta)
        return float(d @ d)
    if kind is RegKind.QUADRATIC_AB:
        d = _anchor_displacement(spec, theta)
        j0d = _quadratic_j0(spec, state, model, data) @ d
        return float(spec.a * (d @ d) + j0d @ spec.B @ j0d)
    if kind is RegKind.ARC:
        return state.s_accum ** 2
    if kind is RegKind.GEODESIC:
        return _geodesic_value(spec, state, theta, model, data)
    raise ValueError(f"unknown regulariser kind {kind!r}")


def _geodesic_value(spec, state, theta, model, data) -> float:
    if model.num_params > GEODESIC_MAX_PARAMS:
        raise UnsupportedScaleError(
            "geodesic ridge is only supported at toy scale; use arc ridge instead")
    evaluator = state.energy_cache
    if evaluator is None or not hasattr(evaluator, "value"):
        raise ValueError(
            "geodesic ridge needs a prepared evaluator in RegState.energy_cache "
            "(see energy.GeodesicEvaluator / energy.geodesic_ridge_value)")
    return float(evaluator.value(theta))


def reg_gradient(spec: RegulariserSpec, state: RegState, theta, model, data,
                 data_grad) -> np.ndarray:
    """Gradient of the regulariser; arc ridge is anti-parallel to the data gradient."""
    theta = np.asarray(theta, dtype=float).ravel()
    kind = spec.kind
    if kind is RegKind.NONE:
        return np.zeros_like(theta)
    if kind is RegKind.STANDARD:
        return 2.0 * theta
    if kind is RegKind.ANCHORED:
        return 2.0 * _anchor_displacement(spec, theta)
    if kind is RegKind.QUADRATIC_AB:
        d = _anchor_displacement(spec, theta)
        j0 = _quadratic_j0(spec, state, model, data)
        return 2.0 * spec.a * d + 2.0 * j0.T @ (spec.B @ (j0 @ d))
    if kind is RegKind.ARC:
        data_grad = np.asarray(data_grad, dtype=float).ravel()
        g_norm = float(np.linalg.norm(data_grad))
        if g_norm < 1e-14:
            # the stopping rule should already have fired at interpolation
            state.at_interpolation = True
            return np.zeros_like(theta)
        return -2.0 * state.s_accum * data_grad / g_norm
    if kind is RegKind.GEODESIC:
        return _geodesic_gradient(spec, state, theta, model, data)
    raise ValueError(f"unknown regulariser kind {kind!r}")


def _geodesic_gradient(spec, state, theta, model, data, rel_step: float = 1e-5) -> np.ndarray:
    # central differences of the cached energy evaluation; one solver branch is
    # selected by the fixed cache, so the differences stay on one continuous sheet
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        h = rel_step * (1.0 + abs(theta[j]))
        hi = theta.copy(); hi[j] += h
        lo = theta.copy(); lo[j] -= h
        grad[j] = (_geodesic_value(spec, state, hi, model, data)
                   - _geodesic_value(spec, state, lo, model, data)) / (2 * h)
    return grad


def arc_update(state: RegState, delta_theta) -> RegState:
    """Accumulate path length; called once per accepted integrator step."""
    state.s_accum += float(np.linalg.norm(delta_theta))
    return state


def arc_stop_check(state: RegState, lam: float, grad_norm: float) -> bool:
    """True once accumulated length satisfies 2*lam*s >= ||data gradient||."""
    if lam <= 0:
        raise ValueError("arc stopping rule requires lam > 0")
    return 2.0 * lam * state.s_accum >= grad_norm


def lambda_from_noise(noise_std: float, n: int) -> float:
    """MAP coupling: regularisation strength sigma^2 / n for a declared noise level."""
    if n < 1:
        raise ValueError("n must be positive")
    return float(noise_std) ** 2 / n
