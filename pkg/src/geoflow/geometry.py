"""NTK Gram matrix, spectrum, tangent/fibre splits, and the metric-gap probe.

The flow-tangent/fibre decomposition splits a parameter-space vector into its
component in Im(J^T) (directions visible to the training outputs) and its
component in ker(J) (directions the training loss cannot see).  The metric-gap
probe estimates the derivative of the representative map by re-running short
gradient flows against perturbed targets and reports how far the pullback
metric sits above the inverse NTK.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import RepresentativeProbeError, SingularKernelError
from .models import Dataset, eval_jacobian, eval_outputs

SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class SpectralReport:
    lambda_min: float
    lambda_max: float

    @property
    def c_est(self) -> float:
        return float(np.sqrt(max(self.lambda_min, 0.0)))

    @property
    def C_est(self) -> float:
        return float(np.sqrt(max(self.lambda_max, 0.0)))


@dataclass(frozen=True)
class TangentSplit:
    v_flow: np.ndarray   # component in Im(J^T)
    v_fibre: np.ndarray  # component in ker(J)


@dataclass(frozen=True)
class MetricGapReport:
    gram_pullback: np.ndarray       # G = A^T A, pullback metric on output space
    kernel_inverse: np.ndarray      # K^{-1} at the representative point
    normal_part: np.ndarray         # N = (I - P) A, fibre-directed block of A
    normal_gram: np.ndarray         # N^T N
    psd_residual: float             # min eigenvalue of G - K^{-1}
    output_value: np.ndarray        # c at the probed trajectory point
    velocity_alignment: float       # ||N c_dot|| / ||c_dot|| from trajectory differencing
    left_recorded_box: bool         # probe endpoints left the recorded trajectory's bounding box


def ntk_gram(J: np.ndarray) -> np.ndarray:
    """K = J J^T, the n x n Gram matrix of output gradients."""
    J = np.asarray(J, dtype=float)
    return J @ J.T


def spectrum(K: np.ndarray) -> SpectralReport:
    """Eigenvalue extremes of a symmetric PSD Gram matrix."""
    K = np.asarray(K, dtype=float)
    scale = max(float(np.max(np.abs(K))), 1e-300)
    asym = float(np.max(np.abs(K - K.T)))
    if asym > SYMMETRY_RTOL * scale * 10:
        raise ValueError(f"matrix not symmetric: max asymmetry {asym:.3e} at scale {scale:.3e}")
    eigs = np.linalg.eigvalsh(0.5 * (K + K.T))
    return SpectralReport(lambda_min=float(eigs[0]), lambda_max=float(eigs[-1]))


def project_tangent(J: np.ndarray, v: np.ndarray, min_eig: float = 1e-10) -> TangentSplit:
    """Orthogonal split of v into Im(J^T) and ker(J) via the projector J^T K^{-1} J."""
    J = np.asarray(J, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    K = ntk_gram(J)
    lam_min = float(np.linalg.eigvalsh(K)[0])
    if lam_min <= min_eig:
        raise SingularKernelError(lam_min, context="project_tangent")
    v_flow = J.T @ np.linalg.solve(K, J @ v)
    return TangentSplit(v_flow=v_flow, v_fibre=v - v_flow)


def solve_gram(K: np.ndarray, rhs: np.ndarray, jitter_log=None) -> np.ndarray:
    """Symmetric solve K x = rhs, adding trace-scaled jitter once if needed."""
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        jit = 1e-12 * np.trace(K) / K.shape[0]
        if jitter_log is not None:
            jitter_log.append(jit)
        else:
            warnings.warn(f"Gram solve needed jitter {jit:.3e}", RuntimeWarning)
        return np.linalg.solve(K + jit * np.eye(K.shape[0]), rhs)


def representative_point(model, data: Dataset, theta0, c_target, *,
                         step_size: float = 2e-3, residual_tol: float = 1e-12,
                         max_time: float = 400.0):
    """The on-manifold representative of output value c_target.

    Runs unregularised gradient flow from theta0 against a surrogate dataset
    whose targets are c_target; the converged point is the unique intersection
    of the flow manifold with the output fibre at c_target.
    """
    from .flow import FlowConfig, integrate  # local import: flow depends on geometry

    c_target = np.atleast_1d(np.asarray(c_target, dtype=float))
    surrogate = Dataset(inputs=data.inputs, targets=c_target)
    cfg = FlowConfig(step_size=step_size, max_time=max_time,
                     residual_tol=residual_tol, record_every=10 ** 9,
                     spectral_every=10 ** 9)
    traj = integrate(model, surrogate, theta0, None, 0.0, cfg)
    if not traj.converged:
        raise RepresentativeProbeError(
            f"representative probe did not converge to c={c_target}",
            diagnostics={"final_residual": traj.steps[-1].residual_norm,
                         "stop_reason": traj.stop_reason})
    return traj.theta_final


def metric_gap(model, data: Dataset, traj, index: int, *,
               delta_scale: float = 1e-4, probe_step: float = 2e-3) -> MetricGapReport:
    """Estimate the pullback-metric decomposition at a recorded trajectory point.

    The representative-map derivative A(c) is formed by central differences of
    probe runs with componentwise-perturbed targets; N = (I - P) A captures the
    part of A that escapes Im(J^T), and G - K^{-1} = N^T N up to probe error.
    """
    steps = traj.steps
    if not 0 <= index < len(steps):
        raise IndexError(f"trajectory index {index} out of range (0..{len(steps) - 1})")
    theta0 = steps[0].theta
    c = eval_outputs(model, steps[index].theta, data)
    n = c.shape[0]
    if n > 8:
        raise ValueError("metric_gap uses dense finite differencing; restricted to n <= 8")

    box_lo, box_hi = _recorded_output_box(model, data, traj)
    probe = lambda ct: representative_point(model, data, theta0, ct,
                                            step_size=probe_step)

    theta_c = probe(c)
    columns = []
    left_box = False
    for j in range(n):
        delta = delta_scale * (1.0 + abs(c[j]))
        e = np.zeros(n)
        e[j] = delta
        if np.any(c + e > box_hi) or np.any(c - e < box_lo):
            left_box = True
        hi = probe(c + e)
        lo = probe(c - e)
        columns.append((hi - lo) / (2 * delta))
    A = np.column_stack(columns)

    J = eval_jacobian(model, theta_c, data)
    K = ntk_gram(J)
    lam_min = float(np.linalg.eigvalsh(K)[0])
    if lam_min <= 1e-10:
        raise SingularKernelError(lam_min, context="metric_gap")
    K_inv = np.linalg.inv(K)
    PA = J.T @ solve_gram(K, J @ A)
    N = A - PA
    G = A.T @ A
    psd_residual = float(np.linalg.eigvalsh(G - K_inv)[0])

    c_dot = _trajectory_velocity(model, data, traj, index)
    speed = float(np.linalg.norm(c_dot))
    alignment = float(np.linalg.norm(N @ c_dot) / speed) if speed > 0 else 0.0

    return MetricGapReport(gram_pullback=G, kernel_inverse=K_inv, normal_part=N,
                           normal_gram=N.T @ N, psd_residual=psd_residual,
                           output_value=c, velocity_alignment=alignment,
                           left_recorded_box=left_box)


def _recorded_output_box(model, data, traj):
    outputs = np.array([eval_outputs(model, s.theta, data) for s in traj.steps])
    lo, hi = outputs.min(axis=0), outputs.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    return lo - 0.2 * span, hi + 0.2 * span


def _trajectory_velocity(model, data, traj, index):
    steps = traj.steps
    k0 = max(index - 1, 0)
    k1 = min(index + 1, len(steps) - 1)
    if k1 == k0:
        raise ValueError("trajectory too short to difference a velocity")
    c0 = eval_outputs(model, steps[k0].theta, data)
    c1 = eval_outputs(model, steps[k1].theta, data)
    return (c1 - c0) / (steps[k1].t - steps[k0].t)
