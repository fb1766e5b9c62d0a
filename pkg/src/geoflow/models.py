"""Differentiable models with exact stacked outputs and Jacobians.

Two analytic 2-parameter toys plus a small smooth-activation MLP in the
maximal-update parametrisation.  All models expose

    outputs(theta, data)   -> (n,) stacked outputs over the dataset
    jacobian(theta, data)  -> (n, m) output Jacobian, row i = grad of output i
    vjp(theta, data, w)    -> (m,)  J(theta)^T w without materialising J

and are immutable after construction, so they are safe to share across
concurrent runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError


@dataclass(frozen=True)
class Dataset:
    """Training data: inputs (n, d) with pairwise-distinct rows, targets (n,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float).ravel()
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        n = inputs.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one point")
        if targets.shape[0] != n:
            raise ValueError(f"targets length {targets.shape[0]} != number of inputs {n}")
        # distinct inputs are required for output fibres to be well defined
        for i in range(n):
            for j in range(i + 1, n):
                if np.array_equal(inputs[i], inputs[j]):
                    raise ValueError(f"inputs {i} and {j} are identical")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def singleton_dataset(x: float = 1.0, y: float = 1.0) -> Dataset:
    """The 1-point dataset {(x, y)} used by the two-parameter toys."""
    return Dataset(inputs=np.array([[x]]), targets=np.array([y]))


def sine_dataset(n: int = 16, noise_std: float = 0.0, seed: int = 0,
                 lo: float = -1.0, hi: float = 1.0) -> Dataset:
    """n uniformly spaced 1-D points with targets sin(pi*x/2) + Gaussian noise."""
    x = np.linspace(lo, hi, n)
    y = np.sin(0.5 * np.pi * x)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        y = y + noise_std * rng.standard_normal(n)
    return Dataset(inputs=x[:, None], targets=y)


def _check_theta(model, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != model.num_params:
        raise DimensionMismatchError(model.num_params, theta.shape[0])
    return theta


class BilinearToy:
    """f(x; theta) = theta1 * theta2 * x.  Minimal model with a curved flow manifold."""

    num_params = 2
    constant_jacobian = False

    def outputs(self, theta, data: Dataset) -> np.ndarray:
        x = data.inputs[:, 0]
        return theta[0] * theta[1] * x

    def jacobian(self, theta, data: Dataset) -> np.ndarray:
        x = data.inputs[:, 0]
        return np.column_stack([theta[1] * x, theta[0] * x])

    def vjp(self, theta, data: Dataset, w) -> np.ndarray:
        x = data.inputs[:, 0]
        s = float(np.dot(w, x))
        return np.array([theta[1] * s, theta[0] * s])

    def output_hessian_vec(self, theta, data: Dataset, u, v) -> np.ndarray:
        # d/dtheta [J(theta)^T u] applied to v; each per-point Hessian is x*[[0,1],[1,0]]
        s = float(np.dot(u, data.inputs[:, 0]))
        return s * np.array([v[1], v[0]])


class LinearToy:
    """f(x; theta) = (theta1 + theta2) * x.  Constant Jacobian: the kernel-regime toy."""

    num_params = 2
    constant_jacobian = True

    def outputs(self, theta, data: Dataset) -> np.ndarray:
        x = data.inputs[:, 0]
        return (theta[0] + theta[1]) * x

    def jacobian(self, theta, data: Dataset) -> np.ndarray:
        x = data.inputs[:, 0]
        return np.column_stack([x, x])

    def vjp(self, theta, data: Dataset, w) -> np.ndarray:
        s = float(np.dot(w, data.inputs[:, 0]))
        return np.array([s, s])

    def output_hessian_vec(self, theta, data: Dataset, u, v) -> np.ndarray:
        return np.zeros(2)


def _tanh(a):
    return np.tanh(a)


def _tanh_prime(a):
    t = np.tanh(a)
    return 1.0 - t * t


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(a):
    # smooth tanh-form approximation; C-infinity in the parameters
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    return 0.5 * a * (1.0 + np.tanh(inner))


def _gelu_prime(a):
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * a * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)


_ACTIVATIONS = {"tanh": (_tanh, _tanh_prime), "gelu": (_gelu, _gelu_prime)}


@dataclass(frozen=True)
class MlpMuP:
    """Two-hidden-layer scalar-output MLP in maximal-update parametrisation.

    Hidden weights are initialised N(0, 1/fan_in), biases N(0, 1); the readout
    carries a 1/width forward multiplier with N(0, 1) entries, which keeps the
    NTK spectrum width-stable while features still move.  Parameters are a flat
    vector [W1, b1, W2, b2, w_out].  ``layer_scales`` rescales each block's
    effective parametrisation (identity by default).
    """

    widths: tuple = (64, 64)
    activation: str = "tanh"
    input_dim: int = 1
    layer_scales: tuple = None  # optional per-block scaling of the 5 blocks

    def __post_init__(self):
        if len(self.widths) != 2:
            raise ValueError("MlpMuP expects exactly two hidden widths")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; use one of {sorted(_ACTIVATIONS)}")
        if self.layer_scales is not None and len(self.layer_scales) != 5:
            raise ValueError("layer_scales must have one entry per parameter block (5)")

    constant_jacobian = False

    @property
    def num_params(self) -> int:
        w1, w2 = self.widths
        d = self.input_dim
        return w1 * d + w1 + w2 * w1 + w2 + w2

    def _block_shapes(self):
        w1, w2 = self.widths
        d = self.input_dim
        return [(w1, d), (w1,), (w2, w1), (w2,), (w2,)]

    def _unpack(self, theta):
        out, k = [], 0
        scales = self.layer_scales or (1.0,) * 5
        for shape, s in zip(self._block_shapes(), scales):
            size = int(np.prod(shape))
            block = theta[k:k + size].reshape(shape)
            out.append(block if s == 1.0 else s * block)
            k += size
        return out

    def _forward(self, theta, data: Dataset):
        W1, b1, W2, b2, w_out = self._unpack(theta)
        act, act_prime = _ACTIVATIONS[self.activation]
        h0 = data.inputs
        a1 = h0 @ W1.T + b1
        h1 = act(a1)
        a2 = h1 @ W2.T + b2
        h2 = act(a2)
        f = (h2 @ w_out) / self.widths[1]
        return f, (h0, a1, h1, a2, h2, W2, w_out, act_prime)

    def outputs(self, theta, data: Dataset) -> np.ndarray:
        return self._forward(theta, data)[0]

    def jacobian(self, theta, data: Dataset) -> np.ndarray:
        _, (h0, a1, h1, a2, h2, W2, w_out, act_prime) = self._forward(theta, data)
        n = data.n
        mult = 1.0 / self.widths[1]
        d_a2 = act_prime(a2) * (mult * w_out)           # (n, w2)
        d_h1 = d_a2 @ W2                                # (n, w1)
        d_a1 = act_prime(a1) * d_h1                     # (n, w1)
        gW1 = np.einsum("ni,nd->nid", d_a1, h0).reshape(n, -1)
        gW2 = np.einsum("ni,nj->nij", d_a2, h1).reshape(n, -1)
        g_out = mult * h2
        J = np.concatenate([gW1, d_a1, gW2, d_a2, g_out], axis=1)
        scales = self.layer_scales
        if scales is not None:
            J = J * self._scale_vector()
        return J

    def vjp(self, theta, data: Dataset, w) -> np.ndarray:
        _, (h0, a1, h1, a2, h2, W2, w_out, act_prime) = self._forward(theta, data)
        w = np.asarray(w, dtype=float)
        mult = 1.0 / self.widths[1]
        d_a2 = act_prime(a2) * (mult * w_out)
        d_a1 = act_prime(a1) * (d_a2 @ W2)
        wa2 = d_a2 * w[:, None]
        wa1 = d_a1 * w[:, None]
        gW1 = wa1.T @ h0
        gW2 = wa2.T @ h1
        g_out = mult * (h2.T @ w)
        out = np.concatenate([gW1.ravel(), wa1.sum(axis=0), gW2.ravel(), wa2.sum(axis=0), g_out])
        if self.layer_scales is not None:
            out = out * self._scale_vector()
        return out

    def _scale_vector(self):
        parts = []
        for shape, s in zip(self._block_shapes(), self.layer_scales):
            parts.append(np.full(int(np.prod(shape)), float(s)))
        return np.concatenate(parts)

    def output_hessian_vec(self, theta, data: Dataset, u, v, eps: float = 1e-6) -> np.ndarray:
        # central difference of theta -> J^T u along v; exact contractions are
        # only needed at toy scale where the analytic models provide them
        v = np.asarray(v, dtype=float)
        scale = eps * (1.0 + float(np.linalg.norm(theta)) / math.sqrt(max(theta.size, 1)))
        hi = self.vjp(np.asarray(theta) + scale * v, data, u)
        lo = self.vjp(np.asarray(theta) - scale * v, data, u)
        return (hi - lo) / (2 * scale)


def eval_outputs(model, theta, data: Dataset) -> np.ndarray:
    """Stacked outputs g(theta) over the dataset; pure function of its arguments."""
    theta = _check_theta(model, theta)
    return model.outputs(theta, data)


def eval_jacobian(model, theta, data: Dataset) -> np.ndarray:
    """The (n, m) output Jacobian; analytic for the toys, per-output accumulation for the MLP."""
    theta = _check_theta(model, theta)
    return model.jacobian(theta, data)


def eval_vjp(model, theta, data: Dataset, w) -> np.ndarray:
    """J(theta)^T w, computed without materialising J where the model allows it."""
    theta = _check_theta(model, theta)
    return model.vjp(theta, data, w)


def mup_init(spec, seed: int) -> np.ndarray:
    """Width-scaled Gaussian initialisation for MlpMuP; same seed, same vector."""
    if not isinstance(spec, MlpMuP):
        raise TypeError(f"mup_init only supports MlpMuP specs, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    w1, w2 = spec.widths
    d = spec.input_dim
    blocks = [
        rng.standard_normal((w1, d)) / math.sqrt(d),    # hidden weights: N(0, 1/fan_in)
        rng.standard_normal(w1),                        # biases: fan_in 1
        rng.standard_normal((w2, w1)) / math.sqrt(w1),
        rng.standard_normal(w2),
        rng.standard_normal(w2),                        # readout entries N(0,1); 1/width applied in forward
    ]
    return np.concatenate([b.ravel() for b in blocks])


def model_from_kind(kind: str, **kwargs):
    """Construct a model by its config name: bilinear | linear | mlp."""
    kind = kind.lower()
    if kind == "bilinear":
        return BilinearToy()
    if kind == "linear":
        return LinearToy()
    if kind == "mlp":
        return MlpMuP(**kwargs)
    raise ValueError(f"unknown model kind {kind!r}")
