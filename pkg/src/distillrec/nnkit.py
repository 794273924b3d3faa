"""Small dense neural-network core in float64 numpy.

Parameters of a network are kept in a plain ``dict[str, np.ndarray]`` so the
optimizer, checkpointing and gradient checking can treat every network the
same way. Layers here are thin views over such arrays; all backward passes are
written by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class ParameterError(ValueError):
    """Raised for an invalid scalar hyperparameter (e.g. a non-positive temperature)."""


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


# ---------------------------------------------------------------------------
# activations

def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, y):
    return (a > 0).astype(DTYPE)


def _sigmoid_grad(a, y):
    return y * (1.0 - y)


def _tanh_grad(a, y):
    return 1.0 - y * y


def _identity(a):
    return a


def _ones(a, y):
    return np.ones_like(a)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "sigmoid": (sigmoid, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (_identity, _ones),
}


# ---------------------------------------------------------------------------
# dense layer

@dataclass
class DenseLayer:
    """Affine map ``x @ W + b`` followed by an elementwise activation."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ShapeError(f"dense layer wants 2-D weights and 1-D bias, got {self.W.shape} and {self.b.shape}")
        if self.W.shape[1] != self.b.shape[0]:
            raise ShapeError(f"weights have {self.W.shape[1]} columns but bias has dim {self.b.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(DTYPE)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, activation: str = "relu") -> DenseLayer:
    return DenseLayer(glorot_uniform(rng, n_in, n_out), np.zeros(n_out, dtype=DTYPE), activation)


def _check_input(layer: DenseLayer, x: np.ndarray) -> None:
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"dense layer expects input dim {layer.n_in}, got {x.shape[-1]}")


def dense_preactivation(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    _check_input(layer, x)
    return x @ layer.W + layer.b


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Return ``activation(x @ W + b)``; ``x`` may be a vector or a batch of rows."""
    fn, _ = ACTIVATIONS[layer.activation]
    return fn(dense_preactivation(layer, x))


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream_grad: np.ndarray):
    """Gradients ``(grad_W, grad_b, grad_x)`` of the layer output contracted with ``upstream_grad``.

    The pre-activation is recomputed from ``x``. Batched inputs sum parameter
    gradients over rows.
    """
    x = np.asarray(x, dtype=DTYPE)
    g = np.asarray(upstream_grad, dtype=DTYPE)
    a = dense_preactivation(layer, x)
    if g.shape != a.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match layer output {a.shape}")
    fn, dfn = ACTIVATIONS[layer.activation]
    da = g * dfn(a, fn(a))
    if x.ndim == 1:
        grad_W = np.outer(x, da)
        grad_b = da.copy()
    else:
        grad_W = x.T @ da
        grad_b = da.sum(axis=0)
    grad_x = da @ layer.W.T
    return grad_W, grad_b, grad_x


def mlp_forward(layers: list[DenseLayer], x: np.ndarray):
    """Run a stack of dense layers; returns output and the per-layer inputs for backprop."""
    inputs = []
    h = np.asarray(x, dtype=DTYPE)
    for layer in layers:
        inputs.append(h)
        h = dense_forward(layer, h)
    return h, inputs


def mlp_backward(layers: list[DenseLayer], inputs: list[np.ndarray], upstream_grad: np.ndarray):
    """Backprop through a stack built by :func:`mlp_forward`.

    Returns a list of ``(grad_W, grad_b)`` per layer and the input gradient.
    """
    g = upstream_grad
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        gW, gb, g = dense_backward(layers[k], inputs[k], g)
        grads[k] = (gW, gb)
    return grads, g


# ---------------------------------------------------------------------------
# GRU cell

GRU_PARAM_NAMES = ("W_xz", "W_hz", "b_z", "W_xh", "W_hh", "b_h", "W_xr", "W_hr", "b_r")


@dataclass
class GruCell:
    W_xz: np.ndarray
    W_hz: np.ndarray
    b_z: np.ndarray
    W_xh: np.ndarray
    W_hh: np.ndarray
    b_h: np.ndarray
    W_xr: np.ndarray
    W_hr: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        n_x, n_u = self.W_xz.shape
        for name in GRU_PARAM_NAMES:
            arr = getattr(self, name)
            if name.startswith("W_x"):
                want = (n_x, n_u)
            elif name.startswith("W_h"):
                want = (n_u, n_u)
            else:
                want = (n_u,)
            if arr.shape != want:
                raise ShapeError(f"GRU block {name}: expected shape {want}, got {arr.shape}")

    @property
    def n_x(self) -> int:
        return self.W_xz.shape[0]

    @property
    def n_u(self) -> int:
        return self.W_xz.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GRU_PARAM_NAMES}


def init_gru_cell(rng: np.random.Generator, n_x: int, n_u: int) -> GruCell:
    blocks = {}
    for name in GRU_PARAM_NAMES:
        if name.startswith("W_x"):
            blocks[name] = glorot_uniform(rng, n_x, n_u)
        elif name.startswith("W_h"):
            blocks[name] = glorot_uniform(rng, n_u, n_u)
        else:
            blocks[name] = np.zeros(n_u, dtype=DTYPE)
    return GruCell(**blocks)


def zero_gru_cell(n_x: int, n_u: int) -> GruCell:
    return GruCell(**{
        name: np.zeros((n_x, n_u) if name.startswith("W_x") else (n_u, n_u) if name.startswith("W_h") else (n_u,))
        for name in GRU_PARAM_NAMES
    })


@dataclass
class GateTrace:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hhat: np.ndarray


def gru_step_with_gates(z, r, h_prev, hhat):
    """Blend ``z * h_prev + (1 - z) * hhat`` with explicit gate values."""
    z, r, h_prev, hhat = (np.asarray(v, dtype=DTYPE) for v in (z, r, h_prev, hhat))
    if not (z.shape == r.shape == h_prev.shape == hhat.shape):
        raise ShapeError(f"gate/state shapes differ: {z.shape}, {r.shape}, {h_prev.shape}, {hhat.shape}")
    for name, g in (("z", z), ("r", r)):
        if np.any(g < 0.0) or np.any(g > 1.0):
            raise ParameterError(f"gate {name} has entries outside [0, 1]")
    return z * h_prev + (1.0 - z) * hhat


def gru_step(cell: GruCell, x: np.ndarray, h_prev: np.ndarray):
    """One GRU update; returns the new hidden state and the gate trace used by backprop."""
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    if x.shape[-1] != cell.n_x:
        raise ShapeError(f"GRU input dim {x.shape[-1]} != {cell.n_x}")
    if h_prev.shape[-1] != cell.n_u:
        raise ShapeError(f"GRU hidden dim {h_prev.shape[-1]} != {cell.n_u}")
    z = sigmoid(x @ cell.W_xz + h_prev @ cell.W_hz + cell.b_z)
    r = sigmoid(x @ cell.W_xr + h_prev @ cell.W_hr + cell.b_r)
    hhat = np.tanh(x @ cell.W_xh + (r * h_prev) @ cell.W_hh + cell.b_h)
    h_new = z * h_prev + (1.0 - z) * hhat
    return h_new, GateTrace(x, h_prev, z, r, hhat)


def _outer_sum(a, b):
    return np.outer(a, b) if a.ndim == 1 else a.T @ b


def _bias_sum(d):
    return d.copy() if d.ndim == 1 else d.sum(axis=0)


def gru_step_backward(cell: GruCell, trace: GateTrace, dh_new: np.ndarray):
    """Backprop one GRU step; returns ``(grads, dx, dh_prev)``."""
    x, h, z, r, hhat = trace.x, trace.h_prev, trace.z, trace.r, trace.hhat
    g = np.asarray(dh_new, dtype=DTYPE)
    dz = g * (h - hhat)
    dh_prev = g * z
    da_h = g * (1.0 - z) * (1.0 - hhat * hhat)
    rh = r * h
    drh = da_h @ cell.W_hh.T
    dr = drh * h
    dh_prev = dh_prev + drh * r
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)

    grads = {
        "W_xz": _outer_sum(x, da_z), "W_hz": _outer_sum(h, da_z), "b_z": _bias_sum(da_z),
        "W_xh": _outer_sum(x, da_h), "W_hh": _outer_sum(rh, da_h), "b_h": _bias_sum(da_h),
        "W_xr": _outer_sum(x, da_r), "W_hr": _outer_sum(h, da_r), "b_r": _bias_sum(da_r),
    }
    dx = da_z @ cell.W_xz.T + da_h @ cell.W_xh.T + da_r @ cell.W_xr.T
    dh_prev = dh_prev + da_z @ cell.W_hz.T + da_r @ cell.W_hr.T
    return grads, dx, dh_prev


# ---------------------------------------------------------------------------
# temperature softmax

def softmax_tau(q, tau: float) -> np.ndarray:
    """Softmax of ``q / tau`` along the last axis, max-subtracted for overflow safety."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    q = np.asarray(q, dtype=DTYPE)
    if not np.all(np.isfinite(q)):
        raise ParameterError("softmax input contains non-finite values")
    s = (q - q.max(axis=-1, keepdims=True)) / tau
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    p = np.asarray(p, dtype=DTYPE)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1, beta2=beta2, eps=eps,
    )


def check_finite(grads: dict, context: str = "") -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            where = f" ({context})" if context else ""
            raise TrainingError(f"non-finite gradient in block {name}{where}")


def _check_same_shapes(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter block {name}")
        if params[name].shape != g.shape:
            raise ShapeError(f"block {name}: parameter shape {params[name].shape} != gradient shape {g.shape}")


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, context: str = "") -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``.

    Blocks missing from ``grads`` are left untouched (frozen).
    """
    _check_same_shapes(params, grads)
    check_finite(grads, context)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        if m.shape != g.shape:
            raise ShapeError(f"Adam state for {name} has shape {m.shape}, gradient {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict, grads: dict, lr: float, context: str = "") -> None:
    _check_same_shapes(params, grads)
    check_finite(grads, context)
    for name, g in grads.items():
        params[name] -= lr * g


def decayed_lr(eta0: float, epoch: int) -> float:
    """Learning-rate schedule ``eta0 / (1 + epoch / 2)``; ``epoch`` counts completed epochs."""
    return eta0 / (1.0 + epoch / 2.0)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: dict
    n_coords: int
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def __str__(self):
        lines = [f"grad check: {self.n_coords} coords, worst rel. error {self.worst:.3e} (tol {self.tolerance:g})"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name:<24s} {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn, params: dict, grads: dict, n_coords: int = 100, h: float = 1e-6,
               tolerance: float = 1e-4, rng=None, floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must read the arrays in ``params``; coordinates are perturbed in
    place and restored. Coordinates are spread round-robin over the blocks in
    ``grads`` so small blocks (biases) are always sampled.

    The denominator of the relative error is ``max(|analytic|, |numeric|, floor)``.
    At ``h = 1e-6`` central differences only resolve about 1e-10 absolute, so
    gradients smaller than ``floor`` are compared at ``floor * tolerance`` absolute.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = [n for n in grads if params[n].size > 0]
    errors: dict[str, float] = {}
    for j in range(n_coords):
        name = names[j % len(names)]
        flat = params[name].reshape(-1)
        if not np.shares_memory(flat, params[name]):
            raise ShapeError(f"parameter block {name} is not contiguous")
        idx = int(rng.integers(flat.size))
        old = flat[idx]
        flat[idx] = old + h
        f_plus = loss_fn()
        flat[idx] = old - h
        f_minus = loss_fn()
        flat[idx] = old
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        err = relative_error(analytic, numeric, floor)
        errors[name] = max(errors.get(name, 0.0), err)
    return GradCheckReport(errors, n_coords, tolerance)
