"""Dense tensor primitives with hand-written backward passes.

Tensors are plain numpy arrays.  Stored tensors are float32; every op
promotes to float64 internally so reductions accumulate in 64 bits, and
returns float64.  Callers that persist results cast back to float32.

Forward functions that take part in training return ``(out, cache)``;
the matching ``*_backward`` consumes the upstream gradient and the cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DegenerateVectorError, DimensionError

NORM_EPS = 1e-12
ACTIVATIONS = ("relu", "sigmoid", "none")


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def activate_backward(grad: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    """Gradient through ``activate`` expressed in terms of its output."""
    if activation == "relu":
        return grad * (out > 0.0)
    if activation == "sigmoid":
        return grad * out * (1.0 - out)
    return grad


def leaky_relu(z: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def leaky_relu_backward(grad: np.ndarray, z: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return grad * np.where(z > 0.0, 1.0, slope)


# ---------------------------------------------------------------------------
# convolution / pooling / resizing
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C×H×W or N×C×H×W input, got shape {x.shape}")


def conv3x3(x, weight, bias, activation: str = "relu"):
    """3×3 convolution, stride 1, zero padding 1, followed by ``activation``.

    Accepts a single map (C×H×W) or a batch (N×C×H×W); the output keeps
    the same layout with C' channels.  Returns ``(out, cache)``.
    """
    x = _f64(x)
    weight = _f64(weight)
    bias = _f64(bias)
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise DimensionError(
            f"conv weight shape {weight.shape} incompatible with {c} input channels"
        )
    c_out = weight.shape[0]
    if bias.shape != (c_out,):
        raise DimensionError(f"conv bias shape {bias.shape}, expected ({c_out},)")

    padded = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # N×H×W×(C·9), tap order (c, dy, dx) matches weight.reshape(C', C·9)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * 9)
    z = cols @ weight.reshape(c_out, c * 9).T + bias
    out = activate(z, activation).transpose(0, 3, 1, 2)
    cache = (cols, weight, out, activation, squeeze)
    return (out[0] if squeeze else out), cache


def conv3x3_backward(grad_out, cache, input_grad: bool = True):
    """Return ``(grad_input, grad_weight, grad_bias)``.

    ``grad_input`` is None when ``input_grad`` is False (the input is data).
    """
    cols, weight, out, activation, squeeze = cache
    grad_out = _f64(grad_out)
    if squeeze:
        grad_out = grad_out[None]
    n, h, w, k = cols.shape
    c_out = weight.shape[0]
    gz = activate_backward(grad_out, out, activation)
    gz2 = gz.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_w = (gz2.T @ cols.reshape(-1, k)).reshape(weight.shape)
    grad_b = gz2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    # full correlation with the flipped kernel, channels swapped
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx, _ = conv3x3(gz, flipped, np.zeros(flipped.shape[0]), "none")
    return (gx[0] if squeeze else gx), grad_w, grad_b


def global_avg_pool(x) -> np.ndarray:
    """Spatial mean over the last two axes (C×H×W → C, N×C×H×W → N×C)."""
    x = _f64(x)
    if x.ndim < 3 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DimensionError(f"global_avg_pool needs non-empty spatial dims, got {x.shape}")
    return x.mean(axis=(-2, -1))


def global_avg_pool_backward(grad_out, spatial: tuple[int, int]) -> np.ndarray:
    h, w = spatial
    g = _f64(grad_out)[..., None, None]
    return np.broadcast_to(g / (h * w), g.shape[:-2] + (h, w)).copy()


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic align-corners interpolation matrix of shape dst×src."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m


def bilinear_resize(x, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with align-corners sampling.

    Output pixel 0 samples input pixel 0 and the last output pixel samples
    the last input pixel; interior pixels interpolate linearly between.
    Works on any array whose last two axes are spatial.
    """
    x = _f64(x)
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"target size must be >= 1, got {target_h}×{target_w}")
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DimensionError(f"cannot resize array of shape {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (target_h, target_w):
        return x.copy()
    rh = _resize_matrix(h, target_h)
    rw = _resize_matrix(w, target_w)
    return rh @ x @ rw.T


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if len(inputs) == 0:
        raise DimensionError("concat_channels needs at least one input")
    maps = [_f64(m) for m in inputs]
    spatial = maps[0].shape[-2:]
    for i, m in enumerate(maps):
        if m.ndim != 3:
            raise DimensionError(f"input {i} has shape {m.shape}, expected C×H×W")
        if m.shape[-2:] != spatial:
            raise DimensionError(
                f"input {i} spatial size {m.shape[-2:]} differs from {spatial}"
            )
    return np.concatenate(maps, axis=0)


# ---------------------------------------------------------------------------
# dense layers and normalizers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None) -> np.ndarray:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    x = _f64(x)
    weight = _f64(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1:]} vs weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        bias = _f64(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias
    return out


def linear_backward(grad_out, x, weight):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``linear``."""
    grad_out = _f64(grad_out)
    x = _f64(x)
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_x = grad_out @ _f64(weight)
    return grad_x, g2.T @ x2, g2.sum(axis=0)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = _f64(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = _f64(logits)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def l2_normalize(x, axis: int = -1, eps: float = NORM_EPS) -> np.ndarray:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = _f64(x)
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(
            f"cannot normalize vector with norm <= {eps:g} "
            f"({int(np.sum(norm <= eps))} degenerate vector(s))"
        )
    return x / norm


def l2_normalize_backward(grad_out, x, axis: int = -1) -> np.ndarray:
    x = _f64(x)
    g = _f64(grad_out)
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    y = x / norm
    return (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class Adam:
    """Adam with a linear learning-rate ramp from ``lr_start`` to ``lr_end``.

    The ramp spans ``total_steps`` optimizer steps; past the end the rate
    stays at ``lr_end``.
    """

    params: list
    lr_start: float = 1e-4
    lr_end: float = 2e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    @property
    def lr(self) -> float:
        if self.total_steps <= 1:
            return self.lr_start
        frac = min(self.step_count / (self.total_steps - 1), 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * frac

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        lr = self.lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()


def finite_diff_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` evaluates the loss at the current contents of ``params``
    (arrays mutated in place) and returns ``(loss, grads)`` with one grad
    per param.  Up to ``max_coords`` coordinates per param are sampled.
    Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over the checked coordinates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_fn()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        size = flat.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_fn()
            flat[i] = orig - epsilon
            down, _ = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = g.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return float(worst)
