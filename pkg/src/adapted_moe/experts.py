"""Per-subclass discriminators trained against Gaussian-noise anomalies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prng
from .exceptions import DimensionError, EmptyExpertError
from .numeric import Adam, Parameter, leaky_relu, leaky_relu_backward, linear, linear_backward

LEAKY_SLOPE = 0.01


@dataclass
class NoiseConfig:
    sigma: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"noise sigma must be > 0, got {self.sigma}")


@dataclass
class ExpertParams:
    """``linear(C'→hidden) → leaky-ReLU → linear(hidden→1)``; output D > 0 means normal."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    expert_id: int = 0

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ExpertParams":
        return ExpertParams(*(a.copy() for a in self.arrays()), expert_id=self.expert_id)


def init_expert(embed_dim: int, rng, hidden: int | None = None, expert_id: int = 0) -> ExpertParams:
    """Kaiming-uniform hidden layer, all-zero scoring head."""
    hidden = hidden or embed_dim
    bound = np.sqrt(6.0 / embed_dim)
    return ExpertParams(
        w1=prng.uniform(rng, (hidden, embed_dim), -bound, bound),
        b1=np.zeros(hidden),
        w2=np.zeros((1, hidden)),
        b2=np.zeros(1),
        expert_id=expert_id,
    )


def expert_forward(expert: ExpertParams, E):
    """Discriminator output per row of ``E`` (M×C' → M); returns ``(D, cache)``."""
    E = np.asarray(E, dtype=np.float64)
    if E.shape[-1] != expert.embed_dim:
        raise DimensionError(f"embedding dim {E.shape[-1]} vs expert dim {expert.embed_dim}")
    z = linear(E, expert.w1, expert.b1)
    h = leaky_relu(z, LEAKY_SLOPE)
    d = linear(h, expert.w2, expert.b2)[..., 0]
    return d, (E, z, h)


def expert_backward(expert: ExpertParams, grad_d, cache):
    """Returns ``(grad_E, [grad_w1, grad_b1, grad_w2, grad_b2])``."""
    E, z, h = cache
    gd = np.asarray(grad_d, dtype=np.float64)[..., None]
    gh, gw2, gb2 = linear_backward(gd, h, expert.w2)
    gz = leaky_relu_backward(gh, z, LEAKY_SLOPE)
    gE, gw1, gb1 = linear_backward(gz, E, expert.w1)
    return gE, [gw1, gb1, gw2, gb2]


def synthesize_anomalies(E, noise: NoiseConfig | float, rng=None) -> np.ndarray:
    """Return ``E + ε`` with ε ~ N(0, σ²) i.i.d.; ``E`` is not modified."""
    if not isinstance(noise, NoiseConfig):
        noise = NoiseConfig(float(noise))
    rng = prng.make_rng(noise.seed if rng is None else rng)
    E = np.asarray(E, dtype=np.float64)
    return E + prng.gaussian(rng, E.shape, noise.sigma)


def expert_loss(scores_normal, scores_anomalous, margin: float = 0.5):
    """Truncated hinge, averaged over pairs.

    ``mean(max(0, th − D(normal)) + max(0, D(anomalous) + th))``.  The
    subgradient at a kink is 0.  Returns ``(loss, grad_normal, grad_anomalous)``.
    """
    dn = np.asarray(scores_normal, dtype=np.float64)
    da = np.asarray(scores_anomalous, dtype=np.float64)
    if dn.shape != da.shape:
        raise DimensionError(f"unpaired batches {dn.shape} vs {da.shape}")
    m = max(dn.size, 1)
    ln = margin - dn
    la = da + margin
    loss = float((np.maximum(ln, 0.0).sum() + np.maximum(la, 0.0).sum()) / m)
    gn = -(ln > 0.0).astype(np.float64) / m
    ga = (la > 0.0).astype(np.float64) / m
    return loss, gn, ga


def expert_step_grads(expert: ExpertParams, E, rng, sigma: float, margin: float = 0.5):
    """One forward/backward over normal rows ``E`` and their noisy copies.

    Returns ``(loss, grad_E, param_grads)``; ``grad_E`` includes the path
    through the noisy copies (noise is additive, so d(E+ε)/dE = I).
    """
    fake = E + prng.gaussian(rng, E.shape, sigma)
    dn, cache_n = expert_forward(expert, E)
    da, cache_a = expert_forward(expert, fake)
    loss, gn, ga = expert_loss(dn, da, margin)
    gE_n, grads_n = expert_backward(expert, gn, cache_n)
    gE_a, grads_a = expert_backward(expert, ga, cache_a)
    return loss, gE_n + gE_a, [a + b for a, b in zip(grads_n, grads_a)]


def train_expert(expert: ExpertParams, batches, noise: NoiseConfig, epochs: int = 160,
                 lr_start: float = 1e-4, lr_end: float = 2e-4, margin: float = 0.5):
    """Fit one expert on fixed embeddings.

    ``batches`` is a sequence of M×C' arrays of this expert's normal rows.
    Returns ``(trained_expert, final_smoothed_loss)``; the input expert is
    left unchanged.
    """
    batches = [np.asarray(b, dtype=np.float64) for b in batches if len(b)]
    if not batches:
        raise EmptyExpertError(f"expert {expert.expert_id} has no routed samples")
    trained = expert.copy()
    params = [Parameter(a) for a in trained.arrays()]
    opt = Adam(params, lr_start, lr_end, total_steps=max(epochs * len(batches), 1))
    rng = prng.make_rng(noise.seed)
    smoothed = None
    for _ in range(epochs):
        for b in batches:
            current = ExpertParams(*(p.value for p in params), expert_id=expert.expert_id)
            loss, _, grads = expert_step_grads(current, b, rng, noise.sigma, margin)
            for p, g in zip(params, grads):
                p.grad += g
            opt.step()
            smoothed = loss if smoothed is None else 0.9 * smoothed + 0.1 * loss
    result = ExpertParams(*(p.value.copy() for p in params), expert_id=expert.expert_id)
    return result, smoothed


def expert_score(expert: ExpertParams, E) -> np.ndarray:
    """Anomaly score per location, ``−D(e)`` (higher = more anomalous)."""
    d, _ = expert_forward(expert, E)
    return -d
