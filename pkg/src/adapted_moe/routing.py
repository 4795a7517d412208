"""Routing network: projection, pooled embeddings, centers, top-k routing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prng
from .exceptions import DimensionError
from .numeric import (
    NORM_EPS,
    Adam,
    Parameter,
    conv3x3,
    conv3x3_backward,
    global_avg_pool,
    global_avg_pool_backward,
    l2_normalize,
    l2_normalize_backward,
    log_softmax,
    softmax,
)


@dataclass
class RoutingParams:
    proj_weight: np.ndarray  # C'×C×3×3
    proj_bias: np.ndarray  # C'
    classifier: np.ndarray  # n×C', no bias
    centers: np.ndarray  # n×C'
    center_rate: float = 0.5
    alpha: float = 0.5
    activation: str = "relu"

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise DimensionError("center bank must be n×C' with n >= 1")
        if self.classifier.shape != self.centers.shape:
            raise DimensionError(
                f"classifier {self.classifier.shape} and centers {self.centers.shape} disagree"
            )
        if self.proj_weight.shape[0] != self.centers.shape[1]:
            raise DimensionError("projection output channels differ from center dim")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")

    @property
    def n_subclasses(self) -> int:
        return self.centers.shape[0]

    @property
    def in_channels(self) -> int:
        return self.proj_weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.proj_weight.shape[0]


def init_routing_params(in_channels: int, embed_dim: int, n_subclasses: int, rng,
                        alpha: float = 0.5, center_rate: float = 0.5,
                        activation: str = "relu") -> RoutingParams:
    fan_in = in_channels * 9
    bound = np.sqrt(6.0 / fan_in)
    weight = prng.uniform(rng, (embed_dim, in_channels, 3, 3), -bound, bound)
    cbound = np.sqrt(6.0 / embed_dim)
    classifier = prng.uniform(rng, (n_subclasses, embed_dim), -cbound, cbound)
    centers = prng.gaussian(rng, (n_subclasses, embed_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    return RoutingParams(weight, np.zeros(embed_dim), classifier, centers,
                         center_rate=center_rate, alpha=alpha, activation=activation)


@dataclass
class RoutingOutput:
    """Embeddings of a batch; routing fields are filled by :func:`route`."""

    x: np.ndarray  # N×C' pooled embeddings
    E: np.ndarray  # N×HW×C' per-location embeddings
    scores: np.ndarray | None = None
    weights: np.ndarray | None = None
    topk: np.ndarray | None = None


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    # a location where every channel is dead under ReLU has no direction; it stays zero
    norm = np.sqrt((rows * rows).sum(axis=-1, keepdims=True))
    return np.divide(rows, norm, out=np.zeros_like(rows), where=norm > NORM_EPS)


def _normalize_rows_backward(grad, rows: np.ndarray) -> np.ndarray:
    norm = np.sqrt((rows * rows).sum(axis=-1, keepdims=True))
    live = norm > NORM_EPS
    safe = np.where(live, norm, 1.0)
    y = rows / safe
    return np.where(live, (grad - y * (grad * y).sum(axis=-1, keepdims=True)) / safe, 0.0)


def embed(feature_maps, params: RoutingParams, normalize: bool = True):
    """Project feature maps and pool them into embeddings.

    ``x`` is the GAP of the projected map and ``E`` its per-location channel
    vectors.  With ``normalize`` both are scaled to unit norm (each row of E
    separately).  Returns ``(RoutingOutput, cache)``.
    """
    fm = np.asarray(feature_maps, dtype=np.float64)
    single = fm.ndim == 3
    if single:
        fm = fm[None]
    if fm.ndim != 4 or fm.shape[1] != params.in_channels:
        raise DimensionError(
            f"feature map with {fm.shape[-3] if fm.ndim >= 3 else '?'} channels, "
            f"routing expects {params.in_channels}"
        )
    proj, conv_cache = conv3x3(fm, params.proj_weight, params.proj_bias, params.activation)
    n, c, h, w = proj.shape
    pooled = global_avg_pool(proj)
    rows = proj.reshape(n, c, h * w).transpose(0, 2, 1)
    if normalize:
        x = l2_normalize(pooled)
        E = _normalize_rows(rows)
    else:
        x, E = pooled, rows.copy()
    cache = (conv_cache, pooled, rows, normalize, (h, w))
    return RoutingOutput(x=x, E=E), cache


def embed_backward(grad_x, grad_E, cache):
    """Gradients of the projection parameters: ``(grad_weight, grad_bias)``."""
    conv_cache, pooled, rows, normalize, (h, w) = cache
    n, hw, c = rows.shape
    gproj = np.zeros((n, c, h, w))
    if grad_x is not None:
        gp = l2_normalize_backward(grad_x, pooled) if normalize else np.asarray(grad_x)
        gproj += global_avg_pool_backward(gp, (h, w))
    if grad_E is not None:
        grad_E = np.asarray(grad_E, dtype=np.float64)
        gr = _normalize_rows_backward(grad_E, rows) if normalize else grad_E
        gproj += gr.transpose(0, 2, 1).reshape(n, c, h, w)
    _, gw, gb = conv3x3_backward(gproj, conv_cache, input_grad=False)
    return gw, gb


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def routing_loss(batch_x, labels, classifier, centers, alpha: float):
    """Center loss plus cross-entropy over a mini-batch.

    ``loss = Σ_i α‖x_i − c_{y_i}‖² + (1 − α)·CE(softmax(w x_i), y_i)``,
    summed over the batch.  Centers receive no gradient (see
    :func:`update_centers`).  Returns ``(loss, grad_x, grad_classifier)``.
    """
    x = np.asarray(batch_x, dtype=np.float64)
    w = np.asarray(classifier, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"batch {x.shape} vs classifier {w.shape}")
    y = _check_labels(labels, w.shape[0])
    m = x.shape[0]
    diff = x - c[y]
    logits = x @ w.T
    logp = log_softmax(logits)
    ce = -logp[np.arange(m), y]
    loss = float(alpha * (diff * diff).sum() + (1.0 - alpha) * ce.sum())

    dlogits = softmax(logits)
    dlogits[np.arange(m), y] -= 1.0
    dlogits *= 1.0 - alpha
    grad_x = 2.0 * alpha * diff + dlogits @ w
    grad_w = dlogits.T @ x
    return loss, grad_x, grad_w


def update_centers(batch_x, labels, centers, rate: float = 0.5, normalize: bool = True):
    """Move each present class center toward its batch members.

    ``Δc_k = Σ_{i: y_i = k}(c_k − x_i) / (1 + count_k)``, ``c_k ← c_k − rate·Δc_k``,
    optionally re-normalized.  Classes absent from the batch are returned
    untouched.
    """
    x = np.asarray(batch_x, dtype=np.float64)
    new = np.array(centers, dtype=np.float64, copy=True)
    y = _check_labels(labels, new.shape[0])
    for k in np.unique(y):
        members = x[y == k]
        delta = (new[k] - members).sum(axis=0) / (1.0 + len(members))
        new[k] = new[k] - rate * delta
        if normalize:
            new[k] = l2_normalize(new[k])
    return new


def cosine_scores(x, centers) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if x.shape[-1] != c.shape[-1]:
        raise DimensionError(f"embedding dim {x.shape[-1]} vs center dim {c.shape[-1]}")
    return (l2_normalize(x) @ l2_normalize(c).T)


def route_topk(x, centers, k: int):
    """Pick the ``k`` centers most cosine-similar to ``x``.

    Softmax is taken over all n similarities; the selected weights are then
    renormalized over the chosen ``k``.  Returns ``(indices, weights)``,
    indices sorted by descending similarity (ties by lower index).
    """
    n = np.asarray(centers).shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    s = cosine_scores(x, centers)
    p = softmax(s)
    order = np.lexsort((np.arange(n), -s))[:k]
    sel = p[order]
    return order, sel / sel.sum()


def route(out: RoutingOutput, centers, k: int) -> RoutingOutput:
    """Attach cosine scores, softmax weights and top-k indices to ``out``."""
    scores = cosine_scores(out.x, centers)
    out.scores = scores
    out.weights = softmax(scores)
    out.topk = np.array([route_topk(x, centers, k)[0] for x in np.atleast_2d(out.x)])
    return out


def class_mean_centers(x, labels, n: int, normalize: bool = True) -> np.ndarray:
    """Per-class mean of pooled embeddings, used to seed the center bank."""
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(labels, n)
    counts = np.bincount(y, minlength=n)
    if np.any(counts == 0):
        raise ValueError(f"no samples for class(es) {np.flatnonzero(counts == 0).tolist()}")
    centers = np.stack([x[y == k].mean(axis=0) for k in range(n)])
    return l2_normalize(centers) if normalize else centers


def routing_accuracy(feature_maps, labels, params: RoutingParams, normalize: bool = True) -> float:
    """Fraction of samples whose most cosine-similar center is their own class."""
    out, _ = embed(feature_maps, params, normalize)
    pred = np.argmax(cosine_scores(out.x, params.centers), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train_routing(feature_maps, labels, steps: int = 200, batch_size: int = 8,
                  lr_start: float = 1e-4, lr_end: float = 2e-4, alpha: float = 0.5,
                  center_rate: float = 0.5, normalize: bool = True, embed_dim=None,
                  activation: str = "relu", seed: int = 0):
    """Train the routing network alone for ``steps`` mini-batch steps.

    Same update as inside full training, without experts.  Returns
    ``(params, losses)`` with the per-step mean routing loss per sample.
    """
    X = np.asarray(feature_maps, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = int(y.max()) + 1
    rng = prng.make_rng(seed)
    params = init_routing_params(X.shape[1], embed_dim or X.shape[1], n, rng,
                                 alpha=alpha, center_rate=center_rate, activation=activation)
    out, _ = embed(X, params, normalize)
    params.centers = class_mean_centers(out.x, y, n, normalize)
    proj_w = Parameter(params.proj_weight)
    proj_b = Parameter(params.proj_bias)
    clf = Parameter(params.classifier)
    opt = Adam([proj_w, proj_b, clf], lr_start, lr_end, total_steps=steps)
    losses = []
    order = np.array([], dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(X))])
        idx, order = order[:batch_size], order[batch_size:]
        params.proj_weight, params.proj_bias, params.classifier = (
            proj_w.value, proj_b.value, clf.value)
        out, cache = embed(X[idx], params, normalize)
        loss, grad_x, grad_w = routing_loss(out.x, y[idx], clf.value, params.centers, alpha)
        gw, gb = embed_backward(grad_x, None, cache)
        proj_w.grad += gw
        proj_b.grad += gb
        clf.grad += grad_w
        params.centers = update_centers(out.x, y[idx], params.centers, center_rate, normalize)
        opt.step()
        losses.append(loss / len(idx))
    params.proj_weight, params.proj_bias, params.classifier = proj_w.value, proj_b.value, clf.value
    return params, losses
