"""End-to-end training, inference and anomaly-map construction."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import prng
from .exceptions import DimensionError, EmptyExpertError
from .experts import ExpertParams, expert_score, expert_step_grads, init_expert
from .numeric import Adam, Parameter, bilinear_resize
from .routing import (
    RoutingParams,
    class_mean_centers,
    embed,
    embed_backward,
    init_routing_params,
    route_topk,
    routing_loss,
    update_centers,
)
from .tta import CalibrationStats, calibrate, fit_calibration_stats

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
LOSSES = ("center", "softmax")


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 2e-4
    alpha: float = 0.5
    center_rate: float = 0.5
    noise_std: float = 0.015
    top_k: int = 4
    moe: bool = True
    tta: bool = True
    norm: bool = True
    loss: str = "center"
    margin: float = 0.5
    activation: str = "relu"
    embed_dim: int | None = None
    expert_hidden: int | None = None
    smooth_sigma: float = 4.0
    tta_std_mode: str = "vector"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0")

    @property
    def effective_alpha(self) -> float:
        # "softmax" routing drops the center term entirely
        return 0.0 if self.loss == "softmax" else self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class ModelBundle:
    routing: RoutingParams
    experts: list
    stats: list
    config: TrainConfig
    image_size: tuple
    history: list = field(default_factory=list)
    format_version: int = BUNDLE_FORMAT_VERSION

    def __post_init__(self):
        n = self.routing.n_subclasses
        if not (len(self.experts) == len(self.stats) == n):
            raise ValueError(
                f"bundle needs one expert and one stats entry per center: "
                f"{len(self.experts)} experts, {len(self.stats)} stats, {n} centers"
            )

    @property
    def n_experts(self) -> int:
        return self.routing.n_subclasses

    @property
    def in_channels(self) -> int:
        return self.routing.in_channels


@dataclass
class AnomalyResult:
    score: float
    anomaly_map: np.ndarray
    experts: np.ndarray
    weights: np.ndarray


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _as_f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _round_routing(p: RoutingParams) -> RoutingParams:
    return replace(p, proj_weight=_as_f32(p.proj_weight), proj_bias=_as_f32(p.proj_bias),
                   classifier=_as_f32(p.classifier), centers=_as_f32(p.centers))


def _round_expert(e: ExpertParams) -> ExpertParams:
    return ExpertParams(*(_as_f32(a) for a in e.arrays()), expert_id=e.expert_id)


def _embed_all(X, routing, normalize, chunk=64):
    xs, Es = [], []
    for start in range(0, len(X), chunk):
        out, _ = embed(X[start:start + chunk], routing, normalize)
        xs.append(out.x)
        Es.append(out.E)
    return np.concatenate(xs), np.concatenate(Es)


def train_model(X, y, config: TrainConfig | None = None, image_size=None) -> ModelBundle:
    """Jointly train the routing network and one expert per subclass.

    ``X`` is N×C×H×W restructured feature maps, ``y`` the subclass labels.
    Experts are assigned by label during training.  With ``config.moe``
    off every sample shares expert 0 and the routing loss is not applied.
    Stored parameters are float32.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or len(X) == 0:
        raise DimensionError(f"expected a non-empty N×C×H×W array, got shape {X.shape}")
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (len(X),):
        raise DimensionError(f"{len(y)} labels for {len(X)} samples")
    if config.moe:
        if y.min() < 0:
            raise ValueError("subclass labels must be >= 0")
        n = int(y.max()) + 1
        counts = np.bincount(y, minlength=n)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise EmptyExpertError(f"subclass label(s) {missing} have no training samples")
    else:
        n = 1
        y = np.zeros_like(y)

    _, c, h, w = X.shape
    embed_dim = config.embed_dim or c
    image_size = tuple(image_size) if image_size is not None else (h, w)
    rng = prng.make_rng(config.seed)
    routing = init_routing_params(c, embed_dim, n, rng, alpha=config.alpha,
                                  center_rate=config.center_rate, activation=config.activation)
    experts = [init_expert(embed_dim, rng, config.expert_hidden, expert_id=k) for k in range(n)]

    # centers start at the class means of the initial embeddings
    x0, _ = _embed_all(X, routing, config.norm)
    routing.centers = class_mean_centers(x0, y, n, config.norm)

    proj_w = Parameter(routing.proj_weight, name="proj_weight")
    proj_b = Parameter(routing.proj_bias, name="proj_bias")
    clf = Parameter(routing.classifier, name="classifier")
    expert_params = [[Parameter(a) for a in e.arrays()] for e in experts]
    all_params = [proj_w, proj_b, clf] + [p for ps in expert_params for p in ps]
    n_batches = -(-len(X) // config.batch_size)
    opt = Adam(all_params, config.lr_start, config.lr_end,
               total_steps=max(config.epochs * n_batches, 1))
    centers = routing.centers.copy()
    noise_rng = prng.make_rng(prng.child_seed(rng))
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        r_losses, e_losses, lr = [], [], opt.lr
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            routing.proj_weight, routing.proj_bias = proj_w.value, proj_b.value
            out, cache = embed(X[idx], routing, config.norm)
            yb = y[idx]
            grad_x = None
            if config.moe:
                r_loss, grad_x, grad_clf = routing_loss(out.x, yb, clf.value, centers,
                                                        config.effective_alpha)
                clf.grad += grad_clf
                r_losses.append(r_loss)
            grad_E = np.zeros_like(out.E)
            for k in np.unique(yb):
                members = yb == k
                rows = out.E[members].reshape(-1, out.E.shape[-1])
                current = ExpertParams(*(p.value for p in expert_params[k]), expert_id=int(k))
                e_loss, g_rows, grads = expert_step_grads(current, rows, noise_rng,
                                                          config.noise_std, config.margin)
                grad_E[members] = g_rows.reshape(out.E[members].shape)
                for p, g in zip(expert_params[k], grads):
                    p.grad += g
                e_losses.append(e_loss)
            gw, gb = embed_backward(grad_x, grad_E, cache)
            proj_w.grad += gw
            proj_b.grad += gb
            centers = update_centers(out.x, yb, centers, config.center_rate, config.norm)
            opt.step()
        record = {
            "epoch": epoch + 1,
            "routing_loss": float(np.mean(r_losses)) if r_losses else 0.0,
            "expert_loss": float(np.mean(e_losses)),
            "lr": lr,
        }
        history.append(record)
        logger.info("epoch", extra={"record": record})

    routing.proj_weight, routing.proj_bias = proj_w.value, proj_b.value
    routing.classifier = clf.value
    routing.centers = centers
    routing = _round_routing(routing)
    experts = [
        _round_expert(ExpertParams(*(p.value for p in ps), expert_id=k))
        for k, ps in enumerate(expert_params)
    ]
    # statistics are fitted on the stored (float32) parameters
    _, E_all = _embed_all(X, routing, config.norm)
    stats = []
    for k in range(n):
        st = fit_calibration_stats(E_all[y == k], routing.centers[k], config.tta_std_mode)
        st.center, st.std = _as_f32(st.center), _as_f32(st.std)
        stats.append(st)
    return ModelBundle(routing=routing, experts=experts, stats=stats, config=config,
                       image_size=image_size, history=history)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def aggregate_scores(weights, per_expert_maps) -> np.ndarray:
    """Routing-weighted average of expert maps: ``Σ r_i s_i / Σ r_i``."""
    r = np.asarray(weights, dtype=np.float64)
    maps = np.asarray(per_expert_maps, dtype=np.float64)
    if maps.ndim == 1:
        maps = maps[:, None]
    if r.ndim != 1 or maps.shape[0] != r.shape[0]:
        raise DimensionError(f"{r.shape} weights for {maps.shape[0]} expert maps")
    if np.any(r < 0):
        raise ValueError("routing weights must be non-negative")
    total = r.sum()
    if total <= 0:
        raise ValueError("routing weights sum to zero")
    if len(r) == 1:
        return maps[0].copy()
    return (r[:, None] * maps).sum(axis=0) / total


@dataclass
class InferenceFlags:
    tta: bool = True
    top_k: int = 4
    smooth_sigma: float = 4.0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "InferenceFlags":
        return cls(tta=config.tta, top_k=config.top_k, smooth_sigma=config.smooth_sigma)


def _check_channels(feature_map, bundle: ModelBundle):
    c = np.asarray(feature_map).shape[-3]
    if c != bundle.in_channels:
        raise DimensionError(
            f"channels: feature map has {c} channels, bundle expects {bundle.in_channels}"
        )


def score_locations(feature_maps, bundle: ModelBundle, flags: InferenceFlags | None = None):
    """Per-location anomaly scores for a batch: ``(scores N×HW, experts, weights)``."""
    flags = flags or InferenceFlags.from_config(bundle.config)
    _check_channels(feature_maps, bundle)
    fm = np.asarray(feature_maps)
    if fm.ndim == 3:
        fm = fm[None]
    cfg = bundle.config
    out, _ = embed(fm, bundle.routing, cfg.norm)
    k = min(flags.top_k, bundle.n_experts)
    scores, chosen, weights = [], [], []
    for x, E in zip(out.x, out.E):
        if cfg.moe:
            idx, wts = route_topk(x, bundle.routing.centers, k)
        else:
            idx, wts = np.array([0]), np.array([1.0])
        maps = []
        for j in idx:
            Ej = (calibrate(E, bundle.stats[j], cfg.tta_std_mode, renormalize=cfg.norm)
                  if flags.tta else E)
            maps.append(expert_score(bundle.experts[j], Ej))
        scores.append(aggregate_scores(wts, maps))
        chosen.append(idx)
        weights.append(wts)
    return np.stack(scores), chosen, weights


def build_anomaly_map(location_scores, grid, image_size, smooth_sigma: float = 4.0) -> np.ndarray:
    """HW scores → H×W grid → bilinear upsample → Gaussian smoothing."""
    m = np.asarray(location_scores, dtype=np.float64).reshape(grid)
    m = bilinear_resize(m, *image_size)
    if smooth_sigma > 0:
        m = gaussian_filter(m, sigma=smooth_sigma)
    return m


def infer_images(feature_maps, bundle: ModelBundle, flags: InferenceFlags | None = None):
    flags = flags or InferenceFlags.from_config(bundle.config)
    fm = np.asarray(feature_maps)
    if fm.ndim == 3:
        fm = fm[None]
    grid = fm.shape[-2:]
    scores, chosen, weights = score_locations(fm, bundle, flags)
    results = []
    for s, idx, wts in zip(scores, chosen, weights):
        amap = build_anomaly_map(s, grid, bundle.image_size, flags.smooth_sigma)
        results.append(AnomalyResult(score=float(amap.max()), anomaly_map=amap,
                                     experts=np.asarray(idx), weights=np.asarray(wts)))
    return results


def infer_image(feature_map, bundle: ModelBundle, flags: InferenceFlags | None = None) -> AnomalyResult:
    return infer_images(np.asarray(feature_map)[None], bundle, flags)[0]
