"""Bundle evaluation and the structure/top-k/loss ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np

from .data import FeatureSet
from .metrics import auroc, pixel_auroc
from .pipeline import InferenceFlags, ModelBundle, TrainConfig, infer_images, train_model

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["moe", "tta", "norm", "topk", "loss", "i_auroc", "p_auroc", "wall_seconds", "error"]


@dataclass(frozen=True)
class Variant:
    moe: bool = True
    tta: bool = True
    norm: bool = True
    topk: int = 4
    loss: str = "center"

    @property
    def key(self) -> tuple:
        return (self.moe, self.tta, self.norm, self.topk, self.loss)

    @property
    def training_key(self) -> tuple:
        # tta and topk only affect inference
        return (self.moe, self.norm, self.loss)

    def label(self) -> str:
        flags = [name for name in ("moe", "tta", "norm") if getattr(self, name)]
        return f"{'+'.join(flags) or 'baseline'}|top{self.topk}|{self.loss}"


def structure_grid(topk: int = 4, loss: str = "center") -> list:
    """All eight on/off combinations of moe, tta and norm."""
    return [Variant(moe, tta, norm, topk, loss)
            for moe, tta, norm in product((False, True), repeat=3)]


def topk_grid(n_experts: int, loss: str = "center") -> list:
    return [Variant(True, True, True, k, loss) for k in range(1, n_experts + 1)]


def loss_grid(topk: int = 4) -> list:
    return [Variant(True, True, True, topk, loss) for loss in ("softmax", "center")]


@dataclass
class VariantResult:
    variant: Variant
    i_auroc: float | None = None
    p_auroc: float | None = None
    per_subclass: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    error: str | None = None

    def metrics(self) -> tuple:
        return (self.variant.key, self.i_auroc, self.p_auroc,
                json.dumps(self.per_subclass, sort_keys=True), self.error)

    def to_dict(self) -> dict:
        d = asdict(self.variant)
        d.update(i_auroc=self.i_auroc, p_auroc=self.p_auroc, per_subclass=self.per_subclass,
                 wall_seconds=self.wall_seconds, error=self.error)
        return d


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def row(self, variant: Variant) -> VariantResult:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def same_metrics(self, other: "EvalReport") -> bool:
        """Equality of everything except wall-clock timings."""
        return [r.metrics() for r in self.rows] == [r.metrics() for r in other.rows]

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "variants": [r.to_dict() for r in self.rows]},
                          indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """AUROCs as percentages with two decimals."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            v = r.variant
            pct = lambda a: "" if a is None else f"{100.0 * a:.2f}"  # noqa: E731
            writer.writerow([int(v.moe), int(v.tta), int(v.norm), v.topk, v.loss,
                             pct(r.i_auroc), pct(r.p_auroc), f"{r.wall_seconds:.2f}",
                             r.error or ""])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.json").write_text(self.to_json() + "\n")


def _pixel_pairs(maps, test: FeatureSet):
    pairs = []
    for m, mask, label in zip(maps, test.masks or [None] * len(maps), test.anomaly_labels):
        if mask is None:
            if label == 1:
                continue  # anomalous sample without ground truth: image level only
            mask = np.zeros(np.shape(m), dtype=np.uint8)
        pairs.append((m, mask))
    return pairs


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValueError:
        return None


def score_results(scores, maps, test: FeatureSet, per_image: bool = False) -> dict:
    """Image/pixel AUROC overall and per test group."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(test.anomaly_labels)
    groups = np.asarray(test.groups if test.groups else ["all"] * len(scores))
    pairs = _pixel_pairs(maps, test)
    out = {
        "i_auroc": _safe(auroc, scores, labels),
        "p_auroc": _safe(pixel_auroc, [p[0] for p in pairs], [p[1] for p in pairs], per_image),
        "per_subclass": {},
    }
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        sub = FeatureSet(X=None, ids=[], anomaly_labels=labels[sel],
                         masks=[m for m, s in zip(test.masks or [None] * len(sel), sel) if s],
                         groups=None)
        gpairs = _pixel_pairs([m for m, s in zip(maps, sel) if s], sub)
        out["per_subclass"][g] = {
            "i_auroc": _safe(auroc, scores[sel], labels[sel]),
            "p_auroc": _safe(pixel_auroc, [p[0] for p in gpairs], [p[1] for p in gpairs],
                             per_image),
        }
    return out


def evaluate_bundle(bundle: ModelBundle, test: FeatureSet, flags: InferenceFlags | None = None,
                    per_image: bool = False) -> dict:
    results = infer_images(test.X, bundle, flags)
    return score_results([r.score for r in results], [r.anomaly_map for r in results],
                         test, per_image)


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if len(vals) == len(values) and vals else None


def _average(evals: list) -> dict:
    out = {
        "i_auroc": _mean_or_none([e["i_auroc"] for e in evals]),
        "p_auroc": _mean_or_none([e["p_auroc"] for e in evals]),
        "per_subclass": {},
    }
    for g in evals[0]["per_subclass"]:
        out["per_subclass"][g] = {
            k: _mean_or_none([e["per_subclass"][g][k] for e in evals])
            for k in ("i_auroc", "p_auroc")
        }
    return out


def run_ablation(train: FeatureSet, test: FeatureSet, base_config: TrainConfig | None,
                 variants, image_size=None, replicates: int = 1,
                 per_image: bool = False, bundles: dict | None = None) -> EvalReport:
    """Train one bundle per (moe, norm, loss) and evaluate every variant.

    Replicate ``r`` uses seed ``base_config.seed + r``; metrics are averaged
    over replicates.  A failing variant is recorded with its error and the
    remaining variants still run.  ``bundles``, if given, is filled with the
    trained bundles keyed by ``variant.training_key + (replicate,)``.
    """
    base_config = base_config or TrainConfig()
    report = EvalReport(config={"train": base_config.to_dict(), "replicates": replicates})
    bundles = {} if bundles is None else bundles
    for variant in variants:
        t0 = time.perf_counter()
        try:
            evals = []
            for r in range(replicates):
                key = variant.training_key + (r,)
                if key not in bundles:
                    cfg = replace(base_config, moe=variant.moe, norm=variant.norm,
                                  loss=variant.loss, seed=base_config.seed + r)
                    bundles[key] = train_model(train.X, train.subclass_labels, cfg, image_size)
                flags = InferenceFlags(tta=variant.tta, top_k=variant.topk,
                                       smooth_sigma=base_config.smooth_sigma)
                evals.append(evaluate_bundle(bundles[key], test, flags, per_image))
            avg = _average(evals)
            result = VariantResult(variant, avg["i_auroc"], avg["p_auroc"], avg["per_subclass"])
        except Exception as exc:  # recorded, the grid continues
            logger.exception("variant %s failed", variant.label())
            result = VariantResult(variant, error=f"{type(exc).__name__}: {exc}")
        result.wall_seconds = time.perf_counter() - t0
        report.rows.append(result)
        logger.info("variant %s: I-AUROC=%s P-AUROC=%s", variant.label(),
                    result.i_auroc, result.p_auroc)
    return report
