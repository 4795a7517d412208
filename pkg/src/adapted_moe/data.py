"""Tensor files, dataset manifests, feature restructuring and synthetic data.

Tensor file layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"AMOE"
    4       4           format version, u32 (currently 1)
    8       1           dtype code, u8 (0 = float32, 1 = uint8)
    9       1           ndims, u8
    10      4*ndims     dims, u32 each
    ...     payload     row-major elements

Feature maps are float32, masks are uint8 with values {0, 1}.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import prng
from .exceptions import (
    BadMagicError,
    DimensionError,
    MalformedManifestError,
    ManifestValidationError,
    MissingFileError,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from .numeric import bilinear_resize, concat_channels

MAGIC = b"AMOE"
TENSOR_FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
MANIFEST_FORMAT = "adapted-moe-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

def encode_tensor(tensor, dtype=None) -> bytes:
    arr = np.asarray(tensor)
    if dtype is None:
        dtype = np.uint8 if arr.dtype == np.uint8 else np.float32
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"cannot store dtype {dtype}")
    if arr.ndim > 255:
        raise DimensionError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", TENSOR_FORMAT_VERSION, DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_header(buf: bytes | memoryview, offset: int = 0, source: str = "<buffer>"):
    """Parse a tensor header; returns ``(dtype, shape, payload_offset)``."""
    end = len(buf)
    if end - offset < 10:
        raise TruncatedFileError(f"{source}: header truncated")
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise BadMagicError(f"{source}: bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndims = struct.unpack_from("<IBB", buf, offset + 4)
    if version != TENSOR_FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: tensor format version {version} not supported")
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"{source}: unsupported dtype code {code}")
    pos = offset + 10
    if end - pos < 4 * ndims:
        raise TruncatedFileError(f"{source}: dims truncated")
    shape = struct.unpack_from(f"<{ndims}I", buf, pos)
    return DTYPES[code], tuple(int(d) for d in shape), pos + 4 * ndims


def decode_tensor(buf: bytes | memoryview, offset: int = 0, source: str = "<buffer>"):
    """Returns ``(array, end_offset)``; validates the header before copying."""
    dtype, shape, pos = decode_header(buf, offset, source)
    nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise TruncatedFileError(
            f"{source}: payload truncated ({len(buf) - pos} of {nbytes} bytes)"
        )
    arr = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype=dtype).reshape(shape).copy()
    return arr, pos + nbytes


def write_tensor_file(path, tensor, dtype=None) -> None:
    Path(path).write_bytes(encode_tensor(tensor, dtype))


def read_tensor_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data, 0, str(path))
    return arr


def read_tensor_header(path):
    """Validate a tensor file and return ``(dtype, shape)`` without loading it."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) >= 10:
            ndims = head[9]
            head += fh.read(4 * ndims)
    dtype, shape, pos = decode_header(head, 0, str(path))
    expected = pos + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    actual = path.stat().st_size
    if actual < expected:
        raise TruncatedFileError(f"{path}: payload truncated ({actual} of {expected} bytes)")
    return dtype, shape


# ---------------------------------------------------------------------------
# feature restructuring
# ---------------------------------------------------------------------------

def restructure_features(stage_maps: Sequence[np.ndarray]) -> np.ndarray:
    """Resize every stage to the first stage's grid and stack channels."""
    if len(stage_maps) == 0:
        raise DimensionError("restructure_features needs at least one stage map")
    first = np.asarray(stage_maps[0])
    if first.ndim != 3:
        raise DimensionError(f"stage 0 has shape {first.shape}, expected C×H×W")
    h, w = first.shape[-2:]
    resized = [bilinear_resize(m, h, w) for m in stage_maps]
    return concat_channels(resized).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    id: str
    split: str
    stages: list
    subclass_label: int | None = None
    anomaly_label: int | None = None
    mask: str | None = None
    group: str | None = None


@dataclass
class DatasetManifest:
    samples: list
    root: Path
    image_size: tuple | None = None
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def counts(self) -> dict:
        return {name: len(self.split(name)) for name in ("train", "test")}

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()


def _parse_sample(i: int, raw) -> SampleRecord:
    if not isinstance(raw, dict):
        raise MalformedManifestError(f"sample #{i} is not an object")
    sid = str(raw.get("id", f"#{i}"))
    split = raw.get("split")
    if split not in ("train", "test"):
        raise ManifestValidationError(f"sample {sid}: split must be 'train' or 'test', got {split!r}")
    stages = raw.get("stages")
    if not isinstance(stages, list) or not stages or not all(isinstance(p, str) for p in stages):
        raise ManifestValidationError(f"sample {sid}: 'stages' must be a non-empty list of paths")
    rec = SampleRecord(id=sid, split=split, stages=list(stages), group=raw.get("group"))
    if split == "train":
        label = raw.get("subclass_label")
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise ManifestValidationError(
                f"train sample {sid}: missing or invalid subclass_label"
            )
        rec.subclass_label = label
    else:
        label = raw.get("anomaly_label")
        if label not in (0, 1) or isinstance(label, bool):
            raise ManifestValidationError(f"test sample {sid}: anomaly_label must be 0 or 1")
        rec.anomaly_label = int(label)
        mask = raw.get("mask")
        if mask is not None and not isinstance(mask, str):
            raise ManifestValidationError(f"test sample {sid}: mask must be a path")
        rec.mask = mask
    return rec


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest; every referenced file must exist."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("samples"), list):
        raise MalformedManifestError(f"{path}: expected an object with a 'samples' list")
    version = raw.get("version", MANIFEST_VERSION)
    if version != MANIFEST_VERSION:
        raise MalformedManifestError(f"{path}: manifest version {version} not supported")
    image_size = raw.get("image_size")
    if image_size is not None:
        if not (isinstance(image_size, list) and len(image_size) == 2
                and all(isinstance(v, int) and v > 0 for v in image_size)):
            raise MalformedManifestError(f"{path}: image_size must be [height, width]")
        image_size = tuple(image_size)

    manifest = DatasetManifest(
        samples=[_parse_sample(i, s) for i, s in enumerate(raw["samples"])],
        root=path.parent,
        image_size=image_size,
        version=version,
    )
    for rec in manifest.samples:
        for rel in rec.stages + ([rec.mask] if rec.mask else []):
            target = manifest.resolve(rel)
            if not target.exists():
                raise MissingFileError(f"sample {rec.id}: file not found: {target}")
            _, shape = read_tensor_header(target)
            if rel == rec.mask:
                if image_size is not None and tuple(shape) != image_size:
                    raise ManifestValidationError(
                        f"sample {rec.id}: mask shape {shape} != image_size {image_size}"
                    )
            elif len(shape) != 3:
                raise ManifestValidationError(
                    f"sample {rec.id}: stage file {rel} has shape {shape}, expected C×H×W"
                )
    return manifest


def load_features(manifest: DatasetManifest, record: SampleRecord) -> np.ndarray:
    return restructure_features([read_tensor_file(manifest.resolve(p)) for p in record.stages])


@dataclass
class FeatureSet:
    """Stacked samples of one split."""

    X: np.ndarray
    ids: list
    subclass_labels: np.ndarray | None = None
    anomaly_labels: np.ndarray | None = None
    masks: list | None = None
    groups: list | None = None

    def subset(self, indices) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda seq: None if seq is None else [seq[i] for i in idx]  # noqa: E731
        take = lambda arr: None if arr is None else np.asarray(arr)[idx]  # noqa: E731
        return FeatureSet(X=take(self.X), ids=pick(self.ids),
                          subclass_labels=take(self.subclass_labels),
                          anomaly_labels=take(self.anomaly_labels),
                          masks=pick(self.masks), groups=pick(self.groups))


def load_split(manifest: DatasetManifest, split: str) -> FeatureSet:
    records = manifest.split(split)
    if not records:
        raise ManifestValidationError(f"manifest has no {split} samples")
    maps = [load_features(manifest, r) for r in records]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ManifestValidationError(f"{split} samples have differing feature shapes {sorted(shapes)}")
    fs = FeatureSet(X=np.stack(maps), ids=[r.id for r in records])
    if split == "train":
        fs.subclass_labels = np.array([r.subclass_label for r in records], dtype=np.int64)
    else:
        fs.anomaly_labels = np.array([r.anomaly_label for r in records], dtype=np.int64)
        fs.masks = [
            read_tensor_file(manifest.resolve(r.mask)) if r.mask else None for r in records
        ]
        fs.groups = [r.group or "all" for r in records]
    return fs


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Multi-subclass feature maps with unseen, distribution-shifted test subclasses.

    Each subclass is a low-rank Gaussian blob around its own center; the
    latent coordinates vary smoothly across the grid, so one map covers the
    subclass's spread.  Unseen test subclasses reuse a training subclass's
    structure with its spread scaled by ``shift_scale`` and its center moved
    by a random vector of length ``shift_bias``.
    """

    channels: int = 64
    n_subclasses: int = 6
    n_unseen: int = 2
    separation: float = 1.0
    within_std: float = 0.25
    latent_rank: int = 2
    jitter_std: float = 0.02
    shift_bias: float = 0.6
    shift_scale: float = 2.5
    anomaly_magnitude: float = 1.0
    anomaly_patch: int = 2
    train_per_subclass: int = 32
    test_normal_per_subclass: int = 4
    test_anomalous_per_subclass: int = 4
    grid: tuple = (8, 8)
    image_size: tuple = (32, 32)
    n_stages: int = 2
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.n_subclasses < 1:
            raise ValueError("n_subclasses must be >= 1")
        for name in ("separation", "within_std", "jitter_std", "shift_bias",
                     "shift_scale", "anomaly_magnitude", "n_unseen"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.n_stages <= self.channels:
            raise ValueError("n_stages must lie in [1, channels]")
        if self.anomaly_patch > min(self.grid):
            raise ValueError("anomaly_patch larger than the feature grid")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class _Subclass:
    center: np.ndarray
    basis: np.ndarray
    spread: float


@dataclass
class SyntheticDataset:
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_anomaly: np.ndarray
    test_masks: np.ndarray
    test_groups: list
    image_size: tuple
    config: SyntheticConfig = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def feature_sets(self) -> tuple:
        """The in-memory equivalent of ``load_split`` on the written dataset."""
        train = FeatureSet(X=self.train_X, ids=list(self.train_ids), subclass_labels=self.train_y)
        test = FeatureSet(X=self.test_X, ids=list(self.test_ids), anomaly_labels=self.test_anomaly,
                          masks=list(self.test_masks), groups=list(self.test_groups))
        return train, test


def _unit(rng, dim) -> np.ndarray:
    v = prng.gaussian(rng, (dim,))
    return v / np.linalg.norm(v)


def _smooth_field(rng, grid, rank) -> np.ndarray:
    """Unit-variance latent field, smooth over the grid: rank×H×W."""
    h, w = grid
    coarse = prng.gaussian(rng, (rank, max(2, h // 2), max(2, w // 2)))
    fine = bilinear_resize(coarse, h, w)
    fine = fine - fine.mean(axis=(1, 2), keepdims=True)
    std = fine.std(axis=(1, 2), keepdims=True)
    return fine / np.where(std > 0, std, 1.0)


def _render(rng, sub: _Subclass, cfg: SyntheticConfig) -> np.ndarray:
    z = _smooth_field(rng, cfg.grid, cfg.latent_rank)
    e = sub.center[:, None, None] + sub.spread * np.einsum("cr,rhw->chw", sub.basis, z)
    e = e + prng.gaussian(rng, (cfg.channels,) + cfg.grid, cfg.jitter_std)
    return e


def _inject_anomaly(rng, fmap: np.ndarray, cfg: SyntheticConfig):
    h, w = cfg.grid
    p = cfg.anomaly_patch
    top = int(rng.integers(0, h - p + 1))
    left = int(rng.integers(0, w - p + 1))
    direction = _unit(rng, cfg.channels)
    out = fmap.copy()
    out[:, top:top + p, left:left + p] += cfg.anomaly_magnitude * direction[:, None, None]
    grid_mask = np.zeros(cfg.grid)
    grid_mask[top:top + p, left:left + p] = 1.0
    ih, iw = cfg.image_size
    # nearest-block upsampling keeps the mask binary
    rows = np.minimum((np.arange(ih) * h) // ih, h - 1)
    cols = np.minimum((np.arange(iw) * w) // iw, w - 1)
    mask = grid_mask[np.ix_(rows, cols)].astype(np.uint8)
    return out, mask


def generate_synthetic_dataset(config: SyntheticConfig) -> SyntheticDataset:
    """Pure function of ``config``: same config, same arrays."""
    cfg = config
    rng = prng.make_rng(cfg.seed)
    subclasses = []
    for _ in range(cfg.n_subclasses):
        center = cfg.separation * _unit(rng, cfg.channels)
        basis, _ = np.linalg.qr(prng.gaussian(rng, (cfg.channels, cfg.latent_rank)))
        subclasses.append(_Subclass(center, basis, cfg.within_std))
    unseen = []
    for u in range(cfg.n_unseen):
        parent = subclasses[int(rng.integers(0, cfg.n_subclasses))]
        bias = cfg.shift_bias * _unit(rng, cfg.channels)
        unseen.append(_Subclass(parent.center + bias, parent.basis, parent.spread * cfg.shift_scale))

    train_X, train_y, train_ids = [], [], []
    for k, sub in enumerate(subclasses):
        for j in range(cfg.train_per_subclass):
            train_X.append(_render(rng, sub, cfg))
            train_y.append(k)
            train_ids.append(f"train_s{k}_{j:03d}")

    test_X, test_anom, test_masks, test_groups, test_ids = [], [], [], [], []
    groups = [(f"seen_{k}", s) for k, s in enumerate(subclasses)]
    groups += [(f"unseen_{u}", s) for u, s in enumerate(unseen)]
    empty = np.zeros(cfg.image_size, dtype=np.uint8)
    for name, sub in groups:
        for j in range(cfg.test_normal_per_subclass):
            test_X.append(_render(rng, sub, cfg))
            test_anom.append(0)
            test_masks.append(empty)
            test_groups.append(name)
            test_ids.append(f"test_{name}_n{j:03d}")
        for j in range(cfg.test_anomalous_per_subclass):
            fmap, mask = _inject_anomaly(rng, _render(rng, sub, cfg), cfg)
            test_X.append(fmap)
            test_anom.append(1)
            test_masks.append(mask)
            test_groups.append(name)
            test_ids.append(f"test_{name}_a{j:03d}")

    c, (h, w) = cfg.channels, cfg.grid
    return SyntheticDataset(
        train_X=np.asarray(train_X, dtype=np.float32).reshape(-1, c, h, w),
        train_y=np.asarray(train_y, dtype=np.int64),
        test_X=np.asarray(test_X, dtype=np.float32).reshape(-1, c, h, w),
        test_anomaly=np.asarray(test_anom, dtype=np.int64),
        test_masks=np.asarray(test_masks, dtype=np.uint8).reshape(-1, *cfg.image_size),
        test_groups=test_groups,
        image_size=cfg.image_size,
        config=cfg,
        train_ids=train_ids,
        test_ids=test_ids,
    )


def _stage_splits(channels: int, n_stages: int) -> list:
    bounds = np.linspace(0, channels, n_stages + 1).round().astype(int)
    return list(zip(bounds[:-1], bounds[1:]))


def write_synthetic_dataset(config: SyntheticConfig, out_dir) -> Path:
    """Render the dataset to ``out_dir`` and return the manifest path.

    Channels are split across ``n_stages`` stage files per sample, all at
    the grid resolution, so restructuring reproduces the generated maps.
    """
    ds = generate_synthetic_dataset(config)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    splits = _stage_splits(config.channels, config.n_stages)
    samples = []

    def _write_stages(sid, fmap):
        paths = []
        for s, (lo, hi) in enumerate(splits):
            rel = f"features/{sid}_stage{s}.amoe"
            write_tensor_file(out / rel, fmap[lo:hi])
            paths.append(rel)
        return paths

    for sid, fmap, label in zip(ds.train_ids, ds.train_X, ds.train_y):
        samples.append({"id": sid, "split": "train", "stages": _write_stages(sid, fmap),
                        "subclass_label": int(label)})
    for sid, fmap, label, mask, group in zip(ds.test_ids, ds.test_X, ds.test_anomaly,
                                             ds.test_masks, ds.test_groups):
        rel = f"masks/{sid}.amoe"
        write_tensor_file(out / rel, mask, dtype=np.uint8)
        samples.append({"id": sid, "split": "test", "stages": _write_stages(sid, fmap),
                        "anomaly_label": int(label), "mask": rel, "group": group})

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "image_size": list(config.image_size),
        "channels": config.channels,
        "samples": samples,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
