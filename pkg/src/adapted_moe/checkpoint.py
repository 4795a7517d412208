"""Model bundle persistence.

Byte layout (integers little-endian)::

    0       4       magic b"AMOE"
    4       4       checkpoint format version, u32
    8       1       kind, u8 = 0xC0 (distinguishes checkpoints from tensor files)
    9       1       reserved, 0
    10      8       index length L, u64
    18      L       JSON index, UTF-8
    18+L    ...     payload: tensor records back to back

Every payload record is a complete tensor file (see :mod:`adapted_moe.data`).
The index maps section names to ``{"offset", "nbytes", "shape"}`` with
offsets relative to the payload start, and carries the scalar metadata
(training config, image size, calibration counts, training history).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import MAGIC, decode_tensor, encode_tensor
from .exceptions import (
    BadMagicError,
    CheckpointVersionError,
    CorruptSectionError,
    TensorFileError,
)
from .experts import ExpertParams
from .pipeline import BUNDLE_FORMAT_VERSION, ModelBundle, TrainConfig
from .routing import RoutingParams
from .tta import CalibrationStats

KIND_CHECKPOINT = 0xC0
_HEADER = struct.Struct("<4sIBBQ")


def _sections(bundle: ModelBundle) -> dict:
    r = bundle.routing
    out = {
        "routing/proj_weight": r.proj_weight,
        "routing/proj_bias": r.proj_bias,
        "routing/classifier": r.classifier,
        "routing/centers": r.centers,
    }
    for k, e in enumerate(bundle.experts):
        for name, arr in zip(("w1", "b1", "w2", "b2"), e.arrays()):
            out[f"experts/{k}/{name}"] = arr
    for k, s in enumerate(bundle.stats):
        out[f"stats/{k}/center"] = s.center
        out[f"stats/{k}/std"] = s.std
    return out


def save_checkpoint(path, bundle: ModelBundle) -> None:
    payload = bytearray()
    sections = {}
    for name, arr in _sections(bundle).items():
        blob = encode_tensor(np.asarray(arr, dtype=np.float32))
        sections[name] = {"offset": len(payload), "nbytes": len(blob), "shape": list(np.shape(arr))}
        payload += blob
    index = {
        "format_version": bundle.format_version,
        "n_experts": bundle.n_experts,
        "image_size": list(bundle.image_size),
        "config": bundle.config.to_dict(),
        "routing": {
            "center_rate": bundle.routing.center_rate,
            "alpha": bundle.routing.alpha,
            "activation": bundle.routing.activation,
        },
        "stats": [{"count": s.count, "eps": s.eps} for s in bundle.stats],
        "expert_ids": [e.expert_id for e in bundle.experts],
        "history": bundle.history,
        "sections": sections,
    }
    raw_index = json.dumps(index, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, bundle.format_version, KIND_CHECKPOINT, 0, len(raw_index))
    Path(path).write_bytes(header + raw_index + bytes(payload))


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptSectionError(f"{path}: file too short for a checkpoint header")
    magic, version, kind, _, index_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if kind != KIND_CHECKPOINT:
        raise CorruptSectionError(f"{path}: not a checkpoint (kind byte {kind:#x})")
    if version != BUNDLE_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads {BUNDLE_FORMAT_VERSION}"
        )
    start = _HEADER.size
    if len(data) < start + index_len:
        raise CorruptSectionError(f"{path}: section index truncated")
    try:
        index = json.loads(data[start:start + index_len].decode("utf-8"))
        sections = index["sections"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptSectionError(f"{path}: unreadable section index ({exc})") from exc
    payload = memoryview(data)[start + index_len:]

    def section(name):
        meta = sections.get(name)
        if meta is None:
            raise CorruptSectionError(f"{path}: missing section {name!r}")
        lo, n = meta.get("offset"), meta.get("nbytes")
        if not isinstance(lo, int) or not isinstance(n, int) or lo < 0 or lo + n > len(payload):
            raise CorruptSectionError(f"{path}: section {name!r} lies outside the file")
        try:
            arr, end = decode_tensor(payload[lo:lo + n], 0, f"{path}:{name}")
        except TensorFileError as exc:
            raise CorruptSectionError(str(exc)) from exc
        if end != n or list(arr.shape) != meta.get("shape"):
            raise CorruptSectionError(f"{path}: section {name!r} does not match its index entry")
        return arr

    try:
        n = int(index["n_experts"])
        rmeta = index["routing"]
        routing = RoutingParams(
            proj_weight=section("routing/proj_weight"),
            proj_bias=section("routing/proj_bias"),
            classifier=section("routing/classifier"),
            centers=section("routing/centers"),
            center_rate=rmeta["center_rate"],
            alpha=rmeta["alpha"],
            activation=rmeta["activation"],
        )
        experts = [
            ExpertParams(*(section(f"experts/{k}/{p}") for p in ("w1", "b1", "w2", "b2")),
                         expert_id=int(index["expert_ids"][k]))
            for k in range(n)
        ]
        stats = [
            CalibrationStats(center=section(f"stats/{k}/center"), std=section(f"stats/{k}/std"),
                             count=int(index["stats"][k]["count"]),
                             eps=float(index["stats"][k]["eps"]))
            for k in range(n)
        ]
        return ModelBundle(
            routing=routing,
            experts=experts,
            stats=stats,
            config=TrainConfig.from_dict(index["config"]),
            image_size=tuple(index["image_size"]),
            history=index.get("history", []),
            format_version=version,
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptSectionError):
            raise
        raise CorruptSectionError(f"{path}: inconsistent checkpoint ({exc})") from exc
