"""Little-endian tensor container used for checkpoints and saved seeds.

Layout::

    b"AEBM"                      magic
    u16                          version (1)
    u32 + utf-8 JSON             metadata
    u32                          record count
    per record:
      u16 + utf-8                name
      u8                         rank
      u32 * rank                 extents
      f32 * prod(extents)        payload, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "SpecMismatchError",
    "MAGIC",
    "VERSION",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "spec_to_dict",
    "spec_from_dict",
    "save_seeds",
    "load_seeds",
]

MAGIC = b"AEBM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class SpecMismatchError(CheckpointError):
    pass


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        chunks += [
            struct.pack("<H", len(key)),
            key,
            struct.pack("<B", arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            arr.tobytes(),
        ]
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"".join(chunks))
    return p


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.raw) - self.pos} left)"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    r = _Reader(p.read_bytes(), p)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{p}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"{p}: unsupported version {version} at offset 4")
    (n_meta,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(n_meta, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt metadata at offset {start}") from exc
    (count,) = r.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H", "name length")
        name = r.take(n_name, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        n = int(np.prod(shape)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, "<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{p}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    return tensors, meta


def spec_to_dict(spec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "n_classes": spec.n_classes,
        "layers": [[layer.kind, layer.size, layer.kernel] for layer in spec.layers],
        "input_shift": spec.input_shift,
        "input_scale": spec.input_scale,
    }


def spec_from_dict(d: dict):
    from .models import Layer, ModelSpec

    return ModelSpec(
        name=d["name"],
        input_shape=tuple(d["input_shape"]),
        n_classes=d["n_classes"],
        layers=tuple(Layer(*entry) for entry in d["layers"]),
        input_shift=d["input_shift"],
        input_scale=d["input_scale"],
    )


def save_checkpoint(model, path) -> Path:
    meta = {
        "kind": "model",
        "spec": spec_to_dict(model.spec_),
        "training": {
            "epochs": model.epochs_trained_,
            "seed": model.random_state,
            "learning_rate": model.learning_rate,
            "batch_size": model.batch_size,
            "momentum": model.momentum,
            "label_smoothing": model.label_smoothing,
            "validation_accuracy": model.validation_accuracy_,
            "train_accuracy": model.train_accuracy_,
        },
    }
    return write_container(path, model.params_, meta)


def load_checkpoint(path, expected_spec=None):
    """Rebuild a :class:`~edgemga.models.ConvNetClassifier`.

    ``expected_spec`` (a ModelSpec or built-in name) makes a checkpoint of
    any other architecture fail with :class:`SpecMismatchError`.
    """
    from .models import SPECS, ConvNetClassifier, _init_params

    tensors, meta = read_container(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: container does not hold a model")
    spec = spec_from_dict(meta["spec"])
    if expected_spec is not None:
        want = SPECS[expected_spec] if isinstance(expected_spec, str) else expected_spec
        if want != spec:
            raise SpecMismatchError(
                f"{path}: checkpoint is for spec {spec.name!r} ({spec.describe()}), "
                f"expected {want.name!r} ({want.describe()})"
            )
    spec.validate()
    template = _init_params(spec, 0)
    if set(template) != set(tensors):
        raise SpecMismatchError(f"{path}: parameter names do not match spec {spec.name!r}")
    for name, arr in tensors.items():
        if arr.shape != template[name].shape:
            raise SpecMismatchError(f"{path}: {name} has shape {arr.shape}, expected {template[name].shape}")
    tr = meta["training"]
    model = ConvNetClassifier(
        spec=spec,
        epochs=tr["epochs"],
        learning_rate=tr["learning_rate"],
        batch_size=tr["batch_size"],
        momentum=tr["momentum"],
        label_smoothing=tr.get("label_smoothing", 0.0),
        random_state=tr["seed"],
    )
    model.params_ = tensors
    model.classes_ = np.arange(spec.n_classes)
    model.epochs_trained_ = tr["epochs"]
    model.validation_accuracy_ = tr["validation_accuracy"]
    model.train_accuracy_ = tr["train_accuracy"]
    return model


def save_seeds(path, seeds) -> Path:
    """Store white-box seeds (delta, mask, benign map) in one container."""
    tensors, entries = {}, []
    for i, s in enumerate(seeds):
        tensors[f"{i}.delta"] = s.delta
        tensors[f"{i}.n_w"] = s.n_w
        tensors[f"{i}.map"] = s.benign_map.values
        tensors[f"{i}.x"] = s.x
        entries.append(
            {
                "success": s.success,
                "loss": s.loss,
                "class_index": s.benign_map.class_index,
                "image_id": s.benign_map.image_id,
                "model_id": s.benign_map.model_id,
                "source_class": s.source_class,
            }
        )
    return write_container(path, tensors, {"kind": "seeds", "seeds": entries})


def load_seeds(path):
    from .advedge import AdversarialSeed
    from .cam import AttributionMap

    tensors, meta = read_container(path)
    if meta.get("kind") != "seeds":
        raise CheckpointError(f"{path}: container does not hold seeds")
    out = []
    for i, e in enumerate(meta["seeds"]):
        out.append(
            AdversarialSeed(
                delta=tensors[f"{i}.delta"],
                success=e["success"],
                loss=e["loss"],
                benign_map=AttributionMap(tensors[f"{i}.map"], e["class_index"], e["model_id"], e["image_id"]),
                n_w=tensors[f"{i}.n_w"],
                x=tensors[f"{i}.x"],
                source_class=e["source_class"],
            )
        )
    return out
