"""Class activation maps.

``m_c(j, k) = sum_i w[c, i] * a_i(j, k)`` over the last conv activations,
clamped at zero, bilinearly resized to the input grid and divided by its
maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import upsample_bilinear as _upsample

__all__ = [
    "AttributionMap",
    "cam_tensor",
    "compute_cam",
    "compute_cams",
    "binarize",
    "upsample_bilinear",
    "write_pgm",
    "read_pgm",
]


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # [H, W] in [0, 1]
    class_index: int
    model_id: str = ""
    image_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, AttributionMap) else np.asarray(m)


def _check_cam_model(model) -> None:
    kinds = [layer.kind for layer in model.spec_.layers]
    if kinds[-2:] != ["gap", "dense"]:
        from .models import CamCompatibilityError

        raise CamCompatibilityError("model does not end in gap -> dense")


def cam_tensor(model, X: ad.Tensor, classes, params=None) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable CAM for a batch: returns ``(maps [N,H,W], logits [N,K])``.

    One forward pass yields both outputs, so a loss mixing prediction and
    attribution terms needs no second evaluation.
    """
    _check_cam_model(model)
    if params is None:
        params = model.param_tensors(dtype=X.dtype if X.dtype == np.float64 else None)
    logits, acts = model.forward(X, params)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.intp), acts.shape[:-3])
    weights = params["dense.weight"]
    k = weights.shape[0]
    if classes.size and (classes.min() < 0 or classes.max() >= k):
        raise IndexError(f"class index outside [0, {k})")
    # one-hot selection keeps the weight lookup on the tape
    onehot = ad.Tensor(np.eye(k, dtype=X.dtype)[classes], X.dtype)
    w_c = ad.dense(onehot, _transpose(weights))
    raw = ad.relu(ad.channel_weighted_sum(acts, w_c))
    maps = ad.normalize_max(_upsample(raw, X.shape[-2:]))
    return maps, logits


def _transpose(w: ad.Tensor) -> ad.Tensor:
    wt = np.ascontiguousarray(w.data.T)
    return ad._emit("transpose", (w,), wt, lambda g: (g.T,))


def compute_cams(model, X, classes) -> np.ndarray:
    """Normalized CAMs ``[N, H, W]`` for a batch of images."""
    X, _ = model._check_images(X)
    maps, _ = cam_tensor(model, ad.Tensor._wrap(X), classes)
    return np.array(maps.data)


def compute_cam(model, image, class_index: int, model_id: str = "", image_id: str = "") -> AttributionMap:
    values = compute_cams(model, np.asarray(image)[None], [class_index])[0]
    return AttributionMap(values, int(class_index), model_id, image_id)


def upsample_bilinear(m, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a ``[h, w]`` map."""
    arr = np.asarray(_values(m))
    return _upsample(ad.Tensor(arr, arr.dtype if arr.dtype.kind == "f" else np.float64), target).data


def binarize(m, threshold: float) -> np.ndarray:
    """``1`` where the map is at least ``threshold``, else ``0``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (_values(m) >= threshold).astype(np.uint8)


def write_pgm(path, m) -> Path:
    """Binary (P5) 8-bit PGM, values scaled by 255 and rounded."""
    v = np.clip(np.rint(np.asarray(_values(m), np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = v.shape
    p = Path(path)
    p.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + v.tobytes())
    return p


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = raw[pos + 1 :]  # exactly one whitespace byte ends the header
    if maxval != 255 or len(data) != w * h:
        raise ValueError(f"{path}: unexpected PGM payload")
    return np.frombuffer(data, np.uint8).reshape(h, w).astype(np.float64) / 255
