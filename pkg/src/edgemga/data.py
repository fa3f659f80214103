"""Dataset generation, ingestion and evaluation-set selection.

Two on-disk formats are understood:

* a directory of 8-bit PNG files named ``<label>_<id>.png``;
* an IDX pair (``*-images-idx3-ubyte`` / ``*-labels-idx1-ubyte``, the MNIST
  layout), given as the image file path or a directory holding one pair.
"""

from __future__ import annotations

import logging
import re
import struct
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetError",
    "make_glyphs",
    "load_dataset",
    "dataset_exists",
    "save_png",
    "save_png_dir",
    "save_idx",
    "to_uint8",
    "select_evaluation_set",
]


class DatasetError(ValueError):
    pass


_FONT_DIRS = ("/usr/share/fonts/truetype/dejavu", "/usr/share/fonts/dejavu")
_FONT_FILES = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
)


@lru_cache(maxsize=None)
def _fonts() -> tuple[str, ...]:
    found = []
    for name in _FONT_FILES:
        for d in _FONT_DIRS:
            p = Path(d) / name
            if p.exists():
                found.append(str(p))
                break
    return tuple(found)


@lru_cache(maxsize=256)
def _font(path: str | None, size: int):
    if path is None:
        return ImageFont.load_default(size=size)
    return ImageFont.truetype(path, size)


def make_glyphs(
    n: int,
    seed: int = 0,
    size: int = 28,
    contrast: tuple[float, float] = (0.05, 0.15),
    clutter: int = 3,
    noise: float = 0.02,
) -> tuple[np.ndarray, np.ndarray]:
    """Render ``n`` grayscale digit images with labels 0-9.

    Each image is a randomly fonted, shifted and rotated digit drawn faintly
    (``contrast``) over a graded background with ``clutter`` distractor
    strokes and Gaussian sensor noise. The result is an MNIST-sized,
    10-class task whose models are accurate but sensitive to perturbations
    of a few intensity levels.

    Returns
    -------
    X : ndarray of shape (n, 1, size, size), float32 in [0, 1]
    y : ndarray of shape (n,), int64
    """
    rng = np.random.default_rng(seed)
    fonts = _fonts() or (None,)
    X = np.empty((n, 1, size, size), np.float32)
    y = rng.integers(0, 10, n)
    canvas = 64
    grid_y, grid_x = np.mgrid[0:size, 0:size] / size
    for i in range(n):
        font = _font(fonts[rng.integers(len(fonts))], int(rng.integers(44, 54)))
        glyph = Image.new("L", (canvas, canvas), 0)
        ImageDraw.Draw(glyph).text(
            (canvas / 2 + rng.uniform(-4, 4), canvas / 2 + rng.uniform(-4, 4)),
            str(y[i]),
            fill=255,
            font=font,
            anchor="mm",
        )
        glyph = glyph.rotate(rng.uniform(-12, 12), resample=Image.BILINEAR)
        g = np.asarray(glyph.resize((size, size), Image.LANCZOS), np.float32) / 255

        strokes = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(strokes)
        for _ in range(clutter):
            draw.line(list(rng.uniform(0, canvas, 4)), fill=255, width=int(rng.integers(2, 5)))
        s = np.asarray(strokes.resize((size, size), Image.LANCZOS), np.float32) / 255

        base = rng.uniform(0.05, 0.35)
        c = rng.uniform(*contrast)
        img = (
            base
            + rng.uniform(-0.1, 0.1) * grid_x
            + rng.uniform(-0.1, 0.1) * grid_y
            + c * g
            + rng.uniform(0.3, 0.8) * c * s
            + rng.normal(0, noise, (size, size))
        )
        X[i, 0] = np.clip(img, 0, 1)
    return X, y.astype(np.int64)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)


def _hwc(img: np.ndarray) -> np.ndarray:
    """[C,H,W] -> array PIL accepts (HxW for 1 channel, HxWx3 for RGB)."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    return np.moveaxis(img, 0, -1)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(_hwc(img))).save(path)


def save_png_dir(path, X: np.ndarray, y: np.ndarray) -> Path:
    """Write ``<label>_<id>.png`` files; ids are zero-padded sample indices."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(X))))
    for i, (img, label) in enumerate(zip(X, y)):
        save_png(out / f"{int(label)}_{i:0{width}d}.png", img)
    return out


_PNG_NAME = re.compile(r"^(\d+)_([^/]+)\.png$", re.IGNORECASE)


def _load_png_dir(path: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    images, labels, ids = [], [], []
    for p in files:
        m = _PNG_NAME.match(p.name)
        if not m:
            raise DatasetError(f"{p}: file name is not <label>_<id>.png")
        try:
            with Image.open(p) as im:
                arr = np.asarray(im)
        except Exception as exc:  # PIL raises several unrelated types
            raise DatasetError(f"{p}: cannot decode PNG ({exc})") from exc
        if arr.dtype != np.uint8:
            raise DatasetError(f"{p}: expected 8-bit pixels, got {arr.dtype}")
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3:
            arr = np.moveaxis(arr[..., :3], -1, 0)
        images.append(arr.astype(np.float32) / 255)
        labels.append(int(m.group(1)))
        ids.append(p.stem)
    if images and len({a.shape for a in images}) != 1:
        raise DatasetError(f"{path}: images have differing shapes")
    X = np.stack(images) if images else np.zeros((0, 1, 1, 1), np.float32)
    return X, np.asarray(labels, np.int64), ids


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file")
    if raw[2] != 0x08:
        raise DatasetError(f"{path}: only unsigned-byte IDX payloads are supported")
    rank = raw[3]
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header != count:
        raise DatasetError(
            f"{path}: payload has {len(raw) - header} bytes, header promises {count}"
        )
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def _idx_pair(path: Path) -> tuple[Path, Path]:
    prefixed = path.with_name(path.name + "-images-idx3-ubyte")
    if not path.exists() and prefixed.exists():
        path = prefixed
    if path.is_dir():
        imgs = sorted(path.glob("*images*idx3*"))
        if len(imgs) != 1:
            raise DatasetError(f"{path}: expected exactly one *images*idx3* file")
        path = imgs[0]
    lbl = path.with_name(path.name.replace("images", "labels").replace("idx3", "idx1"))
    if lbl == path or not lbl.exists():
        raise DatasetError(f"{path}: matching label file {lbl.name} not found")
    return path, lbl


def _load_idx(path: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    img_path, lbl_path = _idx_pair(path)
    imgs = _read_idx(img_path)
    labels = _read_idx(lbl_path)
    if labels.ndim != 1:
        raise DatasetError(f"{lbl_path}: labels must be rank 1")
    if len(imgs) != len(labels):
        raise DatasetError(
            f"{img_path}: {len(imgs)} images but {lbl_path.name} has {len(labels)} labels"
        )
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    X = imgs.astype(np.float32) / 255
    ids = [f"{i:05d}" for i in range(len(X))]
    return X, labels.astype(np.int64), ids


def save_idx(path, X: np.ndarray, y: np.ndarray) -> tuple[Path, Path]:
    """Write ``<path>-images-idx3-ubyte`` and ``<path>-labels-idx1-ubyte``."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    X8 = to_uint8(X)
    if X8.ndim == 4 and X8.shape[1] == 1:
        X8 = X8[:, 0]
    img_path = base.with_name(base.name + "-images-idx3-ubyte")
    lbl_path = base.with_name(base.name + "-labels-idx1-ubyte")
    img_path.write_bytes(
        bytes([0, 0, 8, X8.ndim]) + struct.pack(f">{X8.ndim}I", *X8.shape) + X8.tobytes()
    )
    y8 = np.asarray(y, np.uint8)
    lbl_path.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", len(y8)) + y8.tobytes())
    return img_path, lbl_path


def dataset_exists(path) -> bool:
    p = Path(path)
    return p.exists() or p.with_name(p.name + "-images-idx3-ubyte").exists()


def load_dataset(path, format: str = "auto", n_classes: int = 10):
    """Load images in [0, 1] as ``[N, C, H, W]`` float32, labels and sample ids.

    ``format`` is ``"png"``, ``"idx"`` or ``"auto"`` (PNG directory if it
    holds ``.png`` files, IDX otherwise). An IDX dataset may be named by its
    image file, a directory holding one pair, or the base path given to
    :func:`save_idx`.
    """
    p = Path(path)
    if format == "auto":
        format = "png" if p.is_dir() and any(p.glob("*.png")) else "idx"
    if not dataset_exists(p):
        raise DatasetError(f"{p}: no such file or directory")
    if format == "png":
        if not p.is_dir():
            raise DatasetError(f"{p}: PNG datasets are directories")
        X, y, ids = _load_png_dir(p)
    elif format == "idx":
        X, y, ids = _load_idx(p)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    bad = (y < 0) | (y >= n_classes)
    if bad.any():
        i = int(np.argmax(bad))
        raise DatasetError(f"{p}: sample {ids[i]} has label {y[i]} outside [0, {n_classes})")
    return X, y, ids


def select_evaluation_set(
    X: np.ndarray,
    y: np.ndarray,
    target,
    n: int,
    confidence: float = 0.6,
    per_class: int = 1,
    seed: int = 0,
    n_classes: int | None = None,
):
    """Pick images the target classifies correctly with confidence above the threshold.

    Classes are visited in order; from each, up to ``per_class`` qualifying
    images are drawn uniformly without replacement, stopping at ``n`` total.

    Returns
    -------
    indices : ndarray of int
        Selected positions into ``X``, class-major.
    skipped : list of int
        Classes that had no qualifying image.
    """
    if not 0.0 <= confidence < 1.0:
        raise ValueError("confidence must be in [0, 1)")
    y = np.asarray(y)
    k = n_classes or int(target.spec_.n_classes)
    if len(X):
        proba = target.predict_proba(X)
        ok = (proba.argmax(axis=1) == y) & (proba.max(axis=1) > confidence)
    else:
        ok = np.zeros(0, bool)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    skipped: list[int] = []
    for c in range(k):
        if len(chosen) >= n:
            break
        pool = np.flatnonzero(ok & (y == c))
        if len(pool) == 0:
            logger.warning("class %d has no image passing the confidence filter", c)
            skipped.append(c)
            continue
        take = min(per_class, len(pool), n - len(chosen))
        chosen.extend(int(i) for i in rng.choice(pool, size=take, replace=False))
    return np.asarray(chosen, dtype=np.intp), skipped
