"""White-box seed generation: masked PGD with an interpretation-matching loss.

The loss for a candidate ``x_hat`` with benign class ``y`` and benign CAM
``m`` is::

    log p_y(x_hat) + lam * mean((cam(x_hat, y) - m) ** 2)

Minimizing the first term pushes the true class down (untargeted); the
second keeps the adversarial CAM close to the benign one. Each signed
gradient step is scaled per pixel by the edge mask ``n_w`` (Sobel edge
magnitude restricted to pixels whose benign CAM is at least ``tau``), then
projected back onto the L-inf ball of radius ``epsilon`` and onto ``[0, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .cam import AttributionMap, cam_tensor, compute_cams

logger = logging.getLogger(__name__)

__all__ = [
    "AttackConfig",
    "EdgeMask",
    "AdversarialSeed",
    "luminance",
    "sobel_edges",
    "edge_mask",
    "adv_loss",
    "advedge_step",
    "run_advedge",
    "AdvEdgeAttack",
]

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AttackConfig:
    """White-box stage settings; pixel scale is [0, 1]."""

    epsilon: float = 8 / 255
    alpha: float = 1 / 255
    iterations: int = 300
    lam: float = 0.204
    tau: float = 0.2
    masked: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")


@dataclass
class EdgeMask:
    """Sobel responses of one image.

    ``d`` is the raw magnitude ``sqrt(d_h**2 + d_v**2)``;
    ``d_normalized`` divides it by its maximum. ``n_w`` is filled by
    :func:`edge_mask`.
    """

    d_h: np.ndarray
    d_v: np.ndarray
    d: np.ndarray
    n_w: np.ndarray | None = None

    @property
    def d_normalized(self) -> np.ndarray:
        peak = self.d.max()
        return self.d / peak if peak > 0 else np.zeros_like(self.d)


@dataclass
class AdversarialSeed:
    delta: np.ndarray
    success: bool
    loss: float
    benign_map: AttributionMap
    n_w: np.ndarray
    x: np.ndarray = field(repr=False, default=None)
    source_class: int = -1

    @property
    def x_adv(self) -> np.ndarray:
        return self.x + self.delta


def luminance(image: np.ndarray) -> np.ndarray:
    """``[C,H,W]`` or ``[H,W]`` -> ``[H,W]``; RGB uses Rec. 601 weights."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[0] == 1:
        return image[0]
    if image.shape[0] == 3:
        return np.tensordot(_LUMA, image, axes=(0, 0))
    return image.mean(axis=0)


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Separable Sobel pair with replicate padding.

    Differencing before smoothing makes flat regions exactly zero.
    """
    p = np.pad(img, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    d_h = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    d_v = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    return d_h, d_v


def sobel_edges(image) -> EdgeMask:
    """3x3 Sobel responses with replicate padding.

    ``d_h`` is the derivative along the horizontal axis (it fires on
    vertical boundaries); ``d_v`` the derivative along the vertical axis.
    """
    d_h, d_v = _sobel(luminance(image))
    return EdgeMask(d_h=d_h, d_v=d_v, d=np.sqrt(d_h * d_h + d_v * d_v))


def edge_mask(edges: EdgeMask, m, tau: float) -> EdgeMask:
    """Fill ``n_w = d_normalized * [m >= tau]``."""
    values = m.values if isinstance(m, AttributionMap) else np.asarray(m)
    if values.shape != edges.d.shape:
        raise ValueError(f"map shape {values.shape} != edge shape {edges.d.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    n_w = edges.d_normalized * (values >= tau)
    return EdgeMask(edges.d_h, edges.d_v, edges.d, n_w)


def adv_loss(source, x_hat, y, m, lam: float):
    """Combined loss and its gradient with respect to ``x_hat``.

    Works on one image (``[C,H,W]``, scalar ``y``, ``[H,W]`` map) or a batch
    (``[N,C,H,W]``, ``[N]``, ``[N,H,W]``). For a batch, the returned loss is
    the per-image vector; the gradient of each image depends only on its
    own loss.
    """
    x_arr = np.asarray(x_hat)
    single = x_arr.ndim == 3
    m_arr = m.values if isinstance(m, AttributionMap) else np.asarray(m)
    if single:
        x_arr, m_arr = x_arr[None], m_arr[None]
    y_arr = np.broadcast_to(np.asarray(y, dtype=np.intp), (len(x_arr),))
    dtype = x_arr.dtype if x_arr.dtype.kind == "f" else np.float32
    x_t = ad.Tensor(x_arr, dtype)
    params = source.param_tensors(dtype=dtype if dtype == np.float64 else None)
    with ad.Tape() as tape:
        if lam == 0:
            logits, _ = source.forward(x_t, params)
            per_image = ad.pick(ad.log_softmax(logits), y_arr)
        else:
            maps, logits = cam_tensor(source, x_t, y_arr, params)
            prd = ad.pick(ad.log_softmax(logits), y_arr)
            diff = ad.sub(maps, ad.Tensor(m_arr, dtype))
            interp = ad.tensor_mean(ad.square(diff), axis=(-2, -1))
            per_image = ad.add(prd, ad.mul(interp, ad.Tensor(lam, dtype)))
        total = ad.tensor_sum(per_image)
    grad = tape.gradient(total, x_t)
    if single:
        return float(per_image.data[0]), grad[0]
    return per_image.data.copy(), grad


def advedge_step(x_hat, grad, alpha, n_w, x, epsilon):
    """One masked signed-gradient step followed by ball and box projection."""
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    n_w = np.asarray(n_w, dtype=x_hat.dtype)
    if n_w.ndim == x_hat.ndim - 1:
        n_w = np.expand_dims(n_w, -3)  # share the mask across channels
    eps = x_hat.dtype.type(epsilon)
    step = n_w * x_hat.dtype.type(alpha) * np.sign(grad).astype(x_hat.dtype)
    out = np.clip(x_hat - step, x - eps, x + eps)
    return np.clip(out, 0, 1).astype(x_hat.dtype, copy=False)


def _masks(source, X, y, cfg: AttackConfig):
    maps = compute_cams(source, X, y)
    if cfg.masked:
        n_w = np.stack([edge_mask(sobel_edges(img), mp, cfg.tau).n_w for img, mp in zip(X, maps)])
    else:
        n_w = np.ones(maps.shape, dtype=np.float64)
    return maps, n_w.astype(X.dtype)


def _run_batch(source, X, y, cfg: AttackConfig):
    maps, n_w = _masks(source, X, y, cfg)
    x_hat = X.copy()
    losses = np.zeros(len(X))
    for _ in range(cfg.iterations):
        losses, grad = adv_loss(source, x_hat, y, maps, cfg.lam)
        x_hat = advedge_step(x_hat, grad, cfg.alpha, n_w, X, cfg.epsilon)
    if cfg.iterations:
        losses, _ = adv_loss(source, x_hat, y, maps, cfg.lam)
    pred = source.predict(x_hat) if len(X) else np.zeros(0, int)
    return x_hat, maps, n_w, losses, pred


def run_advedge(source, x, y: int, cfg: AttackConfig = AttackConfig(), image_id: str = "") -> AdversarialSeed:
    """Attack one image; see :class:`AdvEdgeAttack` for batches."""
    return AdvEdgeAttack(source, **cfg.__dict__).generate(np.asarray(x)[None], [y], [image_id])[0]


class AdvEdgeAttack(BaseEstimator):
    """Batched edge-masked PGD against a white-box source model.

    Parameters mirror :class:`AttackConfig`; ``batch_size`` bounds how many
    images share one forward/backward pass. ``masked=False`` turns the
    stage into plain PGD (full mask) and, with ``lam=0``, into the standard
    untargeted attack.
    """

    def __init__(
        self,
        model=None,
        epsilon=8 / 255,
        alpha=1 / 255,
        iterations=300,
        lam=0.204,
        tau=0.2,
        masked=True,
        batch_size=100,
    ):
        self.model = model
        self.epsilon = epsilon
        self.alpha = alpha
        self.iterations = iterations
        self.lam = lam
        self.tau = tau
        self.masked = masked
        self.batch_size = batch_size

    @property
    def config(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.alpha, self.iterations, self.lam, self.tau, self.masked)

    def fit(self, X=None, y=None):
        return self

    def generate(self, X, y, image_ids=None) -> list[AdversarialSeed]:
        cfg = self.config
        X, _ = self.model._check_images(X)
        y = np.asarray(y, dtype=np.intp)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(X))]
        model_id = getattr(self.model.spec_, "name", "")
        seeds: list[AdversarialSeed] = []
        for start in range(0, len(X), self.batch_size):
            sl = slice(start, start + self.batch_size)
            xb = X[sl]
            x_hat, maps, n_w, losses, pred = _run_batch(self.model, xb, y[sl], cfg)
            for i in range(len(xb)):
                seeds.append(
                    AdversarialSeed(
                        delta=x_hat[i] - xb[i],
                        success=bool(pred[i] != y[sl][i]),
                        loss=float(losses[i]),
                        benign_map=AttributionMap(maps[i], int(y[sl][i]), model_id, ids[start + i]),
                        n_w=n_w[i],
                        x=xb[i],
                        source_class=int(pred[i]),
                    )
                )
        return seeds

    def transform(self, X, y=None) -> np.ndarray:
        """Adversarial images; ``y`` defaults to the model's own predictions."""
        if y is None:
            y = self.model.predict(X)
        return np.stack([s.x_adv for s in self.generate(X, y)])
