"""CAM-compatible convolutional classifiers and the query-counted oracle.

Every architecture ends in ``global_avg_pool -> dense``, so the last conv
activations and the dense weights define a class activation map.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad

__all__ = [
    "CamCompatibilityError",
    "QueryBudgetExhausted",
    "Layer",
    "ModelSpec",
    "SOURCE_SPEC",
    "TARGET_SPEC",
    "SPECS",
    "ConvNetClassifier",
    "QueryOracle",
    "cross_entropy",
    "build_model",
    "train",
    "predict",
    "oracle_query",
    "query_many",
]


class CamCompatibilityError(ValueError):
    """The architecture does not end in global-average-pool followed by dense."""


class QueryBudgetExhausted(RuntimeError):
    """The oracle's query cap has been reached."""


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv", "relu", "maxpool", "gap", "dense"
    size: int = 0  # out channels for conv, pool window for maxpool
    kernel: int = 3

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"conv{self.size}k{self.kernel}"
        if self.kind == "maxpool":
            return f"maxpool{self.size}"
        return self.kind


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    ``input_shift`` and ``input_scale`` are fixed preprocessing constants
    (``(x - shift) / scale``) tied to the data family, like the usual
    ImageNet mean/std normalization.
    """

    name: str
    input_shape: tuple[int, int, int]
    n_classes: int
    layers: tuple[Layer, ...]
    input_shift: float = 0.0
    input_scale: float = 1.0

    def validate(self) -> None:
        kinds = [layer.kind for layer in self.layers]
        if len(kinds) < 3 or kinds[-2:] != ["gap", "dense"]:
            raise CamCompatibilityError(
                f"spec {self.name!r} must end with gap -> dense, got {kinds}"
            )
        if "gap" in kinds[:-2] or "dense" in kinds[:-2]:
            raise CamCompatibilityError(f"spec {self.name!r} has gap/dense before the tail")
        if "conv" not in kinds:
            raise CamCompatibilityError(f"spec {self.name!r} has no conv layer")
        if self.layers[-1].size != self.n_classes:
            raise ValueError("dense width must equal n_classes")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    def describe(self) -> str:
        return "-".join(str(layer) for layer in self.layers)


def _stack(*blocks: tuple[int, bool], n_classes: int = 10) -> tuple[Layer, ...]:
    layers: list[Layer] = []
    for width, pool in blocks:
        layers += [Layer("conv", width), Layer("relu")]
        if pool:
            layers.append(Layer("maxpool", 2))
    return tuple(layers) + (Layer("gap"), Layer("dense", n_classes))


# Constants match the glyph data produced by ``edgemga.data.make_glyphs``.
_GLYPH_SHIFT = 0.22
_GLYPH_SCALE = 0.1

SOURCE_SPEC = ModelSpec(
    name="source",
    input_shape=(1, 28, 28),
    n_classes=10,
    layers=_stack((16, True), (32, True), (64, False)),
    input_shift=_GLYPH_SHIFT,
    input_scale=_GLYPH_SCALE,
)
TARGET_SPEC = ModelSpec(
    name="target",
    input_shape=(1, 28, 28),
    n_classes=10,
    layers=_stack((8, True), (16, True), (32, False), (48, False)),
    input_shift=_GLYPH_SHIFT,
    input_scale=_GLYPH_SCALE,
)
SPECS = {s.name: s for s in (SOURCE_SPEC, TARGET_SPEC)}


def _init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    channels = spec.input_shape[0]
    n_conv = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            fan_in = channels * layer.kernel * layer.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (layer.size, channels, layer.kernel, layer.kernel))
            params[f"conv{n_conv}.weight"] = w.astype(np.float32)
            params[f"conv{n_conv}.bias"] = np.zeros(layer.size, np.float32)
            channels = layer.size
            n_conv += 1
        elif layer.kind == "dense":
            w = rng.normal(0.0, np.sqrt(2.0 / channels), (layer.size, channels))
            params["dense.weight"] = w.astype(np.float32)
            params["dense.bias"] = np.zeros(layer.size, np.float32)
    return params


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN trained by minibatch SGD (with momentum) on cross-entropy.

    Parameters
    ----------
    spec : ModelSpec or str
        Architecture, or the name of a built-in one (``"source"``/``"target"``).
    epochs : int
        Passes over the training split.
    learning_rate : float
    batch_size : int
    momentum : float
        Heavy-ball coefficient; 0 gives plain SGD.
    label_smoothing : float
        Mass moved from the label to a uniform target. Keeps the trained
        models out of the saturated ``p_y ~ 1`` regime.
    validation_fraction : float
        Share of the data held out to measure ``validation_accuracy_``.
    random_state : int
        Seeds both initialization and minibatch order.

    Attributes
    ----------
    params_ : dict of str to ndarray
        Named float32 parameter arrays.
    validation_accuracy_ : float
    train_accuracy_ : float
    """

    def __init__(
        self,
        spec="source",
        epochs=10,
        learning_rate=0.03,
        batch_size=32,
        momentum=0.9,
        label_smoothing=0.1,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.spec = spec
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.momentum = momentum
        self.label_smoothing = label_smoothing
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # -- construction ------------------------------------------------------

    @property
    def spec_(self) -> ModelSpec:
        spec = SPECS[self.spec] if isinstance(self.spec, str) else self.spec
        return spec

    def initialize(self) -> "ConvNetClassifier":
        """Draw fresh He-scaled parameters without training."""
        spec = self.spec_
        spec.validate()
        self.params_ = _init_params(spec, self.random_state)
        self.classes_ = np.arange(spec.n_classes)
        self.epochs_trained_ = 0
        self.validation_accuracy_ = float("nan")
        self.train_accuracy_ = float("nan")
        return self

    # -- forward -----------------------------------------------------------

    def forward(self, X: ad.Tensor, params: dict[str, ad.Tensor] | None = None):
        """Return ``(logits, last_conv_activations)`` for a batch or single image.

        Must run inside a :class:`~edgemga.autodiff.Tape` to be differentiable.
        ``params`` overrides the stored parameters (used during training).
        """
        spec = self.spec_
        if params is None:
            params = self.param_tensors()
        h = ad.mul(
            ad.sub(X, ad.Tensor(spec.input_shift, X.dtype)),
            ad.Tensor(1.0 / spec.input_scale, X.dtype),
        )
        acts = None
        n_conv = 0
        for layer in spec.layers:
            if layer.kind == "conv":
                h = ad.conv2d(
                    h,
                    params[f"conv{n_conv}.weight"],
                    params[f"conv{n_conv}.bias"],
                    padding=layer.kernel // 2,
                )
                n_conv += 1
            elif layer.kind == "relu":
                h = ad.relu(h)
            elif layer.kind == "maxpool":
                h = ad.max_pool2d(h, layer.size)
            elif layer.kind == "gap":
                acts = h
                h = ad.global_avg_pool(h)
            elif layer.kind == "dense":
                h = ad.dense(h, params["dense.weight"], params["dense.bias"])
        return h, acts

    def param_tensors(self, dtype=None) -> dict[str, ad.Tensor]:
        check_is_fitted(self, "params_")
        if dtype is None:
            return {k: ad.Tensor._wrap(v) for k, v in self.params_.items()}
        return {k: ad.Tensor(v, dtype=dtype) for k, v in self.params_.items()}

    def _check_images(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X)
        shape = self.spec_.input_shape
        single = X.ndim == 3
        if single:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != shape:
            raise ValueError(f"expected images of shape {shape}, got {np.shape(X)}")
        if not np.isfinite(X).all():
            raise ValueError("images contain NaN or Inf")
        if not np.issubdtype(X.dtype, np.floating):
            X = X.astype(np.float32)
        return X, single

    def decision_function(self, X, batch_size: int = 512) -> np.ndarray:
        """Logits; ``X`` is ``[N, C, H, W]`` or a single ``[C, H, W]`` image."""
        X, single = self._check_images(X)
        params = self.param_tensors(dtype=X.dtype if X.dtype == np.float64 else None)
        out = []
        for i in range(0, len(X), batch_size):
            logits, _ = self.forward(ad.Tensor._wrap(X[i : i + batch_size]), params)
            out.append(logits.data)
        z = np.concatenate(out) if out else np.zeros((0, self.spec_.n_classes), np.float32)
        return z[0] if single else z

    def predict_proba(self, X, batch_size: int = 512) -> np.ndarray:
        z = self.decision_function(X, batch_size)
        return ad.softmax(ad.Tensor._wrap(z)).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    # -- training ----------------------------------------------------------

    def fit(self, X, y) -> "ConvNetClassifier":
        X, _ = self._check_images(X)
        X = X.astype(np.float32, copy=False)
        y = np.asarray(y)
        if len(X) == 0:
            raise ValueError("cannot train on an empty dataset")
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        k = self.spec_.n_classes
        if y.min() < 0 or y.max() >= k or not np.issubdtype(y.dtype, np.integer):
            raise ValueError(f"labels must be integers in [0, {k})")
        if not hasattr(self, "params_"):
            self.initialize()

        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(X))
        n_val = int(round(self.validation_fraction * len(X)))
        val_idx, tr_idx = order[:n_val], order[n_val:]
        if len(tr_idx) == 0:
            raise ValueError("no training samples left after the validation split")

        params = {k_: v.copy() for k_, v in self.params_.items()}
        velocity = {k_: np.zeros_like(v) for k_, v in params.items()}
        lr = np.float32(self.learning_rate)
        mom = np.float32(self.momentum)
        for _ in range(self.epochs):
            perm = tr_idx[rng.permutation(len(tr_idx))]
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                tparams = {k_: ad.Tensor._wrap(v) for k_, v in params.items()}
                with ad.Tape() as tape:
                    logits, _ = self.forward(ad.Tensor._wrap(X[idx]), tparams)
                    loss = cross_entropy(logits, y[idx], self.label_smoothing)
                grads = tape.gradient(loss, tparams)
                for name in params:
                    velocity[name] = mom * velocity[name] - grads[name]
                    params[name] = params[name] + lr * velocity[name]
        self.params_ = params
        self.epochs_trained_ = getattr(self, "epochs_trained_", 0) + self.epochs

        self.train_accuracy_ = float(np.mean(self.predict(X[tr_idx]) == y[tr_idx]))
        if n_val:
            self.validation_accuracy_ = float(np.mean(self.predict(X[val_idx]) == y[val_idx]))
        else:
            self.validation_accuracy_ = self.train_accuracy_
        return self

    # -- CAM access --------------------------------------------------------

    @property
    def class_weights_(self) -> np.ndarray:
        """Dense-head weights ``[K, C]``: ``w[c, i]`` links channel i to class c."""
        check_is_fitted(self, "params_")
        return self.params_["dense.weight"]

    def activations(self, X) -> np.ndarray:
        """Last conv-stack activations feeding the global average pool."""
        X, single = self._check_images(X)
        _, acts = self.forward(ad.Tensor._wrap(X))
        return acts.data[0] if single else acts.data


def cross_entropy(logits: ad.Tensor, labels, smoothing: float = 0.0) -> ad.Tensor:
    """Mean negative log-likelihood of integer ``labels``.

    With ``smoothing = s`` the target puts ``1 - s`` on the label and spreads
    ``s`` uniformly over all classes.
    """
    logp = ad.log_softmax(logits)
    ll = ad.tensor_mean(ad.pick(logp, labels))
    if smoothing:
        uniform = ad.tensor_mean(logp)
        ll = ad.add(
            ad.mul(ll, ad.Tensor(1.0 - smoothing, ll.dtype)),
            ad.mul(uniform, ad.Tensor(smoothing, ll.dtype)),
        )
    return ad.mul(ll, ad.Tensor(-1.0, ll.dtype))


def build_model(spec: ModelSpec | str, seed: int) -> ConvNetClassifier:
    """Untrained model with parameters drawn from ``seed``."""
    return ConvNetClassifier(spec=spec, random_state=seed).initialize()


def train(
    model: ConvNetClassifier,
    X,
    y,
    epochs: int,
    lr: float,
    batch: int,
    seed: int,
) -> ConvNetClassifier:
    model.set_params(epochs=epochs, learning_rate=lr, batch_size=batch, random_state=seed)
    return model.fit(X, y)


def predict(model: ConvNetClassifier, image) -> np.ndarray:
    return model.predict_proba(image)


@dataclass
class QueryOracle:
    """Black-box access to a model's probability vector, with an exact ledger.

    The counter is guarded by a lock, so concurrent callers never lose or
    double-count a query. Requests past ``cap`` raise
    :class:`QueryBudgetExhausted` without touching the model.
    """

    model: ConvNetClassifier
    cap: int = 50_000
    count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be positive")

    @property
    def remaining(self) -> int:
        return self.cap - self.count

    def reserve(self, n: int = 1) -> None:
        with self._lock:
            if self.count + n > self.cap:
                raise QueryBudgetExhausted(
                    f"query cap {self.cap} reached ({self.count} used)"
                )
            self.count += n

    def query(self, image) -> np.ndarray:
        self.reserve(1)
        return self.model.predict_proba(image)


def oracle_query(oracle: QueryOracle, image) -> np.ndarray:
    return oracle.query(image)


def query_many(oracles: list[QueryOracle], images: np.ndarray) -> np.ndarray:
    """One query per oracle on the matching image, evaluated in one batch.

    All oracles must wrap the same model. Every ledger is charged before the
    forward pass; if any oracle is exhausted, none is charged.
    """
    if len(oracles) != len(images):
        raise ValueError("need one image per oracle")
    if not oracles:
        return np.zeros((0, 0), np.float32)
    model = oracles[0].model
    if any(o.model is not model for o in oracles):
        raise ValueError("query_many needs oracles over a single model")
    charged = []
    try:
        for o in oracles:
            o.reserve(1)
            charged.append(o)
    except QueryBudgetExhausted:
        for o in charged:
            with o._lock:
                o.count -= 1
        raise
    return model.predict_proba(images)
