"""Convex stand-in for a target model, with a known optimal perturbation."""

import numpy as np

EPS = 8 / 255


class ConvexToyModel:
    """Two-class model with ``p_0 = 0.5 + 0.5 * q`` on images around 0.5.

    ``q = floor + 0.2 * mean(((x - 0.5 - opt) / eps) ** 2)``, so with true
    class 0 the margin fitness equals ``q`` and its minimum ``floor`` is
    reached at ``delta = opt``. ``floor > 0`` keeps the class from flipping.
    """

    def __init__(self, opt, floor=0.1, eps=EPS):
        self.opt, self.floor, self.eps = np.asarray(opt, np.float64), floor, eps

    def predict_proba(self, X):
        X = np.asarray(X, np.float64)
        single = X.ndim == 3
        if single:
            X = X[None]
        q = self.floor + 0.2 * np.mean(((X - 0.5 - self.opt) / self.eps) ** 2, axis=(1, 2, 3))
        p = np.stack([0.5 + 0.5 * q, 0.5 - 0.5 * q], axis=1)
        return p[0] if single else p


def toy_problem(trial, shape=(1, 4, 4)):
    rng = np.random.default_rng(trial)
    opt = rng.uniform(-0.8 * EPS, 0.8 * EPS, shape)
    return ConvexToyModel(opt), np.full(shape, 0.5)
