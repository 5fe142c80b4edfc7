"""Zero-mean Gaussian-process regression with fixed squared-exponential hyperparameters.

Inputs are rescaled to ``[0, 1]`` per feature before the kernel is applied;
periodic inputs (angles) are first embedded as ``(cos, sin)``.  Several
targets may share one factorization: column ``j`` of the prediction is the
posterior mean of an independent model fitted to column ``j`` of the targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

log = logging.getLogger(__name__)

LENGTH_SCALE = 1.0
SIGNAL_STD = 1.0
NOISE_STD = float(np.exp(-6.0))


class GpFitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class InputTransform:
    """Angle embedding for ``periodic`` columns, then affine rescaling to the unit box."""

    periodic: tuple[bool, ...]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]

    def embed(self, x: NDArray) -> NDArray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        for k, per in enumerate(self.periodic):
            if per:
                cols.extend([np.cos(x[:, k]), np.sin(x[:, k])])
            else:
                cols.append(x[:, k])
        return np.stack(cols, axis=1)

    def __call__(self, x: NDArray) -> NDArray:
        span = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        return (self.embed(x) - self.lower) / span

    @classmethod
    def fit(cls, x: NDArray, periodic=None, bounds=None) -> "InputTransform":
        """Scaling from the training range, or from explicit per-input ``bounds``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        periodic = tuple(bool(p) for p in (periodic or [False] * x.shape[1]))
        if len(periodic) != x.shape[1]:
            raise ValueError("periodic mask does not match the input dimension")
        probe = cls(periodic, np.zeros(1), np.ones(1))
        if bounds is None:
            e = probe.embed(x)
            return cls(periodic, e.min(axis=0), e.max(axis=0))
        lo, hi = [], []
        for (a, b), per in zip(bounds, periodic):
            if per:
                lo += [-1.0, -1.0]
                hi += [1.0, 1.0]
            else:
                lo.append(a)
                hi.append(b)
        return cls(periodic, np.array(lo, dtype=float), np.array(hi, dtype=float))

    def to_dict(self) -> dict:
        return {"periodic": list(self.periodic), "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputTransform":
        return cls(tuple(d["periodic"]), np.array(d["lower"]), np.array(d["upper"]))


def se_kernel(a: NDArray, b: NDArray, length_scale: float = LENGTH_SCALE,
              signal_std: float = SIGNAL_STD) -> NDArray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return signal_std ** 2 * np.exp(-0.5 * d2 / length_scale ** 2)


@dataclass(frozen=True)
class GpModel:
    """Fitted posterior; ``weights = (K + noise^2 I)^{-1} targets``."""

    inputs: NDArray[np.float64]
    targets: NDArray[np.float64]
    transform: InputTransform
    features: NDArray[np.float64]
    cholesky: NDArray[np.float64]
    weights: NDArray[np.float64]
    length_scale: float = LENGTH_SCALE
    signal_std: float = SIGNAL_STD
    noise_std: float = NOISE_STD
    jitter: float = 0.0

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]

    def to_dict(self) -> dict:
        return {"inputs": self.inputs.tolist(), "targets": self.targets.tolist(),
                "transform": self.transform.to_dict(), "length_scale": self.length_scale,
                "signal_std": self.signal_std, "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        tr = InputTransform.from_dict(d["transform"])
        return gp_fit(np.array(d["inputs"]), np.array(d["targets"]), transform=tr,
                      length_scale=d["length_scale"], signal_std=d["signal_std"],
                      noise_std=d["noise_std"])


def gp_fit(inputs, targets, periodic=None, bounds=None, transform: InputTransform | None = None,
           length_scale: float = LENGTH_SCALE, signal_std: float = SIGNAL_STD,
           noise_std: float = NOISE_STD) -> GpModel:
    """Factorize ``K + noise^2 I`` once (one retry with ten times the noise on failure)."""
    X = np.asarray(inputs, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = np.asarray(targets, dtype=float)
    Y = Y.reshape(len(X), -1)
    if len(X) < 1:
        raise ValueError("need at least one training point")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    tr = transform or InputTransform.fit(X, periodic, bounds)
    F = tr(X)
    if len(F) > 1:
        d2 = np.sum((F[:, None, :] - F[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if np.sqrt(d2.min()) < 1e-12:
            raise ValueError("duplicate training inputs")
    K = se_kernel(F, F, length_scale, signal_std)
    noise2 = noise_std ** 2
    jitter = 0.0
    try:
        L = sla.cholesky(K + noise2 * np.eye(len(F)), lower=True)
    except np.linalg.LinAlgError:
        jitter = 9.0 * noise2
        log.warning("kernel matrix not positive definite; retrying with ten times the noise variance")
        try:
            L = sla.cholesky(K + (noise2 + jitter) * np.eye(len(F)), lower=True)
        except np.linalg.LinAlgError as exc:
            raise GpFitError("kernel factorization failed after jitter retry") from exc
    weights = sla.cho_solve((L, True), Y)
    return GpModel(X, Y, tr, F, L, weights, length_scale, signal_std, noise_std, jitter)


def gp_predict(model: GpModel, x) -> NDArray[np.float64]:
    """Posterior mean at one point (shape ``(n_outputs,)``) or several (``(n, n_outputs)``)."""
    x = np.asarray(x, dtype=float)
    dim = model.inputs.shape[1]
    single = x.ndim == 0 or (x.ndim == 1 and dim > 1)
    X = x.reshape(1, -1) if single else (x[:, None] if x.ndim == 1 else x)
    if X.shape[1] != model.inputs.shape[1]:
        raise ValueError(f"expected inputs of dimension {model.inputs.shape[1]}")
    ks = se_kernel(model.transform(X), model.features, model.length_scale, model.signal_std)
    out = ks @ model.weights
    return out[0] if single else out
