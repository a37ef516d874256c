"""Within-domain mixup: Beta(alpha, alpha) coefficients and convex combinations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError, ContractError

# Largest/smallest float64 values strictly inside (0, 1) around the endpoints.
_LAMBDA_LO = 1.0 - np.nextafter(1.0, 0.0)
_LAMBDA_HI = float(np.nextafter(1.0, 0.0))


class BetaSampler:
    """Symmetric Beta(alpha, alpha) draws built from two Gamma(alpha, 1) variates.

    Gamma variates use Marsaglia and Tsang's squeeze method; for alpha < 1 a
    Gamma(alpha + 1) draw is scaled by U**(1/alpha).
    """

    def __init__(self, alpha: float, rng_seed=0):
        if not alpha > 0:
            raise ConfigurationError(f"Beta parameter alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        self.rng_seed = rng_seed
        self._rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)

    def gamma(self, shape: float) -> float:
        rng = self._rng
        if shape < 1.0:
            u = 1.0 - rng.random()  # (0, 1]
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = rng.standard_normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - rng.random()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def sample(self) -> float:
        x = self.gamma(self.alpha)
        y = self.gamma(self.alpha)
        lam = x / (x + y)
        # small alpha puts mass within float spacing of 0 and 1; keep the open interval
        return min(max(lam, _LAMBDA_LO), _LAMBDA_HI)

    def sample_many(self, n: int) -> np.ndarray:
        return np.array([self.sample() for _ in range(n)])


def sample_lambda(sampler: BetaSampler) -> float:
    return sampler.sample()


@dataclass
class MixedBatch:
    x_mixed: Tensor
    lam: float
    perm: np.ndarray
    y_mixed: Tensor | None = None


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ContractError(f"pairing must be a permutation of 0..{n - 1}")
    return perm


def _check_lambda(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {lam}")
    return float(lam)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def mix_inputs(x, perm, lam: float) -> Tensor:
    """lam * x + (1 - lam) * x[perm], elementwise."""
    lam = _check_lambda(lam)
    xd = _data(x)
    perm = _check_perm(perm, len(xd))
    return Tensor(lam * xd + (1.0 - lam) * xd[perm])


def mix_labels(y, perm, lam: float, atol: float = 1e-9) -> Tensor:
    """Row-wise convex combination of label distributions."""
    lam = _check_lambda(lam)
    yd = _data(y)
    if yd.ndim != 2:
        raise ContractError(f"labels must be N x K distributions, got shape {yd.shape}")
    if np.any(yd < 0) or np.any(np.abs(yd.sum(axis=1) - 1.0) > atol):
        raise ContractError("label rows must be nonnegative and sum to 1")
    perm = _check_perm(perm, len(yd))
    return Tensor(lam * yd + (1.0 - lam) * yd[perm])


def mix_batch(x, perm, lam: float, y=None) -> MixedBatch:
    y_mixed = None if y is None else mix_labels(y, perm, lam)
    return MixedBatch(mix_inputs(x, perm, lam), float(lam), np.asarray(perm), y_mixed)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
