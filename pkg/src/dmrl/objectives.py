"""Loss terms of the dual-mixup objective and the ablation variant masks.

Every expectation is a batch mean.  ``total_gc`` is what G and C descend;
``total_d`` is what D ascends.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError

VARIANTS = ("full", "no_dm", "no_cm", "no_lcm", "no_ucm", "dann", "source_only")
ABLATION_VARIANTS = ("full", "no_dm", "no_cm", "no_lcm", "no_ucm", "source_only")
LAMBDA_T_GRID = (0.1, 1.0, 2.0, 5.0, 6.0, 10.0)


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.2
    lambda_s: float = 1e-4
    lambda_t: float = 2.0
    lambda_r: float = 1e-5
    lambda_d_max: float = 1.0
    delta: float = 10.0
    eta0: float = 0.01
    theta: float = 10.0
    beta_exp: float = 0.75
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    variant: str = "full"
    penalty: str = "l1"
    detach_pseudo_labels: bool = True

    def validate(self) -> "HyperParams":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("alpha", "eta0", "theta", "beta_exp", "delta"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda_s", "lambda_t", "lambda_r", "lambda_d_max"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.penalty not in ("l1", "l2"):
            raise ConfigurationError(f"unknown penalty {self.penalty!r}")
        return self

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Coefficients:
    """Effective weights after variant masking; ``lambda_d`` multiplies the schedule."""

    lambda_s: float
    lambda_t: float
    lambda_r: float
    lambda_d: float


def apply_variant(hp: HyperParams) -> Coefficients:
    v = hp.variant
    if v not in VARIANTS:
        raise ConfigurationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    ls, lt, lr, ld = hp.lambda_s, hp.lambda_t, hp.lambda_r, hp.lambda_d_max
    if v == "no_dm":
        lr = 0.0
    elif v == "no_cm":
        ls = lt = 0.0
    elif v == "no_lcm":
        ls = 0.0
    elif v == "no_ucm":
        lt = 0.0
    elif v in ("dann", "source_only"):
        ls = lt = lr = 0.0
        if v == "source_only":
            ld = 0.0
    return Coefficients(ls, lt, lr, ld)


@dataclass
class LossBreakdown:
    l_c: float
    l_s_r: float
    l_t_r: float
    l_adv: float
    l_adv_r: float
    total_gc: float
    total_d: float
    coefficients: Coefficients | None = None

    def components(self) -> dict[str, float]:
        return {"l_c": self.l_c, "l_s_r": self.l_s_r, "l_t_r": self.l_t_r,
                "l_adv": self.l_adv, "l_adv_r": self.l_adv_r}


def _same_shape(name: str, a: Tensor, b) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def soft_cross_entropy(probs: Tensor, targets) -> Tensor:
    """mean_n -sum_k t_nk log p_nk with the log clamped at 1e-12."""
    targets = ad.as_tensor(targets)
    _same_shape("cross_entropy", probs, targets)
    return ad.neg(ad.mean(ad.sum_axis(ad.mul(targets, ad.log(probs)), axis=1)))


def loss_classification(probs_s: Tensor, y_s) -> Tensor:
    return soft_cross_entropy(probs_s, y_s)


def loss_source_mixup(probs_mixed_s: Tensor, y_mixed_s) -> Tensor:
    return soft_cross_entropy(probs_mixed_s, y_mixed_s)


def loss_target_mixup(probs_mixed_t: Tensor, pl_i, pl_j, lam: float, penalty: str = "l1") -> Tensor:
    """Distance between predictions on mixed targets and the mixed pseudo-labels.

    ``pl_i``/``pl_j`` are used as given; detach them beforehand to keep them
    constant (the default in training).
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {lam}")
    pl_i, pl_j = ad.as_tensor(pl_i), ad.as_tensor(pl_j)
    _same_shape("target_mixup", probs_mixed_t, pl_i)
    _same_shape("target_mixup", pl_i, pl_j)
    target = ad.add(ad.scale(pl_i, lam), ad.scale(pl_j, 1.0 - lam))
    diff = ad.sub(probs_mixed_t, target)
    per_elem = ad.absolute(diff) if penalty == "l1" else ad.mul(diff, diff)
    return ad.mean(ad.sum_axis(per_elem, axis=1))


def loss_adversarial(d_s: Tensor, d_t: Tensor) -> Tensor:
    """mean log D(source) + mean log(1 - D(target)); D ascends it, G descends it."""
    return ad.add(ad.mean(ad.log(d_s)), ad.mean(ad.log(ad.add_scalar(ad.neg(d_t), 1.0))))


def loss_adversarial_mixup(d_ms: Tensor, d_mt: Tensor) -> Tensor:
    """Same form as :func:`loss_adversarial` on within-domain mixed batches."""
    return loss_adversarial(d_ms, d_mt)


def weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    """sum_i c_i * t_i, skipping zero-weight terms; the first term keeps weight 1 unscaled."""
    out = None
    for coef, t in terms:
        if coef == 0.0:
            continue
        piece = t if coef == 1.0 else ad.scale(t, coef)
        out = piece if out is None else ad.add(out, piece)
    return out if out is not None else ad.scalar(0.0)


def recompute_total_gc(b: LossBreakdown, c: Coefficients, lambda_d: float) -> float:
    """Objective for G and C rebuilt from reported components, in training's summation order."""
    total = 0.0
    first = True
    for coef, value in ((1.0, b.l_c), (c.lambda_s, b.l_s_r), (c.lambda_t, b.l_t_r),
                        (lambda_d, b.l_adv), (c.lambda_r, b.l_adv_r)):
        if coef == 0.0:
            continue
        piece = value if coef == 1.0 else value * coef
        total = piece if first else total + piece
        first = False
    return total
