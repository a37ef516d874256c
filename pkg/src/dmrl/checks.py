"""Finite-difference verification of every loss term on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import GradCheckReport, Tensor, finite_diff_report
from .mixup import BetaSampler, mix_inputs, mix_labels, one_hot
from .objectives import (
    HyperParams,
    loss_adversarial,
    loss_adversarial_mixup,
    loss_classification,
    loss_source_mixup,
    loss_target_mixup,
    weighted_sum,
)
from .trainer import lambda_d_schedule

TOLERANCE = 1e-4
# composite losses carry ~1e-9 gradients on some coordinates; at h=1e-5 the
# central difference is dominated by round-off there
DEFAULT_STEP = 1e-4
TERMS = ("l_c", "l_s_r", "l_t_r", "l_adv", "l_adv_r", "total_gc", "total_d")


def tiny_architecture(kind: str = "mlp") -> models.Architecture:
    if kind == "mlp":
        return models.Architecture(kind="mlp", input_shape=(2,), feature_dim=4, num_classes=3,
                                   hidden=(5,), disc_hidden=5)
    if kind == "lenet_like":
        return models.Architecture(kind="lenet_like", input_shape=(1, 10, 10), feature_dim=4, num_classes=3,
                                   disc_hidden=5, conv_channels=(2, 3), kernel=3)
    raise ValueError(f"unknown architecture kind {kind!r}")


@dataclass
class TermCheck:
    term: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.max_relative_error < TOLERANCE


def _derangement(rng, n: int) -> np.ndarray:
    # pair every sample with a different one so no mixed term degenerates
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, 1)
    return perm


def term_functions(params: models.ModelParams, seed: int, n: int = 4, hp: HyperParams | None = None):
    """Closures evaluating each loss term for one frozen batch, lambda and pairing."""
    hp = hp or HyperParams()
    arch = params.arch
    rng = np.random.default_rng(seed)
    shape = (n, *arch.input_shape)
    # inputs spread wide enough that h is visibly nonlinear between samples
    x_s = rng.normal(0.0, 2.0, shape)
    x_t = rng.normal(0.5, 2.0, shape)
    y = one_hot(rng.integers(0, arch.num_classes, n), arch.num_classes)
    lam = BetaSampler(hp.alpha, rng).sample()
    perm_s, perm_t = _derangement(rng, n), _derangement(rng, n)
    xm_s, xm_t = mix_inputs(x_s, perm_s, lam), mix_inputs(x_t, perm_t, lam)
    ym_s = mix_labels(y, perm_s, lam)
    lambda_d = lambda_d_schedule(0.5, hp.delta)
    xs, xt = Tensor(x_s), Tensor(x_t)

    def h(x):
        return models.classify(params, models.features(params, x))

    def d(x):
        return models.discriminate(params, models.features(params, x))

    # pseudo-labels are constants: freeze them at the unperturbed parameters
    pl = h(xt).detach()
    pl_i, pl_j = pl, Tensor(pl.data[perm_t])

    fns = {
        "l_c": lambda: loss_classification(h(xs), y),
        "l_s_r": lambda: loss_source_mixup(h(xm_s), ym_s),
        "l_t_r": lambda: loss_target_mixup(h(xm_t), pl_i, pl_j, lam, hp.penalty),
        "l_adv": lambda: loss_adversarial(d(xs), d(xt)),
        "l_adv_r": lambda: loss_adversarial_mixup(d(xm_s), d(xm_t)),
    }
    fns["total_gc"] = lambda: weighted_sum([(1.0, fns["l_c"]()), (hp.lambda_s, fns["l_s_r"]()),
                                            (hp.lambda_t, fns["l_t_r"]()), (lambda_d, fns["l_adv"]()),
                                            (hp.lambda_r, fns["l_adv_r"]())])
    fns["total_d"] = lambda: weighted_sum([(lambda_d, fns["l_adv"]()), (hp.lambda_r, fns["l_adv_r"]())])
    return fns


def gradcheck_terms(kind: str = "mlp", seed: int = 0, h: float = DEFAULT_STEP) -> list[TermCheck]:
    params = models.build(tiny_architecture(kind), seed)
    fns = term_functions(params, seed)
    return [TermCheck(term, finite_diff_report(fns[term], params.tensors, h=h)) for term in TERMS]


# ---------------------------------------------------------------------------
# per-primitive checks, used to localize a failing term


def _probe(out: Tensor, w: np.ndarray) -> Tensor:
    # scalar projection <out, w>; tagged separately so fault injection leaves it intact
    return Tensor._from_op(np.array((out.data * w).sum()), "probe", (out,), lambda g: (g * w,))


def _primitive_cases(rng):
    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    m1, m2 = t(3, 4), t(4, 2)
    bias = t(4)
    img, ker, kb = t(2, 2, 6, 6), t(3, 2, 3, 3), t(3)
    pos = t(3, 4, lo=0.5, hi=2.0)
    return {
        "add": ((a, b), lambda: ad.add(a, b)),
        "sub": ((a, b), lambda: ad.sub(a, b)),
        "mul": ((a, b), lambda: ad.mul(a, b)),
        "scale": ((a,), lambda: ad.scale(a, 1.7)),
        "add_scalar": ((a,), lambda: ad.add_scalar(a, 0.3)),
        "neg": ((a,), lambda: ad.neg(a)),
        "relu": ((a,), lambda: ad.relu(a)),
        "exp": ((a,), lambda: ad.exp(a)),
        "log": ((pos,), lambda: ad.log(pos)),
        "abs": ((a,), lambda: ad.absolute(a)),
        "sigmoid": ((a,), lambda: ad.sigmoid(a)),
        "clamp": ((a,), lambda: ad.clamp(a, -0.5, 0.5)),
        "sum": ((a,), lambda: ad.total(a)),
        "sum_axis": ((a,), lambda: ad.sum_axis(a, 1)),
        "mean": ((a,), lambda: ad.mean(a)),
        "mean_axis": ((a,), lambda: ad.mean(a, 0)),
        "reshape": ((a,), lambda: ad.reshape(a, (4, 3))),
        "matmul": ((m1, m2), lambda: ad.matmul(m1, m2)),
        "add_bias": ((a, bias), lambda: ad.add_bias(a, bias)),
        "conv2d": ((img, ker, kb), lambda: ad.conv2d(img, ker, kb)),
        "maxpool2": ((img,), lambda: ad.maxpool2(img)),
        "log_softmax": ((a,), lambda: ad.log_softmax(a)),
    }


def check_primitives(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of every primitive op on random inputs."""
    rng = np.random.default_rng(seed)
    errors = {}
    for op, (inputs, fn) in _primitive_cases(rng).items():
        w = rng.standard_normal(fn().shape)
        params = {f"in{i}": x for i, x in enumerate(inputs)}
        errors[op] = finite_diff_report(lambda: _probe(fn(), w), params).max_relative_error
    return errors
