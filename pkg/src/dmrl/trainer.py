"""Alternating adversarial training with dual mixup regularization.

Each iteration draws one mixing coefficient, mixes source and target batches
within their own domain, then runs two independent forward/backward passes:
the discriminator ascends ``lambda_d * L_adv + lambda_r * L_adv_mix`` and
afterwards the feature extractor and classifier descend the full objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .datasets import DomainDataset, cycle_batches, make_batches
from .errors import ConfigurationError, ContractError, NonFiniteLossError
from .mixup import BetaSampler, mix_inputs, mix_labels, one_hot
from .models import ModelParams
from .objectives import (
    Coefficients,
    HyperParams,
    LossBreakdown,
    apply_variant,
    loss_adversarial,
    loss_adversarial_mixup,
    loss_classification,
    loss_source_mixup,
    loss_target_mixup,
    weighted_sum,
)

logger = logging.getLogger(__name__)

GC_PREFIXES = ("G.", "C.")
D_PREFIXES = ("D.",)


def lr_schedule(p: float, eta0: float = 0.01, theta: float = 10.0, beta: float = 0.75) -> float:
    """eta0 / (1 + theta * p) ** beta."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"training progress must lie in [0, 1], got {p}")
    return eta0 / (1.0 + theta * p) ** beta


def lambda_d_schedule(p: float, delta: float = 10.0) -> float:
    """(1 - exp(-delta p)) / (1 + exp(-delta p)), rising from 0 toward 1."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"training progress must lie in [0, 1], got {p}")
    e = math.exp(-delta * p)
    return (1.0 - e) / (1.0 + e)


def sgd_momentum_step(params: dict[str, ad.Tensor], buffers: dict[str, np.ndarray], eta: float,
                      momentum: float = 0.9, direction: str = "descend") -> None:
    """buffer <- momentum * buffer + grad;  param <- param -/+ eta * buffer."""
    if direction not in ("ascend", "descend"):
        raise ContractError(f"direction must be 'ascend' or 'descend', got {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name}")
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = momentum * buf + p.grad
        buffers[name] = buf
        p.data = p.data + sign * eta * buf


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for the init, shuffle and mixup streams of one run."""
    children = np.random.SeedSequence(seed).spawn(4)
    keys = ("init", "source", "target", "mixup")
    return {k: int(c.generate_state(1)[0]) for k, c in zip(keys, children)}


@dataclass
class TrainState:
    step: int = 0
    total_steps: int = 1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    sampler: BetaSampler | None = None
    perm_rng: np.random.Generator | None = None
    last_lambda: float = float("nan")

    @property
    def p(self) -> float:
        return min(1.0, self.step / self.total_steps) if self.total_steps else 0.0


@dataclass
class StepRecord:
    step: int
    p: float
    eta_p: float
    lambda_d: float
    lam: float
    breakdown: LossBreakdown


@dataclass
class EpochRecord:
    epoch: int
    p: float
    eta_p: float
    lambda_d: float
    l_c: float
    l_s_r: float
    l_t_r: float
    l_adv: float
    l_adv_r: float
    source_accuracy: float
    target_accuracy: float


@dataclass
class RunMetrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def final_target_accuracy(self) -> float:
        return self.epochs[-1].target_accuracy if self.epochs else float("nan")

    def best_target_accuracy(self) -> float:
        return max((r.target_accuracy for r in self.epochs), default=float("nan"))

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.epochs]


def _forward_probs(params: ModelParams, x) -> tuple[ad.Tensor, ad.Tensor]:
    f = models.features(params, ad.as_tensor(x))
    return f, models.classify(params, f)


def _check_finite(step: int, parts: dict[str, ad.Tensor]) -> None:
    bad = [k for k, v in parts.items() if not ad.is_finite(v)]
    if bad:
        diag = {"step": step, **{k: float(v.item()) for k, v in parts.items()}}
        raise NonFiniteLossError(f"non-finite loss at step {step}: {', '.join(bad)}", diag)


def train_iteration(state: TrainState, params: ModelParams, hp: HyperParams, source_batch, target_batch,
                    lam: float | None = None) -> LossBreakdown:
    """One iteration: sample lambda, mix, ascend D, then descend G and C.

    ``source_batch`` is ``(x_s, y_s)`` with integer labels; ``target_batch``
    is ``x_t``.  Passing ``lam`` bypasses the Beta sampler.
    """
    x_s, y_s = source_batch
    x_t = target_batch
    n = len(x_s)
    if len(x_t) != n or len(y_s) != n:
        raise ContractError(f"source batch has {n} samples, target batch {len(x_t)}, labels {len(y_s)}")
    k = params.arch.num_classes
    coef = apply_variant(hp)
    p = state.p
    eta = lr_schedule(p, hp.eta0, hp.theta, hp.beta_exp)
    lambda_d = coef.lambda_d * lambda_d_schedule(p, hp.delta)

    if lam is None:
        lam = state.sampler.sample()
    state.last_lambda = lam
    perm_s = state.perm_rng.permutation(n)
    perm_t = state.perm_rng.permutation(n)
    y_onehot = one_hot(y_s, k)
    xm_s = mix_inputs(x_s, perm_s, lam)
    ym_s = mix_labels(y_onehot, perm_s, lam)
    xm_t = mix_inputs(x_t, perm_t, lam)
    x_s, x_t = ad.Tensor(x_s), ad.Tensor(x_t)

    # phase D: ascend lambda_d * L_adv + lambda_r * L_adv_mix w.r.t. D only
    params.zero_grad()
    d_terms = []
    if lambda_d != 0.0:
        d_terms.append((lambda_d, loss_adversarial(
            models.discriminate(params, models.features(params, x_s)),
            models.discriminate(params, models.features(params, x_t)))))
    if coef.lambda_r != 0.0:
        d_terms.append((coef.lambda_r, loss_adversarial_mixup(
            models.discriminate(params, models.features(params, xm_s)),
            models.discriminate(params, models.features(params, xm_t)))))
    if d_terms:
        l_d = weighted_sum(d_terms)
        _check_finite(state.step, {"l_D": l_d})
        ad.backward(l_d)
        d_params = params.group("D.")
        for t in d_params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        sgd_momentum_step(d_params, state.buffers, eta, hp.momentum, "ascend")
    params.zero_grad()

    # phase G,C: fresh forward of all four batch kinds, descend the full objective
    f_s, probs_s = _forward_probs(params, x_s)
    f_t, probs_t = _forward_probs(params, x_t)
    f_ms, probs_ms = _forward_probs(params, xm_s)
    f_mt, probs_mt = _forward_probs(params, xm_t)
    pl_i = probs_t.detach() if hp.detach_pseudo_labels else probs_t
    pl_j = ad.Tensor(pl_i.data[perm_t]) if hp.detach_pseudo_labels else _gather_rows(pl_i, perm_t)

    l_c = loss_classification(probs_s, y_onehot)
    l_s_r = loss_source_mixup(probs_ms, ym_s)
    l_t_r = loss_target_mixup(probs_mt, pl_i, pl_j, lam, hp.penalty)
    l_adv = loss_adversarial(models.discriminate(params, f_s), models.discriminate(params, f_t))
    l_adv_r = loss_adversarial_mixup(models.discriminate(params, f_ms), models.discriminate(params, f_mt))
    parts = {"l_c": l_c, "l_s_r": l_s_r, "l_t_r": l_t_r, "l_adv": l_adv, "l_adv_r": l_adv_r}
    _check_finite(state.step, parts)

    total_gc = weighted_sum([(1.0, l_c), (coef.lambda_s, l_s_r), (coef.lambda_t, l_t_r),
                             (lambda_d, l_adv), (coef.lambda_r, l_adv_r)])
    total_d = weighted_sum([(lambda_d, l_adv), (coef.lambda_r, l_adv_r)])
    ad.backward(total_gc)
    gc_params = {n_: t for n_, t in params.tensors.items() if n_.startswith(GC_PREFIXES)}
    for t in gc_params.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    sgd_momentum_step(gc_params, state.buffers, eta, hp.momentum, "descend")
    params.zero_grad()

    state.step += 1
    return LossBreakdown(l_c.item(), l_s_r.item(), l_t_r.item(), l_adv.item(), l_adv_r.item(),
                         total_gc.item(), total_d.item(),
                         Coefficients(coef.lambda_s, coef.lambda_t, coef.lambda_r, lambda_d))


def _gather_rows(t: ad.Tensor, perm) -> ad.Tensor:
    # differentiable row gather, only needed when pseudo-labels are not detached
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return ad.Tensor._from_op(t.data[perm], "gather_rows", (t,), lambda g: (g[inv],))


def accuracy(params: ModelParams, ds: DomainDataset) -> float:
    if ds.labels is None:
        raise ConfigurationError("accuracy needs a labeled dataset")
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(models.predict(params, ds.images) == ds.labels))


@dataclass
class RunData:
    source_train: DomainDataset
    target_train: DomainDataset
    source_eval: DomainDataset
    target_eval: DomainDataset


def iterations_per_epoch(data: RunData, batch_size: int) -> int:
    return min(len(data.source_train), len(data.target_train)) // batch_size


def train(arch: models.Architecture, hp: HyperParams, data: RunData, seed: int = 0,
          log_steps: bool = False, params: ModelParams | None = None) -> tuple[ModelParams, RunMetrics]:
    """Run ``hp.epochs`` epochs; returns final parameters and per-epoch metrics."""
    hp.validate()
    if len(data.source_train) == 0 or len(data.target_train) == 0:
        raise ConfigurationError("source and target training sets must be nonempty")
    if data.source_train.labels is None:
        raise ConfigurationError("source training data must be labeled")
    per_epoch = iterations_per_epoch(data, hp.batch_size)
    if per_epoch == 0:
        raise ConfigurationError(f"batch size {hp.batch_size} exceeds the smaller training set")
    seeds = derive_seeds(seed)
    if params is None:
        params = models.build(arch, seeds["init"])
    mix_rng = np.random.default_rng(seeds["mixup"])
    state = TrainState(total_steps=hp.epochs * per_epoch,
                       sampler=BetaSampler(hp.alpha, mix_rng), perm_rng=mix_rng)
    metrics = RunMetrics()
    target_stream = cycle_batches(data.target_train, hp.batch_size, seeds["target"])
    for epoch in range(hp.epochs):
        sums = dict.fromkeys(("l_c", "l_s_r", "l_t_r", "l_adv", "l_adv_r"), 0.0)
        count = 0
        last = (0.0, 0.0, 0.0)
        for batch in make_batches(data.source_train, hp.batch_size, seeds["source"], epoch):
            if count == per_epoch:
                break
            p, eta = state.p, lr_schedule(state.p, hp.eta0, hp.theta, hp.beta_exp)
            tb = next(target_stream)
            b = train_iteration(state, params, hp, (batch.x, batch.y), tb.x)
            last = (p, eta, b.coefficients.lambda_d)
            for key, value in b.components().items():
                sums[key] += value
            count += 1
            if log_steps:
                metrics.steps.append(StepRecord(state.step - 1, p, eta, b.coefficients.lambda_d, state.last_lambda, b))
        rec = EpochRecord(epoch + 1, *last, *(sums[k] / max(count, 1) for k in sums),
                          accuracy(params, data.source_eval), accuracy(params, data.target_eval))
        metrics.epochs.append(rec)
        logger.info("epoch %d: l_c=%.4f l_adv=%.4f src=%.3f tgt=%.3f", rec.epoch, rec.l_c, rec.l_adv,
                    rec.source_accuracy, rec.target_accuracy)
    metrics.summary = {
        "epochs": hp.epochs,
        "iterations": state.step,
        "final_source_accuracy": metrics.epochs[-1].source_accuracy if metrics.epochs else None,
        "final_target_accuracy": metrics.epochs[-1].target_accuracy if metrics.epochs else None,
        "best_target_accuracy": metrics.best_target_accuracy() if metrics.epochs else None,
    }
    return params, metrics
