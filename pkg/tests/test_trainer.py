import math

import numpy as np
import pytest

import reference_dann
from dmrl import autodiff as ad
from dmrl import models, trainer
from dmrl.autodiff import Tensor
from dmrl.datasets import SynthSpec, generate_synthetic
from dmrl.errors import ConfigurationError, ContractError, NonFiniteLossError
from dmrl.mixup import BetaSampler
from dmrl.objectives import VARIANTS, HyperParams, recompute_total_gc
from dmrl.trainer import (
    RunData,
    TrainState,
    lambda_d_schedule,
    lr_schedule,
    sgd_momentum_step,
    train,
    train_iteration,
)

SMALL = models.Architecture(hidden=(16,), feature_dim=8, disc_hidden=16)


def small_data(per_class=30, seed=0):
    spec = SynthSpec(per_class=per_class, seed=seed)
    s, t = generate_synthetic(spec)
    se, te = generate_synthetic(spec, "eval")
    return RunData(s, t, se, te)


def fresh_state(seed=0, total=10):
    rng = np.random.default_rng(seed)
    return TrainState(total_steps=total, sampler=BetaSampler(0.2, rng), perm_rng=rng)


def batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, 2)), rng.integers(0, 3, n)), rng.normal(0.5, 1.0, size=(n, 2))


# --- schedules -----------------------------------------------------------------


def test_lr_schedule_values():
    assert lr_schedule(0.0) == 0.01
    assert lr_schedule(1.0) == pytest.approx(0.0016556, abs=1e-7)
    assert lr_schedule(0.1) == pytest.approx(0.0059460, abs=1e-7)


def test_lambda_d_schedule_values():
    assert lambda_d_schedule(0.0) == 0.0
    assert lambda_d_schedule(0.5) == pytest.approx(0.986614, abs=1e-6)
    assert lambda_d_schedule(1.0) == pytest.approx(0.999909, abs=1e-6)


@pytest.mark.parametrize("p", [-0.01, 1.01, math.nan])
def test_schedules_reject_out_of_range(p):
    with pytest.raises(ContractError):
        lr_schedule(p)
    with pytest.raises(ContractError):
        lambda_d_schedule(p)


# --- SGD with momentum ----------------------------------------------------------


def param(value, grad):
    t = Tensor(np.array(value, dtype=float), requires_grad=True)
    t.grad = np.array(grad, dtype=float)
    return t


def test_sgd_zero_gradient_is_noop():
    t = param([1.0, -2.0], [0.0, 0.0])
    sgd_momentum_step({"w": t}, {}, 0.1, 0.9, "descend")
    np.testing.assert_array_equal(t.data, [1.0, -2.0])


def test_sgd_plain_step():
    t = param([1.0, -2.0], [0.5, 0.25])
    sgd_momentum_step({"w": t}, {}, 0.1, 0.0, "descend")
    np.testing.assert_array_equal(t.data, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25])
    t.grad = np.array([0.5, 0.25])
    sgd_momentum_step({"w": t}, {}, 0.1, 0.0, "ascend")
    np.testing.assert_allclose(t.data, [1.0, -2.0], atol=1e-15)


def test_sgd_two_momentum_steps():
    g = np.array([0.3, -0.2])
    t = param([0.0, 0.0], g)
    buffers = {}
    sgd_momentum_step({"w": t}, buffers, 0.01, 0.9, "descend")
    t.grad = g.copy()
    sgd_momentum_step({"w": t}, buffers, 0.01, 0.9, "descend")
    np.testing.assert_allclose(t.data, -0.01 * (g + 1.9 * g), atol=1e-15)
    assert buffers["w"].shape == t.shape


def test_sgd_missing_gradient():
    t = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError, match="w"):
        sgd_momentum_step({"w": t}, {}, 0.1)


# --- one iteration ---------------------------------------------------------------


def test_source_only_leaves_discriminator_alone():
    params = models.build(SMALL, 0)
    before = params.digest("D.")
    gc_before = params.digest("G.")
    src, tgt = batch()
    state = fresh_state(total=4)
    state.step = 2
    train_iteration(state, params, HyperParams(variant="source_only"), src, tgt)
    assert params.digest("D.") == before
    assert params.digest("G.") != gc_before


@pytest.mark.parametrize("variant", VARIANTS)
def test_phases_touch_only_their_parameters(monkeypatch, variant):
    params = models.build(SMALL, 1)
    calls = []
    real_step = trainer.sgd_momentum_step

    def spy(group, buffers, eta, momentum, direction):
        others = {n for n in params.names() if n not in group}
        before = {n: params[n].data.copy() for n in others}
        real_step(group, buffers, eta, momentum, direction)
        calls.append((direction, sorted({n.split(".")[0] for n in group})))
        for n in others:
            np.testing.assert_array_equal(params[n].data, before[n])

    monkeypatch.setattr(trainer, "sgd_momentum_step", spy)
    src, tgt = batch(seed=1)
    state = fresh_state(total=4)
    state.step = 1
    b = train_iteration(state, params, HyperParams(variant=variant), src, tgt)
    expected = [("descend", ["C", "G"])]
    if variant != "source_only":
        expected.insert(0, ("ascend", ["D"]))
    assert calls == expected
    assert all(np.isfinite(v) for v in b.components().values())


def test_breakdown_satisfies_decomposition():
    params = models.build(SMALL, 2)
    state = fresh_state(total=5)
    for step in range(5):
        src, tgt = batch(seed=step)
        b = train_iteration(state, params, HyperParams(lambda_t=0.1), src, tgt)
        assert abs(recompute_total_gc(b, b.coefficients, b.coefficients.lambda_d) - b.total_gc) <= 1e-12
        assert b.l_c >= 0 and b.l_s_r >= 0 and b.l_t_r >= 0


def test_dann_step_matches_reference_losses():
    params = models.build(SMALL, 3)
    ref = params.copy()
    (xs, ys), xt = batch(seed=3)
    state = fresh_state(total=4)
    state.step = 2
    b = train_iteration(state, params, HyperParams(variant="dann"), (xs, ys), xt, lam=0.3)

    # reference: discriminator ascent, then the classifier/adversarial losses
    ld, eta = lambda_d_schedule(0.5), lr_schedule(0.5)
    d_s = models.discriminate(ref, models.features(ref, Tensor(xs)))
    d_t = models.discriminate(ref, models.features(ref, Tensor(xt)))
    ad.backward(ad.scale(reference_dann.domain_loss(d_s, d_t), ld))
    for name in ref.names("D."):
        ref[name].data = ref[name].data + eta * ref[name].grad
    f_s, f_t = models.features(ref, Tensor(xs)), models.features(ref, Tensor(xt))
    assert b.l_c == reference_dann.cross_entropy(models.classify(ref, f_s), np.eye(3)[ys]).item()
    assert b.l_adv == reference_dann.domain_loss(models.discriminate(ref, f_s),
                                                 models.discriminate(ref, f_t)).item()


def test_batch_size_mismatch():
    params = models.build(SMALL, 0)
    (xs, ys), xt = batch(n=8)
    with pytest.raises(ContractError):
        train_iteration(fresh_state(), params, HyperParams(), (xs, ys), xt[:5])


def test_non_finite_loss_aborts_with_diagnostics():
    params = models.build(SMALL, 0)
    (xs, ys), xt = batch()
    xs[0, 0] = np.nan
    state = fresh_state(total=4)
    state.step = 2
    with pytest.raises(NonFiniteLossError) as info:
        train_iteration(state, params, HyperParams(), (xs, ys), xt)
    assert info.value.diagnostics["step"] == 2


# --- full runs ------------------------------------------------------------------------


def test_run_is_deterministic():
    data = small_data()
    hp = HyperParams(epochs=2, batch_size=16)
    a, ma = train(SMALL, hp, data, seed=5)
    b, mb = train(SMALL, hp, data, seed=5)
    assert models.checkpoint_bytes(a) == models.checkpoint_bytes(b)
    assert ma.as_rows() == mb.as_rows()
    c, _ = train(SMALL, hp, data, seed=6)
    assert models.checkpoint_bytes(c) != models.checkpoint_bytes(a)


def test_zero_epochs_returns_initial_params():
    data = small_data()
    params, metrics = train(SMALL, HyperParams(epochs=0), data, seed=0)
    init = models.build(SMALL, trainer.derive_seeds(0)["init"])
    assert params.digest() == init.digest()
    assert metrics.epochs == [] and metrics.steps == []


def test_iteration_count_and_lambda_d_trajectory():
    data = small_data(per_class=30)  # 90 samples, N=16 -> 5 iterations per epoch
    _, metrics = train(SMALL, HyperParams(epochs=3, batch_size=16), data, seed=0, log_steps=True)
    assert metrics.summary["iterations"] == 15 == len(metrics.steps)
    lds = [s.lambda_d for s in metrics.steps]
    assert lds[0] == 0.0 and all(b >= a for a, b in zip(lds, lds[1:]))
    ps = [s.p for s in metrics.steps]
    assert ps == [i / 15 for i in range(15)]
    assert [r.epoch for r in metrics.epochs] == [1, 2, 3]


def test_target_stream_is_independent_of_source_size():
    spec = SynthSpec(per_class=30)
    s, t = generate_synthetic(spec)
    se, te = generate_synthetic(spec, "eval")
    uneven = RunData(s, t.subset(50), se, te)
    _, metrics = train(SMALL, HyperParams(epochs=2, batch_size=16), uneven, seed=0)
    assert metrics.summary["iterations"] == 2 * (50 // 16)


def test_zero_regularizers_equal_dann_run():
    data = small_data()
    base = dict(epochs=2, batch_size=16)
    a, _ = train(SMALL, HyperParams(variant="dann", **base), data, seed=4)
    b, _ = train(SMALL, HyperParams(lambda_s=0.0, lambda_t=0.0, lambda_r=0.0, **base), data, seed=4)
    assert models.checkpoint_bytes(a) == models.checkpoint_bytes(b)


def test_dann_variant_matches_standalone_loop():
    data = small_data()
    params, _ = train(SMALL, HyperParams(variant="dann", epochs=2, batch_size=16), data, seed=7)
    ref = reference_dann.run(SMALL, data, seed=7, epochs=2, batch_size=16)
    assert params.digest() == ref.digest()


def test_empty_dataset_rejected():
    data = small_data()
    empty = RunData(data.source_train.subset(0), data.target_train, data.source_eval, data.target_eval)
    with pytest.raises(ConfigurationError):
        train(SMALL, HyperParams(epochs=1), empty)
