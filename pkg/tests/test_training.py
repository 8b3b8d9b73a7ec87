"""Losses, scheduler, optimizer arithmetic, parameter averaging, and the
determinism of the training loops."""

import math

import numpy as np
import pytest

import interbert.numerics as nt
from interbert.data import synth_corpus
from interbert.masking import MaskingConfig
from interbert.model import InterBert, ModelConfig
from interbert.negatives import build_hard_negative_table, build_tfidf
from interbert.numerics import NumericsError, ParameterSet, Tensor, backward, finite_diff_check
from interbert.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    ema_update,
    finetune_retrieval,
    itm_loss,
    lr_at,
    mrm_loss,
    msm_loss,
    pretrain,
    total_loss,
)


def toy_model_config(corpus, **overrides):
    base = dict(
        hidden_size=16,
        num_heads=2,
        ffn_size=32,
        num_interaction_layers=1,
        num_extraction_layers=1,
        vocab_size=corpus.vocab.size,
        object_feature_dim=corpus.pairs[0].features.shape[1],
        max_text_len=16,
        max_objects=8,
        num_object_classes=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_msm_loss_no_masks_is_zero(rng):
    logits = Tensor(rng.normal(size=(4, 9)))
    targets = np.full(4, -1)
    assert msm_loss([logits], [targets]).item() == 0.0
    assert msm_loss([], []).item() == 0.0


def test_msm_loss_uniform_logits():
    vocab = 200
    logits = Tensor(np.zeros((3, vocab)))
    loss = msm_loss([logits], [np.array([5, -1, 17])])
    assert abs(loss.item() - math.log(vocab)) < 1e-12


def test_msm_loss_hand_two_positions():
    # two masked rows: [2, 0] target 0 and [0, 1] target 1
    logits = Tensor(np.array([[2.0, 0.0], [0.0, 1.0]]))
    loss = msm_loss([logits], [np.array([0, 1])])
    want = 0.5 * (math.log(1 + math.exp(-2.0)) + math.log(1 + math.exp(-1.0)))
    assert abs(loss.item() - want) < 1e-12


def test_msm_loss_spans_samples(rng):
    a = Tensor(rng.normal(size=(2, 5)))
    b = Tensor(rng.normal(size=(3, 5)))
    merged = msm_loss([a, b], [np.array([1, -1]), np.array([-1, 2, -1])])
    joined = msm_loss([nt.concat([a, b], axis=0)], [np.array([1, -1, -1, 2, -1])])
    assert abs(merged.item() - joined.item()) < 1e-12


def test_mrm_loss_uniform_over_33_classes():
    logits = Tensor(np.zeros((4, 33)))
    loss = mrm_loss([logits], [np.array([0, 7, -1, 32])])
    assert abs(loss.item() - math.log(33.0)) < 1e-12


def test_itm_loss_values():
    assert abs(itm_loss(Tensor(np.zeros(2)), [0.0, 1.0]).item() - math.log(2.0)) < 1e-12
    assert itm_loss(Tensor(np.array([20.0])), [1.0]).item() < 1e-8
    assert abs(itm_loss(Tensor(np.array([1.0])), [0.0]).item() - math.log(1 + math.e)) < 1e-12


def test_total_loss_weighting(rng):
    msm = Tensor(2.0)
    mrm = Tensor(3.0)
    itm = Tensor(4.0)
    assert total_loss(msm, mrm, itm, (1.0, 1.0, 1.0)).item() == 9.0
    assert total_loss(msm, mrm, itm, (1.0, 0.0, 0.0)).item() == 2.0

    ps = ParameterSet()
    p = ps.add("p", Tensor([1.0]))
    loss = total_loss(nt.sum_all(p), nt.sum_all(nt.mul(p, p)), nt.sum_all(p), (0.0, 0.0, 0.0))
    assert loss.item() == 0.0
    backward(loss, ps)
    np.testing.assert_array_equal(p.grad, [0.0])


def test_total_loss_gradient_matches_finite_differences(rng):
    ps = ParameterSet()
    ps.add("a", Tensor(rng.normal(size=(3, 4))))
    ps.add("b", Tensor(rng.normal(size=(4,))))

    def loss_fn():
        msm = nt.cross_entropy_logits(ps["a"], [1, -1, 3])
        mrm = nt.sum_all(nt.mul(ps["b"], ps["b"]))
        itm = nt.binary_cross_entropy_logits(ps["b"], [1.0, 0.0, 1.0, 0.0])
        return total_loss(msm, mrm, itm, (1.0, 1.0, 1.0))

    assert finite_diff_check(loss_fn, ps, step=1e-5, sample_count=16, seed=3) < 1e-6


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_exact_endpoints():
    lr = 1e-4
    assert lr_at(0, lr, 100, 500) == 0.0
    assert lr_at(100, lr, 100, 500) == lr
    assert lr_at(500, lr, 100, 500) == 0.0


def test_lr_schedule_piecewise_linear():
    lr, warmup, total = 3e-4, 50, 400
    warm_deltas = {lr_at(s + 1, lr, warmup, total) - lr_at(s, lr, warmup, total) for s in range(warmup)}
    decay_deltas = {round(lr_at(s + 1, lr, warmup, total) - lr_at(s, lr, warmup, total), 18)
                    for s in range(warmup, total)}
    assert max(warm_deltas) - min(warm_deltas) < 1e-18
    assert len(decay_deltas) == 1


def test_lr_schedule_bounds():
    with pytest.raises(ValueError):
        lr_at(-1, 1e-4, 10, 100)
    with pytest.raises(ValueError):
        lr_at(101, 1e-4, 10, 100)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_zero_decay_is_identity():
    ps = ParameterSet()
    p = ps.add("p", Tensor([1.0, -2.0]))
    p.grad = np.zeros(2)
    state = AdamWState.for_params(ps)
    adamw_step(ps, state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.values, [1.0, -2.0])


def test_adamw_hand_computed_single_step():
    # p=1, g=1, lr=0.1, beta1=0.9, beta2=0.9999, eps=1e-6, no decay:
    # m_hat = v_hat = 1 after bias correction, so p <- 1 - 0.1 / (1 + 1e-6)
    ps = ParameterSet()
    p = ps.add("p", Tensor([1.0]))
    p.grad = np.array([1.0])
    state = AdamWState.for_params(ps)
    adamw_step(ps, state, lr=0.1, beta1=0.9, beta2=0.9999, eps=1e-6, weight_decay=0.0)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-6))
    assert abs(p.values[0] - expected) < 1e-12


def test_adamw_decay_shrinks_toward_zero():
    ps = ParameterSet()
    p = ps.add("w", Tensor(np.full((2, 2), 3.0)))
    p.grad = np.zeros((2, 2))
    state = AdamWState.for_params(ps)
    adamw_step(ps, state, lr=0.1, weight_decay=0.5)
    assert np.all(p.values < 3.0) and np.all(p.values > 0.0)


def test_adamw_decay_skips_rank_one_params():
    ps = ParameterSet()
    w = ps.add("w", Tensor(np.full((2, 2), 3.0)))
    b = ps.add("b", Tensor(np.full(2, 3.0)))
    for t in (w, b):
        t.grad = np.zeros_like(t.values)
    adamw_step(ps, AdamWState.for_params(ps), lr=0.1, weight_decay=0.5)
    assert np.all(w.values < 3.0)
    np.testing.assert_array_equal(b.values, [3.0, 3.0])


def test_adamw_first_update_opposes_gradient(rng):
    ps = ParameterSet()
    for i in range(3):
        ps.add(f"p{i}", Tensor(rng.normal(size=(4, 4))))
    grads = {}
    for name, p in ps.items():
        p.grad = rng.normal(size=p.values.shape)
        grads[name] = p.grad.copy()
    before = ps.clone_values()
    adamw_step(ps, AdamWState.for_params(ps), lr=0.01, weight_decay=0.0)
    for name, p in ps.items():
        step = p.values - before[name]
        assert float((step * grads[name]).sum()) < 0.0


def test_adamw_missing_or_nan_grad_raises():
    ps = ParameterSet()
    p = ps.add("p", Tensor([1.0]))
    with pytest.raises(NumericsError):
        adamw_step(ps, AdamWState.for_params(ps), lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericsError, match="p"):
        adamw_step(ps, AdamWState.for_params(ps), lr=0.1)


def test_ema_update_cases():
    ps = ParameterSet()
    p = ps.add("p", Tensor([2.0, 4.0]))
    shadow = {"p": np.zeros(2)}
    ema_update(shadow, ps, rate=0.0)
    np.testing.assert_array_equal(shadow["p"], [2.0, 4.0])

    shadow = {"p": np.array([1.0, 1.0])}
    ema_update(shadow, ps, rate=1.0)
    np.testing.assert_array_equal(shadow["p"], [1.0, 1.0])

    # two hand steps of the scalar recurrence s <- 0.9 s + 0.1 p
    shadow = {"p": np.array([0.0, 0.0])}
    ema_update(shadow, ps, rate=0.9)
    ema_update(shadow, ps, rate=0.9)
    want = 0.9 * (0.1 * np.array([2.0, 4.0])) + 0.1 * np.array([2.0, 4.0])
    np.testing.assert_allclose(shadow["p"], want, atol=1e-15)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_train_config_round_trip():
    cfg = TrainConfig(total_steps=50, warmup_steps=10, masking=MaskingConfig(anchor_prob=0.2))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=5).validate()


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def small_fixture():
    corpus = synth_corpus(seed=12, num_images=10, num_classes=6, feature_dim=8)
    table = build_hard_negative_table(build_tfidf(corpus))
    model_cfg = toy_model_config(corpus, num_object_classes=6)
    return corpus, table, model_cfg


def test_zero_step_size_leaves_params_unchanged():
    # the schedule's endpoints produce a step size of exactly 0; applying
    # such steps must leave every parameter bit-identical even though the
    # optimizer moments keep updating
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=3, warmup_steps=1, batch_size=4, seed=1)
    model = InterBert.create(model_cfg, seed=1)
    before = model.params.clone_values()
    state = AdamWState.for_params(model.params)
    gen = np.random.default_rng(1)
    from interbert.negatives import make_itm_batch
    from interbert.training.loop import _batch_losses

    for _ in range(3):
        batch = make_itm_batch(corpus, table, gen, 4, train_cfg.masking)
        l_msm, l_mrm, l_itm, _ = _batch_losses(model, batch, train_cfg)
        loss = total_loss(l_msm, l_mrm, l_itm)
        model.params.zero_grad()
        backward(loss, model.params)
        adamw_step(model.params, state, lr=0.0)
    for name, values in model.params.clone_values().items():
        np.testing.assert_array_equal(values, before[name])


def test_pretrain_deterministic_twin_runs():
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=4, warmup_steps=1, batch_size=4, seed=7)
    a = pretrain(corpus, table, model_cfg, train_cfg)
    b = pretrain(corpus, table, model_cfg, train_cfg)
    assert [m.total for m in a.metrics] == [m.total for m in b.metrics]
    for name, values in a.model.params.clone_values().items():
        np.testing.assert_array_equal(values, b.model.params[name].values)


def test_pretrain_loss_decreases_on_easy_fixture():
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=30, warmup_steps=5, batch_size=6,
                            learning_rate=2e-3, seed=3)
    result = pretrain(corpus, table, model_cfg, train_cfg)
    assert result.metrics[-1].total < result.metrics[0].total


def test_pretrain_metrics_rows_complete():
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=3, warmup_steps=1, batch_size=4, seed=5)
    result = pretrain(corpus, table, model_cfg, train_cfg)
    assert [m.step for m in result.metrics] == [1, 2, 3]
    for m in result.metrics:
        assert np.isfinite([m.lr, m.msm_loss, m.mrm_loss, m.itm_loss, m.total, m.itm_acc]).all()


def test_pretrain_single_precision_opt_in():
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=2, warmup_steps=1, batch_size=4, seed=1,
                            precision="float32")
    result = pretrain(corpus, table, model_cfg, train_cfg)
    assert result.model.params["heads.itm.w1"].values.dtype == np.float32
    assert all(np.isfinite(m.total) for m in result.metrics)


def test_pretrain_unmasked_itm_flag_runs():
    corpus, table, model_cfg = small_fixture()
    train_cfg = TrainConfig(total_steps=2, warmup_steps=1, batch_size=4, seed=5,
                            itm_on_masked=False, mgm_on_negatives=True)
    result = pretrain(corpus, table, model_cfg, train_cfg)
    assert len(result.metrics) == 2


def test_finetune_runs_and_tracks_ema():
    corpus, table, model_cfg = small_fixture()
    pre_cfg = TrainConfig(total_steps=3, warmup_steps=1, batch_size=4, seed=2)
    pre = pretrain(corpus, table, model_cfg, pre_cfg)
    fine_cfg = TrainConfig(total_steps=4, warmup_steps=1, batch_size=3, seed=2, ema_rate=0.5)
    fine = finetune_retrieval(corpus, model_cfg, fine_cfg, pre.model.params.clone_values())
    assert len(fine.metrics) == 4
    # EMA weights differ from raw after updates but have the same shapes
    raw = fine.model.params.clone_values()
    moved = [name for name in raw if not np.array_equal(raw[name], fine.ema_values[name])]
    assert moved
    for name in raw:
        assert raw[name].shape == fine.ema_values[name].shape


def test_finetune_distractors_never_equal_positive():
    corpus, table, model_cfg = small_fixture()
    # structural property of the sampling pool; exercised via a short run
    fine_cfg = TrainConfig(total_steps=2, warmup_steps=1, batch_size=2, seed=9)
    from interbert.model import init_parameters

    fine = finetune_retrieval(corpus, model_cfg, fine_cfg,
                              init_parameters(model_cfg, seed=0).clone_values())
    assert len(fine.metrics) == 2


def test_finetune_needs_enough_images():
    corpus = synth_corpus(seed=1, num_images=3, num_classes=6, feature_dim=8)
    model_cfg = toy_model_config(corpus, num_object_classes=6)
    cfg = TrainConfig(total_steps=1, warmup_steps=0, batch_size=2)
    from interbert.model import init_parameters

    with pytest.raises(ValueError):
        finetune_retrieval(corpus, model_cfg, cfg, init_parameters(model_cfg, seed=0).clone_values())
