"""Trainer mechanics: loss algebra, routing, freezing, mixing, determinism."""

import numpy as np
import pytest

from synthvc import numerics as nm
from synthvc import streamlm as sl
from synthvc import synthworld as sw
from synthvc import trainer as tr
from synthvc.errors import ConfigError
from synthvc.optim import Adam, AdamConfig, grads_by_name


def make_state(ctx, seed=7401, lr=1e-3):
    params = tr.init_pipeline_params(ctx, seed)
    return tr.TrainState(params=params, opt=Adam(AdamConfig(lr=lr, warmup=10, clip=1.0)))


def stage_cfg(name, **kw):
    base = dict(steps=10, seed=1)
    base.update(kw)
    return tr.StageConfig(name=name, **base)


# ---------------------------------------------------------------------------
# loss formulas


def test_asr_loss_uniform_logits_is_log40():
    # L_ASR = CE(y_t, y_hat_t); uniform logits over the 40-entry text table
    logits = nm.constant(np.zeros((7, sw.TEXT_VOCAB), dtype=np.float32))
    loss = nm.cross_entropy(logits, np.arange(7) % 35)
    assert abs(loss.item() - np.log(40.0)) < 1e-6


def test_asr_loss_perfect_prediction_near_zero():
    logits = np.full((5, sw.TEXT_VOCAB), -30.0, dtype=np.float32)
    targets = [3, 1, 4, 1, 34]
    for i, t in enumerate(targets):
        logits[i, t] = 30.0
    loss = nm.cross_entropy(nm.constant(logits), targets)
    assert loss.item() < 1e-4


def test_vc_loss_formula_oracle():
    # direct formula evaluation: 0.3*2.0 + 0.7*(1.0*1.0 + 0.9*2.0) = 2.56
    stage = stage_cfg("vc", w=0.3, lambdas=(1.0, 0.9))
    ce_t = nm.constant(np.float32(2.0))
    ce_a = [nm.constant(np.float32(1.0)), nm.constant(np.float32(2.0))]
    loss = tr.combine_vc_loss(ce_t, ce_a, stage)
    assert abs(loss.item() - 2.56) < 1e-6


def test_vc_loss_w1_reduces_bitwise_to_text_ce():
    stage = stage_cfg("vc", w=1.0, lambdas=(1.0, 0.9, 0.8, 0.7))
    rng = np.random.default_rng(3)
    ce_t = nm.constant(np.float32(rng.uniform(0.5, 4.0)))
    ce_a = [nm.constant(np.float32(rng.uniform(0.5, 4.0))) for _ in range(4)]
    loss = tr.combine_vc_loss(ce_t, ce_a, stage)
    assert loss.item() == ce_t.item()


def test_vc_loss_w0_zero_grad_on_text_head(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("vc", w=0.0)
    rng = np.random.default_rng(5)
    batch = tr._sample_batch(ctx, rng, 3)
    tape = nm.Tape()
    with tape:
        loss, _, _ = tr._vc_pool_loss(ctx, state.params, batch, stage, rng)
    grads = grads_by_name(tape, state.params, tape.backward(loss))
    g = grads.get("lm.text_head.w")
    assert g is None or not np.any(g)


def test_loss_decomposition_matches_independent_recomputation(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("vc", w=0.5)
    rng = np.random.default_rng(11)
    for _ in range(10):
        batch = tr._sample_batch(ctx, rng, 4)
        res = tr.vc_step(batch, state, ctx, stage, rng)
        expected = stage.w * res.ce_text + (1 - stage.w) * sum(
            lam * ce for lam, ce in zip(stage.lambdas, res.ce_acoustic))
        assert abs(res.loss - expected) < 1e-6


# ---------------------------------------------------------------------------
# routing and freezing


def test_asr_step_no_speaker_adapter_gradient(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("asr")
    rng = np.random.default_rng(7)
    batch = tr._sample_batch(ctx, rng, 3)
    tape = nm.Tape()
    with tape:
        loss, _ = tr._asr_pool_loss(ctx, state.params, batch, stage, rng)
    grads = grads_by_name(tape, state.params, tape.backward(loss))
    assert not any(name.startswith("spk_adapter") for name in grads)
    assert any(name.startswith("sem_adapter") for name in grads)


def test_joint_all_asr_leaves_speaker_adapter_bits(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("joint", asr_fraction=1.0)
    rng = np.random.default_rng(9)
    before = {k: state.params[k].data.copy() for k in state.params
              if k.startswith("spk_adapter")}
    batch = tr._sample_batch(ctx, rng, 4)
    res = tr.joint_step(batch, state, ctx, stage, coin=rng)
    assert res.n_vc == 0 and res.n_asr == 4
    for k, v in before.items():
        assert np.array_equal(state.params[k].data, v)


def test_joint_all_vc_reduces_to_vc_path(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("joint", asr_fraction=0.0, w_prime=0.2)
    rng = np.random.default_rng(13)
    batch = tr._sample_batch(ctx, rng, 4)
    res = tr.joint_step(batch, state, ctx, stage, coin=rng)
    assert res.n_asr == 0 and res.n_vc == 4
    vc_part = stage.w * res.ce_text + (1 - stage.w) * sum(
        lam * ce for lam, ce in zip(stage.lambdas, res.ce_acoustic))
    assert abs(res.loss - (1 - stage.w_prime) * vc_part) < 1e-5


def test_joint_draw_fraction_binomial():
    coin = np.random.default_rng(17)
    items = list(range(100))
    n_asr = n_tot = 0
    while n_tot < 10000:
        asr, vc = tr.joint_split(items, 0.2, coin)
        n_asr += len(asr)
        n_tot += len(items)
    frac = n_asr / n_tot
    assert abs(frac - 0.20) <= 0.02


def test_frozen_bits_unchanged_across_steps(bare_context):
    ctx = bare_context
    state = make_state(ctx)
    stage = stage_cfg("vc")
    rng = np.random.default_rng(19)
    before = ctx.frozen_hash()
    for _ in range(3):
        batch = tr._sample_batch(ctx, rng, 3)
        tr.vc_step(batch, state, ctx, stage, rng)
    assert ctx.frozen_hash() == before


# ---------------------------------------------------------------------------
# target selection


def test_select_target_always_pristine_at_prob_one(bare_context):
    ctx = bare_context
    stage = stage_cfg("vc", aug_real_prob=1.0)
    rng = np.random.default_rng(23)
    for utt in ctx.splits.utterances[:20]:
        t = tr.select_target(ctx, utt, ctx.splits.train_speaker_ids[0], stage, rng)
        assert t.channel == sw.PRISTINE


def test_select_target_percentage_and_transcript(bare_context):
    ctx = bare_context
    stage = stage_cfg("joint", aug_real_prob=0.8)
    rng = np.random.default_rng(29)
    utt = ctx.splits.utterances[0]
    tgt = ctx.splits.train_speaker_ids[3]
    pristine = 0
    n = 10000
    for _ in range(n):
        t = tr.select_target(ctx, utt, tgt, stage, rng)
        pristine += t.channel == sw.PRISTINE
        assert t.transcript == utt.text
    assert abs(pristine / n - 0.80) <= 0.02


# ---------------------------------------------------------------------------
# optimizer guarantees


def test_optimizer_lr_zero_changes_nothing():
    rng = np.random.default_rng(31)
    params = {"a.w": nm.Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)}
    before = params["a.w"].data.copy()
    opt = Adam(AdamConfig(lr=0.0))
    for _ in range(5):
        opt.step(params, {"a.w": rng.normal(size=(3, 3)).astype(np.float32)})
    assert np.array_equal(params["a.w"].data, before)


def test_optimizer_touches_only_named_grads():
    rng = np.random.default_rng(37)
    params = {
        "a.w": nm.Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True),
        "b.w": nm.Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True),
    }
    before_b = params["b.w"].data.copy()
    opt = Adam(AdamConfig(lr=1e-2))
    opt.step(params, {"a.w": np.ones((2, 2), dtype=np.float32)})
    assert np.array_equal(params["b.w"].data, before_b)
    assert not np.array_equal(params["a.w"].data, before_b)


# ---------------------------------------------------------------------------
# pipeline scaffolding


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        tr.StageConfig(name="warmup", steps=1)
    with pytest.raises(ConfigError):
        tr.StageConfig(name="vc", steps=1, w=1.5)


def test_run_pipeline_enforces_stage_order(bare_context):
    with pytest.raises(ConfigError):
        tr.run_pipeline(bare_context, tr.TrainPlan(), stages=("vc", "asr"))


def test_run_pipeline_tiny_deterministic(splits, codec, sem_enc, spk_enc):
    plan = tr.TrainPlan(asr_steps=12, vc_steps=12, joint_steps=12, eval_interval=6)
    ctx_a = tr.PipelineContext(splits, codec, sem_enc, spk_enc)
    ctx_b = tr.PipelineContext(splits, codec, sem_enc, spk_enc)
    a = tr.run_pipeline(ctx_a, plan)
    b = tr.run_pipeline(ctx_b, plan)
    assert set(a.params) == set(b.params)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data), k
    assert a.metrics_rows == b.metrics_rows


def test_metrics_log_format(tmp_path):
    rows = [(10, "asr", 1.5, 0.9, 3.2), (20, "asr", 1.2, 0.95, 3.0)]
    path = tmp_path / "metrics.tsv"
    tr.write_metrics_log(path, rows)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split("\t") == ["10", "asr", "1.5", "0.9", "3.2"]
