"""Three-stage optimization: ASR pretraining, VC training, joint ASR-VC.

The frozen components (encoders, codec) never enter the optimizer state;
ASR-mode instances condition on a learned null-speaker row and route no
gradient to the speaker adapter. Batches are drawn from same-text-length
buckets so grids stack without padding. Everything is a deterministic
function of the stage seeds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import numerics as nm
from . import streamlm as sl
from . import synthworld as sw
from .codec import RVQCodec, encode
from .encoders import (SemanticEncoder, SpeakerEncoder, apply_adapter,
                       bucket_by_length, init_adapter)
from .errors import ConfigError, TrainingDivergedError
from .evaluation import (EvalPair, MetricsReport, OracleTranscriber, OracleVerifier,
                         evaluate_conversion)
from .numerics import Tensor
from .optim import Adam, AdamConfig, grads_by_name

STAGE_ASR = "asr"
STAGE_VC = "vc"
STAGE_JOINT = "joint"
STAGES = (STAGE_ASR, STAGE_VC, STAGE_JOINT)


@dataclass(frozen=True)
class StageConfig:
    name: str
    steps: int
    w: float = 0.5
    lambdas: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7)
    w_prime: float = 0.2
    asr_fraction: float = 0.2
    aug_real_prob: float = 0.5
    lr: float = 1e-3
    warmup: int = 100
    clip: float = 1.0
    batch: int = 6
    seed: int = 0
    text_loss_scale: float = 1.0
    text_input_dropout: float = 0.5

    def __post_init__(self):
        if self.name not in STAGES:
            raise ConfigError(f"unknown stage {self.name!r}")
        for label, v in (("w", self.w), ("w_prime", self.w_prime),
                         ("asr_fraction", self.asr_fraction),
                         ("aug_real_prob", self.aug_real_prob),
                         ("text_input_dropout", self.text_input_dropout)):
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"stage {self.name}: {label}={v} outside [0, 1]")


@dataclass(frozen=True)
class TrainPlan:
    asr_steps: int = 2000
    vc_steps: int = 4000
    joint_steps: int = 4000
    w: float = 0.5
    lambdas: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7)
    w_prime: float = 0.2
    asr_fraction: float = 0.2
    vc_real_prob: float = 0.5
    joint_real_prob: float = 0.8
    lr: float = 1e-3
    warmup: int = 100
    clip: float = 1.0
    batch: int = 6
    seed: int = 7401
    text_loss_scale: float = 1.0
    text_input_dropout: float = 0.5
    eval_interval: int = 200
    gen_max_steps: int = 128
    gen_tail: int = 40

    def stage(self, name: str) -> StageConfig:
        steps = {STAGE_ASR: self.asr_steps, STAGE_VC: self.vc_steps,
                 STAGE_JOINT: self.joint_steps}[name]
        aug = {STAGE_ASR: 1.0, STAGE_VC: self.vc_real_prob,
               STAGE_JOINT: self.joint_real_prob}[name]
        return StageConfig(
            name=name, steps=steps, w=self.w, lambdas=self.lambdas,
            w_prime=self.w_prime, asr_fraction=self.asr_fraction, aug_real_prob=aug,
            lr=self.lr, warmup=self.warmup, clip=self.clip, batch=self.batch,
            seed=self.seed + STAGES.index(name), text_loss_scale=self.text_loss_scale,
            text_input_dropout=self.text_input_dropout)


@dataclass
class StepResult:
    loss: float
    ce_text: float | None
    ce_acoustic: tuple[float, ...] | None
    n_asr: int
    n_vc: int


@dataclass
class TrainState:
    params: dict[str, Tensor]
    opt: Adam
    step: int = 0


class PipelineContext:
    """Frozen components plus deterministic caches for training."""

    REF_POOL_SIZE = 8

    def __init__(self, splits: sw.CorpusSplits, codec: RVQCodec,
                 sem_enc: SemanticEncoder, spk_enc: SpeakerEncoder,
                 verifier: OracleVerifier | None = None,
                 transcriber: OracleTranscriber | None = None,
                 eval_pairs: list[EvalPair] | None = None,
                 lm_cfg: sl.LMConfig | None = None):
        if lm_cfg is None:
            lm_cfg = sl.LMConfig(layout=sl.StreamLayout(
                n_layers=codec.n_layers, code_vocab=codec.codebook_size))
        if lm_cfg.layout.n_layers != codec.n_layers:
            raise ConfigError("LM layout layer count does not match codec")
        self.splits = splits
        self.codec = codec
        self.sem_enc = sem_enc
        self.spk_enc = spk_enc
        self.verifier = verifier
        self.transcriber = transcriber
        self.eval_pairs = eval_pairs
        self.lm_cfg = lm_cfg
        self.buckets = bucket_by_length(splits.utterances)
        self.bucket_lengths = sorted(self.buckets)
        self.bucket_sizes = np.array([len(self.buckets[k]) for k in self.bucket_lengths],
                                     dtype=np.float64)
        self.render_cache: dict[str, sw.Rendering] = {}
        self._ref_pool: dict[int, list[tuple[tuple[int, ...], int]]] = {}
        self._ref_emb: dict[tuple[int, int], np.ndarray] = {}
        self._build_ref_pool()
        self._metric_items = None

    def _build_ref_pool(self) -> None:
        rng = np.random.default_rng([0x9EF0, self.splits.seed])
        texts = self.splits.train_texts
        for sid in self.splits.train_speaker_ids:
            pool = []
            for _ in range(self.REF_POOL_SIZE):
                pool.append((texts[int(rng.integers(len(texts)))], int(rng.integers(2**31))))
            self._ref_pool[sid] = pool

    def rendering(self, utt: sw.Utterance) -> sw.Rendering:
        r = self.render_cache.get(utt.utt_id)
        if r is None:
            r = self.splits.render_utterance(utt)
            self.render_cache[utt.utt_id] = r
        return r

    def sem_features(self, utt: sw.Utterance) -> np.ndarray:
        return self.sem_enc.features(self.rendering(utt).frames, key=utt.utt_id)

    def reference_embedding(self, speaker_id: int, pool_idx: int,
                            avoid_text: tuple[int, ...]) -> np.ndarray:
        """Speaker embedding of a reference utterance with a different text."""
        pool = self._ref_pool[speaker_id]
        idx = pool_idx % len(pool)
        for shift in range(len(pool)):
            cand = (idx + shift) % len(pool)
            if pool[cand][0] != avoid_text:
                idx = cand
                break
        key = (speaker_id, idx)
        if key not in self._ref_emb:
            text, seed = pool[idx]
            r = sw.render(self.splits.vocab, text, self.splits.speakers[speaker_id],
                          sw.PRISTINE, seed)
            self._ref_emb[key] = self.spk_enc.embed(r.frames)
        return self._ref_emb[key]

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        h.update(nn.param_bytes(self.sem_enc.params))
        h.update(nn.param_bytes(self.spk_enc.params))
        for book in self.codec.codebooks:
            h.update(np.ascontiguousarray(book.centroids, dtype="<f4").tobytes())
        return h.hexdigest()

    def metric_items(self):
        """Fixed held-out fixtures for the training-time metrics columns."""
        if self._metric_items is None:
            rng = np.random.default_rng([0x3E7A, self.splits.seed])
            text_items = []
            for i in range(10):
                text = self.splits.heldout_texts[i % len(self.splits.heldout_texts)]
                sid = self.splits.heldout_speaker_ids[i % len(self.splits.heldout_speaker_ids)]
                r = sw.render(self.splits.vocab, text, self.splits.speakers[sid],
                              sw.PRISTINE, int(rng.integers(2**31)))
                text_items.append((text, self.sem_enc.features(r.frames)))
            ac_items = []
            hid = self.splits.heldout_speaker_ids
            for i in range(8):
                s_text = self.splits.heldout_texts[(i * 3) % len(self.splits.heldout_texts)]
                s_sid = hid[i % len(hid)]
                t_sid = hid[(i + 1) % len(hid)]
                r_text = self.splits.heldout_texts[(i * 3 + 1) % len(self.splits.heldout_texts)]
                src = sw.render(self.splits.vocab, s_text, self.splits.speakers[s_sid],
                                sw.PRISTINE, int(rng.integers(2**31)))
                ref = sw.render(self.splits.vocab, r_text, self.splits.speakers[t_sid],
                                sw.PRISTINE, int(rng.integers(2**31)))
                tgt = sw.render(self.splits.vocab, s_text, self.splits.speakers[t_sid],
                                sw.PRISTINE, int(rng.integers(2**31)))
                codes = encode(tgt.frames, self.codec)
                ac_items.append((s_text, self.sem_enc.features(src.frames),
                                 self.spk_enc.embed(ref.frames), codes))
            self._metric_items = (text_items, ac_items)
        return self._metric_items


def init_pipeline_params(ctx: PipelineContext, seed: int) -> dict[str, Tensor]:
    params = sl.init_lm(ctx.lm_cfg, seed)
    dims = ctx.sem_enc.dims
    init_adapter(params, seed, "sem_adapter", dims.d_sem, ctx.lm_cfg.dim)
    init_adapter(params, seed, "spk_adapter", dims.d_spk, ctx.lm_cfg.dim)
    return params


# ---------------------------------------------------------------------------
# batch assembly


def _sample_batch(ctx: PipelineContext, rng: np.random.Generator, batch: int):
    key = ctx.bucket_lengths[int(rng.choice(len(ctx.bucket_lengths),
                                            p=ctx.bucket_sizes / ctx.bucket_sizes.sum()))]
    pool = ctx.buckets[key]
    idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
    return [pool[i] for i in idx]


def _source_features(ctx: PipelineContext, utts, rng: np.random.Generator) -> np.ndarray:
    """Semantic features of speaker-augmented fresh source renders.

    Re-rendering each text under a random train speaker with fresh noise
    mirrors the parallel-augmentation story and stops the LM keying on the
    fixed (text, speaker) corpus pairing.
    """
    train_ids = ctx.splits.train_speaker_ids
    feats = []
    for u in utts:
        sid = int(train_ids[rng.integers(len(train_ids))])
        r = sw.render(ctx.splits.vocab, u.text, ctx.splits.speakers[sid], sw.PRISTINE,
                      int(rng.integers(2**31)))
        feats.append(ctx.sem_enc.features(r.frames))
    return np.stack(feats)


def _dropped_text_inputs(tokens: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace a fraction of real text-stream input tokens with PAD.

    Targets stay intact; this only corrupts the teacher-forced inputs so the
    model cannot rely on memorized text prefixes instead of the semantic rows.
    """
    if p <= 0.0:
        return tokens
    out = tokens.copy()
    text_row = out[:, 0, :]
    hit = (rng.random(text_row.shape) < p) & (text_row < sw.N_SYMBOLS)
    text_row[hit] = sw.TEXT_PAD
    return out


def _null_rows(ctx: PipelineContext, params: dict, batch: int) -> Tensor:
    null = nm.reshape(params["lm.null_spk"], (1, 1, ctx.lm_cfg.dim))
    if batch == 1:
        return null
    return nm.concat([null] * batch, axis=0)


def select_target(ctx: PipelineContext, source: sw.Utterance, target_speaker: int,
                  stage: StageConfig, rng: np.random.Generator) -> sw.Rendering:
    """Parallel target render: pristine with probability aug_real_prob."""
    channel = sw.PRISTINE if rng.random() < stage.aug_real_prob else sw.DEGRADED
    return sw.render(ctx.splits.vocab, source.text, ctx.splits.speakers[target_speaker],
                     channel, int(rng.integers(2**31)))


def _text_ce(ctx, params, logits, grids, text_only: bool):
    layout = ctx.lm_cfg.layout
    masks = np.stack([sl.supervised_mask(g, layout, text_only=text_only) for g in grids])
    targets = np.stack([g.tokens for g in grids])
    ce_text = nm.cross_entropy(
        nm.reshape(logits[0], (-1, sl.TEXT_VOCAB)),
        targets[:, 0, :].reshape(-1), masks[:, 0, :].reshape(-1))
    if text_only:
        return ce_text, None
    ce_ac = []
    for i in range(layout.n_layers):
        ce_ac.append(nm.cross_entropy(
            nm.reshape(logits[i + 1], (-1, layout.ac_vocab)),
            targets[:, i + 1, :].reshape(-1), masks[:, i + 1, :].reshape(-1)))
    return ce_text, ce_ac


def _asr_pool_loss(ctx, params, utts, stage, rng):
    """Text-stream CE with the null-speaker prefix; acoustic rows all PAD."""
    grids = [sl.build_asr_grid(u.text, ctx.lm_cfg.layout) for u in utts]
    sem = apply_adapter(params, "sem_adapter",
                        nm.constant(_source_features(ctx, utts, rng)))
    spk = _null_rows(ctx, params, len(utts))
    tokens = np.stack([g.tokens for g in grids])
    tokens_in = _dropped_text_inputs(tokens, stage.text_input_dropout, rng)
    logits = sl.forward_batch(params, ctx.lm_cfg, sem, spk, tokens_in)
    ce_text, _ = _text_ce(ctx, params, logits, grids, text_only=True)
    return nm.scale(ce_text, stage.text_loss_scale), float(ce_text.item())


def _vc_pool_loss(ctx, params, utts, stage, rng):
    """w * CE_text + (1 - w) * sum_i lambda_i * CE_ac_i over a sub-batch."""
    layout = ctx.lm_cfg.layout
    if len(stage.lambdas) != layout.n_layers:
        raise ConfigError(f"stage {stage.name}: lambdas length {len(stage.lambdas)} "
                          f"does not match {layout.n_layers} codec layers")
    train_ids = ctx.splits.train_speaker_ids
    grids, spk_embs = [], []
    for u in utts:
        tgt = int(train_ids[rng.integers(len(train_ids))])
        ref_idx = int(rng.integers(PipelineContext.REF_POOL_SIZE))
        spk_embs.append(ctx.reference_embedding(tgt, ref_idx, tuple(u.text)))
        target = select_target(ctx, u, tgt, stage, rng)
        codes = encode(target.frames, ctx.codec)
        grids.append(sl.build_delayed_grid(u.text, codes, layout))
    sem = apply_adapter(params, "sem_adapter",
                        nm.constant(_source_features(ctx, utts, rng)))
    spk = apply_adapter(params, "spk_adapter", nm.constant(np.stack(spk_embs)))
    tokens = np.stack([g.tokens for g in grids])
    tokens_in = _dropped_text_inputs(tokens, stage.text_input_dropout, rng)
    logits = sl.forward_batch(params, ctx.lm_cfg, sem, spk, tokens_in)
    ce_text, ce_ac = _text_ce(ctx, params, logits, grids, text_only=False)
    loss = combine_vc_loss(ce_text, ce_ac, stage)
    return loss, float(ce_text.item()), tuple(float(c.item()) for c in ce_ac)


def combine_vc_loss(ce_text, ce_ac, stage: StageConfig):
    """w * CE_text + (1 - w) * sum_i lambda_i * CE_ac_i, as tensors."""
    ac_sum = nm.scale(ce_ac[0], stage.lambdas[0])
    for lam, ce in zip(stage.lambdas[1:], ce_ac[1:]):
        ac_sum = nm.add(ac_sum, nm.scale(ce, lam))
    return nm.add(nm.scale(ce_text, stage.w * stage.text_loss_scale),
                  nm.scale(ac_sum, 1.0 - stage.w))


def _apply_step(ctx, state: TrainState, tape: nm.Tape, loss) -> None:
    grads = grads_by_name(tape, state.params, tape.backward(loss))
    state.opt.step(state.params, grads)
    state.step += 1


def asr_step(batch, state: TrainState, ctx: PipelineContext, stage: StageConfig,
             rng: np.random.Generator) -> StepResult:
    tape = nm.Tape()
    try:
        with tape:
            loss, ce_text = _asr_pool_loss(ctx, state.params, batch, stage, rng)
    except nm.NumericsError as e:
        raise TrainingDivergedError(
            f"stage {stage.name} step {state.step}: non-finite loss on batch "
            f"{[u.utt_id for u in batch]}") from e
    _apply_step(ctx, state, tape, loss)
    return StepResult(loss=float(loss.item()), ce_text=ce_text, ce_acoustic=None,
                      n_asr=len(batch), n_vc=0)


def vc_step(batch, state: TrainState, ctx: PipelineContext, stage: StageConfig,
            rng: np.random.Generator) -> StepResult:
    tape = nm.Tape()
    try:
        with tape:
            loss, ce_text, ce_ac = _vc_pool_loss(ctx, state.params, batch, stage, rng)
    except nm.NumericsError as e:
        raise TrainingDivergedError(
            f"stage {stage.name} step {state.step}: non-finite loss on batch "
            f"{[u.utt_id for u in batch]}") from e
    _apply_step(ctx, state, tape, loss)
    return StepResult(loss=float(loss.item()), ce_text=ce_text, ce_acoustic=ce_ac,
                      n_asr=0, n_vc=len(batch))


def joint_split(batch, asr_fraction: float, coin: np.random.Generator):
    """Draw each instance as ASR with probability asr_fraction, else VC."""
    draws = coin.random(len(batch))
    asr_items = [u for u, d in zip(batch, draws) if d < asr_fraction]
    vc_items = [u for u, d in zip(batch, draws) if d >= asr_fraction]
    return asr_items, vc_items


def joint_step(batch, state: TrainState, ctx: PipelineContext, stage: StageConfig,
               coin: np.random.Generator) -> StepResult:
    """Each instance is ASR with probability asr_fraction, else VC; the pools
    combine as w' * L_ASR + (1 - w') * L_VC."""
    asr_items, vc_items = joint_split(batch, stage.asr_fraction, coin)
    tape = nm.Tape()
    ce_text = None
    ce_ac = None
    try:
        with tape:
            if asr_items:
                asr_loss, _ = _asr_pool_loss(ctx, state.params, asr_items, stage, coin)
            else:
                asr_loss = nm.constant(np.float32(0.0))
            if vc_items:
                vc_loss, ce_text, ce_ac = _vc_pool_loss(ctx, state.params, vc_items, stage, coin)
            else:
                vc_loss = nm.constant(np.float32(0.0))
            loss = nm.add(nm.scale(asr_loss, stage.w_prime),
                          nm.scale(vc_loss, 1.0 - stage.w_prime))
    except nm.NumericsError as e:
        raise TrainingDivergedError(
            f"stage {stage.name} step {state.step}: non-finite loss on batch "
            f"{[u.utt_id for u in batch]}") from e
    _apply_step(ctx, state, tape, loss)
    return StepResult(loss=float(loss.item()), ce_text=ce_text, ce_acoustic=ce_ac,
                      n_asr=len(asr_items), n_vc=len(vc_items))


# ---------------------------------------------------------------------------
# held-out metrics during training


def heldout_text_accuracy(ctx: PipelineContext, params: dict) -> float:
    hit = tot = 0
    for text, feats in ctx.metric_items()[0]:
        grid = sl.build_asr_grid(text, ctx.lm_cfg.layout)
        sem = apply_adapter(params, "sem_adapter", nm.constant(feats))
        logits = sl.forward(params, ctx.lm_cfg, sem, None, grid)
        mask = sl.supervised_mask(grid, ctx.lm_cfg.layout, text_only=True)[0]
        pred = logits[0].data.argmax(axis=-1)
        hit += int((pred[mask] == grid.tokens[0][mask]).sum())
        tot += int(mask.sum())
    return hit / tot


def heldout_acoustic_ce(ctx: PipelineContext, params: dict) -> float:
    layout = ctx.lm_cfg.layout
    vals = []
    for text, feats, spk_emb, codes in ctx.metric_items()[1]:
        grid = sl.build_delayed_grid(text, codes, layout)
        sem = apply_adapter(params, "sem_adapter", nm.constant(feats))
        spk = apply_adapter(params, "spk_adapter", nm.constant(spk_emb))
        logits = sl.forward(params, ctx.lm_cfg, sem, spk, grid)
        mask = sl.supervised_mask(grid, layout)
        for i in range(layout.n_layers):
            ce = nm.cross_entropy(logits[i + 1], grid.tokens[i + 1], mask[i + 1])
            vals.append(ce.item())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# stages and the full schedule


def train_stage(state: TrainState, ctx: PipelineContext, stage: StageConfig,
                eval_interval: int = 200,
                metrics_rows: list | None = None) -> dict:
    rng = np.random.default_rng([0x7A10, stage.seed])
    state.opt = Adam(AdamConfig(lr=stage.lr, warmup=stage.warmup, clip=stage.clip))
    frozen_start = ctx.frozen_hash()
    last = None
    loss_history = []
    for local_step in range(stage.steps):
        batch = _sample_batch(ctx, rng, stage.batch)
        if stage.name == STAGE_ASR:
            last = asr_step(batch, state, ctx, stage, rng)
        elif stage.name == STAGE_VC:
            last = vc_step(batch, state, ctx, stage, rng)
        else:
            last = joint_step(batch, state, ctx, stage, coin=rng)
        loss_history.append((last.loss, last.ce_acoustic))
        if (local_step + 1) % eval_interval == 0 or local_step + 1 == stage.steps:
            row = (state.step, stage.name, last.loss,
                   heldout_text_accuracy(ctx, state.params),
                   heldout_acoustic_ce(ctx, state.params))
            if metrics_rows is not None:
                metrics_rows.append(row)
    frozen_end = ctx.frozen_hash()
    ac_losses = [h[1] for h in loss_history if h[1] is not None]
    report = {
        "stage": stage.name,
        "steps": stage.steps,
        "final_loss": last.loss if last else None,
        "heldout_text_accuracy": heldout_text_accuracy(ctx, state.params),
        "heldout_acoustic_ce": heldout_acoustic_ce(ctx, state.params),
        "frozen_hash_start": frozen_start,
        "frozen_hash_end": frozen_end,
        "acoustic_ce_first_window": (float(np.mean([np.mean(a) for a in ac_losses[:200]]))
                                     if ac_losses else None),
        "acoustic_ce_last_window": (float(np.mean([np.mean(a) for a in ac_losses[-200:]]))
                                    if ac_losses else None),
    }
    if frozen_start != frozen_end:
        raise TrainingDivergedError(f"stage {stage.name}: frozen component bits changed")
    return report


@dataclass
class PipelineResult:
    params: dict[str, Tensor]
    stage_reports: dict[str, dict]
    stage_metrics: dict[str, MetricsReport]
    stage_params: dict[str, dict[str, Tensor]] = field(default_factory=dict)
    metrics_rows: list = field(default_factory=list)


def run_pipeline(ctx: PipelineContext, plan: TrainPlan,
                 stages: tuple[str, ...] = STAGES,
                 init_params: dict[str, Tensor] | None = None) -> PipelineResult:
    """Run the requested stages in order, each resuming the previous
    parameters, with a metrics snapshot after every stage."""
    for i, name in enumerate(stages):
        if name not in STAGES or (i and STAGES.index(name) <= STAGES.index(stages[i - 1])):
            raise ConfigError(f"stages must follow {STAGES}, got {stages}")
    params = init_params if init_params is not None else init_pipeline_params(ctx, plan.seed)
    state = TrainState(params=params, opt=Adam(AdamConfig()))
    result = PipelineResult(params=params, stage_reports={}, stage_metrics={})
    for name in stages:
        report = train_stage(state, ctx, plan.stage(name),
                             eval_interval=plan.eval_interval,
                             metrics_rows=result.metrics_rows)
        result.stage_reports[name] = report
        result.params = state.params
        result.stage_params[name] = dict(state.params)
        if ctx.verifier is not None and ctx.eval_pairs is not None:
            snap = evaluate_conversion(
                state.params, ctx.lm_cfg, ctx.codec, ctx.sem_enc, ctx.spk_enc,
                state.params, ctx.verifier, ctx.transcriber, ctx.splits, ctx.eval_pairs,
                max_steps=plan.gen_max_steps, tail=plan.gen_tail)
            result.stage_metrics[name] = snap
            report["metrics"] = snap.to_json()
    return result


def write_metrics_log(path: Path, rows) -> None:
    lines = ["\t".join(str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
