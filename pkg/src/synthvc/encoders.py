"""Pretrain-then-freeze feature extractors and the trainable adapters.

The semantic encoder downsamples frames x2 and is pretrained with
per-downsampled-frame symbol classification; the speaker encoder mean-pools
to one vector per utterance and is pretrained with speaker classification.
Both are frozen afterwards; only the adapters stay trainable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import numerics as nm
from . import synthworld as sw
from .errors import ConfigError, TrainingDivergedError
from .numerics import Tensor
from .optim import Adam, AdamConfig, grads_by_name

N_FRAME_CLASSES = sw.N_SYMBOLS + 1   # content symbols + silence


@dataclass(frozen=True)
class EncoderDims:
    feature: int = sw.F_DIM
    d_sem: int = 48
    d_spk: int = 32
    d_lm: int = 64
    sem_heads: int = 4
    sem_blocks: int = 2
    sem_intermediate: int = 96
    spk_hidden: int = 48


def bucket_by_length(utterances) -> dict[int, list]:
    buckets: dict[int, list] = {}
    for u in utterances:
        buckets.setdefault(len(u.text), []).append(u)
    return buckets


def _sample_bucket(buckets: dict[int, list], rng: np.random.Generator, batch: int) -> list:
    lengths = sorted(buckets)
    sizes = np.array([len(buckets[k]) for k in lengths], dtype=np.float64)
    key = lengths[int(rng.choice(len(lengths), p=sizes / sizes.sum()))]
    pool = buckets[key]
    idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
    return [pool[i] for i in idx]


def downsampled_labels(transcript) -> np.ndarray:
    """Label of the center frame of each stride-2 window."""
    full = sw.frame_labels(transcript)
    t_half = (len(full) + 1) // 2
    return full[np.arange(t_half) * 2]


# ---------------------------------------------------------------------------
# semantic encoder


@dataclass
class SemanticEncoder:
    dims: EncoderDims
    params: dict[str, Tensor]
    frozen: bool = False
    heldout_frame_accuracy: float | None = None
    _cache: dict[str, np.ndarray] = field(default_factory=dict)

    def forward_t(self, x: Tensor) -> Tensor:
        """(B, T, F) -> (B, ceil(T/2), d_sem); also accepts (T, F)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = nm.reshape(x, (1,) + x.shape)
        h = nm.unfold_time(x, kernel=3, stride=2, pad=1)
        h = nm.silu(nn.linear(self.params, "sem.in", h))
        t_half = h.shape[1]
        h = nn.trunk(self.params, "sem", h, np.arange(t_half), self.dims.sem_heads,
                     self.dims.sem_blocks, mask=None)
        return nm.reshape(h, h.shape[1:]) if squeeze else h

    def features(self, frames: np.ndarray, key: str | None = None) -> np.ndarray:
        """Frozen forward with optional caching; output (ceil(T/2), d_sem)."""
        if key is not None and key in self._cache:
            return self._cache[key]
        out = self.forward_t(nm.constant(frames)).data
        if key is not None:
            self._cache[key] = out
        return out


def init_semantic_encoder(dims: EncoderDims, seed: int) -> SemanticEncoder:
    rng = np.random.default_rng([0xE0C1, seed])
    params: dict[str, Tensor] = {}
    nn.init_linear(params, rng, "sem.in", 3 * dims.feature, dims.d_sem)
    nn.init_trunk(params, rng, "sem", dims.d_sem, dims.sem_intermediate, dims.sem_blocks)
    return SemanticEncoder(dims=dims, params=params)


def pretrain_semantic_encoder(splits: sw.CorpusSplits, steps: int = 1200, batch: int = 12,
                              lr: float = 1e-3, seed: int = 0,
                              dims: EncoderDims = EncoderDims(),
                              shuffle_labels: bool = False) -> SemanticEncoder:
    """Frame-label classification pretraining; returns a frozen encoder.

    shuffle_labels runs the control experiment: labels permuted per batch.
    """
    enc = init_semantic_encoder(dims, seed)
    rng = np.random.default_rng([0xE0C2, seed])
    head_rng = np.random.default_rng([0xE0C3, seed])
    nn.init_linear(enc.params, head_rng, "sem.headtmp", dims.d_sem, N_FRAME_CLASSES)
    opt = Adam(AdamConfig(lr=lr, warmup=50, clip=1.0))
    buckets = bucket_by_length(splits.utterances)
    frames_cache: dict[str, np.ndarray] = {}
    labels_cache: dict[str, np.ndarray] = {}

    last_loss = float("nan")
    for step in range(steps):
        items = _sample_bucket(buckets, rng, batch)
        xs, ys = [], []
        for u in items:
            if u.utt_id not in frames_cache:
                frames_cache[u.utt_id] = splits.render_utterance(u).frames
                labels_cache[u.utt_id] = downsampled_labels(u.text)
            xs.append(frames_cache[u.utt_id])
            ys.append(labels_cache[u.utt_id])
        x = nm.constant(np.stack(xs))
        labels = np.concatenate(ys)
        if shuffle_labels:
            labels = rng.permutation(labels)
        tape = nm.Tape()
        try:
            with tape:
                h = enc.forward_t(x)
                logits = nn.linear(enc.params, "sem.headtmp", h)
                loss = nm.cross_entropy(nm.reshape(logits, (-1, N_FRAME_CLASSES)), labels)
        except nm.NumericsError as e:
            raise TrainingDivergedError(
                f"semantic pretraining diverged at step {step}; last finite loss {last_loss}") from e
        grads = grads_by_name(tape, enc.params, tape.backward(loss))
        opt.step(enc.params, grads)
        last_loss = loss.item()

    acc = _semantic_heldout_accuracy(enc, splits)
    for name in [k for k in enc.params if k.startswith("sem.headtmp")]:
        del enc.params[name]
    for p in enc.params.values():
        p.requires_grad = False
    enc.frozen = True
    enc.heldout_frame_accuracy = acc
    return enc


def _semantic_heldout_accuracy(enc: SemanticEncoder, splits: sw.CorpusSplits,
                               n_eval: int = 24) -> float:
    rng = np.random.default_rng([0xE0C4, splits.seed])
    hit = tot = 0
    for i in range(n_eval):
        text = splits.heldout_texts[i % len(splits.heldout_texts)]
        sid = splits.heldout_speaker_ids[i % len(splits.heldout_speaker_ids)]
        r = sw.render(splits.vocab, text, splits.speakers[sid], sw.PRISTINE,
                      int(rng.integers(2**31)))
        h = enc.forward_t(nm.constant(r.frames[None]))
        logits = nn.linear(enc.params, "sem.headtmp", h)
        pred = logits.data[0].argmax(axis=-1)
        ref = downsampled_labels(text)
        hit += int((pred == ref).sum())
        tot += len(ref)
    return hit / tot


def extract_semantic(frames: np.ndarray, encoder: SemanticEncoder, adapter_params: dict,
                     adapter_prefix: str = "sem_adapter") -> Tensor:
    """Frames -> LM-space rows; gradient reaches only the adapter."""
    if not encoder.frozen:
        raise ConfigError("extract_semantic: encoder must be frozen")
    feats = encoder.features(frames)
    return apply_adapter(adapter_params, adapter_prefix, nm.constant(feats))


# ---------------------------------------------------------------------------
# speaker encoder


@dataclass
class SpeakerEncoder:
    dims: EncoderDims
    params: dict[str, Tensor]
    frozen: bool = False
    heldout_utterance_accuracy: float | None = None
    _cache: dict[str, np.ndarray] = field(default_factory=dict)

    def forward_t(self, x: Tensor) -> Tensor:
        """(B, T, F) -> (B, 1, d_spk); length-independent output."""
        squeeze = x.ndim == 2
        if squeeze:
            x = nm.reshape(x, (1,) + x.shape)
        h = nm.unfold_time(x, kernel=3, stride=2, pad=1)
        h = nm.silu(nn.linear(self.params, "spk.c1", h))
        h = nm.unfold_time(h, kernel=3, stride=2, pad=1)
        h = nm.silu(nn.linear(self.params, "spk.c2", h))
        h = nm.mean_axis(h, axis=1, keepdims=True)
        h = nn.linear(self.params, "spk.proj", h)
        return nm.reshape(h, h.shape[1:]) if squeeze else h

    def embed(self, frames: np.ndarray, key: str | None = None) -> np.ndarray:
        if key is not None and key in self._cache:
            return self._cache[key]
        out = self.forward_t(nm.constant(frames)).data
        if key is not None:
            self._cache[key] = out
        return out


def init_speaker_encoder(dims: EncoderDims, seed: int) -> SpeakerEncoder:
    rng = np.random.default_rng([0xE0C5, seed])
    params: dict[str, Tensor] = {}
    nn.init_linear(params, rng, "spk.c1", 3 * dims.feature, dims.spk_hidden)
    nn.init_linear(params, rng, "spk.c2", 3 * dims.spk_hidden, dims.spk_hidden)
    nn.init_linear(params, rng, "spk.proj", dims.spk_hidden, dims.d_spk)
    return SpeakerEncoder(dims=dims, params=params)


def pretrain_speaker_encoder(splits: sw.CorpusSplits, steps: int = 800, batch: int = 16,
                             lr: float = 1e-3, seed: int = 0,
                             dims: EncoderDims = EncoderDims()) -> SpeakerEncoder:
    """Speaker-classification pretraining over train speakers; frozen on return."""
    enc = init_speaker_encoder(dims, seed)
    rng = np.random.default_rng([0xE0C6, seed])
    head_rng = np.random.default_rng([0xE0C7, seed])
    n_spk = len(splits.train_speaker_ids)
    nn.init_linear(enc.params, head_rng, "spk.headtmp", dims.d_spk, n_spk)
    opt = Adam(AdamConfig(lr=lr, warmup=50, clip=1.0))
    spk_index = {sid: i for i, sid in enumerate(splits.train_speaker_ids)}
    text_buckets: dict[int, list] = {}
    for txt in splits.train_texts:
        text_buckets.setdefault(len(txt), []).append(txt)
    lengths = sorted(text_buckets)

    last_loss = float("nan")
    for step in range(steps):
        sids = rng.choice(splits.train_speaker_ids, size=batch)
        pool = text_buckets[lengths[int(rng.integers(len(lengths)))]]
        xs, ys = [], []
        for sid in sids:
            text = pool[int(rng.integers(len(pool)))]
            r = sw.render(splits.vocab, text, splits.speakers[int(sid)], sw.PRISTINE,
                          int(rng.integers(2**31)))
            xs.append(r.frames)
            ys.append(spk_index[int(sid)])
        x = nm.constant(np.stack(xs))
        tape = nm.Tape()
        try:
            with tape:
                h = enc.forward_t(x)
                logits = nn.linear(enc.params, "spk.headtmp", h)
                loss = nm.cross_entropy(nm.reshape(logits, (-1, n_spk)), np.asarray(ys))
        except nm.NumericsError as e:
            raise TrainingDivergedError(
                f"speaker pretraining diverged at step {step}; last finite loss {last_loss}") from e
        grads = grads_by_name(tape, enc.params, tape.backward(loss))
        opt.step(enc.params, grads)
        last_loss = loss.item()

    acc = _speaker_heldout_accuracy(enc, splits, spk_index)
    for name in [k for k in enc.params if k.startswith("spk.headtmp")]:
        del enc.params[name]
    for p in enc.params.values():
        p.requires_grad = False
    enc.frozen = True
    enc.heldout_utterance_accuracy = acc
    return enc


def _speaker_heldout_accuracy(enc: SpeakerEncoder, splits: sw.CorpusSplits,
                              spk_index: dict, n_eval: int = 60) -> float:
    rng = np.random.default_rng([0xE0C8, splits.seed])
    hit = 0
    for i in range(n_eval):
        sid = splits.train_speaker_ids[i % len(splits.train_speaker_ids)]
        text = splits.heldout_texts[int(rng.integers(len(splits.heldout_texts)))]
        r = sw.render(splits.vocab, text, splits.speakers[sid], sw.PRISTINE,
                      int(rng.integers(2**31)))
        h = enc.forward_t(nm.constant(r.frames[None]))
        logits = nn.linear(enc.params, "spk.headtmp", h)
        hit += int(logits.data[0, 0].argmax() == spk_index[sid])
    return hit / n_eval


def extract_speaker(frames: np.ndarray, encoder: SpeakerEncoder, adapter_params: dict,
                    adapter_prefix: str = "spk_adapter") -> Tensor:
    """Frames -> single LM-space row; gradient reaches only the adapter."""
    if not encoder.frozen:
        raise ConfigError("extract_speaker: encoder must be frozen")
    emb = encoder.embed(frames)
    return apply_adapter(adapter_params, adapter_prefix, nm.constant(emb))


# ---------------------------------------------------------------------------
# adapters: affine + SiLU + affine into LM space


def init_adapter(params: dict, seed: int, prefix: str, d_in: int, d_out: int,
                 hidden: int = 64) -> None:
    rng = np.random.default_rng([0xADA0, seed, len(prefix)])
    nn.init_linear(params, rng, f"{prefix}.a1", d_in, hidden)
    nn.init_linear(params, rng, f"{prefix}.a2", hidden, d_out)


def apply_adapter(params: dict, prefix: str, x: Tensor) -> Tensor:
    return nn.linear(params, f"{prefix}.a2", nm.silu(nn.linear(params, f"{prefix}.a1", x)))
