"""Multi-stream autoregressive transformer with a text-ahead delay layout.

One grid column per generation step carries 1 text token plus n acoustic
tokens. Stream s is offset by d_s steps with d = [0, 1, ..., n], so every
text token is emitted one step before the first acoustic token of the same
step index, and acoustic layers stagger by one. The model consumes a prefix
of [speaker row, semantic rows] followed by the summed per-stream embeddings
of previous grid columns; logits at generation step j predict column j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import numerics as nm
from . import synthworld as sw
from .codec import CodeGrid
from .errors import CapacityError, ConfigError, DataError, GridFormatError
from .numerics import Tensor

TEXT_CONTENT = sw.N_SYMBOLS      # ids 0..31 are content
TEXT_PAD = sw.TEXT_PAD
TEXT_BOS = sw.TEXT_BOS
TEXT_EOS = sw.TEXT_EOS
TEXT_VOCAB = sw.TEXT_VOCAB


@dataclass(frozen=True)
class StreamLayout:
    """1 + n streams; text leads every acoustic stream."""

    n_layers: int = 4
    code_vocab: int = 64        # content codes per acoustic stream

    @property
    def n_streams(self) -> int:
        return 1 + self.n_layers

    @property
    def delays(self) -> tuple[int, ...]:
        return tuple(range(self.n_layers + 1))

    @property
    def ac_pad(self) -> int:
        return self.code_vocab

    @property
    def ac_bos(self) -> int:
        return self.code_vocab + 1

    @property
    def ac_vocab(self) -> int:
        return self.code_vocab + 2


@dataclass(frozen=True)
class DelayedGrid:
    """(1 + n) x L token matrix plus the mask of real (content) positions."""

    tokens: np.ndarray       # int64
    valid: np.ndarray        # bool, same shape

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_streams(self) -> int:
        return self.tokens.shape[0]


def _content_valid(tokens: np.ndarray, layout: StreamLayout) -> np.ndarray:
    valid = np.zeros_like(tokens, dtype=bool)
    valid[0] = tokens[0] < TEXT_CONTENT
    valid[1:] = tokens[1:] < layout.code_vocab
    return valid


def build_delayed_grid(text, codes, layout: StreamLayout) -> DelayedGrid:
    """Lay out text plus code streams under the delay pattern.

    L = max over streams of (delay + length) + 1, where the text length
    includes its EOS, so every stream ends with at least one PAD.
    """
    text = [int(t) for t in text]
    code_arr = codes.codes if isinstance(codes, CodeGrid) else np.asarray(codes, dtype=np.int64)
    if len(text) < 1:
        raise DataError("build_delayed_grid: empty text")
    if code_arr.ndim != 2 or code_arr.shape[0] != layout.n_layers or code_arr.shape[1] < 1:
        raise DataError(f"build_delayed_grid: codes shape {code_arr.shape} does not match "
                        f"{layout.n_layers} layers with at least one step")
    if any(t < 0 or t >= TEXT_CONTENT for t in text):
        raise DataError("build_delayed_grid: text contains non-content tokens")
    if code_arr.min() < 0 or code_arr.max() >= layout.code_vocab:
        raise DataError("build_delayed_grid: code out of range")

    l_t, t_a = len(text), code_arr.shape[1]
    length = max(l_t + 1, layout.n_layers + t_a) + 1
    tokens = np.empty((layout.n_streams, length), dtype=np.int64)
    tokens[0] = TEXT_PAD
    tokens[0, :l_t] = text
    tokens[0, l_t] = TEXT_EOS
    for i in range(layout.n_layers):
        d = i + 1
        tokens[i + 1] = layout.ac_pad
        tokens[i + 1, :d] = layout.ac_bos
        tokens[i + 1, d:d + t_a] = code_arr[i]
    return DelayedGrid(tokens=tokens, valid=_content_valid(tokens, layout))


def build_asr_grid(text, layout: StreamLayout) -> DelayedGrid:
    """Text-only teacher-forcing grid: acoustic streams carry PAD everywhere."""
    text = [int(t) for t in text]
    if len(text) < 1:
        raise DataError("build_asr_grid: empty text")
    l_t = len(text)
    length = max(l_t + 1, layout.n_layers) + 1
    tokens = np.full((layout.n_streams, length), layout.ac_pad, dtype=np.int64)
    tokens[0] = TEXT_PAD
    tokens[0, :l_t] = text
    tokens[0, l_t] = TEXT_EOS
    return DelayedGrid(tokens=tokens, valid=_content_valid(tokens, layout))


def supervised_mask(grid: DelayedGrid, layout: StreamLayout,
                    text_only: bool = False) -> np.ndarray:
    """Loss positions: real tokens, plus text EOS, plus each acoustic
    stream's first PAD so the model learns to stop."""
    mask = grid.valid.copy()
    eos_cols = np.nonzero(grid.tokens[0] == TEXT_EOS)[0]
    if eos_cols.size:
        mask[0, eos_cols[0]] = True
    if text_only:
        mask[1:] = False
        return mask
    for s in range(1, grid.n_streams):
        row = grid.tokens[s]
        content = np.nonzero(row < layout.code_vocab)[0]
        if content.size:
            stop = content[-1] + 1
            if stop < grid.length:
                mask[s, stop] = True
    return mask


def invert_delayed_grid(grid: DelayedGrid, layout: StreamLayout) -> tuple[list[int], CodeGrid]:
    """Strip specials and undo delays; rejects malformed layouts."""
    tokens = grid.tokens
    if tokens.shape[0] != layout.n_streams:
        raise GridFormatError(f"grid has {tokens.shape[0]} streams, layout expects {layout.n_streams}")
    length = tokens.shape[1]

    row = tokens[0]
    eos_cols = np.nonzero(row == TEXT_EOS)[0]
    if not eos_cols.size:
        raise GridFormatError("text stream: missing EOS (stream 0)")
    e = int(eos_cols[0])
    if e == 0:
        raise DataError("text stream: empty text")
    for t in range(e):
        if not (0 <= row[t] < TEXT_CONTENT):
            raise GridFormatError(f"text stream: non-content token before EOS at stream 0 step {t}")
    for t in range(e + 1, length):
        if row[t] != TEXT_PAD:
            raise GridFormatError(f"text stream: token after EOS at stream 0 step {t}")
    text = [int(v) for v in row[:e]]

    lengths = []
    rows = []
    for i in range(layout.n_layers):
        s = i + 1
        d = i + 1
        row = tokens[s]
        for t in range(min(d, length)):
            if row[t] != layout.ac_bos:
                raise GridFormatError(f"acoustic stream {s}: expected BOS before delay at step {t}")
        t = d
        content = []
        while t < length and row[t] < layout.code_vocab:
            content.append(int(row[t]))
            t += 1
        if not content:
            raise GridFormatError(f"acoustic stream {s}: no content tokens at step {t}")
        for u in range(t, length):
            if row[u] != layout.ac_pad:
                raise GridFormatError(f"acoustic stream {s}: token after PAD at step {u}")
        lengths.append(len(content))
        rows.append(content)
    if len(set(lengths)) != 1:
        raise GridFormatError(f"acoustic streams disagree on length: {lengths}")
    codes = np.asarray(rows, dtype=np.int64)
    return text, CodeGrid(codes=codes)


# ---------------------------------------------------------------------------
# the transformer LM


@dataclass(frozen=True)
class LMConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    intermediate: int = 256
    capacity: int = 512
    layout: StreamLayout = StreamLayout()


def init_lm(cfg: LMConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([0x11A0, seed])
    params: dict[str, Tensor] = {}
    params["lm.text_emb"] = Tensor(rng.normal(0.0, 0.1, size=(TEXT_VOCAB, cfg.dim)).astype(np.float32),
                                   requires_grad=True)
    for i in range(cfg.layout.n_layers):
        params[f"lm.ac_emb{i}"] = Tensor(
            rng.normal(0.0, 0.1, size=(cfg.layout.ac_vocab, cfg.dim)).astype(np.float32),
            requires_grad=True)
    params["lm.null_spk"] = Tensor(rng.normal(0.0, 0.1, size=(1, cfg.dim)).astype(np.float32),
                                   requires_grad=True)
    nn.init_trunk(params, rng, "lm", cfg.dim, cfg.intermediate, cfg.blocks)
    nn.init_linear(params, rng, "lm.text_head", cfg.dim, TEXT_VOCAB)
    for i in range(cfg.layout.n_layers):
        nn.init_linear(params, rng, f"lm.ac_head{i}", cfg.dim, cfg.layout.ac_vocab)
    return params


def forward_batch(params: dict, cfg: LMConfig, sem: Tensor, spk: Tensor,
                  tokens: np.ndarray) -> list[Tensor]:
    """Teacher-forced pass over a batch of same-shape grids.

    sem (B, T', dim), spk (B, 1, dim), tokens (B, 1+n, L).
    Returns per-stream logits, each (B, L, vocab_s); logits at step j are
    produced from columns < j plus the full prefix.
    """
    b, t_sem, _ = sem.shape
    length = tokens.shape[2]
    p = 1 + t_sem
    total = p + length - 1
    if total > cfg.capacity:
        raise CapacityError(f"sequence length {total} exceeds capacity {cfg.capacity}")

    parts = []
    for s in range(cfg.layout.n_streams):
        table = params["lm.text_emb"] if s == 0 else params[f"lm.ac_emb{s - 1}"]
        emb = nm.embedding_lookup(table, tokens[:, s, :length - 1].reshape(-1))
        parts.append(nm.reshape(emb, (b, length - 1, cfg.dim)))
    gen = parts[0]
    for extra in parts[1:]:
        gen = nm.add(gen, extra)

    x = nm.concat([spk, sem, gen], axis=1)
    h = nn.trunk(params, "lm", x, np.arange(total), cfg.heads, cfg.blocks,
                 nn.causal_mask(total))
    h_gen = nm.narrow(h, 1, p - 1, total)
    logits = [nn.linear(params, "lm.text_head", h_gen)]
    for i in range(cfg.layout.n_layers):
        logits.append(nn.linear(params, f"lm.ac_head{i}", h_gen))
    return logits


def forward(params: dict, cfg: LMConfig, sem: Tensor, spk: Tensor | None,
            grid: DelayedGrid) -> list[Tensor]:
    """Single-item teacher-forced pass; spk=None uses the learned null row."""
    if spk is None:
        spk = params["lm.null_spk"]
    sem3 = nm.reshape(sem, (1,) + sem.shape)
    spk3 = nm.reshape(spk, (1, 1, cfg.dim))
    outs = forward_batch(params, cfg, sem3, spk3, grid.tokens[None])
    return [nm.reshape(o, o.shape[1:]) for o in outs]


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenerationResult:
    grid: DelayedGrid
    truncated: bool
    steps: int


def greedy_pick(logits_row: np.ndarray, allowed: np.ndarray) -> int:
    """Argmax over an allowed id subset; invariant to positive scaling."""
    return int(allowed[np.argmax(logits_row[allowed])])


def sample_pick(logits_row: np.ndarray, allowed: np.ndarray, temperature: float,
                top_k: int, rng: np.random.Generator) -> int:
    vals = logits_row[allowed].astype(np.float64) / max(temperature, 1e-6)
    if top_k > 0 and top_k < len(vals):
        keep = np.argsort(-vals)[:top_k]
        allowed = allowed[keep]
        vals = vals[keep]
    vals -= vals.max()
    p = np.exp(vals)
    p /= p.sum()
    return int(allowed[rng.choice(len(allowed), p=p)])


def generate(params: dict, cfg: LMConfig, sem: Tensor, spk: Tensor | None,
             max_steps: int = 128, tail: int = 40, mode: str = "greedy",
             temperature: float = 1.0, top_k: int = 0,
             rng: np.random.Generator | None = None) -> GenerationResult:
    """Step-by-step decoding with structural tokens forced by construction.

    Stops once the text stream has emitted EOS and every acoustic stream has
    closed with PAD, or tail steps past EOS, or at max_steps (truncation
    flag). The returned grid is rebuilt in canonical layout from the emitted
    text and codes, so it always inverts cleanly.
    """
    layout = cfg.layout
    n = layout.n_layers
    if max_steps < n + 2:
        raise ConfigError(f"generate: max_steps must be at least {n + 2}")
    if tail < 1:
        raise ConfigError("generate: tail must be at least 1")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"generate: unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ConfigError("generate: sample mode needs an rng")

    text_allowed_first = np.arange(TEXT_CONTENT)
    text_allowed = np.concatenate([np.arange(TEXT_CONTENT), [TEXT_EOS]])
    code_only = np.arange(layout.code_vocab)
    code_or_pad = np.concatenate([np.arange(layout.code_vocab), [layout.ac_pad]])

    def pick(row, allowed):
        if mode == "greedy":
            return greedy_pick(row, allowed)
        return sample_pick(row, allowed, temperature, top_k, rng)

    text: list[int] = []
    codes: list[list[int]] = [[] for _ in range(n)]
    closed = [False] * n
    eos_step: int | None = None
    truncated = False
    cols: list[np.ndarray] = []
    steps = 0

    for j in range(max_steps):
        partial = np.stack(cols + [np.full(layout.n_streams, 0, dtype=np.int64)], axis=1)
        grid_j = DelayedGrid(tokens=partial, valid=_content_valid(partial, layout))
        logits = forward(params, cfg, sem, spk, grid_j)
        col = np.empty(layout.n_streams, dtype=np.int64)

        if eos_step is None:
            allowed = text_allowed_first if j == 0 else text_allowed
            tok = pick(logits[0].data[j], allowed)
            if tok == TEXT_EOS:
                eos_step = j
            else:
                text.append(tok)
            col[0] = tok
        else:
            col[0] = TEXT_PAD

        for i in range(n):
            d = i + 1
            if j < d:
                col[i + 1] = layout.ac_bos
            elif closed[i]:
                col[i + 1] = layout.ac_pad
            else:
                allowed = code_only if j == d else code_or_pad
                tok = pick(logits[i + 1].data[j], allowed)
                if tok == layout.ac_pad:
                    closed[i] = True
                else:
                    codes[i].append(tok)
                col[i + 1] = tok

        cols.append(col)
        steps = j + 1
        if eos_step is not None:
            if all(closed):
                break
            if j - eos_step >= n + tail:
                closed = [True] * n
                break
    else:
        truncated = True
    if eos_step is None or not all(closed):
        truncated = True

    t_a = min(len(c) for c in codes)
    code_arr = np.asarray([c[:t_a] for c in codes], dtype=np.int64)
    grid = build_delayed_grid(text, code_arr, layout)
    return GenerationResult(grid=grid, truncated=truncated, steps=steps)


# ---------------------------------------------------------------------------
# grid dump format: one stream per line, specials spelled out


def dump_grid(grid: DelayedGrid, layout: StreamLayout) -> str:
    lines = []
    for s in range(grid.n_streams):
        specials = ({TEXT_PAD: "<pad>", TEXT_BOS: "<bos>", TEXT_EOS: "<eos>"} if s == 0
                    else {layout.ac_pad: "<pad>", layout.ac_bos: "<bos>"})
        lines.append(" ".join(specials.get(int(v), str(int(v))) for v in grid.tokens[s]))
    return "\n".join(lines) + "\n"


def parse_grid(text: str, layout: StreamLayout) -> DelayedGrid:
    rows = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != layout.n_streams:
        raise GridFormatError(f"grid dump has {len(lines)} streams, expected {layout.n_streams}")
    for s, line in enumerate(lines):
        specials = ({"<pad>": TEXT_PAD, "<bos>": TEXT_BOS, "<eos>": TEXT_EOS} if s == 0
                    else {"<pad>": layout.ac_pad, "<bos>": layout.ac_bos})
        row = []
        for tok in line.split():
            if tok in specials:
                row.append(specials[tok])
            else:
                row.append(int(tok))
        rows.append(row)
    if len(set(len(r) for r in rows)) != 1:
        raise GridFormatError("grid dump rows have differing lengths")
    tokens = np.asarray(rows, dtype=np.int64)
    return DelayedGrid(tokens=tokens, valid=_content_valid(tokens, layout))
