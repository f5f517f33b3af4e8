"""Residual vector quantization codec over frame matrices.

Each layer's codebook is fit by batch Lloyd k-means (k-means++ init) on the
residual left by the previous layers. Centroid index 0 of every layer is
pinned to the exact zero vector and never updated, which makes per-frame
residual-norm monotonicity an exact invariant of encode. The codec is fit
offline and frozen for all LM training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError, DataError, StateError
from . import numerics as nm

CODEC_MAGIC = b"RVQ1"


@dataclass(frozen=True)
class Codebook:
    layer: int
    centroids: np.ndarray    # (K, F) float32; row 0 is exactly zero

    def __post_init__(self):
        if not np.isfinite(self.centroids).all():
            raise DataError(f"codebook layer {self.layer}: non-finite centroids")
        if np.any(self.centroids[0] != 0.0):
            raise DataError(f"codebook layer {self.layer}: row 0 must be the zero vector")


@dataclass(frozen=True)
class CodeGrid:
    """n-layer x T_a integer code matrix."""

    codes: np.ndarray        # (n, T_a) int64

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise DataError(f"code grid must be 2-D, got shape {self.codes.shape}")

    @property
    def n_layers(self) -> int:
        return self.codes.shape[0]

    @property
    def length(self) -> int:
        return self.codes.shape[1]


@dataclass
class RVQCodec:
    codebooks: list[Codebook]
    fit_snr_db: float
    layer_distortions: list[float] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.codebooks[0].centroids.shape[1]


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = data[first]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = data[int(rng.integers(0, n))]
        else:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
            centroids[i] = data[idx]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def _assign(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # exact distance matrix; ties resolve to the lower index via argmin
    d2 = np.sum((data[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return d2.argmin(axis=1)


def _assign_fit(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # expansion form for the large fitting corpus; deterministic in float64
    d2 = (np.sum(data ** 2, axis=1, keepdims=True)
          - 2.0 * data @ centroids.T
          + np.sum(centroids ** 2, axis=1)[None, :])
    return d2.argmin(axis=1)


def _lloyd(data: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """k centroids with row 0 pinned to zero; k-1 learnable rows."""
    learn = _kmeans_pp_init(data, k - 1, rng)
    centroids = np.vstack([np.zeros((1, data.shape[1])), learn])
    for _ in range(iters):
        labels = _assign_fit(data, centroids)
        dists = np.sum((data - centroids[labels]) ** 2, axis=1)
        order = np.argsort(-dists)   # highest-distortion points for re-seeding
        reseed_ptr = 0
        for c in range(1, k):
            members = data[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                centroids[c] = data[order[reseed_ptr]]
                reseed_ptr += 1
    return centroids


def build_fit_corpus(splits, parallel_per_utt: int = 4, degraded_per_utt: int = 2,
                     seed: int = 0) -> np.ndarray:
    """Stack the frames the codec will quantize during training.

    Training targets are parallel renders of each utterance under other train
    speakers, in both channels, so the fitting corpus includes those too.
    """
    from . import synthworld as sw

    rng = np.random.default_rng([0xCB0F, seed])
    chunks = []
    train_ids = np.asarray(splits.train_speaker_ids)
    for utt in splits.utterances:
        chunks.append(splits.render_utterance(utt).frames)
        for _ in range(parallel_per_utt):
            sid = int(train_ids[rng.integers(len(train_ids))])
            chunks.append(sw.render(splits.vocab, utt.text, splits.speakers[sid],
                                    sw.PRISTINE, int(rng.integers(2**31))).frames)
        for _ in range(degraded_per_utt):
            sid = int(train_ids[rng.integers(len(train_ids))])
            chunks.append(sw.render(splits.vocab, utt.text, splits.speakers[sid],
                                    sw.DEGRADED, int(rng.integers(2**31))).frames)
    return np.concatenate(chunks, axis=0)


def fit_codebooks(frames: np.ndarray, n: int = 4, k: int = 64,
                  iters: int = 25, seed: int = 0) -> RVQCodec:
    """Fit n residual codebooks on a frame corpus; bit-reproducible per seed."""
    data = np.asarray(frames, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"fit_codebooks: frames must be (N, F), got {data.shape}")
    if data.shape[0] < k:
        raise DataError(f"fit_codebooks: corpus has {data.shape[0]} frames, need at least {k}")
    rng = np.random.default_rng([0xCB00, seed])
    residual = data.copy()
    books: list[Codebook] = []
    distortions: list[float] = []
    for layer in range(n):
        cents64 = _lloyd(residual, k, iters, rng)
        cents = cents64.astype(np.float32)
        cents[0] = 0.0
        cents.flags.writeable = False
        books.append(Codebook(layer=layer, centroids=cents))
        labels = _assign_fit(residual, cents.astype(np.float64))
        residual = residual - cents.astype(np.float64)[labels]
        distortions.append(float(np.mean(np.sum(residual ** 2, axis=1))))
    signal = float(np.sum(data ** 2))
    err = float(np.sum(residual ** 2))
    snr = 10.0 * np.log10(signal / err) if err > 0 else np.inf
    return RVQCodec(codebooks=books, fit_snr_db=float(snr), layer_distortions=distortions)


def encode(frames: np.ndarray, codec: RVQCodec) -> CodeGrid:
    """Greedy nearest-centroid per layer on the running residual."""
    if not codec.codebooks:
        raise StateError("encode: codec has no fitted codebooks")
    data = np.asarray(frames, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != codec.feature_dim:
        raise DataError(f"encode: frames shape {data.shape} does not match feature dim {codec.feature_dim}")
    residual = data.copy()
    rows = []
    for book in codec.codebooks:
        cents = book.centroids.astype(np.float64)
        labels = _assign(residual, cents)
        residual -= cents[labels]
        rows.append(labels)
    return CodeGrid(codes=np.stack(rows).astype(np.int64))


def decode(grid: CodeGrid, codec: RVQCodec) -> np.ndarray:
    """Sum of selected centroids across layers."""
    codes = grid.codes if isinstance(grid, CodeGrid) else np.asarray(grid)
    if codes.shape[0] != codec.n_layers:
        raise DataError(f"decode: grid has {codes.shape[0]} layers, codec has {codec.n_layers}")
    k = codec.codebook_size
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise IndexError(f"decode: code out of range [0, {k})")
    out = np.zeros((codes.shape[1], codec.feature_dim), dtype=np.float64)
    for layer, book in enumerate(codec.codebooks):
        out += book.centroids.astype(np.float64)[codes[layer]]
    return out.astype(np.float32)


def reconstruction_snr_db(frames: np.ndarray, codec: RVQCodec) -> float:
    recon = decode(encode(frames, codec), codec)
    err = float(np.sum((np.asarray(frames, dtype=np.float64) - recon) ** 2))
    sig = float(np.sum(np.asarray(frames, dtype=np.float64) ** 2))
    return 10.0 * np.log10(sig / err) if err > 0 else float("inf")


# ---------------------------------------------------------------------------
# artifact file: magic, n, K, F, centroid tensor records, fit-time SNR (f32)


def save_codec(path: Path, codec: RVQCodec) -> None:
    with open(path, "wb") as fh:
        fh.write(CODEC_MAGIC)
        fh.write(struct.pack("<III", codec.n_layers, codec.codebook_size, codec.feature_dim))
        for book in codec.codebooks:
            nm.write_tensor_record(fh, f"layer{book.layer}", book.centroids)
        fh.write(struct.pack("<f", np.float32(codec.fit_snr_db)))


def load_codec(path: Path) -> RVQCodec:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CODEC_MAGIC:
            raise ArtifactFormatError(f"codec artifact: bad magic {magic!r}")
        head = fh.read(12)
        if len(head) != 12:
            raise ArtifactFormatError("codec artifact: truncated header")
        n, k, f = struct.unpack("<III", head)
        books = []
        for layer in range(n):
            rec = nm.read_tensor_record(fh)
            if rec is None:
                raise ArtifactFormatError("codec artifact: missing codebook record")
            name, cents = rec
            if name != f"layer{layer}" or cents.shape != (k, f):
                raise ArtifactFormatError(f"codec artifact: unexpected record {name} {cents.shape}")
            cents.flags.writeable = False
            books.append(Codebook(layer=layer, centroids=cents))
        tail = fh.read(4)
        if len(tail) != 4:
            raise ArtifactFormatError("codec artifact: missing SNR field")
        (snr,) = struct.unpack("<f", tail)
    return RVQCodec(codebooks=books, fit_snr_db=float(snr))
