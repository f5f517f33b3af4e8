"""RVQ codec: fitting, residual monotonicity, artifact round trip."""

import numpy as np
import pytest

from synthvc import codec as cd
from synthvc import synthworld as sw
from synthvc.errors import ArtifactFormatError, DataError, StateError


@pytest.fixture(scope="module")
def small_codec():
    rng = np.random.default_rng(4)
    frames = rng.normal(scale=1.5, size=(600, 16)).astype(np.float32)
    return frames, cd.fit_codebooks(frames, n=3, k=16, iters=10, seed=5)


def test_fit_exact_cover_zero_distortion():
    # corpus of exactly K distinct repeated frames: layer 0 nails it
    rng = np.random.default_rng(9)
    pts = rng.normal(scale=2.0, size=(15, 4)).astype(np.float32)
    frames = np.repeat(pts, 20, axis=0)
    codec = cd.fit_codebooks(frames, n=2, k=16, iters=30, seed=1)
    assert codec.layer_distortions[0] < 1e-6


def test_fit_recovers_two_gaussian_clusters():
    rng = np.random.default_rng(12)
    mu_a, mu_b = np.full(4, 3.0), np.full(4, -3.0)
    pts = np.vstack([
        rng.normal(mu_a, 0.05, size=(300, 4)),
        rng.normal(mu_b, 0.05, size=(300, 4)),
    ]).astype(np.float32)
    codec = cd.fit_codebooks(pts, n=1, k=3, iters=30, seed=2)  # zero + 2 effective
    cents = codec.codebooks[0].centroids[1:]
    sample_means = [pts[:300].mean(axis=0), pts[300:].mean(axis=0)]
    for mu in sample_means:
        assert min(np.linalg.norm(cents - mu, axis=1)) < 0.05


def test_fit_distortion_decreases_per_layer(small_codec):
    _, codec = small_codec
    d = codec.layer_distortions
    assert all(d[i + 1] <= d[i] for i in range(len(d) - 1))


def test_fit_rejects_small_corpus():
    with pytest.raises(DataError):
        cd.fit_codebooks(np.zeros((10, 4), dtype=np.float32), n=1, k=16)


def test_fit_reproducible_bitwise():
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(300, 8)).astype(np.float32)
    a = cd.fit_codebooks(frames, n=2, k=8, iters=8, seed=77)
    b = cd.fit_codebooks(frames, n=2, k=8, iters=8, seed=77)
    for ba, bb in zip(a.codebooks, b.codebooks):
        assert np.array_equal(ba.centroids, bb.centroids)
    assert a.fit_snr_db == b.fit_snr_db


def test_encode_centroid_frame_zero_deeper_codes(small_codec):
    _, codec = small_codec
    frame = codec.codebooks[0].centroids[7][None, :]
    grid = cd.encode(frame, codec)
    assert grid.codes[0, 0] == 7
    assert (grid.codes[1:, 0] == 0).all()


def test_encode_zero_frame_all_zero_codes(small_codec):
    _, codec = small_codec
    grid = cd.encode(np.zeros((3, 16), dtype=np.float32), codec)
    assert (grid.codes == 0).all()


def test_encode_residual_monotonic_exhaustive(small_codec):
    frames, codec = small_codec
    rng = np.random.default_rng(6)
    probe = rng.normal(scale=2.0, size=(500, 16)).astype(np.float32)
    residual = probe.astype(np.float64).copy()
    prev = np.linalg.norm(residual, axis=1)
    grid = cd.encode(probe, codec)
    for layer, book in enumerate(codec.codebooks):
        residual -= book.centroids.astype(np.float64)[grid.codes[layer]]
        cur = np.linalg.norm(residual, axis=1)
        assert np.all(cur <= prev)
        prev = cur


def test_encode_deterministic(small_codec):
    frames, codec = small_codec
    a = cd.encode(frames[:50], codec)
    b = cd.encode(frames[:50], codec)
    assert np.array_equal(a.codes, b.codes)


def test_encode_unfitted_rejected():
    empty = cd.RVQCodec(codebooks=[], fit_snr_db=0.0)
    with pytest.raises(StateError):
        cd.encode(np.zeros((2, 16), dtype=np.float32), empty)


def test_decode_all_zero_grid(small_codec):
    _, codec = small_codec
    out = cd.decode(cd.CodeGrid(np.zeros((3, 5), dtype=np.int64)), codec)
    np.testing.assert_array_equal(out, np.zeros((5, 16), dtype=np.float32))


def test_decode_code_out_of_range(small_codec):
    _, codec = small_codec
    with pytest.raises(IndexError):
        cd.decode(cd.CodeGrid(np.full((3, 2), 16, dtype=np.int64)), codec)


def test_roundtrip_beats_first_layer_alone(small_codec):
    frames, codec = small_codec
    rng = np.random.default_rng(8)
    probe = rng.normal(scale=1.5, size=(200, 16)).astype(np.float32)
    grid = cd.encode(probe, codec)
    full = cd.decode(grid, codec)
    only0 = codec.codebooks[0].centroids[grid.codes[0]]
    err_full = np.sum((probe - full) ** 2, axis=1)
    err_l0 = np.sum((probe - only0) ** 2, axis=1)
    assert np.all(err_full <= err_l0 + 1e-6)


def test_distortion_decreases_with_layer_count(small_codec):
    frames, codec = small_codec
    grid = cd.encode(frames, codec)
    errs = []
    for upto in range(1, codec.n_layers + 1):
        partial = np.zeros((frames.shape[0], 16), dtype=np.float64)
        for layer in range(upto):
            partial += codec.codebooks[layer].centroids.astype(np.float64)[grid.codes[layer]]
        errs.append(float(np.mean(np.sum(frames - partial.astype(np.float32), axis=1) ** 2)))
    # corpus-average distortion shrinks monotonically in layer count
    d = [float(np.mean(np.sum((frames.astype(np.float64) -
                               sum(codec.codebooks[l].centroids.astype(np.float64)[grid.codes[l]]
                                   for l in range(upto))) ** 2, axis=1)))
         for upto in range(1, codec.n_layers + 1)]
    assert all(d[i + 1] <= d[i] for i in range(len(d) - 1))


def test_heldout_snr_within_one_db_of_fit():
    splits = sw.make_corpus(seed=7001)
    frames = cd.build_fit_corpus(splits, seed=7101)
    codec = cd.fit_codebooks(frames, n=4, k=64, iters=25, seed=7101)
    rng = np.random.default_rng(1)
    chunks = []
    for text in splits.heldout_texts:
        sid = splits.heldout_speaker_ids[int(rng.integers(4))]
        chunks.append(sw.render(splits.vocab, text, splits.speakers[sid],
                                sw.PRISTINE, int(rng.integers(2**31))).frames)
    ho_snr = cd.reconstruction_snr_db(np.concatenate(chunks), codec)
    assert ho_snr >= codec.fit_snr_db - 1.0


def test_artifact_round_trip(tmp_path, small_codec):
    frames, codec = small_codec
    path = tmp_path / "codec.rvq"
    cd.save_codec(path, codec)
    back = cd.load_codec(path)
    assert back.n_layers == codec.n_layers
    assert np.float32(back.fit_snr_db) == np.float32(codec.fit_snr_db)
    for a, b in zip(codec.codebooks, back.codebooks):
        np.testing.assert_array_equal(a.centroids, b.centroids)
    grid = cd.encode(frames[:20], back)
    assert np.array_equal(grid.codes, cd.encode(frames[:20], codec).codes)


def test_artifact_bad_magic(tmp_path):
    path = tmp_path / "bad.rvq"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArtifactFormatError):
        cd.load_codec(path)
