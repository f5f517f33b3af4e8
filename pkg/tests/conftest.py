"""Session fixtures: the frozen world, codec, encoders, and oracles at the
default configuration, shared by module tests and the acceptance suite."""

import numpy as np
import pytest

from synthvc import codec as cd
from synthvc import encoders as en
from synthvc import evaluation as ev
from synthvc import synthworld as sw
from synthvc import trainer as tr

CORPUS_SEED = 7001
CODEC_SEED = 7101
ENC_SEED = 7201
ORACLE_SEED = 9001
TRAIN_SEED = 7401
EVAL_SEED = 7501


@pytest.fixture(scope="session")
def splits():
    return sw.make_corpus(seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def codec(splits):
    frames = cd.build_fit_corpus(splits, seed=CODEC_SEED)
    return cd.fit_codebooks(frames, n=4, k=64, iters=25, seed=CODEC_SEED)


@pytest.fixture(scope="session")
def sem_enc(splits):
    return en.pretrain_semantic_encoder(splits, steps=1200, seed=ENC_SEED)


@pytest.fixture(scope="session")
def spk_enc(splits):
    return en.pretrain_speaker_encoder(splits, steps=800, seed=ENC_SEED)


@pytest.fixture(scope="session")
def verifier(splits):
    return ev.train_oracle_verifier(splits, seed=ORACLE_SEED)


@pytest.fixture(scope="session")
def transcriber(splits):
    return ev.train_oracle_transcriber(splits, seed=ORACLE_SEED + 1)


@pytest.fixture(scope="session")
def eval_pairs(splits):
    return ev.make_eval_manifest(splits, n_pairs=32, seed=EVAL_SEED)


@pytest.fixture(scope="session")
def context(splits, codec, sem_enc, spk_enc, verifier, transcriber, eval_pairs):
    return tr.PipelineContext(splits, codec, sem_enc, spk_enc, verifier=verifier,
                              transcriber=transcriber, eval_pairs=eval_pairs)


@pytest.fixture(scope="session")
def bare_context(splits, codec, sem_enc, spk_enc):
    """Context without oracles, for trainer mechanics tests."""
    return tr.PipelineContext(splits, codec, sem_enc, spk_enc)


@pytest.fixture(scope="session")
def default_plan():
    return tr.TrainPlan()


@pytest.fixture(scope="session")
def default_run(context, default_plan):
    """The full default training run; the acceptance headline artifact."""
    return tr.run_pipeline(context, default_plan)


@pytest.fixture(scope="session")
def rerun_run(splits, codec, sem_enc, spk_enc, verifier, transcriber, eval_pairs,
              default_plan):
    """Second full run with the same seed, on a fresh context (fresh caches)."""
    ctx = tr.PipelineContext(splits, codec, sem_enc, spk_enc, verifier=verifier,
                             transcriber=transcriber, eval_pairs=eval_pairs)
    return tr.run_pipeline(ctx, default_plan)


@pytest.fixture(scope="session")
def ablation_run(splits, codec, sem_enc, spk_enc, verifier, transcriber, eval_pairs):
    """Same schedule and seed with the text stream's loss weight zeroed."""
    ctx = tr.PipelineContext(splits, codec, sem_enc, spk_enc, verifier=verifier,
                             transcriber=transcriber, eval_pairs=eval_pairs)
    plan = tr.TrainPlan(text_loss_scale=0.0)
    return tr.run_pipeline(ctx, plan)
