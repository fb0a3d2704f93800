import numpy as np
import pytest
import torch

from editkit import bench, contrastive, encoders
from editkit.bench import GenConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic corpus shared by unit tests: 6 classes x 4 samples."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic(root, GenConfig(classes=6, samples_per_class=4, seed=5))
    return manifest


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return encoders.EncoderConfig(d_model=32, depth=1, heads=2, d_proj=16, max_tokens=16)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_corpus, tiny_model_cfg):
    """Untrained towers over the tiny corpus vocabulary."""
    texts = [r.instruction for r in tiny_corpus.records]
    texts += [r.input_caption for r in tiny_corpus.records]
    texts += [r.edited_caption for r in tiny_corpus.records]
    tok = encoders.Tokenizer.from_texts(texts, max_tokens=tiny_model_cfg.max_tokens)
    cfg = encoders.EncoderConfig(**{**vars(tiny_model_cfg), "vocab_size": len(tok)})
    return encoders.build_bundle(cfg, tok, seed=0)


@pytest.fixture(scope="session")
def tiny_triplets(tiny_corpus):
    return bench.load_triplets(tiny_corpus, split="train")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(0)
