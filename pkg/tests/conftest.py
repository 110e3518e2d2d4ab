import os

import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = []
# Where the caller keeps real checkpoints; tests redirect MODEL_CACHE_DIR for toy caches.
USER_MODEL_CACHE_DIR = os.environ.get("MODEL_CACHE_DIR")


def pytest_configure(config):
    config._acceptance_lines = ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def model_cache(tmp_path_factory):
    """Share toy readout calibrations across the session via MODEL_CACHE_DIR."""
    previous = os.environ.get("MODEL_CACHE_DIR")
    path = os.environ.get("DEFENSE_PREFIX_TEST_CACHE") or str(tmp_path_factory.mktemp("models"))
    os.environ["MODEL_CACHE_DIR"] = path
    yield path
    if previous is None:
        os.environ.pop("MODEL_CACHE_DIR", None)
    else:
        os.environ["MODEL_CACHE_DIR"] = previous


@pytest.fixture(scope="session")
def toy16(model_cache):
    from defense_prefix.gateway import load_model

    return load_model("toy-16", "toy")


@pytest.fixture(scope="session")
def toy64(model_cache):
    from defense_prefix.gateway import load_model

    return load_model("toy-64", "toy")


def build_tiny_clip(path):
    """Randomly initialised two-layer CLIP with a character-level tokenizer."""
    from transformers import CLIPConfig, CLIPModel, CLIPTokenizer

    chars = [chr(c) for c in range(33, 127)]
    vocab = {}
    for c in chars:
        vocab[c] = len(vocab)
    for c in chars:
        vocab[c + "</w>"] = len(vocab)
    bos, eos = len(vocab), len(vocab) + 1
    vocab["<|startoftext|>"] = bos
    vocab["<|endoftext|>"] = eos
    CLIPTokenizer(vocab=vocab, merges=[]).save_pretrained(path)
    torch.manual_seed(0)
    cfg = CLIPConfig(
        text_config=dict(vocab_size=len(vocab), hidden_size=32, intermediate_size=64,
                         num_hidden_layers=2, num_attention_heads=4, max_position_embeddings=77,
                         bos_token_id=bos, eos_token_id=eos, pad_token_id=eos),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                           num_attention_heads=4, image_size=32, patch_size=8),
        projection_dim=16)
    CLIPModel(cfg).save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def tiny_clip_dir(tmp_path_factory):
    pytest.importorskip("transformers")
    return build_tiny_clip(tmp_path_factory.mktemp("tiny-clip"))


@pytest.fixture(scope="session")
def tiny_clip(tiny_clip_dir):
    from defense_prefix.gateway import load_model

    return load_model(str(tiny_clip_dir), "pretrained")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
