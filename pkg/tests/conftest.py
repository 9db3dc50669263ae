import json
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from copyforge.config import CopyMode, ModelConfig, RunConfig
from copyforge.models import EncodedExample
from copyforge.network import ModelParameters, init_params
from copyforge.vocab import Vocabulary, encode_example


@pytest.fixture
def toy_vocab() -> Vocabulary:
    """Three content words plus the four specials (size 7)"""
    return Vocabulary(["alpha", "beta", "gamma"])


@pytest.fixture
def tiny_config(toy_vocab) -> ModelConfig:
    """Smallest model that still exercises every parameter group"""
    return ModelConfig(
        emb_dim=4,
        hidden_dim=4,
        enc_layers=1,
        enc_heads=1,
        enc_ff_dim=4,
        dec_layers=1,
        vocab_size=toy_vocab.size,
        max_src_len=16,
        max_tgt_len=16,
        seed=3,
    )


@pytest.fixture
def tiny_params(tiny_config) -> ModelParameters:
    return init_params(tiny_config)


@pytest.fixture
def toy_example(toy_vocab) -> EncodedExample:
    """Target holds an OOV copy, an in-vocabulary copy and a generated word"""
    return encode_example("alpha zeta beta", "zeta beta gamma", toy_vocab)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def write_pairs(path: Path, pairs: List[Tuple[str, str]]) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        for src, tgt in pairs:
            handle.write(json.dumps({"src": src, "tgt": tgt}) + "\n")
    return path


def identity_pairs(seed: int, n: int, words: int = 12, oov_fraction: float = 0.3) -> List[Tuple[str, str]]:
    """Copy task: target equals source; a share of tokens are one-off names"""
    rng = np.random.default_rng(seed)
    common = [f"w{i}" for i in range(words)]
    pairs = []
    for k in range(n):
        tokens = []
        for j in range(int(rng.integers(3, 6))):
            if rng.random() < oov_fraction:
                tokens.append(f"name{k}x{j}")
            else:
                tokens.append(common[int(rng.integers(0, words))])
        text = " ".join(tokens)
        pairs.append((text, text))
    return pairs


@pytest.fixture
def copy_corpus(tmp_path) -> Tuple[Path, Path]:
    """Small train/valid JSONL files for the identity task"""
    train = write_pairs(tmp_path / "train.jsonl", identity_pairs(0, 12))
    valid = write_pairs(tmp_path / "valid.jsonl", identity_pairs(1, 4))
    return train, valid


@pytest.fixture
def tiny_run_config(tmp_path, copy_corpus) -> RunConfig:
    """A run that trains in a few seconds on the copy corpus"""
    train, valid = copy_corpus
    return RunConfig.from_flat(
        {
            "emb_dim": "4",
            "hidden_dim": "6",
            "enc_layers": "1",
            "enc_ff_dim": "6",
            "max_src_len": "16",
            "max_tgt_len": "16",
            "mode": CopyMode.FORCE_COPY.value,
            "batch_size": "4",
            "max_steps": "6",
            "eval_every": "3",
            "seed": "5",
            "checkpoint_dir": str(tmp_path / "run"),
            "train_path": str(train),
            "valid_path": str(valid),
            "test_path": str(valid),
            "max_vocab": "30",
            "beam_size": "2",
            "max_len": "8",
        }
    )
