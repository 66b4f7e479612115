"""Shared fixtures for the test suite.

The expensive one is ``overfit_run``: a small network trained to memorize an
8-document synthetic corpus.  Several suites need a trained model whose
predictions are decisive rather than random-init noise, so it is built once
per session and reused.
"""

from __future__ import annotations

import time

import pytest
from threadpoolctl import threadpool_limits

from gridkie.data import ClassSet, SynthSpec, synth_generate
from gridkie.gridder import AugmentParams, GridShape
from gridkie.model import NetConfig, TokenGridNet
from gridkie.tokenizer import build_vocab
from gridkie.train import TrainConfig, train

# Lines registered by the acceptance suite; printed at the end of the run.
_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def class_set():
    return ClassSet()


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_generate(SynthSpec(n_documents=12, seed=7))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus, 600)


# Recipe for the memorization run: 8 docs, fixed 32x32 grid, small net.
OVERFIT_STEPS = 300


def overfit_recipe(out_dir):
    docs = synth_generate(SynthSpec(n_documents=8, seed=11))
    classes = ClassSet()
    vocab = build_vocab(docs, 400)
    net_cfg = NetConfig(
        vocab_size=len(vocab),
        embedding_dim=32,
        trunk_channels=64,
        shortcut_channels=32,
        num_classes=len(classes),
    )
    train_cfg = TrainConfig(
        max_steps=OVERFIT_STEPS,
        batch_size=8,
        seed=5,
        augment=AugmentParams(mean_rows=32, mean_cols=32, sigma=0.0, min_size=16, max_size=48),
        checkpoint_interval=10**9,  # final checkpoint only
        log_interval=50,
    )
    model = TokenGridNet(net_cfg, seed=5)
    t0 = time.time()
    with threadpool_limits(limits=1):
        result = train(
            model,
            docs,
            vocab,
            train_cfg,
            classes,
            checkpoint_dir=str(out_dir),
            log_path=str(out_dir / "train.jsonl"),
        )
    return {
        "docs": docs,
        "classes": classes,
        "vocab": vocab,
        "net_config": net_cfg,
        "train_config": train_cfg,
        "model": model,
        "result": result,
        "grid": GridShape(32, 32),
        "out_dir": out_dir,
        "seconds": time.time() - t0,
    }


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    return overfit_recipe(tmp_path_factory.mktemp("overfit"))
