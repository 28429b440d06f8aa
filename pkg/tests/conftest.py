import numpy as np
import pytest

from m3ae import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` over every coordinate of float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scene_dataset(n: int = 8, side: int = 8, seed: int = 0, **model_overrides):
    """(vocab, model config, PairDataset) over ``n`` distinct rendered scenes."""
    from m3ae.corpus import sample_scenes, vocabulary_texts
    from m3ae.data import build_vocab, patchify
    from m3ae.harness import PairDataset, Sample, prepare_text
    from m3ae.transformer import ModelConfig

    scenes = sample_scenes(n, seed, unique=True)
    vocab = build_vocab(vocabulary_texts([s.caption for s in scenes]))
    make = ModelConfig.tiny if side == 8 else ModelConfig.desk
    cfg = make(vocab_size=len(vocab), image_side=side, **model_overrides)
    samples = [Sample(patchify(s.render(side), cfg.patch).patches, prepare_text(s.caption, vocab, cfg), s.caption)
               for s in scenes]
    return vocab, cfg, PairDataset(samples)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
