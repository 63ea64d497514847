import numpy as np
import pytest

from todkit.corpus import generate_synthetic
from todkit.encoder import EncoderConfig
from todkit.tokenizer import train_subword

_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


@pytest.fixture(scope="session")
def synth_corpus():
    return generate_synthetic(seed=7, n_dialogues=40)


@pytest.fixture(scope="session")
def vocab(synth_corpus):
    texts = [t.text for d in synth_corpus for t in d.turns]
    return train_subword(texts, vocab_size=160)


@pytest.fixture(scope="session")
def tiny_cfg(vocab):
    return EncoderConfig(num_layers=2, num_heads=2, hidden=16, ffn_dim=32,
                         vocab_size=len(vocab), max_positions=64, dropout=0.0)


def fd_gradcheck(loss_fn, params, grads, rng=None, samples_per_tensor=None,
                 eps=1e-5, floor=1e-4):
    """Central-difference check; relative error uses max(|a|, |n|, floor)."""
    worst = 0.0
    worst_at = ""
    for name in sorted(params):
        flat = params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        if samples_per_tensor is None or flat.size <= samples_per_tensor:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn(params)
            flat[i] = orig - eps
            fm = loss_fn(params)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            rel = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            if rel > worst:
                worst = rel
                worst_at = f"{name}[{i}]"
    return worst, worst_at


@pytest.fixture
def gradcheck():
    return fd_gradcheck


def record_acceptance(name: str, passed: bool) -> None:
    _ACCEPTANCE_RESULTS.append((name, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}")
