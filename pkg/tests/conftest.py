import numpy as np
import pytest

from leafkd.encoder import EncoderConfig, encode, encode_backward, init_encoder
from leafkd.fixtures import pinned_fixture
from leafkd.tokenizer import Vocab, build_vocab, pad_sequences
from leafkd.trainer import train

TINY_CORPUS = [
    "the cat sat on the mat",
    "a dog sat on a log",
    "the cat chased the dog",
    "cats and dogs are pets",
    "a mat for the cat",
]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_vocab() -> Vocab:
    return build_vocab(TINY_CORPUS, 48)


def tiny_config(vocab_size=12, layers=1, heads=2, hidden=8, out=8, **kw) -> EncoderConfig:
    return EncoderConfig(
        num_layers=layers, num_heads=heads, hidden_dim=hidden, vocab_size=vocab_size, output_dim=out, max_context=6, **kw
    )


def tiny_batch():
    """Two sequences, the second padded (T=4)."""
    return pad_sequences([[2, 5, 7, 3], [2, 9, 3]])


def encoder_loss_fn(state, batch, target):
    """Loss ``sum(y * target)`` through the full encoder, with its gradients."""

    def f():
        y, trace = encode(state, batch, want_trace=True)
        encode_backward(state, trace, target.astype(np.float32))
        return float((y.astype(np.float64) * target).sum())

    return f


@pytest.fixture(scope="session")
def pinned():
    return pinned_fixture()


@pytest.fixture(scope="session")
def pinned_run(pinned):
    """The 20-epoch pinned run; shared by convergence and robustness checks."""
    student = init_encoder(pinned.student_config)
    return train(student, pinned.cache, pinned.train_config, pinned.vocab)


@pytest.fixture
def tiny_state():
    return init_encoder(tiny_config())


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one ``PASS/FAIL criterion N: ...`` line for the run summary."""

    def add(number, ok, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
