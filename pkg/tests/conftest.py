import pytest
import torch

from trojanfilter.corpus import synthetic_stories
from trojanfilter.model import ModelConfig, TinyTransformer, freeze
from trojanfilter.trojans import format_clean_sample, load_trojans, trojan_vocabulary_words
from trojanfilter.vocab import Vocabulary

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def trojans():
    return load_trojans()


@pytest.fixture(scope="session")
def stories():
    return synthetic_stories(200, seed=7)


@pytest.fixture(scope="session")
def vocab(stories, trojans):
    return Vocabulary.build(stories, trojan_vocabulary_words(trojans))


@pytest.fixture(scope="session")
def clean_samples(stories, vocab):
    return [format_clean_sample(s, vocab) for s in stories]


def tiny_model(vocab_size, d_model=16, n_layers=2, n_heads=2, max_seq_len=64, seed=0, init_std=0.02):
    return freeze(TinyTransformer(ModelConfig(vocab_size=vocab_size, n_layers=n_layers, d_model=d_model,
                                              n_heads=n_heads, max_seq_len=max_seq_len, seed=seed,
                                              init_std=init_std)))


@pytest.fixture
def model(vocab):
    # larger init so activations and logits are far from uniform
    return tiny_model(len(vocab), init_std=0.3)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
