import numpy as np
import pytest

from scan_embed.dataset import FoodPairRecord, collate
from scan_embed.encoders import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_records(rng, n, num_classes=3, vocab=12, d_s=5, d_img=6, max_tokens=5, max_sents=3):
    out = []
    for i in range(n):
        out.append(FoodPairRecord(
            i, int(rng.integers(0, num_classes)),
            rng.integers(1, vocab, int(rng.integers(1, max_tokens + 1))),
            rng.standard_normal((int(rng.integers(1, max_sents + 1)), d_s)),
            rng.standard_normal(d_img)))
    return out


def toy_model(seed=0, **kw):
    base = dict(vocab_size=12, num_classes=3, word_dim=4, hidden_dim=3, sentence_dim=5,
                image_dim=6, joint_dim=8, init_seed=seed)
    base.update(kw)
    return init_params(ModelConfig(**base))


@pytest.fixture
def toy_batch(rng):
    return collate(toy_records(rng, 6))


# -- acceptance reporting -----------------------------------------------------
_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record a one-line verdict for the terminal summary: verdict(key, passed, detail)."""
    def record(key: str, passed: bool, detail: str) -> bool:
        _VERDICTS[key] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: (len(k.split()[0]), k)):
        ok, detail = _VERDICTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
