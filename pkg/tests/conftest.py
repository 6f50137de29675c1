import numpy as np
import pytest

from sapt.backbone import Backbone, BackboneConfig
from sapt.config import build_config
from sapt.tasks import Tokenizer

# acceptance results collected by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []

TINY = {
    "pet.kind": "lora",
    "backbone.model_dim": 16,
    "backbone.heads": 2,
    "backbone.layers": 1,
    "backbone.ffn_dim": 32,
    "backbone.max_seq_len": 96,
    "backbone.pretrain_steps": 20,
    "proj.hidden": 8,
    "data.order": ["copy", "uppercase", "last-word"],
    "data.n_train": 30,
    "data.n_val": 6,
    "data.n_test": 6,
    "optim.steps": 3,
    "optim.batch_size": 4,
    "ref.steps": 2,
    "ref.batch_size": 4,
    "ref.max_new": 12,
    "ref.prompt_length": 4,
    "selector.steps": 3,
    "selector.batch": 4,
    "eval.max_new": 6,
}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tok():
    return Tokenizer()


@pytest.fixture(scope="session")
def small_model(tok):
    """Randomly initialised, frozen backbone (d=16) for fast op-level tests."""
    m = Backbone(BackboneConfig(tok.vocab_size, model_dim=16, layers=2, heads=2, ffn_dim=32,
                                max_seq_len=96, seed=3))
    m.freeze()
    return m


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    return str(tmp_path_factory.mktemp("backbone") / "tiny")


@pytest.fixture
def tiny_overrides(tiny_checkpoint):
    return dict(TINY, **{"backbone.checkpoint": tiny_checkpoint})


@pytest.fixture
def tiny_config(tiny_overrides):
    def make(**extra):
        flat = dict(tiny_overrides)
        flat.update({k.replace("__", "."): v for k, v in extra.items()})
        return build_config(flat)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained(tok):
    """The default-size backbone from the shared cache (pretrained on a miss)."""
    from sapt.harness import get_backbone
    return get_backbone(build_config({}), tok)
