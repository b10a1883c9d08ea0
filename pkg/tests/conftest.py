import contextlib

import pytest
import torch

from aptdiff import corpus as corpus_mod
from aptdiff.ckpt import load_checkpoint, save_checkpoint
from aptdiff.config import AptConfig, ExperimentConfig, PretrainConfig
from aptdiff.tinynet import NetConfig
from aptdiff.trainer import pretrain

# Small enough that a full personalization step costs a few milliseconds.
TINY_NET = NetConfig(image_size=16, base_channels=8, channel_multipliers=(1, 2), attention_levels=(0, 1),
                     self_attention_levels=(1,), num_heads=2, token_dim=16, context_len=8, tap_levels=(0, 1),
                     groups=4)
TINY_PRETRAIN = PretrainConfig(steps=30, batch_size=8, corpus_size=64, lr=2e-3)


def tiny_config(**apt) -> ExperimentConfig:
    base = dict(steps=20, checkpoint_every=10, adapter_rank=4)
    base.update(apt)
    return ExperimentConfig(net=TINY_NET, pretrain=TINY_PRETRAIN, apt=AptConfig(**base))


@pytest.fixture(scope="session")
def tiny_corpus():
    return corpus_mod.make_corpus(TINY_PRETRAIN.corpus_size, TINY_NET.image_size, seed=0)


@pytest.fixture(scope="session")
def tiny_prior(tiny_corpus):
    return pretrain(tiny_corpus, TINY_NET, TINY_PRETRAIN.steps, seed=0, cfg=TINY_PRETRAIN)


@pytest.fixture(scope="session")
def tiny_refs():
    return corpus_mod.reference_set(2, TINY_NET.image_size, "square")


@pytest.fixture(scope="session")
def tiny_prior_path(tiny_prior, tmp_path_factory):
    return save_checkpoint(tmp_path_factory.mktemp("prior") / "prior.safetensors", tiny_prior)


# ---------------------------------------------------------------------------
# the full-size prior used by the trend criteria, cached across sessions

ACCEPT_PRETRAIN = PretrainConfig(steps=2000, batch_size=16)


@pytest.fixture(scope="session")
def accept_prior(request):
    cfg = ExperimentConfig(pretrain=ACCEPT_PRETRAIN)
    cache = request.config.cache.mkdir("aptdiff-prior")
    path = cache / f"prior-{cfg.digest()}.safetensors"
    if path.exists():
        return load_checkpoint(path, expect_config=cfg.net)
    corpus = corpus_mod.make_corpus(ACCEPT_PRETRAIN.corpus_size, cfg.net.image_size, ACCEPT_PRETRAIN.corpus_seed)
    bundle = pretrain(corpus, cfg.net, ACCEPT_PRETRAIN.steps, ACCEPT_PRETRAIN.seed, ACCEPT_PRETRAIN)
    save_checkpoint(path, bundle)
    return bundle


# ---------------------------------------------------------------------------
# acceptance criterion ledger: one PASS/FAIL line per criterion in the summary

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class CriterionRecorder:
    @contextlib.contextmanager
    def __call__(self, number: int, title: str):
        info = {}
        try:
            yield info
        except BaseException as exc:
            _CRITERIA[number] = (title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        _CRITERIA[number] = (title, True, info.get("detail", ""))


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield
    torch.use_deterministic_algorithms(False)
