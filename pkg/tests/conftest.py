import numpy as np
import pytest
import torch
from hypothesis import settings

from ppl.detector import DetectorConfig

settings.register_profile("pkg", deadline=None, max_examples=60)
settings.load_profile("pkg")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return DetectorConfig(image_h=28, image_w=28, patch_size=14, channels=3, embed_dim=16, depth=2, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=28, w=28, c=3):
    return rng.random((h, w, c), dtype=np.float32)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """28x28 corpus: 40/40 train, 20/20 test, 10/10 checker; built once per session."""
    from ppl.synthcorpus import CorpusConfig, SplitConfig, build_corpus, load_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = CorpusConfig(height=28, width=28, master_seed=5, splits=[
        SplitConfig("train", 40, 40, "quant+dominant"),
        SplitConfig("test", 20, 20, "quant+dominant"),
        SplitConfig("test_checker", 10, 10, "checker"),
    ])
    build_corpus(cfg, root, workers=1)
    return root, load_corpus(root)


def tiny_train_config(mode="ppl", **overrides):
    from ppl.trainer import TrainConfig

    doc = {"mode": mode, "batch_size": 8, "epochs": 2, "seed": 0,
           "detector": {"image_h": 28, "image_w": 28, "embed_dim": 16, "depth": 2, "heads": 2}}
    doc.update(overrides)
    return TrainConfig.from_dict(doc)


# one (criterion number, passed, summary) entry per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, summary: str) -> None:
    ACCEPTANCE_RESULTS.append((number, passed, summary))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {summary}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, summary in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {summary}")
