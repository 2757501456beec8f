import numpy as np
import pytest
import torch

from dualskin.dataset import load_dataset
from dualskin.synthgen import SceneParams, generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    """16 training scenes at 32x32 plus 4 dual-labelled validation scenes."""
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(SceneParams(image_size=32, seed=3), 16, 0.5, out, val_count=4)
    return out


@pytest.fixture(scope="session")
def tiny_train(tiny_dir):
    return load_dataset(tiny_dir / "train.jsonl", size=32)


@pytest.fixture(scope="session")
def tiny_val(tiny_dir):
    return load_dataset(tiny_dir / "val.jsonl", size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    if call.when != "call" or not item.name.startswith("test_criterion_"):
        return
    number = int(item.name.split("_")[2])
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[number] = ("PASS" if call.excinfo is None else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[number]
        line = f"criterion {number:2d}: {status}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
