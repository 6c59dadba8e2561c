import re
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from rolldiff.cli import main
from rolldiff.data import make_toy_dataset

# Overfit setting shared by the acceptance suite and the CLI tests. The
# residual width is reduced from 512 to 64 so training fits in a couple of
# minutes on one CPU core; everything else is the default architecture.
OVERFIT_CHANNELS = 64
OVERFIT_STEPS = 500
OVERFIT_LR = 1e-3
OVERFIT_ITEMS = 2

torch.set_num_threads(1)


@dataclass
class TrainedRun:
    checkpoint: Path
    corpus: Path
    seconds: float


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("toy")
    make_toy_dataset(OVERFIT_ITEMS, 0, out)
    return out


def _train(corpus: Path, out: Path, *extra: str) -> TrainedRun:
    start = time.perf_counter()
    rc = main(
        [
            "train",
            "--manifest", str(corpus / "manifest.json"),
            "--out", str(out),
            "--channels", str(OVERFIT_CHANNELS),
            "--steps", str(OVERFIT_STEPS),
            "--lr", str(OVERFIT_LR),
            "--batch-size", "4",
            "--seed", "0",
            "--log", str(out.with_suffix(".log.jsonl")),
            "--log-every", "50",
            *extra,
        ]
    )
    assert rc == 0
    return TrainedRun(out, corpus, time.perf_counter() - start)


@pytest.fixture(scope="session")
def overfit_run(toy_corpus, tmp_path_factory) -> TrainedRun:
    return _train(toy_corpus, tmp_path_factory.mktemp("ckpt") / "overfit.pt", "--p", "0.1")


@pytest.fixture(scope="session")
def discriminative_run(toy_corpus, tmp_path_factory) -> TrainedRun:
    return _train(toy_corpus, tmp_path_factory.mktemp("ckpt") / "disc.pt", "--discriminative", "--p", "0")


# ---------------------------------------------------------------- acceptance summary

_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")
_results: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if n not in _results or status == "FAIL":
            _results[n] = (status, name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name, detail = _results[n]
        line = f"{status} criterion {n:2d}: {name}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
