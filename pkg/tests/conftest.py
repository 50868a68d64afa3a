import re

import numpy as np
import pytest

from ddnet.config import ModelConfig
from ddnet.model import Batch
from ddnet.data import FeatureSequence


def micro_config(**kw) -> ModelConfig:
    base = dict(D_sem=5, D_tex=4, D=8, T_max=6, n_heads=2, K=2, clfe_blocks=1, transformer_layers=1,
                tau=0.3)
    base.update(kw)
    return ModelConfig(**base)


def micro_batch(seed: int = 0, B: int = 2, T: int = 6, K: int = 2, d_sem: int = 5, d_tex: int = 4) -> Batch:
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(B):
        y = np.zeros(T, bool)
        y[1 + i:4 + i] = True
        seqs.append(FeatureSequence(f"m{i}", rng.standard_normal((T, d_sem)), rng.standard_normal((T, d_tex)),
                                    y, i % K))
    return Batch.from_sequences(seqs)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def batch():
    return micro_batch()


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(n)
        if prev is None or prev[0] != "FAIL":
            _CRITERIA[n] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}" + (f"  ({detail})" if detail else ""))
