from __future__ import annotations

import numpy as np
import pytest

from mcmdpo.losses import PreferenceItem
from mcmdpo.model import ModelConfig, ModelParams

# small enough for element-wise finite differences, large enough to exercise every path
TINY = ModelConfig(vocab_size=12, max_seq_len=20, patch_size=4, embed_dim=4, hidden_dim=6, seed=0)


def tiny_params(seed: int = 0, scale: float = 0.5) -> ModelParams:
    cfg = ModelConfig(**{**TINY.to_dict(), "seed": seed, "init_scale": scale})
    return ModelParams.init(cfg)


def tiny_item(seed: int = 0, item_id: str = "t0") -> PreferenceItem:
    rng = np.random.default_rng(seed)
    m_w = rng.uniform(0, 1, size=(8, 8, 3))
    m_l = rng.uniform(0, 1, size=(8, 8, 3))
    return PreferenceItem(x=(3, 4), m_w=m_w, m_l=m_l, c_w=(5, 6), c_l=(7,), y_w=(8, 9, 2), y_l=(10, 2),
                          id=item_id)


@pytest.fixture
def params():
    return tiny_params(0)


@pytest.fixture
def item():
    return tiny_item(0)


# -- acceptance summary ------------------------------------------------------------

_VERDICTS: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.name.startswith("test_criterion_"):
        lines = [v for k, v in item.user_properties if k == "verdict"]
        n = item.name.split("_")[2]
        if lines:
            _VERDICTS[item.name] = lines[-1]
        else:
            _VERDICTS[item.name] = f"criterion {n}: FAIL  (errored before a verdict: {report.longrepr.reprcrash.message})" \
                if report.failed else f"criterion {n}: PASS"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda k: int(k.split("_")[2])):
        terminalreporter.write_line(_VERDICTS[name])
