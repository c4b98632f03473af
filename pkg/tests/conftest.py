import numpy as np
import pytest

from moelora import datagen
from moelora.model import AdapterSettings, InjectionSpec, ModelConfig, ToyLM, freeze_pretrained, inject

TINY = ModelConfig(vocab=24, d_model=8, n_layers=1, n_heads=2, context=16, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dataset():
    return datagen.generate(42)


def adapted_toy(kind="moelora", config=TINY, tasks=("a", "b", "c"), seed=0, **settings):
    """Small injected and frozen model; B matrices randomised so the adapters do something."""
    defaults = dict(rank=4, n_experts=2, dropout=0.0, task_dim=4)
    defaults.update(settings)
    model = ToyLM(config, seed=seed)
    inject(model, InjectionSpec(kind=kind), AdapterSettings(**defaults), tasks=None if tasks is None else list(tasks), seed=seed)
    freeze_pretrained(model)
    r = np.random.default_rng(seed + 99)
    for name, t in model.adapter_tensors().items():
        t.data = r.normal(0.0, 0.3, t.shape)
    return model


# -- acceptance summary ----------------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2]))
    for name in order:
        outcome, detail = _ACCEPTANCE[name]
        _, _, num, *words = name.split("_")
        terminalreporter.write_line(f"[{outcome}] criterion {num} ({' '.join(words)}): {detail}")
