import pytest

from laso.synth import GeneratorSpec, generate_bank
from laso.training import TrainConfig, train_laso


@pytest.fixture(scope="session")
def clean_trained():
    """Spec, bank and a model trained with default settings on clean disjoint-block data."""
    spec = GeneratorSpec.clean_blocks()
    bank = generate_bank(spec, 2000, seed=0)
    model, _ = train_laso(bank, TrainConfig(seed=0))
    return spec, bank, model


@pytest.fixture(scope="session")
def clean_atoms_trained():
    """Default (shared-atom) prototypes in clean mode, with a trained model."""
    spec = GeneratorSpec(clean_mode=True)
    bank = generate_bank(spec, 2000, seed=0)
    model, _ = train_laso(bank, TrainConfig(seed=0))
    return spec, bank, model


# acceptance criteria report: one PASS/FAIL line per criterion

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"{status} criterion {n}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
