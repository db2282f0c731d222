import numpy as np
import pytest
from click.testing import CliRunner

from laso import autodiff as ad
from laso.autodiff import Tensor
from laso.cli import main
from laso.gradcheck import LOSSES, PRIMITIVES, TOL, check, rel_error, run_suite


@pytest.fixture(scope="module")
def report():
    return run_suite()


def test_suite_passes(report):
    bad = [(r.name, r.seed, r.rel_error) for r in report.failures]
    assert report.passed, bad
    assert report.worst().rel_error < TOL


def test_suite_covers_every_case(report):
    names = {r.name for r in report.results}
    assert names == set(PRIMITIVES) | set(LOSSES) | {"composed"}
    assert sum(r.name == "composed" for r in report.results) == 40
    assert all(r.n_coords > 0 for r in report.results)


def test_rel_error_scale_free():
    a = np.array([1.0, 2.0])
    assert rel_error(a, a) == 0.0
    assert rel_error(a * 1e6, a * 1e6 * (1 + 1e-8)) == pytest.approx(1e-8, rel=1e-3)
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


def test_check_detects_a_wrong_gradient():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

    def bad_square(t):
        X = t.data
        return ad._result(X * X, (t,), lambda g: (g * X,))  # missing factor 2

    rng = np.random.default_rng(0)
    err, n = check(lambda: ad.reduce_sum(bad_square(x)), [x], rng)
    assert n == 3 and err == pytest.approx(0.5)
    err, _ = check(lambda: ad.reduce_sum(ad.square(x)), [x], rng)
    assert err < TOL


def test_cli_gradcheck(tmp_path):
    res = CliRunner().invoke(main, ["gradcheck", "--out-dir", str(tmp_path)])
    assert res.exit_code == 0, res.output
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "case,seed,rel_error,coords"
    assert len(rows) - 1 == len(PRIMITIVES) * 4 + 40 + len(LOSSES) * 4
