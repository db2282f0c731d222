import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laso import kernels

cython = pytest.importorskip("laso._ckernels")


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_ap_backends_agree(seed, n, k):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, (n, k)).astype(float)  # ties on purpose
    pos = rng.integers(0, 2, (n, k))
    a = kernels.average_precision_columns(scores, pos, backend="python")
    b = kernels.average_precision_columns(scores, pos, backend="cython")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0, equal_nan=True)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_topk_backends_agree(seed):
    rng = np.random.default_rng(seed)
    nq, npool, L = rng.integers(1, 6), rng.integers(8, 30), rng.integers(1, 7)
    dist = rng.integers(0, 6, (nq, npool)).astype(float)
    ql = rng.integers(0, 2, (nq, L))
    pl = rng.integers(0, 2, (npool, L))
    ex = rng.integers(-1, npool, (nq, 2))
    ks = [5, 1, 3]
    a = kernels.topk_max_iou(dist, ql, pl, ex, ks, backend="python")
    b = kernels.topk_max_iou(dist, ql, pl, ex, ks, backend="cython")
    np.testing.assert_array_equal(a, b)
    assert a.shape == (nq, 3)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.average_precision_columns(np.zeros((2, 1)), np.ones((2, 1)), backend="fortran")


def test_shape_checks():
    with pytest.raises(ValueError):
        kernels.average_precision_columns(np.zeros((3, 2)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        kernels.topk_max_iou(np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((2, 2)), [0])
    with pytest.raises(ValueError):
        kernels.topk_max_iou(np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((5, 3)), np.zeros((2, 2)), [1])


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_too_few_candidates(backend):
    with pytest.raises(ValueError):
        kernels.topk_max_iou(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((3, 2)), np.array([[0, 1]]), [2], backend=backend)


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("LASO_PURE_PYTHON", None)
    else:
        env["LASO_PURE_PYTHON"] = env_value
    out = subprocess.run(
        [sys.executable, "-c", "from laso import kernels; print(kernels.BACKEND)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return out.stdout.strip()


def test_env_var_forces_python_backend():
    assert _backend_in_subprocess("1") == "python"
    assert _backend_in_subprocess(None) == "cython"
