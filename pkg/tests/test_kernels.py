import os
import subprocess
import sys

import numpy as np
import pytest

from quadranet import kernels

BACKENDS = kernels.available_backends()


def test_python_fallback_always_available():
    assert "python" in BACKENDS
    with pytest.raises(ValueError, match="unknown"):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("pad,k", [(0, 3), (1, 3), (3, 7), (2, 5), (0, 1)])
def test_backends_agree(rng, pad, k):
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(3, 3, k, k))
    outs = {b: kernels.dw_forward_multi(x, w, pad, backend=b) for b in BACKENDS}
    g = rng.normal(size=outs["python"].shape)
    grads = {b: kernels.dw_backward_multi(x, w, g, pad, backend=b) for b in BACKENDS}
    for b in BACKENDS:
        assert np.max(np.abs(outs[b] - outs["python"])) < 1e-12
        assert np.max(np.abs(grads[b][0] - grads["python"][0])) < 1e-11
        assert np.max(np.abs(grads[b][1] - grads["python"][1])) < 1e-11


def test_forward_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(1, 2, 3, 3))
    out = kernels.dw_forward_multi(x, w, 1, backend="python")[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for c in range(2):
        for i in range(5):
            for j in range(5):
                assert out[0, c, i, j] == pytest.approx(np.sum(xp[0, c, i:i + 3, j:j + 3] * w[0, c]), abs=1e-12)


@pytest.mark.parametrize("flag,expected", [("1", "python"), ("0", None)])
def test_env_var_selects_backend(flag, expected):
    env = {**os.environ, "QUADRANET_PURE_PYTHON": flag}
    out = subprocess.run([sys.executable, "-c", "from quadranet import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    if expected is None:
        expected = "cython" if "cython" in BACKENDS else "python"
    assert out == expected
