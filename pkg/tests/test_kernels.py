import subprocess
import sys

import numpy as np
import pytest

from todkit import kernels


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


needs_numba = pytest.mark.skipif(not _have_numba(), reason="numba not installed")


class TestBackendSelection:
    def test_resolve_explicit(self):
        assert kernels.resolve_backend("numpy") == "numpy"

    def test_resolve_rejects_garbage(self):
        with pytest.raises(ValueError):
            kernels.resolve_backend("cuda")

    @needs_numba
    def test_resolve_auto_prefers_numba(self):
        assert kernels.resolve_backend("auto") == "numba"

    def test_env_flag_forces_numpy(self):
        code = ("import todkit.kernels as k; print(k.BACKEND)")
        out = subprocess.run([sys.executable, "-c", code],
                             env={"PATH": "/usr/bin:/bin", "TODKIT_BACKEND": "numpy"},
                             capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"


@needs_numba
class TestBackendParity:
    """Both implementations must agree to summation-rounding level."""

    def setup_method(self):
        self.np_impl = kernels.get_impl("numpy")
        self.nb_impl = kernels.get_impl("numba")
        self.rng = np.random.default_rng(0)

    def test_layer_norm_fwd(self):
        x = self.rng.normal(size=(24, 16))
        g = self.rng.normal(size=16)
        b = self.rng.normal(size=16)
        y1, m1, r1 = self.np_impl.layer_norm_fwd(x, g, b, 1e-12)
        y2, m2, r2 = self.nb_impl.layer_norm_fwd(x, g, b, 1e-12)
        np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(m1, m2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(r1, r2, rtol=1e-12)

    def test_layer_norm_bwd(self):
        x = self.rng.normal(size=(24, 16))
        dy = self.rng.normal(size=(24, 16))
        g = self.rng.normal(size=16)
        _, mean, rstd = self.np_impl.layer_norm_fwd(x, g, np.zeros(16), 1e-12)
        out1 = self.np_impl.layer_norm_bwd(dy, x, g, mean, rstd)
        out2 = self.nb_impl.layer_norm_bwd(dy, x, g, mean, rstd)
        for a, b in zip(out1, out2):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)

    def test_gelu(self):
        x = self.rng.normal(size=200) * 3
        dy = self.rng.normal(size=200)
        np.testing.assert_allclose(self.np_impl.gelu_fwd(x),
                                   self.nb_impl.gelu_fwd(x), rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(self.np_impl.gelu_bwd(x, dy),
                                   self.nb_impl.gelu_bwd(x, dy), rtol=1e-13, atol=1e-14)

    def test_masked_softmax(self):
        scores = self.rng.normal(size=(3, 2, 7, 7)) * 4
        mask = np.ones((3, 7), dtype=np.int64)
        mask[0, 5:] = 0
        mask[2, 3:] = 0
        p1 = self.np_impl.masked_softmax(scores, mask)
        p2 = self.nb_impl.masked_softmax(scores, mask)
        np.testing.assert_allclose(p1, p2, rtol=1e-13, atol=1e-15)
        assert (p1[0, :, :, 5:] == 0).all()

    def test_softmax_bwd(self):
        scores = self.rng.normal(size=(2, 2, 5, 5))
        mask = np.ones((2, 5), dtype=np.int64)
        probs = self.np_impl.masked_softmax(scores, mask)
        dprobs = self.rng.normal(size=probs.shape)
        np.testing.assert_allclose(self.np_impl.softmax_bwd(probs, dprobs),
                                   self.nb_impl.softmax_bwd(probs, dprobs),
                                   rtol=1e-13, atol=1e-14)

    def test_adamw_update(self):
        p1 = self.rng.normal(size=50)
        g = self.rng.normal(size=50)
        m1 = self.rng.normal(size=50) * 0.1
        v1 = np.abs(self.rng.normal(size=50)) * 0.01
        p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
        args = (0.01, 0.9, 0.999, 1e-8, 0.01, 1 - 0.9 ** 3, 1 - 0.999 ** 3)
        self.np_impl.adamw_update(p1, g, m1, v1, *args)
        self.nb_impl.adamw_update(p2, g, m2, v2, *args)
        np.testing.assert_allclose(p1, p2, rtol=1e-14, atol=1e-16)
        np.testing.assert_allclose(m1, m2, rtol=1e-14)
        np.testing.assert_allclose(v1, v2, rtol=1e-14)


class TestKernelSemantics:
    def test_layer_norm_normalizes_rows(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 8)) * 5 + 2
        y, _, _ = kernels.layer_norm_fwd(x, np.ones(8), np.zeros(8), 1e-12)
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), 1, atol=1e-6)

    def test_gelu_reference_values(self):
        # known fixed points of the erf formulation
        x = np.array([0.0, 1.0, -1.0])
        y = kernels.gelu_fwd(x)
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.8413447460685429, rel=1e-12)
        assert y[2] == pytest.approx(-0.15865525393145707, rel=1e-12)

    def test_masked_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=(2, 3, 6, 6))
        mask = np.ones((2, 6), dtype=np.int64)
        mask[1, 4:] = 0
        probs = kernels.masked_softmax(scores, mask)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
