import numpy as np
import pytest

from splatsim.core import SimConfig, SimulationError
from splatsim.mpm import bspline_weights

from conftest import quad_bspline, quad_bspline_grad


class TestQuadraticWeights:
    def test_particle_on_node(self, small_config):
        dx = small_config.dx
        # node 8 of the 16-cell grid sits at the origin
        w, dw, base = bspline_weights(np.zeros(3), dx)
        assert w.shape == (3, 3)
        center = w[1, 0] * w[1, 1] * w[1, 2]
        assert center == pytest.approx(0.75 ** 3, abs=1e-15)
        assert 0.75 ** 3 == 0.421875

    def test_matches_reference_kernel(self, small_config):
        dx = small_config.dx
        rng = np.random.default_rng(3)
        for _ in range(50):
            pos = rng.uniform(-0.7, 0.7, 3)
            w, dw, base = bspline_weights(pos, dx)
            for a in range(3):
                u = (pos[a] + 1.0) / dx
                for i in range(3):
                    ref = quad_bspline(u - (base[a] + i))
                    ref_g = quad_bspline_grad(u - (base[a] + i)) / dx
                    assert w[i, a] == pytest.approx(ref, abs=1e-13)
                    assert dw[i, a] == pytest.approx(ref_g, abs=1e-10)

    def test_partition_of_unity(self, small_config):
        rng = np.random.default_rng(7)
        for _ in range(200):
            pos = rng.uniform(-0.8, 0.8, 3)
            w, dw, _ = bspline_weights(pos, small_config.dx)
            assert np.all(w >= 0)
            for a in range(3):
                assert abs(w[:, a].sum() - 1.0) < 1e-12

    def test_gradient_sums_to_zero(self, small_config):
        rng = np.random.default_rng(11)
        for _ in range(200):
            pos = rng.uniform(-0.8, 0.8, 3)
            w, dw, _ = bspline_weights(pos, small_config.dx)
            # full 3D gradient over the 27 nodes
            grad = np.zeros(3)
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        grad[0] += dw[i, 0] * w[j, 1] * w[k, 2]
                        grad[1] += w[i, 0] * dw[j, 1] * w[k, 2]
                        grad[2] += w[i, 0] * w[j, 1] * dw[k, 2]
            assert np.all(np.abs(grad) < 1e-10)

    def test_stencil_clipped_near_edge(self, small_config):
        with pytest.raises(SimulationError, match="stencil"):
            bspline_weights(np.array([-0.999, 0.0, 0.0]), small_config.dx)
        with pytest.raises(SimulationError, match="stencil"):
            bspline_weights(np.array([0.0, 0.9999, 0.0]), small_config.dx)


class TestCubicWeights:
    def test_partition_of_unity(self, small_config):
        rng = np.random.default_rng(13)
        for _ in range(100):
            pos = rng.uniform(-0.6, 0.6, 3)
            w, dw, _ = bspline_weights(pos, small_config.dx, degree=3)
            assert w.shape == (4, 3)
            assert np.all(w >= -1e-15)
            for a in range(3):
                assert abs(w[:, a].sum() - 1.0) < 1e-12
                assert abs(dw[:, a].sum()) < 1e-10

    def test_on_node_value(self, small_config):
        # cubic kernel at distance 0 is 2/3, at distance 1 is 1/6
        w, _, base = bspline_weights(np.zeros(3), small_config.dx, degree=3)
        assert w[1, 0] == pytest.approx(2.0 / 3.0, abs=1e-14)
        assert w[0, 0] == pytest.approx(1.0 / 6.0, abs=1e-14)
        assert w[2, 0] == pytest.approx(1.0 / 6.0, abs=1e-14)
