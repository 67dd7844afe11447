"""Transfer tests against a brute-force stencil-sum oracle implemented with
the reference kernel from conftest (independent of the compiled path)."""

import numpy as np
import pytest

from splatsim.core import Grid, ParticleSystem, SimConfig, SimulationError
from splatsim.mpm import affine_prefactor, g2p, grid_update, p2g

from conftest import quad_bspline, stencil_nodes


def brute_force_p2g(particles, config):
    """Mass and APIC momentum via explicit loops over all nodes."""
    m = config.nodes_per_axis
    dx = config.dx
    mass = np.zeros((m, m, m))
    mom = np.zeros((m, m, m, 3))
    for p in range(particles.n):
        pos = particles.position[p]
        mp = particles.mass[p]
        vp = particles.velocity[p]
        Cp = particles.C[p]
        for i in range(m):
            for j in range(m):
                for k in range(m):
                    node = np.array([-1.0 + i * dx, -1.0 + j * dx, -1.0 + k * dx])
                    w = (quad_bspline((pos[0] - node[0]) / dx)
                         * quad_bspline((pos[1] - node[1]) / dx)
                         * quad_bspline((pos[2] - node[2]) / dx))
                    if w == 0.0:
                        continue
                    mass[i, j, k] += mp * w
                    mom[i, j, k] += mp * w * (vp + Cp @ (node - pos))
    return mass, mom


def brute_force_g2p(grid_vel, particles, config):
    """Velocity and affine gather via explicit stencil sums."""
    dx = config.dx
    pref = 12.0 / (dx * dx * 3.0)
    vel = np.zeros((particles.n, 3))
    C = np.zeros((particles.n, 3, 3))
    for p in range(particles.n):
        pos = particles.position[p]
        for ii, jj, kk in np.ndindex(*grid_vel.shape[:3]):
            node = np.array([-1.0 + ii * dx, -1.0 + jj * dx, -1.0 + kk * dx])
            w = (quad_bspline((pos[0] - node[0]) / dx)
                 * quad_bspline((pos[1] - node[1]) / dx)
                 * quad_bspline((pos[2] - node[2]) / dx))
            if w == 0.0:
                continue
            gv = grid_vel[ii, jj, kk]
            vel[p] += w * gv
            C[p] += pref * w * np.outer(gv, node - pos)
    return vel, C


@pytest.fixture(scope="module")
def tiny_config():
    return SimConfig(grid_resolution=8)


def small_cloud(n=12, seed=5, spread=0.3):
    rng = np.random.default_rng(seed)
    ps = ParticleSystem(position=rng.uniform(-spread, spread, (n, 3)))
    ps.mass[:] = rng.uniform(0.5, 2.0, n)
    ps.volume0[:] = 1e-3
    return ps


class TestP2G:
    def test_single_resting_particle(self, tiny_config):
        ps = ParticleSystem(position=np.array([[0.03, -0.02, 0.11]]))
        grid = p2g(ps, Grid(tiny_config))
        assert np.all(grid.momentum == 0.0)
        assert grid.total_mass() == pytest.approx(1.0, rel=1e-14)

    def test_matches_brute_force(self, tiny_config):
        ps = small_cloud()
        rng = np.random.default_rng(6)
        ps.velocity = rng.normal(0, 0.2, (ps.n, 3))
        ps.C = rng.normal(0, 0.5, (ps.n, 3, 3))
        grid = p2g(ps, Grid(tiny_config))
        ref_mass, ref_mom = brute_force_p2g(ps, tiny_config)
        np.testing.assert_allclose(grid.mass, ref_mass, atol=1e-13)
        np.testing.assert_allclose(grid.momentum, ref_mom, atol=1e-13)

    def test_rigid_translation_velocity(self, tiny_config):
        ps = small_cloud()
        u = np.array([0.3, -0.1, 0.2])
        ps.velocity[:] = u
        grid = p2g(ps, Grid(tiny_config))
        grid_update(grid, tiny_config.dt, tiny_config)
        massive = grid.mass > 1e-9
        np.testing.assert_allclose(
            grid.velocity[massive],
            np.broadcast_to(u, (int(massive.sum()), 3)), atol=1e-13)

    def test_pure_affine_node_velocities(self, tiny_config):
        # one particle with zero velocity and affine C: node velocity must be
        # C (x_i - x_p) on every massive node
        ps = ParticleSystem(position=np.array([[0.05, 0.01, -0.07]]))
        C = np.array([[0.1, 0.3, 0.0], [-0.2, 0.05, 0.4], [0.0, 0.1, -0.3]])
        ps.C[0] = C
        grid = p2g(ps, Grid(tiny_config))
        grid_update(grid, tiny_config.dt, tiny_config)
        dx = tiny_config.dx
        axes = stencil_nodes(ps.position[0], dx)
        for i in axes[0]:
            for j in axes[1]:
                for k in axes[2]:
                    node = np.array([-1 + i * dx, -1 + j * dx, -1 + k * dx])
                    expected = C @ (node - ps.position[0])
                    np.testing.assert_allclose(grid.velocity[i, j, k],
                                               expected, atol=1e-12)

    def test_mass_conservation(self, tiny_config):
        ps = small_cloud(n=40, seed=9)
        grid = p2g(ps, Grid(tiny_config))
        assert grid.total_mass() == pytest.approx(ps.total_mass(), rel=1e-12)

    def test_nan_aborts_with_index(self, tiny_config):
        ps = small_cloud()
        ps.position[7, 1] = np.nan
        with pytest.raises(SimulationError, match="particle 7"):
            p2g(ps, Grid(tiny_config))

    def test_momentum_conservation_through_grid(self, tiny_config):
        # uniform F (identity), no drive, interior particles: total grid
        # momentum after grid_update equals particle momentum before p2g
        ps = small_cloud(n=30, seed=12)
        rng = np.random.default_rng(2)
        ps.velocity = rng.normal(0, 0.2, (ps.n, 3))
        before = ps.total_momentum()
        grid = p2g(ps, Grid(tiny_config))
        grid_update(grid, tiny_config.dt, tiny_config)
        after = (grid.mass[..., None] * grid.velocity).reshape(-1, 3).sum(axis=0)
        np.testing.assert_allclose(after, before,
                                   atol=1e-10 * np.linalg.norm(before))


class TestGridUpdate:
    def test_zero_force_keeps_velocity(self, tiny_config):
        ps = small_cloud()
        rng = np.random.default_rng(1)
        ps.velocity = rng.normal(0, 0.1, (ps.n, 3))
        grid = p2g(ps, Grid(tiny_config))
        massive = grid.mass > 1e-9
        momentum_v = grid.momentum[massive] / grid.mass[massive][:, None]
        grid_update(grid, tiny_config.dt, tiny_config)
        np.testing.assert_allclose(grid.velocity[massive], momentum_v,
                                   rtol=1e-13, atol=0)

    def test_drive_override_exact(self, tiny_config):
        ps = small_cloud()
        ps.velocity[:] = [1.0, 1.0, 1.0]
        grid = p2g(ps, Grid(tiny_config))
        region = np.zeros(grid.mass.shape, dtype=bool)
        region[3:5, 3:5, 3:5] = True
        v = np.array([2.5, 0.0, 0.0])
        grid_update(grid, tiny_config.dt, tiny_config, drive=(region, v))
        np.testing.assert_array_equal(
            grid.velocity[region], np.broadcast_to(v, (region.sum(), 3)))

    def test_sticky_face_zeroes_velocity(self):
        cfg = SimConfig(grid_resolution=8, boundary=("sticky",) * 6,
                        boundary_layers=1)
        ps = ParticleSystem(position=np.array([[0.0, 0.0, -0.72]]))
        ps.velocity[:] = [0.5, 0.5, -0.5]
        grid = p2g(ps, Grid(cfg))
        grid_update(grid, cfg.dt, cfg)
        assert np.all(grid.velocity[:, :, 0] == 0.0)
        assert np.all(grid.velocity[0, :, :] == 0.0)

    def test_slip_zeroes_normal_component_only(self):
        cfg = SimConfig(grid_resolution=8,
                        boundary=("slip",) * 6, boundary_layers=2)
        # particle close to the -z face, stencil legal
        dx = cfg.dx
        ps = ParticleSystem(position=np.array([[0.0, 0.0, -1.0 + 1.6 * dx]]))
        ps.velocity[:] = [0.4, 0.3, -0.2]
        grid = p2g(ps, Grid(cfg))
        grid_update(grid, cfg.dt, cfg)
        band = grid.velocity[:, :, :2]
        massive = grid.mass[:, :, :2] > 1e-9
        assert np.all(band[..., 2][massive] == 0.0)
        assert np.any(band[..., 0][massive] != 0.0)


class TestG2P:
    def test_uniform_grid_velocity(self, tiny_config):
        ps = small_cloud()
        grid = Grid(tiny_config)
        u = np.array([0.25, -0.5, 0.125])
        grid.velocity[:] = u
        g2p(grid, ps, tiny_config)
        np.testing.assert_allclose(ps.velocity, np.tile(u, (ps.n, 1)), atol=1e-13)
        np.testing.assert_allclose(ps.C, 0.0, atol=1e-10)

    def test_affine_field_reconstruction(self, tiny_config):
        ps = small_cloud(n=20, seed=21)
        grid = Grid(tiny_config)
        rng = np.random.default_rng(3)
        A = rng.normal(0, 0.5, (3, 3))
        c = np.array([0.05, -0.02, 0.01])
        pos = grid.node_positions()
        grid.velocity = (pos - c) @ A.T
        g2p(grid, ps, tiny_config)
        expected_v = (ps.position - c) @ A.T
        np.testing.assert_allclose(ps.velocity, expected_v, atol=1e-8)
        np.testing.assert_allclose(ps.C, np.tile(A, (ps.n, 1, 1)), atol=1e-8)

    def test_matches_brute_force(self, tiny_config):
        ps = small_cloud(n=15, seed=30)
        grid = Grid(tiny_config)
        rng = np.random.default_rng(4)
        grid.velocity = rng.normal(0, 0.3, grid.velocity.shape)
        ref_v, ref_C = brute_force_g2p(grid.velocity, ps, tiny_config)
        g2p(grid, ps, tiny_config)
        np.testing.assert_allclose(ps.velocity, ref_v, atol=1e-12)
        np.testing.assert_allclose(ps.C, ref_C, atol=1e-10)

    def test_affine_prefactor_value(self):
        # quadratic kernel on the 50-cell default grid: 12/(0.04^2 * 3)
        assert affine_prefactor(0.04, 2) == pytest.approx(2500.0, rel=1e-12)
        assert affine_prefactor(0.1, 3) == pytest.approx(12.0 / (0.01 * 4), rel=1e-12)


class TestRoundTrip:
    def test_constant_field_round_trip(self, tiny_config):
        ps = small_cloud(n=25, seed=40, spread=0.25)
        u = np.array([0.2, 0.1, -0.3])
        ps.velocity[:] = u
        grid = p2g(ps, Grid(tiny_config))
        grid_update(grid, tiny_config.dt, tiny_config)
        g2p(grid, ps, tiny_config)
        np.testing.assert_allclose(ps.velocity, np.tile(u, (ps.n, 1)), atol=1e-8)
        np.testing.assert_allclose(ps.C, 0.0, atol=1e-8)

    def test_affine_field_round_trip(self, tiny_config):
        # particles arranged densely so the grid sees the full affine field
        rng = np.random.default_rng(8)
        grid_pts = np.stack(np.meshgrid(*[np.linspace(-0.3, 0.3, 7)] * 3,
                                        indexing="ij"), axis=-1).reshape(-1, 3)
        ps = ParticleSystem(position=grid_pts)
        ps.mass[:] = 1.0
        ps.volume0[:] = 1e-4
        A = np.array([[0.0, 0.4, 0.0], [-0.4, 0.0, 0.0], [0.0, 0.0, 0.2]])
        c = np.zeros(3)
        ps.velocity = (ps.position - c) @ A.T
        ps.C = np.tile(A, (ps.n, 1, 1))
        grid = p2g(ps, Grid(tiny_config))
        grid_update(grid, tiny_config.dt, tiny_config)
        g2p(grid, ps, tiny_config)
        # interior particles only (grid support fully covered by particles)
        interior = np.all(np.abs(ps.position) < 0.2, axis=1)
        expected_v = (ps.position[interior] - c) @ A.T
        np.testing.assert_allclose(ps.velocity[interior], expected_v, atol=1e-8)
        np.testing.assert_allclose(ps.C[interior],
                                   np.tile(A, (interior.sum(), 1, 1)), atol=1e-8)
