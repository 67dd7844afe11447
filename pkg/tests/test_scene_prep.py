import struct

import numpy as np
import pytest

from splatsim.core import ParticleSystem, SceneError, SimConfig
from splatsim.scene_prep import (MAGIC, Transform, estimate_rest_volumes,
                                 import_point_cloud, knn, load_scene,
                                 normalize, save_scene, thicken)
from splatsim.synth import make_block


def brute_force_thicken(pos, layers, z_expand, seed):
    """Literal per-layer, per-kernel enumeration with its own generator."""
    rng = np.random.default_rng(seed)
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    hi_keep = hi.copy()
    hi_keep[2] = (1 + z_expand) * hi[2]
    kept = []
    for layer in range(1, layers + 1):
        for i in range(pos.shape[0]):
            cand = pos[i] * ((rng.random(3) + layer) / layers)
            if np.all(cand >= lo) and np.all(cand <= hi_keep):
                kept.append((i, cand))
    return kept


class TestSceneContainer:
    def test_round_trip_field_identical(self, tmp_path):
        ps = make_block(counts=(3, 3, 3), size=(0.3, 0.3, 0.3))
        ps.opacity[:] = np.linspace(0.1, 0.9, ps.n)
        p1 = tmp_path / "a.scene"
        p2 = tmp_path / "b.scene"
        save_scene(p1, ps)
        l1 = load_scene(p1)
        save_scene(p2, l1)
        l2 = load_scene(p2)
        assert l1.field_equal(l2)
        # float32 storage round-trips the first load exactly
        np.testing.assert_allclose(l1.position, ps.position, atol=1e-6)

    def test_single_record_defaults(self, tmp_path):
        ps = ParticleSystem(position=np.zeros((1, 3)))
        path = tmp_path / "one.scene"
        save_scene(path, ps)
        loaded = load_scene(path)
        assert loaded.n == 1
        np.testing.assert_array_equal(loaded.F_E[0], np.eye(3))
        assert np.all(loaded.velocity == 0.0)
        assert np.all(loaded.mass == 1.0)

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "empty.scene"
        path.write_bytes(b"")
        with pytest.raises(SceneError, match="empty scene"):
            load_scene(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_scene(tmp_path / "nope.scene")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.scene"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 8)
        with pytest.raises(SceneError, match="magic"):
            load_scene(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.scene"
        path.write_bytes(MAGIC + struct.pack("<II", 9, 0))
        with pytest.raises(SceneError, match="version"):
            load_scene(path)

    def test_truncated_records(self, tmp_path):
        path = tmp_path / "trunc.scene"
        path.write_bytes(MAGIC + struct.pack("<II", 1, 2) + b"\x00" * 20)
        with pytest.raises(SceneError, match="expected"):
            load_scene(path)

    def test_zero_count_container_loads_empty(self, tmp_path):
        path = tmp_path / "zero.scene"
        path.write_bytes(MAGIC + struct.pack("<II", 1, 0))
        assert load_scene(path).n == 0


class TestPlyImport:
    def test_ascii_with_color(self, tmp_path):
        path = tmp_path / "cloud.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "end_header\n"
            "0.0 0.5 1.0 255 0 0\n"
            "1.0 1.5 2.0 0 255 0\n")
        ps = import_point_cloud(path)
        assert ps.n == 2
        np.testing.assert_allclose(ps.position[0], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(ps.color[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(ps.color[1], [0.0, 1.0, 0.0])

    def test_binary_little_endian(self, tmp_path):
        path = tmp_path / "cloud_bin.ply"
        header = (b"ply\nformat binary_little_endian 1.0\n"
                  b"element vertex 2\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"end_header\n")
        body = struct.pack("<6f", 1, 2, 3, 4, 5, 6)
        path.write_bytes(header + body)
        ps = import_point_cloud(path)
        assert ps.n == 2
        np.testing.assert_allclose(ps.position[1], [4.0, 5.0, 6.0])

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "junk.ply"
        path.write_bytes(b"garbage\nend_header\n")
        with pytest.raises(SceneError):
            import_point_cloud(path)


class TestNormalize:
    def test_margin_scale_value(self):
        rng = np.random.default_rng(0)
        pos = rng.uniform(0, 10, (50, 3))
        pos[0] = [0, 0, 0]
        pos[1] = [10, 10, 10]
        ps = ParticleSystem(position=pos)
        out, tf = normalize(ps)
        assert tf.scale == pytest.approx(0.19, rel=1e-12)
        assert np.all(np.abs(out.position) <= 0.95 + 1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(1)
        ps = ParticleSystem(position=rng.uniform(-3, 7, (40, 3)))
        out, tf = normalize(ps)
        back = tf.invert(out.position)
        np.testing.assert_allclose(back, ps.position, atol=1e-12)
        inv = tf.inverse()
        np.testing.assert_allclose(inv.apply(out.position), ps.position,
                                   atol=1e-12)

    def test_already_normalized_near_identity(self):
        rng = np.random.default_rng(2)
        pos = rng.uniform(-0.95, 0.95, (30, 3))
        pos[0] = [-0.95, -0.95, -0.95]
        pos[1] = [0.95, 0.95, 0.95]
        _, tf = normalize(ParticleSystem(position=pos))
        assert tf.scale == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(tf.offset, 0.0, atol=1e-12)

    def test_single_particle_degenerate(self):
        with pytest.raises(SceneError, match="extent"):
            normalize(ParticleSystem(position=np.zeros((1, 3))))

    def test_splat_scale_rescaled(self):
        ps = ParticleSystem(position=np.array([[0.0, 0, 0], [10.0, 0, 0]]))
        ps.scale[:] = 0.5
        out, tf = normalize(ps)
        np.testing.assert_allclose(out.scale, 0.5 * tf.scale)


class TestThicken:
    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(42)
        pos = rng.uniform([-0.4, -0.4, 1.0], [0.4, 0.4, 1.5], (15, 3))
        ps = ParticleSystem(position=pos)
        layers, seed = 40, 123
        out, info = thicken(ps, layers=layers, z_expand=0.25, seed=seed)
        ref = brute_force_thicken(pos, layers, 0.25, seed)
        assert info.kept_copies == len(ref)
        assert out.n == ps.n + len(ref)
        ref_pos = np.array([c for _, c in ref]).reshape(-1, 3)
        np.testing.assert_array_equal(out.position[ps.n:], ref_pos)
        ref_src = np.array([i for i, _ in ref], dtype=np.int64)
        np.testing.assert_array_equal(out.color[ps.n:], ps.color[ref_src])

    def test_outputs_inside_expanded_box(self):
        rng = np.random.default_rng(7)
        pos = rng.uniform([-0.3, -0.2, 0.5], [0.3, 0.2, 1.1], (25, 3))
        ps = ParticleSystem(position=pos)
        out, _ = thicken(ps, layers=60, seed=1)
        lo = pos.min(axis=0)
        hi = pos.max(axis=0)
        hi[2] *= 1.25
        assert np.all(out.position >= lo - 1e-12)
        assert np.all(out.position <= hi + 1e-12)

    def test_originals_prefix_unmodified(self):
        ps = make_block(counts=(3, 3, 3), center=(0, 0, 1.0),
                        size=(0.4, 0.4, 0.4))
        out, _ = thicken(ps, layers=20, seed=3)
        np.testing.assert_array_equal(out.position[:ps.n], ps.position)
        np.testing.assert_array_equal(out.mass[:ps.n], ps.mass)

    def test_deterministic_given_seed(self):
        ps = make_block(counts=(3, 3, 3), center=(0, 0, 1.0),
                        size=(0.4, 0.4, 0.4))
        a, _ = thicken(ps, layers=30, seed=9)
        b, _ = thicken(ps, layers=30, seed=9)
        assert a.field_equal(b)
        c, _ = thicken(ps, layers=30, seed=10)
        assert c.n != a.n or not np.array_equal(c.position, a.position)

    def test_single_kernel_keeps_only_top_layer(self):
        # degenerate bbox: only factor >= 1 copies stay inside, i.e. layer L
        z_m = 2.0
        ps = ParticleSystem(position=np.array([[0.0, 0.0, z_m]]))
        out, info = thicken(ps, layers=50, seed=0)
        assert info.kept_copies == 1
        assert out.n == 2
        assert out.position[1, 2] >= z_m

    def test_center_kernel_top_layer_kept(self):
        rng = np.random.default_rng(11)
        pos = rng.uniform([1.0, 1.0, 1.0], [2.0, 2.0, 2.0], (9, 3))
        pos[0] = [1.5, 1.5, 1.5]
        ps = ParticleSystem(position=pos)
        layers = 25
        out, _ = thicken(ps, layers=layers, seed=5)
        # reproduce the draws: layer L factor is (rand+L)/L ~ 1, so the
        # center kernel's copy stays near itself and inside the box
        rng2 = np.random.default_rng(5)
        for layer in range(1, layers + 1):
            r = rng2.random((ps.n, 3))
            if layer == layers:
                cand0 = pos[0] * (r[0] + layer) / layers
        assert np.any(np.all(np.isclose(out.position, cand0, atol=1e-12), axis=1))

    def test_positive_z_precondition(self):
        ps = ParticleSystem(position=np.array([[0.0, 0.0, -0.5],
                                               [0.1, 0.1, 0.5]]))
        with pytest.raises(SceneError, match="positive z"):
            thicken(ps)

    def test_cap_validation_and_subsampling(self):
        ps = make_block(counts=(3, 3, 3), center=(0, 0, 1.0),
                        size=(0.4, 0.4, 0.4))
        with pytest.raises(ValueError, match="cap"):
            thicken(ps, layers=10, cap=5)
        out, info = thicken(ps, layers=200, seed=2, cap=ps.n + 10)
        assert out.n == ps.n + 10
        assert info.capped


class TestKnn:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (200, 3))
        k = 8
        result = knn(pts, k)
        # O(n^2) oracle with (distance^2, index) ordering
        delta = pts[None] - pts[:, None]
        d2 = np.einsum("ijk,ijk->ij", delta, delta)
        for i in range(200):
            order = np.lexsort((np.arange(200), d2[i]))
            expect = [j for j in order if j != i][:k]
            np.testing.assert_array_equal(result[i], expect)

    def test_collinear_middle_point(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
        nb = knn(pts, 1)
        assert nb[1, 0] == 0   # nearer endpoint

    def test_duplicate_positions_tie_break(self):
        pts = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        nb = knn(pts, 2)
        np.testing.assert_array_equal(nb[0], [1, 2])
        np.testing.assert_array_equal(nb[1], [0, 2])
        np.testing.assert_array_equal(nb[3], [0, 1])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn(np.zeros((3, 3)), 3)

    def test_permutation_consistency(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, (50, 3))
        perm = rng.permutation(50)
        base = knn(pts, 4)
        permuted = knn(pts[perm], 4)
        inv = np.argsort(perm)
        for new_i in range(50):
            orig_i = perm[new_i]
            np.testing.assert_array_equal(perm[permuted[new_i]], base[orig_i])


class TestRestVolumes:
    def test_lattice_volume_scale(self):
        cfg = SimConfig(grid_resolution=16)
        ps = make_block(counts=(8, 8, 8), size=(0.5, 0.5, 0.5), density=1000.0)
        vol = estimate_rest_volumes(ps, cfg)
        cell = (0.5 / 8) ** 3
        interior = np.all(np.abs(ps.position) < 0.15, axis=1)
        assert np.median(vol[interior]) == pytest.approx(cell, rel=0.35)
