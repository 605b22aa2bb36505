import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reo import geometry as G
from reo.tensor import ConfigError, Tensor, finite_diff_check


def make_cam(seed=0):
    rng = np.random.default_rng(seed)
    fwd = rng.standard_normal(3)
    fwd[2] = 0.2 * fwd[2]
    return G.CameraModel(G.pinhole(40.0, 42.0, 32.0, 16.0), G.look_at(rng.uniform(-1, 1, 3), fwd), 32, 64)


def kr_oracle(points, cam):
    # homogeneous K [R|t] multiply, independent of project_points
    rt = cam.extrinsics[:3, :]
    hom = np.hstack([points, np.ones((len(points), 1))])
    p = (cam.intrinsics @ rt @ hom.T).T
    return np.column_stack([p[:, 0] / p[:, 2], p[:, 1] / p[:, 2], p[:, 2]])


def hash_oracle(cloud, spec):
    cells = {}
    for x, y, z, i in cloud:
        key = tuple(int(math.floor((c - o) / v)) for c, o, v in zip((x, y, z), spec.origin, spec.voxel_size))
        if all(0 <= k < n for k, n in zip(key, spec.extents)):
            cells.setdefault(key, []).append((x, y, z, i))
    return cells


def trilinear_oracle(grid, q):
    c, h, w, d = grid.shape
    out = np.zeros((len(q), c))
    for n, (a, b, e) in enumerate(q):
        pos = [(min(max(v, -1.0), 1.0) + 1) / 2 * (s - 1) for v, s in zip((a, b, e), (h, w, d))]
        lo = [min(int(math.floor(p)), s - 2) for p, s in zip(pos, (h, w, d))]
        fr = [p - l for p, l in zip(pos, lo)]
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wt = (fr[0] if dx else 1 - fr[0]) * (fr[1] if dy else 1 - fr[1]) * (fr[2] if dz else 1 - fr[2])
                    out[n] += wt * grid[:, lo[0] + dx, lo[1] + dy, lo[2] + dz]
    return out


class TestProjection:
    def test_optical_axis(self):
        cam = G.CameraModel(G.pinhole(30, 30, 31.5, 15.5), G.look_at([0, 0, 1], [1, 0, 0]), 32, 64)
        uvd, valid = G.project_points(np.array([[5.0, 0, 1]]), cam)
        assert valid[0]
        np.testing.assert_allclose(uvd[0], [31.5, 15.5, 5.0], atol=1e-9)

    def test_behind_camera_flagged(self):
        cam = G.CameraModel(G.pinhole(30, 30, 31.5, 15.5), G.look_at([0, 0, 1], [1, 0, 0]), 32, 64)
        _, valid = G.project_points(np.array([[-3.0, 0, 1]]), cam)
        assert not valid[0]

    def test_matches_krt_oracle(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            cam = make_cam(seed)
            pts = rng.uniform(-20, 20, (200, 3))
            uvd, valid = G.project_points(pts, cam)
            ref = kr_oracle(pts, cam)
            np.testing.assert_allclose(uvd[valid], ref[valid], rtol=1e-5, atol=1e-5)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        cam = make_cam(3)
        pts = rng.uniform(-20, 20, (500, 3))
        uvd, valid = G.project_points(pts, cam)
        back = G.unproject(uvd[valid], cam)
        np.testing.assert_allclose(back, pts[valid], atol=1e-4)

    def test_look_at_is_rigid(self):
        r = G.look_at([1, 2, 3], [0.3, -1, 0.1])[:3, :3]
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-5)


SPEC = G.GridSpec((-4.0, -4.0, -1.0), (0.5, 0.5, 0.5), (16, 16, 6))


class TestVoxelize:
    def test_single_point(self):
        vs = G.voxelize(np.array([[0.1, 0.2, 0.3, 0.7]]), SPEC)
        assert vs.count == 1
        np.testing.assert_allclose(vs.rows[0], [0.1, 0.2, 0.3, 0.7, 1, math.sqrt(0.14)])

    def test_two_points_one_cell(self):
        vs = G.voxelize(np.array([[0.1, 0.1, 0.1, 0.2], [0.3, 0.2, 0.4, 0.4]]), SPEC)
        assert vs.count == 1
        np.testing.assert_allclose(vs.rows[0, :5], [0.2, 0.15, 0.25, 0.3, 2])

    def test_matches_hash_oracle_10k(self):
        rng = np.random.default_rng(7)
        cloud = np.column_stack([rng.uniform(-5, 5, (10_000, 3)), rng.uniform(0, 1, 10_000)])
        vs = G.voxelize(cloud, SPEC)
        cells = hash_oracle(cloud, SPEC)
        assert vs.count == len(cells)
        got = {tuple(np.round(r[:3], 9)): r for r in vs.rows}
        for members in cells.values():
            m = np.mean(members, axis=0)
            row = got[tuple(np.round(m[:3], 9))]
            assert row[4] == len(members)
            np.testing.assert_allclose(row[3], m[3])
            assert abs(row[5] - np.linalg.norm(row[:3])) < 1e-5
        assert vs.rows[:, 4].sum() + vs.dropped == len(cloud)

    def test_empty(self):
        vs = G.voxelize(np.zeros((0, 4)), SPEC)
        assert vs.count == 0 and vs.dropped == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_mass_conservation(self, seed):
        rng = np.random.default_rng(seed)
        cloud = np.column_stack([rng.uniform(-6, 6, (300, 3)), rng.uniform(0, 1, 300)])
        vs = G.voxelize(cloud, SPEC)
        assert vs.rows[:, 4].sum() + vs.dropped == 300
        idx, _ = SPEC.cell_index(vs.rows[:, :4])
        assert len({tuple(i) for i in idx}) == vs.count


class TestSampleVoxels:
    def setup_method(self):
        rng = np.random.default_rng(0)
        cloud = np.column_stack([rng.uniform(-4, 4, (400, 3)), rng.uniform(0, 1, 400)])
        self.vs = G.voxelize(cloud, SPEC)

    def test_n_ge_count_keeps_all(self):
        out = G.sample_voxels(self.vs, self.vs.count + 5, seed=1)
        assert out.count == self.vs.count
        assert sorted(map(tuple, out.rows)) == sorted(map(tuple, self.vs.rows))

    def test_zero(self):
        assert G.sample_voxels(self.vs, 0, seed=1).count == 0

    def test_deterministic(self):
        a = G.sample_voxels(self.vs, 20, seed=3)
        b = G.sample_voxels(self.vs, 20, seed=3)
        np.testing.assert_array_equal(a.rows, b.rows)
        assert len({tuple(r) for r in a.rows}) == 20

    def test_negative(self):
        with pytest.raises(ConfigError):
            G.sample_voxels(self.vs, -1, seed=0)


class TestGridSample:
    def test_cell_center_exact(self):
        grid = np.random.default_rng(0).standard_normal((3, 8, 8, 4))
        spec = G.GridSpec((0, 0, 0), (1, 1, 1), (8, 8, 4))
        q = G.normalize_to_centers(spec.centers(), spec)
        out = G.grid_sample(Tensor(grid), q).data
        np.testing.assert_allclose(out, grid.reshape(3, -1).T, atol=1e-6)

    def test_midpoint_is_mean(self):
        grid = np.random.default_rng(1).standard_normal((2, 8, 8, 4))
        spec = G.GridSpec((0, 0, 0), (1, 1, 1), (8, 8, 4))
        q = G.normalize_to_centers(np.array([[2.0, 3.5, 1.5]]), spec)
        out = G.grid_sample(Tensor(grid), q).data
        np.testing.assert_allclose(out[0], (grid[:, 1, 3, 1] + grid[:, 2, 3, 1]) / 2, atol=1e-6)

    def test_matches_brute_force(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            grid = rng.standard_normal((3, 8, 8, 4))
            q = rng.uniform(-1.1, 1.1, (200, 3))
            out = G.grid_sample(Tensor(grid), q).data
            np.testing.assert_allclose(out, trilinear_oracle(grid, q), atol=1e-6)

    def test_convexity(self):
        rng = np.random.default_rng(3)
        grid = rng.standard_normal((1, 4, 5, 3))
        q = rng.uniform(-1, 1, (300, 3))
        out = G.grid_sample(Tensor(grid), q).data[:, 0]
        cw = G._corner_weights(q, grid.shape[1:])
        vals = np.stack([grid[0][i, j, k] for (i, j, k), _ in cw], axis=1)
        assert np.all(out <= vals.max(1) + 1e-9) and np.all(out >= vals.min(1) - 1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        grid = Tensor(rng.standard_normal((2, 4, 4, 3)), requires_grad=True)
        q = rng.uniform(-1, 1, (30, 3))
        w = Tensor(rng.standard_normal((30, 2)))
        rep = finite_diff_check(lambda: (G.grid_sample(grid, q) * w).sum(), [grid])
        assert rep.max_rel_err < 1e-3


class TestPositionalEncoding:
    def test_zero_pattern(self):
        pe = G.positional_encoding(np.zeros((1, 2)), 16)
        np.testing.assert_array_equal(pe[0], np.tile([0.0, 1.0], 8))

    def test_deterministic(self):
        x = np.random.default_rng(0).uniform(-1, 1, (5, 3))
        np.testing.assert_array_equal(G.positional_encoding(x, 24), G.positional_encoding(x, 24))

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            G.positional_encoding(np.zeros((1, 6)), 32)

    def test_bev_grid_codes_distinct(self):
        spec = G.GridSpec((0, 0, 0), (1, 1, 1), (16, 16, 1))
        pts = G.normalize_to_centers(spec.centers(), spec)[:, :2]
        pe = G.positional_encoding(pts, 32)
        d = np.sqrt(((pe[:, None] - pe[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        assert d.min() > 0


class TestPerturbExtrinsics:
    R = G.look_at([1, 0, 1.6], [1, 0.2, 0])

    def test_sigma_zero(self):
        np.testing.assert_array_equal(G.perturb_extrinsics(self.R, 0.0, 3), self.R)

    def test_negative_sigma(self):
        with pytest.raises(ConfigError):
            G.perturb_extrinsics(self.R, -1e-3, 0)

    @pytest.mark.parametrize("sigma", [2.0 ** -k for k in range(15, 9, -1)])
    def test_sweep_grid_deterministic_and_last_row(self, sigma):
        a = G.perturb_extrinsics(self.R, sigma, 11)
        np.testing.assert_array_equal(a, G.perturb_extrinsics(self.R, sigma, 11))
        np.testing.assert_array_equal(a[3], [0, 0, 0, 1])
        assert np.abs(a - self.R).max() < 10 * sigma

    def test_variance(self):
        sigma = 2.0 ** -10
        draws = np.stack([G.perturb_extrinsics(self.R, sigma, s) - self.R for s in range(10_000)])
        var = draws[:, :3, :].var(axis=0)
        assert np.all(np.abs(var / sigma ** 2 - 1) < 0.1)

    def test_converges(self):
        errs = [np.abs(G.perturb_extrinsics(self.R, s, 0) - self.R).max() for s in (1e-2, 1e-4, 1e-6)]
        assert errs[0] > errs[1] > errs[2]


class TestCompression:
    def test_distinct_cells(self):
        pts = SPEC.centers()[:50]
        cloud = np.column_stack([pts, np.zeros(50)])
        assert G.compression_stats(cloud, SPEC)["rate"] == 1.0

    def test_one_cell(self):
        cloud = np.tile([[0.1, 0.1, 0.1, 0.5]], (8, 1))
        assert G.compression_stats(cloud, SPEC)["rate"] == 1 / 8

    def test_empty(self):
        assert G.compression_stats(np.zeros((0, 4)), SPEC)["rate"] is None

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        cloud = np.column_stack([rng.uniform(-3.9, 3.9, (3000, 2)), rng.uniform(-0.9, 1.9, 3000), rng.uniform(0, 1, 3000)])
        st_ = G.compression_stats(cloud, SPEC)
        assert st_["rate"] == len(hash_oracle(cloud, SPEC)) / 3000
