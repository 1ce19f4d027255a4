import numpy as np
import pytest

from gsloc import CameraIntrinsics, Pose
from gsloc.errors import NoSurface, OutOfVolume
from gsloc.mapper import KeyframeRecord
from gsloc.volume import FeatureVolume, load_volume, save_volume


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_volume(dims=(8, 8, 8), voxel=0.1, dfeat=4, origin=(0, 0, 0)):
    return FeatureVolume(origin, voxel, dims, dfeat)


def keyframe_for_volume(vol, H=16, W=16, depth_val=1.0, dfeat=4):
    """Camera at volume center looking +z onto a wall of constant depth."""
    color = np.zeros((H, W, 3))
    depth = np.full((H, W), depth_val)
    fmap = np.zeros((H, W, dfeat), dtype=np.float32)
    fmap[..., 0] = 1.0
    K = CameraIntrinsics(fx=20.0, fy=20.0, cx=W / 2, cy=H / 2, width=W, height=H)
    center = vol.origin + np.array(vol.dims) * vol.voxel_size / 2.0
    pose = Pose(t=center - np.array([0, 0, depth_val / 2]))
    return KeyframeRecord(color=color, depth=depth, pose=pose, intrinsics=K,
                          feature_map=fmap, score_map=np.zeros((H, W)))


class TestFusion:
    def test_first_observation_exact(self):
        vol = make_volume()
        f1 = unit([1.0, 2.0, 0.0, -1.0])
        p = vol.cell_center([3, 3, 3])
        # drive the public update path through a crafted 1-pixel keyframe
        self._integrate_single(vol, p, f1)
        assert np.allclose(vol.features[3, 3, 3], f1, atol=1e-6)
        assert vol.weights[3, 3, 3] == 1.0

    def _integrate_single(self, vol, point_world, feature):
        K = CameraIntrinsics(fx=10.0, fy=10.0, cx=0.5, cy=0.5, width=1, height=1)
        pose = Pose(t=point_world - np.array([0.0, 0.0, 1.0]))
        # principal offset: unproject of pixel (0,0) at depth 1 = center + small xy
        uv_world = point_world.copy()
        color = np.zeros((1, 1, 3))
        depth = np.ones((1, 1))
        fmap = np.asarray(feature, dtype=np.float32).reshape(1, 1, -1)
        kf = KeyframeRecord(color=color, depth=depth, pose=pose, intrinsics=K,
                            feature_map=fmap, score_map=np.zeros((1, 1)))
        vol.integrate_keyframe(kf)

    def test_two_observation_mean(self):
        # running weighted mean: after f1 then f2 the cell holds (f1+f2)/2
        vol = make_volume()
        p = vol.cell_center([2, 2, 2])
        f1 = unit([1.0, 0, 0, 0])
        f2 = unit([0, 1.0, 0, 0])
        self._integrate_single(vol, p, f1)
        self._integrate_single(vol, p, f2)
        assert np.allclose(vol.features[2, 2, 2], (f1 + f2) / 2, atol=1e-6)
        assert vol.weights[2, 2, 2] == 2.0

    def test_repeat_same_direction_idempotent(self):
        vol = make_volume()
        p = vol.cell_center([2, 2, 2])
        f = unit([1.0, 1.0, 0, 0])
        self._integrate_single(vol, p, f)
        before = vol.features[2, 2, 2] / np.linalg.norm(vol.features[2, 2, 2])
        self._integrate_single(vol, p, f)
        after = vol.features[2, 2, 2] / np.linalg.norm(vol.features[2, 2, 2])
        assert np.allclose(before, after, atol=1e-6)

    def test_order_insensitive_after_normalization(self):
        rng = np.random.default_rng(0)
        feats = [unit(rng.normal(size=4)) for _ in range(12)]
        volA = make_volume()
        volB = make_volume()
        p = volA.cell_center([4, 4, 4])
        for f in feats:
            self._integrate_single(volA, p, f)
        for f in reversed(feats):
            self._integrate_single(volB, p, f)
        a = volA.features[4, 4, 4] / np.linalg.norm(volA.features[4, 4, 4])
        b = volB.features[4, 4, 4] / np.linalg.norm(volB.features[4, 4, 4])
        assert np.abs(a - b).max() < 1e-5

    def test_randomized_sequences_match_direct_mean(self):
        # fusion oracle: any observation sequence equals the plain mean
        rng = np.random.default_rng(1)
        for trial in range(5):
            vol = make_volume()
            p = vol.cell_center([1, 2, 3])
            feats = [unit(rng.normal(size=4)) for _ in range(rng.integers(2, 9))]
            for f in feats:
                self._integrate_single(vol, p, f)
            direct = np.mean(feats, axis=0)
            assert np.abs(vol.features[1, 2, 3] - direct).max() < 1e-5

    def test_out_of_bounds_skipped(self):
        vol = make_volume()
        p = vol.origin - 1.0   # outside
        self._integrate_single(vol, p, unit([1, 0, 0, 0]))
        assert vol.last_skipped == 1
        assert vol.weights.max() == 0.0

    def test_wall_keyframe_updates_cells(self):
        vol = make_volume(dims=(12, 12, 12))
        kf = keyframe_for_volume(vol)
        n = vol.integrate_keyframe(kf)
        assert n > 0
        assert (vol.tsdf_weights > 0).sum() > 0
        # cells near the wall got negative-to-positive sdf band
        assert vol.tsdf.min() < 0 < vol.tsdf.max()


class TestSampling:
    def test_cell_center_exact(self):
        vol = make_volume()
        f = unit([0.5, 0.5, 0.5, 0.5])
        vol.features[3, 4, 5] = f
        vol.weights[3, 4, 5] = 1.0
        got = vol.sample_feature(vol.cell_center([3, 4, 5]))
        assert np.allclose(got, f, atol=1e-9)

    def test_midpoint_two_cells(self):
        vol = make_volume()
        f1 = unit([1.0, 0, 0, 0])
        f2 = unit([0, 1.0, 0, 0])
        vol.features[3, 4, 5] = f1
        vol.features[4, 4, 5] = f2
        vol.weights[3, 4, 5] = vol.weights[4, 4, 5] = 1.0
        mid = (vol.cell_center([3, 4, 5]) + vol.cell_center([4, 4, 5])) / 2
        got = vol.sample_feature(mid)
        expected = unit((f1 + f2) / 2)
        assert np.allclose(got, expected, atol=1e-9)

    def test_empty_neighborhood_returns_none(self):
        vol = make_volume()
        assert vol.sample_feature(vol.cell_center([4, 4, 4])) is None

    def test_out_of_volume_raises(self):
        vol = make_volume()
        with pytest.raises(OutOfVolume):
            vol.sample_feature(vol.origin - 10.0)

    def test_affine_field_reproduced_exactly(self):
        # raw trilinear interpolation reproduces affine functions of position
        # (float64 cells; float32 storage would quantize at ~1e-7)
        vol = FeatureVolume((0, 0, 0), 0.1, (6, 6, 6), 2, dtype=np.float64)
        A = np.array([[0.3, -0.2, 0.5], [1.0, 0.7, -0.4]])
        b = np.array([0.1, -0.9])
        for idx in np.ndindex(*vol.dims):
            c = vol.cell_center(idx)
            vol.features[idx] = A @ c + b
            vol.weights[idx] = 1.0
        rng = np.random.default_rng(2)
        lo = vol.cell_center([0, 0, 0])
        hi = vol.cell_center([5, 5, 5])
        pts = rng.uniform(lo, hi, size=(200, 3))
        vals, ok = vol.interpolate(pts, normalize_cells=False)
        expected = pts @ A.T + b
        assert ok.all()
        assert np.abs(vals - expected).max() < 1e-9


class TestSurface:
    def _sphere_volume(self, voxel, radius=0.35, dims=24):
        vol = FeatureVolume(origin=(-voxel * dims / 2,) * 3, voxel_size=voxel,
                            dims=(dims,) * 3, feature_dim=2,
                            trunc=4 * voxel)
        centers = vol.cell_center(np.indices(vol.dims).reshape(3, -1).T)
        sdf = np.linalg.norm(centers, axis=1) - radius
        vol.tsdf = np.clip(sdf, -vol.trunc, vol.trunc).reshape(vol.dims).astype(np.float32)
        vol.features[..., 0] = 1.0
        vol.weights[:] = 1.0
        return vol

    @pytest.mark.parametrize("voxel", [0.02, 0.04, 0.08])
    def test_sphere_vertices_near_radius(self, voxel):
        radius = 0.35
        dims = int(np.ceil(1.0 / voxel))
        vol = self._sphere_volume(voxel, radius, dims)
        samples = vol.extract_surface(4000, np.random.default_rng(0))
        r = np.linalg.norm(samples.points, axis=1)
        assert samples.points.shape[0] > 1000
        assert np.abs(r - radius).max() < voxel

    @pytest.mark.parametrize("voxel", [0.02, 0.04, 0.08])
    def test_plane_vertices_near_height(self, voxel):
        dims = int(np.ceil(1.0 / voxel))
        h = 0.03
        vol = FeatureVolume(origin=(-0.5, -0.5, -0.5), voxel_size=voxel,
                            dims=(dims,) * 3, feature_dim=2, trunc=4 * voxel)
        centers = vol.cell_center(np.indices(vol.dims).reshape(3, -1).T)
        sdf = centers[:, 2] - h
        vol.tsdf = np.clip(sdf, -vol.trunc, vol.trunc).reshape(vol.dims).astype(np.float32)
        vol.features[..., 0] = 1.0
        vol.weights[:] = 1.0
        samples = vol.extract_surface(3000, np.random.default_rng(0))
        assert np.abs(samples.points[:, 2] - h).max() < voxel

    def test_no_surface_all_positive(self):
        vol = make_volume()
        vol.tsdf[:] = vol.trunc
        with pytest.raises(NoSurface):
            vol.extract_surface(100)

    def test_area_weighted_sampling(self):
        # fraction of samples on a triangle tracks its area fraction
        vol = self._sphere_volume(0.05, 0.3, 20)
        n = 100_000
        samples = vol.extract_surface(n, np.random.default_rng(3),
                                      attach_features=False)
        # all sphere samples sit near radius; empirical mean of |z| over the
        # sphere with area-uniform sampling is r/2
        r = 0.3
        mean_abs_z = np.abs(samples.points[:, 2]).mean()
        assert abs(mean_abs_z - r / 2) < 0.02

    def test_surface_sample_tsdf_magnitude(self):
        vol = self._sphere_volume(0.04, 0.35, 25)
        samples = vol.extract_surface(2000, np.random.default_rng(4))
        vals = vol.interpolate_tsdf(samples.points)
        assert np.abs(vals).max() < vol.voxel_size


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        vol = make_volume(dims=(5, 6, 7), dfeat=3)
        vol.features[:] = rng.normal(size=vol.features.shape).astype(np.float32)
        vol.weights[:] = rng.random(vol.weights.shape).astype(np.float32)
        vol.tsdf[:] = rng.normal(size=vol.tsdf.shape).astype(np.float32)
        vol.tsdf_weights[:] = rng.random(vol.tsdf.shape).astype(np.float32)
        path = tmp_path / "vol.fvol"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.dims == vol.dims
        assert np.array_equal(back.features, vol.features)
        assert np.array_equal(back.weights, vol.weights)
        assert np.array_equal(back.tsdf, vol.tsdf)
        assert back.voxel_size == pytest.approx(vol.voxel_size)
