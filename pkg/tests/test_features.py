import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solidslam import se3, sim
from solidslam.exceptions import DegeneratePoint, InsufficientFeatures, ValidationError
from solidslam.features import (
    CellGrid,
    GridFeatureExtractor,
    SensorSpec,
    classify_features,
    compute_angles,
    compute_smoothness,
    filter_range,
    grid_shape,
    project_to_grid,
)


def grid_from_ranges(R, direction=(1.0, 0.0, 0.0)):
    """Grid whose cell means sit along one direction at the given ranges (NaN = empty)."""
    R = np.asarray(R, float)
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    occ = np.isfinite(R)
    mean = np.where(occ[..., None], R[..., None] * d, np.nan)
    return CellGrid(mean, occ.astype(np.int64))


def brute_smoothness(R, lam, min_neighbors):
    M, N = R.shape
    out = np.full((M, N), np.nan)
    for m in range(M):
        for n in range(N):
            if not np.isfinite(R[m, n]):
                continue
            total, count = 0.0, 0
            for i in range(max(0, m - lam), min(M, m + lam + 1)):
                for j in range(max(0, n - lam), min(N, n + lam + 1)):
                    if np.isfinite(R[i, j]):
                        total += R[i, j] - R[m, n]
                        count += 1
            if count >= min_neighbors:
                out[m, n] = total / lam**2
    return out


def in_fov_oracle(P, spec):
    # tangent-space bounds instead of arctan
    x, y, z = P.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u, v = y / x, z / x
    return (
        (x > 0)
        & (u >= math.tan(spec.alpha_min)) & (u <= math.tan(spec.alpha_max))
        & (v >= math.tan(spec.theta_min)) & (v <= math.tan(spec.theta_max))
    )


class TestSensorSpec:
    def test_defaults_give_capped_grid(self):
        # 70 / (2 * 0.07) = 500 and 55 / 0.14 = 392, both capped at 200
        assert grid_shape(SensorSpec()) == (200, 200)
        assert grid_shape(SensorSpec(), max_cells=None) == (500, 392)

    @pytest.mark.parametrize(
        "kw, key",
        [
            (dict(alpha_min=0.2, alpha_max=0.1), "alpha_min"),
            (dict(theta_min=0.3, theta_max=0.3), "theta_min"),
            (dict(alpha_res=0.0), "alpha_res"),
            (dict(range_min=0.0), "range_min"),
            (dict(range_min=5.0, range_max=4.0), "range_max"),
        ],
    )
    def test_invalid(self, kw, key):
        with pytest.raises(ValidationError) as exc:
            SensorSpec(**kw)
        assert exc.value.key == key


class TestFilterRange:
    def test_empty(self):
        assert filter_range(np.zeros((0, 3)), SensorSpec()).shape == (0, 3)

    def test_max_range_removed(self):
        spec = SensorSpec()
        assert len(filter_range([[spec.range_max, 0, 0]], spec)) == 0

    def test_mid_range_kept(self):
        spec = SensorSpec()
        mid = (spec.range_min + spec.range_max) / 2
        assert len(filter_range([[mid, 0, 0]], spec)) == 1

    def test_margin_boundary_and_nonfinite(self):
        spec = SensorSpec()
        cloud = [
            [spec.range_max * 0.98, 0, 0],
            [spec.range_max * 0.981, 0, 0],
            [spec.range_min, 0, 0],
            [spec.range_min * 0.99, 0, 0],
            [np.nan, 1, 1],
            [np.inf, 0, 0],
        ]
        out = filter_range(cloud, spec)
        assert out[:, 0].tolist() == [spec.range_max * 0.98, spec.range_min]


class TestComputeAngles:
    def test_boresight(self):
        assert compute_angles((1, 0, 0)) == (0.0, 0.0)

    def test_45_in_xy(self):
        a, t = compute_angles((1, 1, 0))
        assert a == pytest.approx(math.pi / 4) and t == 0.0

    def test_45_in_xz(self):
        a, t = compute_angles((2, 0, 2))
        assert a == 0.0 and t == pytest.approx(math.pi / 4)

    def test_x_zero_raises(self):
        with pytest.raises(DegeneratePoint):
            compute_angles((0, 1, 1))


class TestProjectToGrid:
    def test_center_point(self):
        spec = SensorSpec()
        M, N = grid_shape(spec)
        g = project_to_grid([[3.0, 0.0, 0.0]], spec)
        (m, n), = np.argwhere(g.count > 0)
        # one-based (ceil(M/2), ceil(N/2))
        assert (m + 1, n + 1) == (math.ceil(M / 2), math.ceil(N / 2))
        np.testing.assert_array_equal(g.mean[m, n], [3.0, 0.0, 0.0])

    def test_center_point_odd_grid(self):
        spec = SensorSpec()
        g = project_to_grid([[3.0, 0.0, 0.0]], spec, shape=(7, 5))
        assert tuple(np.argwhere(g.count > 0)[0]) == (3, 2)

    def test_duplicate_points(self):
        p = [2.0, 0.3, -0.2]
        g = project_to_grid([p, p], SensorSpec())
        (m, n), = np.argwhere(g.count > 0)
        assert g.count[m, n] == 2
        np.testing.assert_allclose(g.mean[m, n], p, rtol=0, atol=1e-15)

    def test_counts_sum_to_in_fov(self):
        rng = np.random.default_rng(0)
        P = rng.uniform([-1, -3, -3], [5, 3, 3], size=(10_000, 3))
        spec = SensorSpec()
        g = project_to_grid(P, spec)
        assert g.count.sum() == in_fov_oracle(P, spec).sum()

    def test_mean_is_centroid(self):
        rng = np.random.default_rng(1)
        spec = SensorSpec()
        P = rng.uniform([1, -0.5, -0.5], [3, 0.5, 0.5], size=(3000, 3))
        g = project_to_grid(P, spec, shape=(10, 8))
        alpha = np.arctan(P[:, 1] / P[:, 0])
        theta = np.arctan(P[:, 2] / P[:, 0])
        m = np.clip(((alpha - spec.alpha_min) / (spec.alpha_max - spec.alpha_min) * 10).astype(int), 0, 9)
        n = np.clip(((theta - spec.theta_min) / (spec.theta_max - spec.theta_min) * 8).astype(int), 0, 7)
        for (i, j) in {(4, 3), (5, 4), (4, 4)}:
            sel = (m == i) & (n == j)
            np.testing.assert_allclose(g.mean[i, j], P[sel].mean(axis=0), atol=1e-12)

    def test_out_of_fov_dropped(self):
        g = project_to_grid([[-1, 0, 0], [1, 5, 0], [1, 0, 5]], SensorSpec())
        assert g.count.sum() == 0


class TestSmoothness:
    def test_constant_range_zero(self):
        g = compute_smoothness(grid_from_ranges(np.full((6, 7), 2.5)), lam=2)
        valid = np.isfinite(g.smoothness)
        assert valid[2:4, 2:5].all()
        np.testing.assert_allclose(g.smoothness[valid], 0.0, atol=1e-12)

    def test_lambda1_example(self):
        R = np.full((3, 3), 2.0)
        R[1, 1] = 1.0
        g = compute_smoothness(grid_from_ranges(R), lam=1)
        assert g.smoothness[1, 1] == pytest.approx(8.0)

    def test_border_window_matches_brute_force(self):
        rng = np.random.default_rng(2)
        R = rng.uniform(1, 4, size=(9, 11))
        R[rng.random(R.shape) < 0.2] = np.nan
        for lam in (1, 2, 3):
            g = compute_smoothness(grid_from_ranges(R), lam=lam, min_neighbors=0)
            np.testing.assert_allclose(g.smoothness, brute_smoothness(R, lam, 0), atol=1e-12)

    def test_sparse_window_rule(self):
        rng = np.random.default_rng(3)
        R = rng.uniform(1, 4, size=(12, 12))
        R[rng.random(R.shape) < 0.45] = np.nan
        g = compute_smoothness(grid_from_ranges(R), lam=2)
        np.testing.assert_allclose(g.smoothness, brute_smoothness(R, 2, 12.5), atol=1e-12)

    @pytest.mark.parametrize("lam", [0, -1, 1.5, True])
    def test_bad_lambda(self, lam):
        with pytest.raises(ValidationError):
            compute_smoothness(grid_from_ranges(np.ones((3, 3))), lam=lam)

    def test_invariant_under_cell_mapping_rotation(self):
        # 180 degrees about the forward axis maps cell (m, n) to (M-1-m, N-1-n)
        rng = np.random.default_rng(4)
        spec = SensorSpec()
        P = rng.uniform([1, -1, -1], [4, 1, 1], size=(20_000, 3))
        Rx = se3.rotation_about([1, 0, 0], math.pi).rotation
        ext = GridFeatureExtractor(sensor=spec, max_cells=40).fit()
        s0 = ext.grid(P).smoothness
        s1 = ext.grid(P @ Rx.T).smoothness
        np.testing.assert_allclose(s1[::-1, ::-1], s0, atol=1e-9, equal_nan=True)


def scored_grid(sigma):
    sigma = np.asarray(sigma, float)
    g = grid_from_ranges(np.ones_like(sigma))
    g.smoothness = sigma
    return g


class TestClassify:
    def test_all_flat(self):
        fs = classify_features(scored_grid(np.zeros((30, 30))), max_planars=400, warn=False)
        assert len(fs.edges) == 0 and len(fs.planars) == 400

    def test_all_flat_below_cap(self):
        fs = classify_features(scored_grid(np.zeros((10, 10))), warn=False)
        assert len(fs.edges) == 0 and len(fs.planars) == 100

    def test_single_edge(self):
        s = np.zeros((20, 20))
        s[4, 7] = 10.0
        g = scored_grid(s)
        g.mean[4, 7] = [9.0, 9.0, 9.0]
        fs = classify_features(g, warn=False)
        assert len(fs.edges) == 1
        np.testing.assert_array_equal(fs.edges[0], [9.0, 9.0, 9.0])
        assert not np.any(np.all(fs.planars == [9.0, 9.0, 9.0], axis=1))

    def test_ordering_and_caps(self):
        rng = np.random.default_rng(5)
        s = rng.uniform(-0.2, 0.2, size=(40, 40))
        g = grid_from_ranges(rng.uniform(1, 5, size=(40, 40)))
        g.smoothness = s
        fs = classify_features(g, 0.05, 0.01, max_edges=20, max_planars=15, warn=False)
        ranges = np.linalg.norm(g.mean, axis=2)
        flat_s, flat_r = s.ravel(), ranges.ravel()
        edge_sigma = [flat_s[np.argmin(np.abs(flat_r - np.linalg.norm(p)))] for p in fs.edges]
        plane_sigma = [flat_s[np.argmin(np.abs(flat_r - np.linalg.norm(p)))] for p in fs.planars]
        assert edge_sigma == sorted(flat_s[flat_s >= 0.05], reverse=True)[:20]
        assert plane_sigma == sorted(flat_s[np.abs(flat_s) <= 0.01], key=abs)[:15]

    def test_negative_sigma_not_edge(self):
        s = np.zeros((10, 10))
        s[2, 2] = -1.0
        fs = classify_features(scored_grid(s), warn=False)
        assert len(fs.edges) == 0 and len(fs.planars) == 99

    def test_disjoint(self):
        rng = np.random.default_rng(6)
        g = grid_from_ranges(rng.uniform(1, 5, size=(30, 30)))
        g.smoothness = rng.normal(0, 0.05, size=(30, 30))
        fs = classify_features(g, warn=False)
        E = {tuple(p) for p in fs.edges}
        assert not E & {tuple(p) for p in fs.planars}

    def test_threshold_order_validated(self):
        with pytest.raises(ValidationError):
            classify_features(scored_grid(np.zeros((3, 3))), sigma_edge=0.01, sigma_plane=0.05)

    def test_insufficient_warning(self):
        with pytest.warns(InsufficientFeatures):
            classify_features(scored_grid(np.zeros((3, 3))))

    def test_requires_smoothness(self):
        with pytest.raises(ValueError):
            classify_features(grid_from_ranges(np.ones((3, 3))))


def corner_scan():
    # narrow sensor facing the vertical convex edge of a large block
    base = SensorSpec(math.radians(-20), math.radians(20), math.radians(-15), math.radians(15))
    spec = sim.ScanSpec(
        sensor=sim.sim_sensor(80, 60, base), rays_vertical=80, rays_horizontal=60, noise_sigma=0.0
    )
    scene = sim.Scene((sim.Box("block", (1.0, 1.0, -5.0), (8.0, 8.0, 5.0)),))
    pose = sim.look_at((0, 0, 0), (1, 1, 0))
    return sim.raycast_scan(scene, pose, spec), spec.matched_sensor()


class TestExtractor:
    def test_convex_corner_rows(self):
        cloud, sensor = corner_scan()
        ext = GridFeatureExtractor(sensor=sensor).fit()
        g = ext.grid(cloud)
        M = g.M
        edge_cells = np.argwhere(g.smoothness >= ext.sigma_edge)
        # the corner falls on the boundary between the two middle sector rows
        assert set(edge_cells[:, 0]) == {M // 2 - 1, M // 2}
        assert len(edge_cells) == 2 * g.N
        assert len(ext.transform(cloud, warn=False).edges) == 2 * g.N

    def test_determinism(self):
        frames, _ = sim.simulate(sim.room_scene(), sim.loop_trajectory(), 30.0)
        ext = GridFeatureExtractor(sensor=sim.ScanSpec().matched_sensor())
        a = ext.fit_transform(frames[5][0])
        b = GridFeatureExtractor(**ext.get_params()).fit_transform(frames[5][0])
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.planars, b.planars)

    def test_room_scan_has_features(self):
        frames, _ = sim.simulate(sim.room_scene(), sim.loop_trajectory(), 30.0)
        ext = GridFeatureExtractor(sensor=sim.ScanSpec().matched_sensor()).fit()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            fs = ext.transform(frames[0][0], frame_index=0, timestamp=0.0)
        assert len(fs.edges) == 150 and len(fs.planars) == 400

    def test_rotation_consistency(self):
        # same scan rotated by R: edges in the overlap keep a counterpart within 2 cell diagonals
        frames, _ = sim.simulate(sim.room_scene(), sim.loop_trajectory(), 30.0)
        sensor = sim.ScanSpec().matched_sensor()
        ext = GridFeatureExtractor(sensor=sensor).fit()
        cell = math.hypot(
            (sensor.alpha_max - sensor.alpha_min) / ext.grid_shape_[0],
            (sensor.theta_max - sensor.theta_min) / ext.grid_shape_[1],
        )
        rates = []
        for k, (axis, deg) in enumerate([((0, 0, 1), 4), ((0, 1, 0), -3), ((1, 0, 0), 10), ((1, 1, 0), 5)]):
            cloud = frames[40 * k][0]
            R = se3.rotation_about(axis, math.radians(deg)).rotation
            a = ext.transform(cloud, warn=False).edges
            b = ext.transform(cloud @ R.T, warn=False).edges
            mapped = a @ R.T
            overlap = in_fov_oracle(mapped, sensor)
            mapped = mapped[overlap]
            d = np.linalg.norm(mapped[:, None, :] - b[None, :, :], axis=2).min(axis=1)
            tol = 2 * cell * np.linalg.norm(mapped, axis=1)
            rates.append(np.mean(d <= tol))
        assert min(rates) >= 0.7, rates

    def test_features_inside_fov_and_range(self):
        frames, _ = sim.simulate(sim.room_scene(), sim.loop_trajectory(), 30.0)
        sensor = sim.ScanSpec().matched_sensor()
        ext = GridFeatureExtractor(sensor=sensor).fit()
        for cloud, _ in frames[::50]:
            fs = ext.transform(cloud, warn=False)
            for P in (fs.edges, fs.planars):
                r = np.linalg.norm(P, axis=1)
                assert np.all((r >= sensor.range_min * 0.999) & (r <= sensor.range_max * 0.98))
                assert np.all(in_fov_oracle(P * (1 - 1e-12), sensor) | in_fov_oracle(P, sensor))

    def test_params_roundtrip(self):
        ext = GridFeatureExtractor(lam=3, max_edges=10)
        assert ext.get_params()["lam"] == 3
        assert ext.set_params(lam=1).lam == 1

    @pytest.mark.parametrize("kw", [dict(lam=0), dict(max_edges=-1), dict(range_margin=1.0), dict(sigma_plane=0.2)])
    def test_fit_validation(self, kw):
        with pytest.raises(ValidationError):
            GridFeatureExtractor(**kw).fit()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_cloud_features_within_bounds(seed):
    rng = np.random.default_rng(seed)
    spec = SensorSpec()
    P = rng.uniform([-2, -6, -6], [10, 6, 6], size=(3000, 3))
    fs = GridFeatureExtractor(sensor=spec, max_cells=30).fit().transform(P, warn=False)
    for Q in (fs.edges, fs.planars):
        if len(Q):
            r = np.linalg.norm(Q, axis=1)
            assert np.all(r >= spec.range_min - 1e-12) and np.all(r <= spec.range_max * 0.98 + 1e-12)
            assert np.all(Q[:, 0] > 0)
