import math

import numpy as np
import pytest

from mvpartseg.errors import EmptyInstance, NonPositiveInput, TooFewPoints
from mvpartseg.projection import project_points, unproject_pixels
from mvpartseg.renderer import (
    RenderConfig,
    adaptive_radius,
    estimate_density,
    make_top_view,
    render,
    sample_part_views,
)

from conftest import make_cloud


class TestAdaptiveRadius:
    def test_exact_substitution(self):
        assert adaptive_radius(3, 1024, 4.0, 1.0) == 0.01171875

    def test_second_substitution(self):
        assert adaptive_radius(2, 1024, 1.024, 2.0) == pytest.approx(0.001, abs=1e-15)

    def test_zero_density_rejected(self):
        with pytest.raises(NonPositiveInput):
            adaptive_radius(3, 1024, 4.0, 0.0)

    def test_minimum_floor(self):
        assert adaptive_radius(1, 8192, 1e-9, 1e6) == 1e-6


class TestEstimateDensity:
    def test_filled_cube(self):
        # 1000 points filling a 10 cm cube -> 1 point per cm^3
        ax = np.linspace(0.0, 0.1, 10)
        gx, gy, gz = np.meshgrid(ax, ax, ax)
        cloud = make_cloud(np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]))
        assert estimate_density(cloud) == pytest.approx(1.0)

    def test_cube_corners(self):
        corners = np.array([[x, y, z] for x in (0, 0.02) for y in (0, 0.02) for z in (0, 0.02)])
        assert estimate_density(make_cloud(corners)) == pytest.approx(1.0)

    def test_single_point_rejected(self):
        with pytest.raises(TooFewPoints):
            estimate_density(make_cloud([[0.0, 0.0, 0.0]]))

    def test_planar_cloud_floor(self):
        # z extent zero: floored at 1 cm instead of dividing by zero
        rng = np.random.default_rng(0)
        flat = np.column_stack([rng.random(100), rng.random(100), np.zeros(100)])
        assert math.isfinite(estimate_density(make_cloud(flat)))


class TestRender:
    def test_single_point(self, identity_camera):
        cloud = make_cloud([[0.0, 0.0, 2.0]])
        out = render(cloud, identity_camera, 0.002)
        assert out.index_image[256, 256] == 0
        assert out.depth_image[256, 256] == pytest.approx(2.0, abs=1e-12)
        assert np.isinf(out.depth_image[0, 0])
        assert out.index_image[0, 0] == -1

    def test_zbuffer_front_wins(self, identity_camera):
        cloud = make_cloud([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
        out = render(cloud, identity_camera, 0.002)
        assert out.index_image[256, 256] == 1
        assert out.depth_image[256, 256] == pytest.approx(1.0, abs=1e-12)

    def test_exact_z_tie_lower_id_wins(self, identity_camera):
        cloud = make_cloud([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        out = render(cloud, identity_camera, 0.002)
        assert out.index_image[256, 256] == 0

    def test_empty_cloud(self, identity_camera):
        out = render(make_cloud(np.zeros((0, 3))), identity_camera, 0.01)
        assert np.all(out.index_image == -1)
        assert np.all(np.isinf(out.depth_image))

    def test_behind_camera_skipped(self, identity_camera):
        out = render(make_cloud([[0.0, 0.0, -1.0]]), identity_camera, 0.01)
        assert np.all(out.index_image == -1)

    def test_depth_matches_point_depth_everywhere(self, identity_camera):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 300),
                               rng.uniform(-0.5, 0.5, 300),
                               rng.uniform(1.0, 3.0, 300)])
        cloud = make_cloud(pts)
        out = render(cloud, identity_camera, 0.01)
        occupied = out.index_image >= 0
        ids = out.index_image[occupied]
        cam_z = pts[ids][:, 2]  # identity pose: camera z is world z
        np.testing.assert_allclose(out.depth_image[occupied], cam_z, atol=1e-9)
        # no pixel is deeper than any point splatting onto it: front-most wins
        assert np.all(out.depth_image[occupied] <= cam_z + 1e-9)

    def test_render_unproject_round_trip(self, identity_camera):
        # points constructed on integer-pixel rays; spacing > 2 splat radii
        rng = np.random.default_rng(2)
        cols = np.arange(40, 480, 16)
        rows = np.arange(40, 480, 16)
        gx, gy = np.meshgrid(cols, rows)
        uv = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
        depth = rng.uniform(1.0, 3.0, len(uv))
        pts = unproject_pixels(identity_camera, uv, depth)
        cloud = make_cloud(pts)
        out = render(cloud, identity_camera, 0.004)
        occupied = np.nonzero(out.index_image >= 0)
        ids = out.index_image[occupied]
        centers_uv = np.column_stack([occupied[1], occupied[0]]).astype(np.float64)
        is_center = np.all(np.rint(
            project_points(identity_camera, pts[ids])[0]) == centers_uv, axis=1)
        recovered = unproject_pixels(identity_camera, centers_uv[is_center],
                                     out.depth_image[occupied][is_center])
        np.testing.assert_allclose(recovered, pts[ids[is_center]], atol=1e-6)

    def test_deterministic(self, identity_camera):
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 500),
                               rng.uniform(-0.5, 0.5, 500),
                               rng.uniform(1.0, 3.0, 500)])
        cloud = make_cloud(pts)
        a = render(cloud, identity_camera, 0.02)
        b = render(cloud, identity_camera, 0.02)
        assert np.array_equal(a.depth_image, b.depth_image)
        assert np.array_equal(a.index_image, b.index_image)
        assert np.array_equal(a.color_image, b.color_image)

    def test_radius_must_be_positive(self, identity_camera):
        with pytest.raises(NonPositiveInput):
            render(make_cloud([[0, 0, 1.0]]), identity_camera, 0.0)


class TestRenderConfig:
    def test_point_px_bounds(self):
        with pytest.raises(ValueError):
            RenderConfig(point_px=0)
        with pytest.raises(ValueError):
            RenderConfig(point_px=17)

    def test_image_size_bounds(self):
        with pytest.raises(ValueError):
            RenderConfig(image_size=32)


class TestPartViews:
    def test_ring_count_and_azimuth_step(self):
        rng = np.random.default_rng(4)
        cloud = make_cloud(rng.normal(0, 0.3, (200, 3)))
        views = sample_part_views(cloud, n_ring=10, config=RenderConfig(image_size=256))
        assert len(views) == 11
        center = cloud.positions.mean(axis=0)
        eyes = [-v.rotation.T @ v.translation for v in views]
        az = [math.atan2(e[1] - center[1], e[0] - center[0]) for e in eyes[:10]]
        steps = np.diff(np.unwrap(az))
        np.testing.assert_allclose(np.abs(steps), math.radians(36.0), atol=1e-9)

    def test_all_points_inside_every_frustum(self):
        rng = np.random.default_rng(5)
        direction = rng.normal(size=(500, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        cloud = make_cloud(direction)  # unit sphere surface
        config = RenderConfig(image_size=256)
        for view in sample_part_views(cloud, n_ring=4, config=config):
            uv, _, front = project_points(view, cloud.positions)
            assert np.all(front)
            assert np.all((uv >= 0) & (uv < config.image_size))

    def test_empty_instance(self):
        with pytest.raises(EmptyInstance):
            sample_part_views(make_cloud(np.zeros((0, 3))), 10)

    def test_view_ids_follow_base(self):
        cloud = make_cloud(np.random.default_rng(0).normal(0, 1, (50, 3)))
        views = sample_part_views(cloud, n_ring=3, config=RenderConfig(image_size=256),
                                  base_view_id=2000)
        assert [v.view_id for v in views] == [2001, 2002, 2003, 2004]


class TestTopView:
    def test_floor_fits_in_image(self):
        rng = np.random.default_rng(6)
        pts = np.column_stack([rng.uniform(0, 10, 2000), rng.uniform(0, 10, 2000),
                               np.zeros(2000)])
        cloud = make_cloud(pts)
        config = RenderConfig(image_size=256)
        view = make_top_view(cloud, config)
        uv, _, front = project_points(view, cloud.positions)
        assert np.all(front)
        assert np.all((uv >= 0) & (uv < config.image_size))

    def test_single_point_projects_to_center(self):
        view = make_top_view(make_cloud([[3.0, -2.0, 1.0]]), RenderConfig(image_size=256))
        uv, _, front = project_points(view, np.array([[3.0, -2.0, 1.0]]))
        assert front[0]
        np.testing.assert_allclose(uv[0], [128.0, 128.0], atol=1e-9)

    def test_looks_straight_down(self):
        view = make_top_view(make_cloud([[0.0, 0.0, 0.0], [1.0, 1.0, 0.5]]),
                             RenderConfig(image_size=256))
        # optical axis (camera z in world frame) points along -z
        np.testing.assert_allclose(view.rotation[2], [0.0, 0.0, -1.0], atol=1e-12)

    def test_empty_scene(self):
        with pytest.raises(EmptyInstance):
            make_top_view(make_cloud(np.zeros((0, 3))))
