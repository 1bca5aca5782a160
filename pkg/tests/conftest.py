import numpy as np
import pytest

from mvpartseg.core import CameraView, ClassCatalog, PointCloud
from mvpartseg.pipeline import PipelineConfig
from mvpartseg.synth import generate_scene, write_scene_package


@pytest.fixture(scope="session")
def catalog3():
    return ClassCatalog(((1, "one"), (2, "two"), (3, "three")))


@pytest.fixture(scope="session")
def identity_camera():
    """fx = fy = 500, cx = cy = 256 camera at the world origin looking +z."""
    return CameraView(0, 512, 512, 500.0, 500.0, 256.0, 256.0,
                      np.eye(3), np.zeros(3))


@pytest.fixture(scope="session")
def small_scene():
    """Two objects, 4000 points each; enough structure for pipeline tests."""
    return generate_scene(3, n_objects=2, points_per_object=4000)


@pytest.fixture(scope="session")
def small_config():
    return PipelineConfig(image_size=256)


@pytest.fixture(scope="session")
def small_package_dir(tmp_path_factory, small_scene, small_config):
    out = tmp_path_factory.mktemp("pkg")
    write_scene_package(out, small_scene, n_ring=10,
                        render_config=small_config.render_config())
    return out


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive determinant."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return q


def random_camera(rng, view_id=0, size=640) -> CameraView:
    f = rng.uniform(200.0, 1200.0)
    return CameraView(view_id, size, size, f, f * rng.uniform(0.9, 1.1),
                      size / 2 + rng.uniform(-20, 20), size / 2 + rng.uniform(-20, 20),
                      random_rotation(rng), rng.uniform(-2, 2, 3))


def grid_plane(z: float, span: float, step: float, rng=None) -> np.ndarray:
    """Hole-free jittered grid plane at height z, used for occlusion tests."""
    ax = np.arange(-span, span + 1e-9, step)
    gx, gy = np.meshgrid(ax, ax)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    if rng is not None:
        pts = pts + rng.normal(0, step * 0.05, pts.shape)
    return pts


def make_cloud(points, colors=None) -> PointCloud:
    return PointCloud(np.asarray(points, dtype=np.float64), colors)
