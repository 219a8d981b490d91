import numpy as np
import pytest
import torch

from avatargen.data import DataConfig, synthesize
from avatargen.geometry import BodyTemplate, CameraParams, make_template
from avatargen.rotations import quat_from_axis_angle


@pytest.fixture(scope="session")
def template():
    return make_template()


def chain_template(weights=None) -> BodyTemplate:
    """Two joints: root at the origin, child at (0, 1, 0); one vertex per joint plus a midpoint."""
    verts = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.5, 0.0]])
    if weights is None:
        weights = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    return BodyTemplate(
        vertices=verts, faces=np.array([[0, 1, 2]]), joints=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        parent=np.array([-1, 0]), skin_weights=np.asarray(weights, dtype=np.float64),
        uv_coords=np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]), head_joint=1,
    )


def axis_camera(focal=100.0, size=129, distance=0.0) -> CameraParams:
    """Identity-rotation camera at the origin looking down +z; principal point at the image center."""
    c = (size - 1) / 2
    return CameraParams(focal, focal, c, c, np.eye(3), np.array([0.0, 0.0, distance]), size, size)


def rot_z(deg):
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.deg2rad(deg))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = DataConfig(num_samples=2, views=4, seed=3)
    synthesize(root, cfg)
    return root, cfg


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
