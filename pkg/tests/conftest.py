import numpy as np
import pytest

from dynsplat.geometry import CameraModel, look_at_pose
from dynsplat.splats import SplatScene, num_sh_coeffs


def random_scene(rng, n, sh_degree=1, spread=0.5, scale_range=(0.25, 0.45),
                 logit_op_range=(-0.5, 1.5), sh_amp=0.1):
    """Small scene with well-conditioned splats for gradient/oracle tests."""
    k = num_sh_coeffs(sh_degree)
    rot = rng.normal(0.0, 1.0, (n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return SplatScene(
        mu=rng.uniform(-spread, spread, (n, 3)),
        rot=rot,
        log_scale=np.log(rng.uniform(*scale_range, (n, 3))),
        logit_opacity=rng.uniform(*logit_op_range, n),
        sh=rng.normal(0.0, sh_amp, (n, 3, k)),
    )


@pytest.fixture
def small_cam():
    return CameraModel(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture
def front_pose():
    return look_at_pose(np.array([0.0, -3.0, 0.5]), np.zeros(3))
