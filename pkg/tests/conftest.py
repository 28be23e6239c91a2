import os

# keep the two thread pools from fighting on small machines; must happen
# before numpy/numba load
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from sdfrecon.dataio import bake_dataset, orbit_cameras
from sdfrecon.sdf_analytic import AnalyticScene, Primitive


def two_object_scene() -> AnalyticScene:
    """Sphere + box inside a room box (background), scene units."""
    return AnalyticScene(
        [
            Primitive("sphere", 1, center=(-0.35, 0.1, -0.1), radius=0.35,
                      albedo=(0.85, 0.25, 0.2)),
            Primitive("box", 2, center=(0.4, -0.1, -0.15),
                      half_extents=(0.3, 0.3, 0.3), albedo=(0.2, 0.5, 0.85)),
            Primitive("box", 3, center=(0.0, 0.0, 0.0),
                      half_extents=(1.2, 1.2, 1.2), albedo=(0.75, 0.72, 0.68)),
        ],
        bounds=[(-1.2, -1.2, -1.2), (1.2, 1.2, 1.2)],
        background_id=3,
    )


def two_box_occlusion_scene() -> AnalyticScene:
    """Two boxes on the x axis, one hiding the other from -x viewpoints."""
    return AnalyticScene(
        [
            Primitive("box", 1, center=(-1.0, 0.0, 0.0), half_extents=(0.4, 0.4, 0.4)),
            Primitive("box", 2, center=(1.0, 0.0, 0.0), half_extents=(0.4, 0.4, 0.4)),
            Primitive("box", 3, center=(0.0, 0.0, 0.0), half_extents=(3.0, 3.0, 3.0)),
        ],
        bounds=[(-3.0, -3.0, -3.0), (3.0, 3.0, 3.0)],
        background_id=3,
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small baked dataset of the two-object scene, shared across tests."""
    out = tmp_path_factory.mktemp("ds_small")
    cams = orbit_cameras(6, (0, 0, 0), radius=0.9, elevation=0.3, width=40, height=40)
    return bake_dataset(two_object_scene(), cams, str(out))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
