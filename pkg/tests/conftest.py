import numpy as np
import pytest

from helpers import make_camera, random_field

from gsfield.raster import RenderOptions, render


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure runtime, not JIT."""
    field = random_field(4, k=4, seed=123)
    cam = make_camera(16)
    render(field, cam, RenderOptions(compute_cache=True))
    render(field, cam, RenderOptions(dtype=np.float64, compute_cache=True))
    yield
