import numpy as np
import pytest

from fogsplat import raster
from fogsplat.scene import Camera, GaussianCloud


def central_diff(f, arr, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arr (perturbed in place)."""
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def random_cloud(rng, n, spread=0.4, sh_degree=0, scale=(0.15, 0.5)):
    K = (sh_degree + 1) ** 2
    return GaussianCloud(rng.normal(0, spread, (n, 3)), np.log(rng.uniform(*scale, (n, 3))),
                         rng.normal(size=(n, 4)), rng.normal(0, 1, n), rng.uniform(-0.6, 0.6, (n, K, 3)))


def small_camera(size=8, eye=(0.2, -0.1, -4.0), fov=40.0):
    return Camera.look_at(eye, [0, 0, 0], width=size, height=size, fov_deg=fov)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["compiled", "python"])
def backend(request):
    if request.param == "compiled" and not raster.compiled_available():
        pytest.skip("compiled kernels not built")
    prev = raster.BACKEND
    raster.set_backend(request.param)
    yield request.param
    raster.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
