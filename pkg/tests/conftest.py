import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(0, max_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K


class AnalyticSdf:
    """Minimal field stand-in: f(p) = |p - c| - r, constant grey colour."""

    head = "sdf"

    def __init__(self, radius=0.5, center=(0.0, 0.0, 0.0), offset=None):
        self.radius = radius
        self.center = np.asarray(center, dtype=float)
        self.offset = offset

    def evaluate(self, points, dirs=None, need_color=True):
        p = np.asarray(points, dtype=float)
        f = np.linalg.norm(p - self.center, axis=-1) - self.radius if self.offset is None else np.full(len(p), self.offset)
        return f, np.full((len(p), 3), 0.5)


class ConstantDensity:
    head = "density"

    def __init__(self, sigma):
        self.sigma = sigma

    def evaluate(self, points, dirs=None, need_color=True):
        n = len(points)
        return np.full(n, float(self.sigma)), np.full((n, 3), 0.5)


class FieldAdapter:
    """Expose an analytic ``evaluate`` object through the ``forward`` interface the renderer calls."""

    def __init__(self, inner, bounds):
        from phenofield.field import FieldOutput

        self._out = FieldOutput
        self.inner = inner
        self.head = inner.head
        self.bounds = bounds
        self.dtype = np.dtype(np.float64)

    def forward(self, points, dirs=None, need_color=True, keep=False):
        v, c = self.inner.evaluate(np.asarray(points).reshape(-1, 3), None, need_color)
        return self._out(v, c, None)
