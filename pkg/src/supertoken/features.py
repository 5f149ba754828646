"""Per-pixel feature maps: frozen seeded linear projections and the
lightweight semantic-feature providers that stand in for a deep encoder."""

from dataclasses import dataclass

import numpy as np

from .hsi_io import HsiCube
from .rng import Xoshiro256

PROVIDERS = ("linear", "local-avg")


@dataclass
class FeatureMap:
    height: int
    width: int
    rows: np.ndarray  # (N, C), row-major pixel order

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.height * self.width:
            raise ValueError(
                f"rows shape {self.rows.shape} inconsistent with {self.height}x{self.width} pixels"
            )
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature map contains non-finite values")

    @property
    def dim(self):
        return self.rows.shape[1]

    @property
    def num_pixels(self):
        return self.rows.shape[0]

    def as_cube(self):
        return HsiCube(self.rows.reshape(self.height, self.width, self.dim))

    @classmethod
    def from_cube(cls, cube):
        data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
        h, w, c = data.shape
        return cls(h, w, data.reshape(h * w, c))

    def __add__(self, other):
        if (self.height, self.width, self.dim) != (other.height, other.width, other.dim):
            raise ValueError("cannot add feature maps of different shapes")
        return FeatureMap(self.height, self.width, self.rows + other.rows)


@dataclass
class LinearMap:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    seed: int = 0

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


def xavier_uniform(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(int(np.prod(shape)), -a, a).reshape(shape)


def init_linear_map(in_dim, out_dim, seed):
    """Weights ~ U(-a, a), ``a = sqrt(6 / (in + out))``, drawn row-major; zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError("dimensions must be >= 1")
    w = xavier_uniform(Xoshiro256(seed), in_dim, out_dim, (out_dim, in_dim))
    return LinearMap(w, np.zeros(out_dim), seed)


def identity_map(dim):
    return LinearMap(np.eye(dim), np.zeros(dim))


def _to_feature_map(x):
    if isinstance(x, FeatureMap):
        return x
    return FeatureMap.from_cube(x)


def project_features(x, linear_map):
    """Apply ``W @ row + b`` to every pixel row of a cube or feature map."""
    fm = _to_feature_map(x)
    if fm.dim != linear_map.in_dim:
        raise ValueError(f"map expects {linear_map.in_dim} input channels, got {fm.dim}")
    return FeatureMap(fm.height, fm.width, fm.rows @ linear_map.weights.T + linear_map.bias)


def box_average(data):
    """3x3 per-band mean over the in-bounds part of each pixel's window."""
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape[:2]
    padded = np.pad(data, ((1, 1), (1, 1), (0, 0)))
    ones = np.pad(np.ones((h, w)), 1)
    total = np.zeros_like(data)
    count = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            total += padded[dy : dy + h, dx : dx + w]
            count += ones[dy : dy + h, dx : dx + w]
    return total / count[..., None]


@dataclass
class ProviderConfig:
    name: str = "linear"
    dim: int = 32
    seed: int = 0


def semantic_features(cube, cfg, linear_map=None):
    """Per-pixel semantic stand-in features with spatial resolution preserved.

    ``linear`` projects the raw spectrum; ``local-avg`` projects the 3x3
    box-averaged spectrum.  ``linear_map`` overrides the seeded map.
    """
    if cfg.name not in PROVIDERS:
        raise ValueError(f"unknown feature provider {cfg.name!r}; choose from {', '.join(PROVIDERS)}")
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    if linear_map is None:
        linear_map = init_linear_map(data.shape[2], cfg.dim, cfg.seed)
    if cfg.name == "local-avg":
        data = box_average(data)
    return project_features(np.asarray(data, dtype=np.float64), linear_map)
