"""Core sample types: RGB image, depth map with validity mask, aligned triples.

Conventions: images are (H, W, 3) float32 in [0, 1]; depths are (H, W) float32
meters with 0 marking missing measurements (valid <=> value > 0). Depth values
live on the 1/256 m grid so the 16-bit PNG round-trip is exact.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ContractError

DEPTH_QUANTUM = 1.0 / 256.0  # storage resolution of the uint16 depth rasters
DOMAIN_TAGS = ("source", "target")


def quantize_image(data):
    """Snap intensities to the 8-bit grid (k/255) after clipping to [0, 1]."""
    return (np.rint(np.clip(data, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def quantize_depth(data, d_min=None, d_max=None):
    """Snap depths to the 1/256 m grid, optionally clamped inside [d_min, d_max].

    The clamp bounds are themselves snapped inward so the result stays both on
    the grid and inside the requested range.
    """
    steps = np.rint(np.asarray(data, dtype=np.float64) / DEPTH_QUANTUM)
    lo = 1.0 if d_min is None else np.ceil(d_min / DEPTH_QUANTUM)
    hi = 65535.0 if d_max is None else np.floor(d_max / DEPTH_QUANTUM)
    steps = np.clip(steps, lo, hi)
    return (steps * DEPTH_QUANTUM).astype(np.float32)


@dataclass
class Image:
    """RGB raster, (H, W, 3) float32 with every value finite and in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ContractError(f"image must be (H, W, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class DepthMap:
    """Depth raster in meters plus validity mask; invalid entries are exactly 0."""

    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.data.ndim != 2:
            raise ContractError(f"depth must be (H, W), got {self.data.shape}")
        if self.valid_mask.shape != self.data.shape:
            raise ContractError("valid_mask shape differs from depth shape")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("depth contains non-finite values")
        positive = self.data > 0.0
        if not np.array_equal(positive, self.valid_mask):
            raise ContractError("depth validity broken: value > 0 must hold iff valid_mask")

    @classmethod
    def from_array(cls, data):
        data = np.asarray(data, dtype=np.float32)
        return cls(data=data, valid_mask=data > 0.0)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def n_valid(self):
        return int(self.valid_mask.sum())


@dataclass
class Sample:
    """One aligned (image, sparse depth, dense ground truth) triple."""

    image: Image
    sparse: DepthMap
    gt: DepthMap
    domain_tag: str = "source"
    seed: int = 0

    def __post_init__(self):
        shape = self.image.data.shape[:2]
        if self.sparse.data.shape != shape or self.gt.data.shape != shape:
            raise ContractError("image, sparse, and gt must share H x W")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ContractError(f"domain_tag must be one of {DOMAIN_TAGS}")

    @property
    def height(self):
        return self.image.height

    @property
    def width(self):
        return self.image.width


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene parameters: raster size, object counts, depth range."""

    height: int = 64
    width: int = 64
    depth_min: float = 1.0
    depth_max: float = 10.0
    min_objects: int = 4
    max_objects: int = 9
    density: float = 0.05
    strategy: str = "uniform"

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigurationError("scene height and width must both be >= 16")
        if self.depth_min >= self.depth_max:
            raise ConfigurationError("scene depth_min must be < depth_max")
        if self.depth_min <= 0:
            raise ConfigurationError("scene depth_min must be positive")
        if not 0 < self.min_objects <= self.max_objects:
            raise ConfigurationError("object count range must satisfy 0 < min <= max")
        if not 0.0 < self.density <= 1.0:
            raise ConfigurationError("scene density must lie in (0, 1]")
        if self.strategy not in ("uniform", "gradient_corners"):
            raise ConfigurationError(f"unknown sparse sampling strategy {self.strategy!r}")


@dataclass(frozen=True)
class ShiftConfig:
    """Photometric (and mild depth) corruption applied to move a sample off-domain.

    The image transform is clamp((color_matrix @ I)^gamma + brightness_offset + eps)
    with eps ~ N(0, noise_std^2); sparse depth gets N(0, depth_noise_std^2) noise on
    valid pixels and optional subsampling to `density`; ground truth is untouched.
    """

    gamma: float = 1.0
    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    brightness_offset: float = 0.0
    noise_std: float = 0.0
    depth_noise_std: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError("shift gamma must be positive")
        mat = np.asarray(self.color_matrix, dtype=np.float64)
        if mat.shape != (3, 3):
            raise ConfigurationError("shift color_matrix must be 3x3")
        object.__setattr__(self, "color_matrix", tuple(tuple(float(v) for v in row) for row in mat))
        if self.noise_std < 0 or self.depth_noise_std < 0:
            raise ConfigurationError("shift noise levels must be non-negative")
        if not 0.0 < self.density <= 1.0:
            raise ConfigurationError("shift density must lie in (0, 1]")

    def matrix(self):
        return np.asarray(self.color_matrix, dtype=np.float32)
