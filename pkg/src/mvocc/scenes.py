"""Synthetic surround-view scenes with voxel ground truth.

A scene is a small semantic voxel grid (ground plane plus boxy obstacles)
rendered into a cylindrical panorama of per-height range/class codes.  The
N camera images are overlapping column windows of that panorama, so the
shared columns of adjacent views are pixel-identical by construction; that
exactness is what makes cross-view feature slices legitimate priors for
reconstructing a withheld view.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ParameterError

CLASS_NAMES = ("free", "drivable", "vehicle", "building", "pole", "terrain")
FREE, DRIVABLE, VEHICLE, BUILDING, POLE, TERRAIN = range(6)
N_SEMANTIC = 5

_MAGIC = b"MVSC"
_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and content knobs for scene synthesis.

    The desk preset keeps everything small enough that hundreds of scenes
    render in seconds; the full-scale preset mirrors a deployment-sized
    grid and is retained for configuration only.
    """

    grid_dims: tuple = (16, 16, 4)
    extent: float = 8.0
    height: float = 4.0
    n_views: int = 6
    image_shape: tuple = (3, 16, 32)
    pano_width: int = 144
    vehicles: tuple = (2, 5)
    buildings: tuple = (1, 3)
    poles: tuple = (2, 5)
    ground_gaps: tuple = (3, 6)
    clear_radius: float = 1.5
    drivable_radius: tuple = (4.0, 5.5)
    free_band: tuple = (0.60, 0.95)
    max_retries: int = 80

    def __post_init__(self):
        x, y, z = self.grid_dims
        c, h, w = self.image_shape
        if min(x, y, z) < 2:
            raise ParameterError(f"grid dims must all be at least 2, got {self.grid_dims}")
        if self.pano_width % self.n_views != 0:
            raise ParameterError(
                f"pano width {self.pano_width} must be divisible by {self.n_views} views"
            )
        if w <= self.stride:
            raise ParameterError(
                f"image width {w} must exceed the view stride {self.stride} so views overlap"
            )
        if (w - self.stride) % 8 != 0 or w % 4 != 0 or h % 4 != 0:
            raise ParameterError(
                f"image {h}x{w} and overlap {w - self.stride} must align to 4-pixel patches "
                "on both sides of a shared window"
            )
        if h % z != 0:
            raise ParameterError(f"image height {h} must be divisible by grid z dim {z}")
        if not 0.0 <= self.free_band[0] < self.free_band[1] <= 1.0:
            raise ParameterError(f"free band {self.free_band} is not a valid fraction range")

    @property
    def stride(self) -> int:
        return self.pano_width // self.n_views

    @property
    def overlap_px(self) -> int:
        """Image columns shared by each adjacent view pair."""
        return self.image_shape[2] - self.stride

    def window_start(self, view: int) -> int:
        """First panorama column of a view's window (may be negative pre-wrap)."""
        return view * self.stride - self.image_shape[2] // 2

    @classmethod
    def desk(cls) -> "SceneConfig":
        return cls()

    @classmethod
    def full_scale(cls) -> "SceneConfig":
        """Deployment-sized grid; too slow for tests, kept as a preset."""
        return cls(grid_dims=(200, 200, 16), extent=50.0, height=8.0)


@dataclass
class VoxelGrid:
    """Semantic labels on a regular grid; 0 is free space."""

    dims: tuple
    extent: float
    height: float
    labels: np.ndarray  # (X, Y, Z) uint8

    def free_fraction(self) -> float:
        return float((self.labels == FREE).mean())

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=len(CLASS_NAMES))

    def cell_size(self) -> tuple:
        x, y, z = self.dims
        return (2.0 * self.extent / x, 2.0 * self.extent / y, self.height / z)


@dataclass
class SceneSample:
    """One generated scene: surround images plus voxel ground truth."""

    sample_id: int
    seed: int
    images: np.ndarray  # (N, C, H, W) float64
    grid: VoxelGrid


def _radial_centers(config: SceneConfig):
    x, y, _ = config.grid_dims
    cx = (np.arange(x) + 0.5) * (2.0 * config.extent / x) - config.extent
    cy = (np.arange(y) + 0.5) * (2.0 * config.extent / y) - config.extent
    return np.sqrt(cx[:, None] ** 2 + cy[None, :] ** 2)


def _place_objects(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    x, y, z = config.grid_dims
    labels = np.zeros((x, y, z), dtype=np.uint8)
    rr = _radial_centers(config)
    road_r = float(rng.uniform(config.drivable_radius[0], config.drivable_radius[1]))
    labels[:, :, 0] = np.where(rr <= road_r, DRIVABLE, TERRAIN)

    def place(fx, fy, z0, h, rmin, rmax, cls):
        for _ in range(config.max_retries):
            ix = int(rng.integers(0, x - fx + 1))
            iy = int(rng.integers(0, y - fy + 1))
            r_center = rr[ix : ix + fx, iy : iy + fy].mean()
            if not rmin <= r_center <= rmax:
                continue
            block = labels[ix : ix + fx, iy : iy + fy, z0 : z0 + h]
            if (block != FREE).any():
                continue
            block[:] = cls
            return
        raise GenerationError(
            f"could not place a {fx}x{fy}x{h} {CLASS_NAMES[cls]} after "
            f"{config.max_retries} attempts"
        )

    top = z  # obstacles may reach the grid ceiling
    for _ in range(int(rng.integers(config.vehicles[0], config.vehicles[1] + 1))):
        fx, fy = (int(v) for v in rng.integers(1, 3, size=2))
        place(fx, fy, 1, 1, config.clear_radius + 0.5, road_r, VEHICLE)
    for _ in range(int(rng.integers(config.buildings[0], config.buildings[1] + 1))):
        fx, fy = (int(v) for v in rng.integers(2, 4, size=2))
        h = min(int(rng.integers(2, 4)), top - 1)
        place(fx, fy, 1, h, road_r + 0.5, config.extent - 0.5, BUILDING)
    for _ in range(int(rng.integers(config.poles[0], config.poles[1] + 1))):
        h = min(int(rng.integers(2, 4)), top - 1)
        place(1, 1, 1, h, 2.0, config.extent - 0.8, POLE)

    # Carve unpaved gaps into the ground plane so surface occupancy has to
    # be observed rather than assumed; never undercut a placed obstacle.
    clear = rr > config.clear_radius
    for _ in range(int(rng.integers(config.ground_gaps[0], config.ground_gaps[1] + 1))):
        fx, fy = (int(v) for v in rng.integers(2, 5, size=2))
        for _ in range(config.max_retries):
            ix = int(rng.integers(0, x - fx + 1))
            iy = int(rng.integers(0, y - fy + 1))
            if not clear[ix : ix + fx, iy : iy + fy].all():
                continue
            if (labels[ix : ix + fx, iy : iy + fy, 1:] != FREE).any():
                continue
            labels[ix : ix + fx, iy : iy + fy, 0] = FREE
            break
    return labels


def render_panorama(grid: VoxelGrid, config: SceneConfig) -> np.ndarray:
    """Cylindrical panorama of shape (C, H, pano_width).

    Each grid height level owns a horizontal band of rows (top of the
    image is the top of the grid).  Obstacle bands encode the nearest
    occupied cell along each azimuth at that height as (1/(1+d), class/K)
    codes; the ground band encodes the ground class at a few reference
    radii, one per row, with a flag channel marking it as ground.
    """
    x, y, z = grid.dims
    c, h, wp = config.image_shape[0], config.image_shape[1], config.pano_width
    band = h // z
    cell_x, cell_y, _ = grid.cell_size()
    pano = np.zeros((c, h, wp), dtype=np.float64)

    theta = (np.arange(wp) + 0.5) * (2.0 * np.pi / wp)
    radii = np.arange(0.25, config.extent * 1.45, 0.05)
    px = np.cos(theta)[:, None] * radii[None, :]
    py = np.sin(theta)[:, None] * radii[None, :]
    ix = np.floor((px + config.extent) / cell_x).astype(np.int64)
    iy = np.floor((py + config.extent) / cell_y).astype(np.int64)
    valid = (ix >= 0) & (ix < x) & (iy >= 0) & (iy < y)
    ix_safe = np.clip(ix, 0, x - 1)
    iy_safe = np.clip(iy, 0, y - 1)

    cols = np.arange(wp)
    for zi in range(1, z):
        occ = valid & (grid.labels[ix_safe, iy_safe, zi] != FREE)
        has = occ.any(axis=1)
        first = occ.argmax(axis=1)
        d = radii[first]
        cls = grid.labels[ix_safe[cols, first], iy_safe[cols, first], zi]
        rows = slice(band * (z - 1 - zi), band * (z - zi))
        pano[0, rows, :] = np.where(has, 1.0 / (1.0 + d), 0.0)
        pano[1, rows, :] = np.where(has, cls / float(N_SEMANTIC), 0.0)

    ground_rows = slice(band * (z - 1), band * z)
    for b in range(band):
        d_ref = config.extent * (2 * b + 1) / (2 * band)
        gx = np.floor((d_ref * np.cos(theta) + config.extent) / cell_x).astype(np.int64)
        gy = np.floor((d_ref * np.sin(theta) + config.extent) / cell_y).astype(np.int64)
        gx = np.clip(gx, 0, x - 1)
        gy = np.clip(gy, 0, y - 1)
        cls = grid.labels[gx, gy, 0]
        row = band * (z - 1) + b
        pano[0, row, :] = 1.0 / (1.0 + d_ref)
        pano[1, row, :] = cls / float(N_SEMANTIC)
        pano[2, row, :] = 1.0
    return pano


def view_images(pano: np.ndarray, config: SceneConfig) -> np.ndarray:
    """Slice the panorama into N overlapping per-view windows."""
    c, h, w = config.image_shape
    wp = config.pano_width
    out = np.empty((config.n_views, c, h, w), dtype=np.float64)
    for v in range(config.n_views):
        cols = (config.window_start(v) + np.arange(w)) % wp
        out[v] = pano[:, :, cols]
    return out


def generate_scene(seed: int, config: SceneConfig = None, sample_id: int = 0) -> SceneSample:
    """Deterministically synthesize one scene from a seed."""
    config = config or SceneConfig.desk()
    labels = None
    for attempt in range(8):
        rng = np.random.default_rng((int(seed), attempt))
        try:
            candidate = _place_objects(rng, config)
        except GenerationError:
            continue
        frac = float((candidate == FREE).mean())
        if config.free_band[0] <= frac <= config.free_band[1]:
            labels = candidate
            break
    if labels is None:
        raise GenerationError(
            f"no valid scene layout within the retry budget (seed {seed})"
        )
    grid = VoxelGrid(config.grid_dims, config.extent, config.height, labels)
    images = view_images(render_panorama(grid, config), config)
    return SceneSample(sample_id=int(sample_id), seed=int(seed), images=images, grid=grid)


_VAL_OFFSET = 1_000_000


def dataset(split: str, size: int, base_seed: int, config: SceneConfig = None):
    """A list of scenes; train and val splits use disjoint seed ranges."""
    if split not in ("train", "val"):
        raise ParameterError(f"split must be 'train' or 'val', got {split!r}")
    offset = 0 if split == "train" else _VAL_OFFSET
    if size < 0 or size > _VAL_OFFSET:
        raise ParameterError(f"split size {size} out of range")
    config = config or SceneConfig.desk()
    return [generate_scene(base_seed + offset + i, config, sample_id=i) for i in range(size)]


def save_scene(sample: SceneSample, path) -> None:
    """Binary dump: JSON header, label bytes, little-endian float64 images."""
    header = json.dumps(
        {
            "sample_id": sample.sample_id,
            "seed": sample.seed,
            "dims": list(sample.grid.dims),
            "extent": sample.grid.extent,
            "height": sample.grid.height,
            "images_shape": list(sample.images.shape),
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(sample.grid.labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(sample.images, dtype="<f8").tobytes())


def load_scene(path) -> SceneSample:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ParameterError(f"{path} is not a scene dump")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ParameterError(f"unsupported scene dump version {version}")
        meta = json.loads(fh.read(hlen).decode())
        dims = tuple(meta["dims"])
        labels = np.frombuffer(fh.read(int(np.prod(dims))), dtype=np.uint8).reshape(dims)
        shape = tuple(meta["images_shape"])
        images = np.frombuffer(fh.read(int(np.prod(shape)) * 8), dtype="<f8").reshape(shape)
    grid = VoxelGrid(dims, float(meta["extent"]), float(meta["height"]), labels.copy())
    return SceneSample(
        sample_id=int(meta["sample_id"]),
        seed=int(meta["seed"]),
        images=images.copy(),
        grid=grid,
    )
