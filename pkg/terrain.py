"""
Procedural challenge terrains

Generates the curriculum terrain tiles as heightfields whose hazard parameters
interpolate with a continuous difficulty, samples heights bilinearly and builds the
robot-centric 17 x 11 height scan used by the critic.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from models import TerrainKind, TerrainSpec

logger = logging.getLogger(__name__)

MAX_ABS_HEIGHT = 5.0
DEFAULT_CELL_SIZE = 0.05
DEFAULT_TILE_SIZE = 10.0
DEFAULT_FRICTION = 1.0

SCAN_SHAPE = (17, 11)
SCAN_SPACING = 0.1
SCAN_CLIP = 1.0

# Hazard parameter ranges (meters, slope in degrees)
SLOPE_ANGLE = (0.0, 45.0)
SLOPE_ROUGHNESS = (0.0, 0.02)
OBSTACLE_HEIGHT = (0.05, 0.3)
STAIR_RISE = (0.05, 0.25)
STAIR_DEPTH = (0.2, 0.5)
GAP_WIDTH = (0.1, 0.5)
AIR_BEAM_WIDTH = (0.1, 0.3)
AIR_BEAM_HEIGHT = (0.1, 0.5)
BEAM_WIDTH = (0.1, 0.3)
BEAM_SPACING = (0.1, 0.4)
BEAM_HEIGHT = (0.1, 0.5)
SPARSE_STONE_SIZE = (0.15, 0.25)
SPARSE_STONE_GAP = (0.3, 0.5)
DENSE_STONE_SIZE = (0.15, 0.40)
DENSE_STONE_GAP = (0.10, 0.30)
UNEVEN_VARIATION = (0.0, 0.25)

PIT_DEPTH = 1.0
AIR_BEAM_DROP = 0.5


@dataclass(frozen=True)
class HeightField:
    """Row-major elevation grid; heights[row, col] sits at (origin_x + col*cell, origin_y + row*cell)"""

    heights: np.ndarray
    cell_size: float
    origin: Tuple[float, float]
    friction: float = DEFAULT_FRICTION
    kind: TerrainKind = TerrainKind.FLAT
    difficulty: float = 0.0
    features: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise ValueError("heights must be a 2D grid with at least 2 x 2 nodes")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("heights must be finite")
        if np.max(np.abs(self.heights)) > MAX_ABS_HEIGHT:
            raise ValueError(f"heights must stay within +/-{MAX_ABS_HEIGHT} m")

    @property
    def depth_cells(self) -> int:
        return self.heights.shape[0]

    @property
    def width_cells(self) -> int:
        return self.heights.shape[1]


@dataclass(frozen=True)
class HeightScan:
    """Torso-relative terrain heights on the 17 x 11 scan grid, flattened heading-major"""

    values: np.ndarray
    grid_shape: Tuple[int, int] = SCAN_SHAPE
    spacing: float = SCAN_SPACING


def flat_field(
    height: float = 0.0,
    size: float = DEFAULT_TILE_SIZE,
    cell_size: float = DEFAULT_CELL_SIZE,
    friction: float = DEFAULT_FRICTION,
) -> HeightField:
    n = int(round(size / cell_size)) + 1
    return HeightField(
        heights=np.full((n, n), float(height)),
        cell_size=cell_size,
        origin=(-size / 2.0, -size / 2.0),
        friction=friction,
    )


def _draw(rng: np.random.Generator, bounds: Tuple[float, float], difficulty: float) -> float:
    """Uniform draw from [low, low + difficulty * (high - low)]"""
    low, high = bounds
    return float(rng.uniform(low, low + difficulty * (high - low)))


def _cells(value: float, bounds: Tuple[float, float], cell_size: float) -> int:
    """Quantise a horizontal length to whole cells without leaving its range"""
    low_k = math.ceil(bounds[0] / cell_size - 1e-9)
    high_k = math.floor(bounds[1] / cell_size + 1e-9)
    return int(min(high_k, max(low_k, round(value / cell_size))))


class _Canvas:
    """Mutable grid plus the feature ledger while a generator runs"""

    def __init__(self, size: float, cell_size: float):
        self.n = int(round(size / cell_size)) + 1
        self.cell_size = cell_size
        self.size = size
        self.heights = np.zeros((self.n, self.n))
        coords = -size / 2.0 + cell_size * np.arange(self.n)
        self.xs = coords
        self.ys = coords
        self.features: Dict[str, List[float]] = {}

    def record(self, name: str, value: float):
        self.features.setdefault(name, []).append(float(value))

    def index(self, coordinate: float) -> int:
        return int(round((coordinate + self.size / 2.0) / self.cell_size))


def _slope(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    angle = _draw(rng, SLOPE_ANGLE, difficulty)
    roughness = SLOPE_ROUGHNESS[1] * difficulty
    canvas.record("slope_angle", angle)
    incline = math.tan(math.radians(angle)) * canvas.xs[np.newaxis, :]
    noise = rng.uniform(-roughness, roughness, size=canvas.heights.shape) if roughness > 0 else 0.0
    canvas.heights[:] = incline + noise


def _discrete_obstacles(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    count = 80
    for _ in range(count):
        height = _draw(rng, OBSTACLE_HEIGHT, difficulty)
        width = int(rng.integers(6, 21))
        depth = int(rng.integers(6, 21))
        col = int(rng.integers(0, canvas.n - width))
        row = int(rng.integers(0, canvas.n - depth))
        canvas.heights[row : row + depth, col : col + width] = height
        canvas.record("obstacle_height", height)


def _stairs(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    # Flights climb along +x and turn back down before the tile gets too tall
    ceiling = 2.0
    level = 0.0
    direction = 1.0
    col = 0
    profile = np.zeros(canvas.n)
    while col < canvas.n:
        rise = _draw(rng, STAIR_RISE, difficulty)
        depth_k = _cells(_draw(rng, STAIR_DEPTH, difficulty), STAIR_DEPTH, canvas.cell_size)
        if level + direction * rise > ceiling or level + direction * rise < 0.0:
            direction = -direction
        if col > 0:
            level += direction * rise
            canvas.record("stair_rise", rise)
        end = min(canvas.n, col + depth_k)
        profile[col:end] = level
        if end - col == depth_k:
            canvas.record("stair_depth", depth_k * canvas.cell_size)
        col = end
    profile -= profile[canvas.index(0.0)]
    canvas.heights[:] = profile[np.newaxis, :]


def _single_gaps(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    # platforms of 1-2 m separated by pits across x; the spawn point lands on either
    col = int(rng.integers(0, 20))
    while col < canvas.n:
        platform_k = int(round(rng.uniform(1.0, 2.0) / canvas.cell_size))
        gap_k = _cells(_draw(rng, GAP_WIDTH, difficulty), GAP_WIDTH, canvas.cell_size)
        start = col + platform_k
        end = start + gap_k
        if end >= canvas.n:
            break
        canvas.heights[:, start:end] = -PIT_DEPTH
        canvas.record("gap_width", gap_k * canvas.cell_size)
        col = end


def _air_beams(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    width_k = _cells(_draw(rng, AIR_BEAM_WIDTH, difficulty), AIR_BEAM_WIDTH, canvas.cell_size)
    height = _draw(rng, AIR_BEAM_HEIGHT, difficulty)
    trench = np.abs(canvas.xs) < 1.0
    canvas.heights[:, trench] = -AIR_BEAM_DROP
    start = canvas.index(float(rng.uniform(-0.1, 0.1))) - width_k // 2
    canvas.heights[:, start : start + width_k] = height
    canvas.record("beam_width", width_k * canvas.cell_size)
    canvas.record("beam_height", height)


def _beams(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    height = BEAM_HEIGHT[0] + difficulty * (BEAM_HEIGHT[1] - BEAM_HEIGHT[0])
    canvas.record("beam_height", height)
    col = canvas.index(-2.0)
    stop = canvas.index(2.0)
    while True:
        width_k = _cells(float(rng.uniform(*BEAM_WIDTH)), BEAM_WIDTH, canvas.cell_size)
        if col + width_k > stop and len(canvas.features.get("beam_width", [])) >= 3:
            break
        canvas.heights[:, col : col + width_k] = height
        canvas.record("beam_width", width_k * canvas.cell_size)
        spacing_k = _cells(_draw(rng, BEAM_SPACING, difficulty), BEAM_SPACING, canvas.cell_size)
        col += width_k
        if col + spacing_k >= stop:
            break
        canvas.record("beam_spacing", spacing_k * canvas.cell_size)
        col += spacing_k


def _intervals(
    rng: np.random.Generator,
    n: int,
    size_bounds: Tuple[float, float],
    gap_bounds: Tuple[float, float],
    difficulty: float,
    cell_size: float,
) -> Tuple[List[Tuple[int, int]], List[int], List[int]]:
    """Alternating stone/gap spans along one axis, in cells"""
    spans, sizes, gaps = [], [], []
    cursor = int(rng.integers(0, 4))
    while True:
        size_k = _cells(_draw(rng, size_bounds, difficulty), size_bounds, cell_size)
        if cursor + size_k > n:
            break
        spans.append((cursor, cursor + size_k))
        sizes.append(size_k)
        gap_k = _cells(_draw(rng, gap_bounds, difficulty), gap_bounds, cell_size)
        if cursor + size_k + gap_k >= n:
            break
        gaps.append(gap_k)
        cursor += size_k + gap_k
    return spans, sizes, gaps


def _stepping_stones(
    canvas: _Canvas,
    rng: np.random.Generator,
    difficulty: float,
    size_bounds: Tuple[float, float],
    gap_bounds: Tuple[float, float],
    pit_depth: float,
    jitter: float,
):
    x_spans, x_sizes, x_gaps = _intervals(rng, canvas.n, size_bounds, gap_bounds, difficulty, canvas.cell_size)
    y_spans, y_sizes, y_gaps = _intervals(rng, canvas.n, size_bounds, gap_bounds, difficulty, canvas.cell_size)
    canvas.heights[:] = -pit_depth
    for y0, y1 in y_spans:
        for x0, x1 in x_spans:
            canvas.heights[y0:y1, x0:x1] = float(rng.uniform(-jitter, jitter)) if jitter > 0 else 0.0
    for k in x_sizes + y_sizes:
        canvas.record("stone_size", k * canvas.cell_size)
    for k in x_gaps + y_gaps:
        canvas.record("stone_gap", k * canvas.cell_size)


def _sparse_stones(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    _stepping_stones(canvas, rng, difficulty, SPARSE_STONE_SIZE, SPARSE_STONE_GAP, PIT_DEPTH, 0.05 * difficulty)


def _dense_stones(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    _stepping_stones(canvas, rng, difficulty, DENSE_STONE_SIZE, DENSE_STONE_GAP, 0.3, 0.1 * difficulty)


def _uneven(canvas: _Canvas, rng: np.random.Generator, difficulty: float):
    variation = UNEVEN_VARIATION[1] * difficulty
    canvas.record("height_variation", variation)
    if variation == 0.0:
        return
    coarse_n = int(round(canvas.size / 0.5)) + 1
    coarse = rng.uniform(-variation, variation, size=(coarse_n, coarse_n))
    coarse_xs = np.linspace(canvas.xs[0], canvas.xs[-1], coarse_n)
    rows = np.stack([np.interp(canvas.xs, coarse_xs, coarse[j]) for j in range(coarse_n)])
    canvas.heights[:] = np.stack([np.interp(canvas.ys, coarse_xs, rows[:, i]) for i in range(canvas.n)], axis=1)


_GENERATORS: Dict[TerrainKind, Callable[[_Canvas, np.random.Generator, float], None]] = {
    TerrainKind.FLAT: lambda canvas, rng, difficulty: None,
    TerrainKind.SLOPE: _slope,
    TerrainKind.DISCRETE_OBSTACLES: _discrete_obstacles,
    TerrainKind.STAIRS: _stairs,
    TerrainKind.SINGLE_GAPS: _single_gaps,
    TerrainKind.AIR_BEAMS: _air_beams,
    TerrainKind.BEAMS: _beams,
    TerrainKind.SPARSE_STONES: _sparse_stones,
    TerrainKind.DENSE_STONES: _dense_stones,
    TerrainKind.UNEVEN: _uneven,
}


def generate(
    spec: TerrainSpec,
    cell_size: float = DEFAULT_CELL_SIZE,
    tile_size: float = DEFAULT_TILE_SIZE,
    friction: float = DEFAULT_FRICTION,
) -> HeightField:
    """Build the heightfield for a terrain spec; a pure function of (kind, difficulty, seed)"""
    canvas = _Canvas(tile_size, cell_size)
    rng = np.random.default_rng(spec.seed)
    _GENERATORS[spec.kind](canvas, rng, spec.difficulty)
    heights = np.clip(canvas.heights, -MAX_ABS_HEIGHT, MAX_ABS_HEIGHT)
    return HeightField(
        heights=heights,
        cell_size=cell_size,
        origin=(-tile_size / 2.0, -tile_size / 2.0),
        friction=friction,
        kind=spec.kind,
        difficulty=spec.difficulty,
        features=canvas.features,
    )


def _locate(field: HeightField, x, y):
    fx = (np.asarray(x, dtype=float) - field.origin[0]) / field.cell_size
    fy = (np.asarray(y, dtype=float) - field.origin[1]) / field.cell_size
    inside_x = (fx >= 0.0) & (fx <= field.width_cells - 1)
    inside_y = (fy >= 0.0) & (fy <= field.depth_cells - 1)
    fx = np.clip(fx, 0.0, field.width_cells - 1)
    fy = np.clip(fy, 0.0, field.depth_cells - 1)
    i0 = np.minimum(np.floor(fx).astype(int), field.width_cells - 2)
    j0 = np.minimum(np.floor(fy).astype(int), field.depth_cells - 2)
    return fx - i0, fy - j0, i0, j0, inside_x, inside_y


def height_and_gradient(field: HeightField, x, y):
    """Bilinear height plus its (d/dx, d/dy); the gradient vanishes where queries are clamped"""
    t, u, i0, j0, inside_x, inside_y = _locate(field, x, y)
    h = field.heights
    h00 = h[j0, i0]
    h01 = h[j0, i0 + 1]
    h10 = h[j0 + 1, i0]
    h11 = h[j0 + 1, i0 + 1]
    height = (1 - t) * (1 - u) * h00 + t * (1 - u) * h01 + (1 - t) * u * h10 + t * u * h11
    dx = ((1 - u) * (h01 - h00) + u * (h11 - h10)) / field.cell_size
    dy = ((1 - t) * (h10 - h00) + t * (h11 - h01)) / field.cell_size
    return height, np.where(inside_x, dx, 0.0), np.where(inside_y, dy, 0.0)


def sample_height(field: HeightField, x, y):
    """Bilinear terrain height at (x, y); queries outside the tile clamp to the border"""
    height, _, _ = height_and_gradient(field, x, y)
    return float(height) if np.ndim(height) == 0 else height


# -- contact surface ---------------------------------------------------------------
# Collision runs against the triangulated grid; each cell splits along its (0,0)-(1,1) diagonal.

def mesh_height(field: HeightField, x, y):
    """Height of the triangulated surface at (x, y); queries outside the tile clamp"""
    t, u, i0, j0, _, _ = _locate(field, x, y)
    h = field.heights
    h00 = h[j0, i0]
    h01 = h[j0, i0 + 1]
    h10 = h[j0 + 1, i0]
    h11 = h[j0 + 1, i0 + 1]
    lower = h00 + t * (h01 - h00) + u * (h11 - h01)
    upper = h00 + u * (h10 - h00) + t * (h11 - h10)
    return np.where(t >= u, lower, upper)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    safe = np.where(den != 0.0, den, 1.0)
    return np.where(den != 0.0, num / safe, 0.0)


def _closest_on_triangles(p, a, b, c):
    """Closest points to p on triangles (a, b, c) plus the unit face normals, all (..., 3)"""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    normal = np.cross(ab, ac)
    normal = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    on_face = p - _dot(ap, normal)[..., None] * normal
    on_ab = a + _ratio(d1, d1 - d3)[..., None] * ab
    on_ac = a + _ratio(d2, d2 - d6)[..., None] * ac
    on_bc = b + _ratio(d4 - d3, (d4 - d3) + (d5 - d6))[..., None] * (c - b)

    regions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    candidates = [a, b, on_ab, c, on_ac, on_bc]
    closest = np.select([r[..., None] for r in regions], candidates, default=on_face)
    return closest, normal


def surface_contact(field: HeightField, points, reach: float):
    """Closest surface point, signed distance (negative below) and outward normal per query point.

    Only cells within reach of each point are searched, so a distance beyond reach is an
    upper bound.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    cell = field.cell_size
    span = np.arange(-int(math.ceil(reach / cell)), int(math.ceil(reach / cell)) + 1)
    k = span.size
    _, _, i0, j0, _, _ = _locate(field, points[:, 0], points[:, 1])
    ci = np.clip(i0[:, None] + span, 0, field.width_cells - 2)
    cj = np.clip(j0[:, None] + span, 0, field.depth_cells - 2)
    ci = np.broadcast_to(ci[:, None, :], (n, k, k))
    cj = np.broadcast_to(cj[:, :, None], (n, k, k))

    h = field.heights
    x0 = field.origin[0] + ci * cell
    y0 = field.origin[1] + cj * cell
    v00 = np.stack([x0, y0, h[cj, ci]], axis=-1)
    v01 = np.stack([x0 + cell, y0, h[cj, ci + 1]], axis=-1)
    v10 = np.stack([x0, y0 + cell, h[cj + 1, ci]], axis=-1)
    v11 = np.stack([x0 + cell, y0 + cell, h[cj + 1, ci + 1]], axis=-1)
    a = np.stack([v00, v00], axis=-2).reshape(n, -1, 3)
    b = np.stack([v01, v11], axis=-2).reshape(n, -1, 3)
    c = np.stack([v11, v10], axis=-2).reshape(n, -1, 3)

    closest, faces = _closest_on_triangles(points[:, None, :], a, b, c)
    offsets = points[:, None, :] - closest
    dist2 = _dot(offsets, offsets)
    best = np.argmin(dist2, axis=1)
    rows = np.arange(n)
    nearest = closest[rows, best]
    distance = np.sqrt(dist2[rows, best])
    below = points[:, 2] < mesh_height(field, points[:, 0], points[:, 1])

    direction = offsets[rows, best] / np.maximum(distance, 1e-12)[:, None]
    normals = np.where(below[:, None], -direction, direction)
    normals = np.where((distance > 1e-12)[:, None], normals, faces[rows, best])
    return nearest, np.where(below, -distance, distance), normals


def scan_offsets() -> np.ndarray:
    """Body-frame (forward, lateral) offsets of the 187 scan points, heading-major"""
    rows, cols = SCAN_SHAPE
    forward = SCAN_SPACING * (np.arange(rows) - (rows - 1) / 2.0)
    lateral = SCAN_SPACING * (np.arange(cols) - (cols - 1) / 2.0)
    fwd, lat = np.meshgrid(forward, lateral, indexing="ij")
    return np.stack([fwd.ravel(), lat.ravel()], axis=1)


_SCAN_OFFSETS = scan_offsets()


def scan(field: HeightField, torso_position, torso_yaw: float) -> HeightScan:
    """Sample the yaw-aligned scan grid and return heights relative to the torso"""
    c, s = math.cos(torso_yaw), math.sin(torso_yaw)
    px = torso_position[0] + c * _SCAN_OFFSETS[:, 0] - s * _SCAN_OFFSETS[:, 1]
    py = torso_position[1] + s * _SCAN_OFFSETS[:, 0] + c * _SCAN_OFFSETS[:, 1]
    heights, _, _ = height_and_gradient(field, px, py)
    values = np.clip(heights - torso_position[2], -SCAN_CLIP, SCAN_CLIP)
    return HeightScan(values=values)


def to_csv(field: HeightField, path: str):
    """Write the grid row-major with six decimals"""
    np.savetxt(path, field.heights, fmt="%.6f", delimiter=",")
    logger.info("Wrote %dx%d height grid to %s", field.depth_cells, field.width_cells, path)


def to_pgm(field: HeightField, path: str):
    """Write an 8-bit binary PGM with min height at 0 and max at 255"""
    lo, hi = float(field.heights.min()), float(field.heights.max())
    span = hi - lo
    if span > 0:
        pixels = np.rint((field.heights - lo) / span * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(field.heights.shape, dtype=np.uint8)
    header = f"P5\n{field.width_cells} {field.depth_cells}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(pixels.tobytes())
    logger.info("Wrote grayscale preview to %s", path)
