"""Voxel world model: scenarios, rasterization, sensing, oracle completion.

The grid keeps three occupancy layers over the same lattice:

* ``ground_truth`` — the rasterized scenario, inflated by the robot radius so
  the planner can treat the robot as a point.
* ``sensed`` — occupied voxels whose centers have been seen by the simulated
  depth sensor (never hallucinates: always a subset of ground truth).
* ``completed`` — ``sensed`` plus occluded occupied voxels revealed by the
  completion oracle at a configurable accuracy.

Voxels that are neither sensed nor completed are unknown and are treated as
free by the planner; that optimism is exactly what the completion oracle's
accuracy knob exposes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import IoFailure, PlacementExhausted, ResolutionTooCoarse

LAYERS = ("ground_truth", "sensed", "completed")


# ---------------------------------------------------------------------------
# Obstacles and scenarios


@dataclass
class Wall:
    """Axis-aligned box standing on the floor.

    ``axis`` is the horizontal direction the wall runs along ("x" or "y");
    ``width`` is its extent along that axis, ``thickness`` across it.
    """

    position: np.ndarray  # footprint center, z = base height
    axis: str
    width: float
    height: float
    thickness: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.empty(3)
        if self.axis == "x":
            half[:2] = (self.width / 2.0, self.thickness / 2.0)
        else:
            half[:2] = (self.thickness / 2.0, self.width / 2.0)
        half[2] = 0.0
        lo = self.position - half
        hi = self.position + half
        hi = hi.copy()
        hi[2] = self.position[2] + self.height
        return lo, hi

    def min_dimension(self) -> float:
        return min(self.width, self.height, self.thickness)

    def distance_to_point(self, p) -> float:
        lo, hi = self.bounds()
        d = np.maximum(np.maximum(lo - p, 0.0), np.asarray(p) - hi)
        return float(np.linalg.norm(d))

    def to_dict(self) -> dict:
        return {
            "kind": "wall",
            "position": self.position.tolist(),
            "axis": self.axis,
            "width": self.width,
            "height": self.height,
            "thickness": self.thickness,
        }


@dataclass
class Ring:
    """Torus approximation: hole along a horizontal axis, standing upright."""

    center: np.ndarray
    axis: np.ndarray  # unit horizontal vector through the hole
    inner_radius: float
    outer_radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(self.axis)
        if n > 0:
            self.axis = self.axis / n

    @property
    def major_radius(self) -> float:
        return 0.5 * (self.inner_radius + self.outer_radius)

    @property
    def tube_radius(self) -> float:
        return 0.5 * (self.outer_radius - self.inner_radius)

    def min_dimension(self) -> float:
        return 2.0 * self.tube_radius

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.outer_radius
        return self.center - r, self.center + r

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(points) - self.center
        h = d @ self.axis
        radial = d - np.outer(h, self.axis)
        rho = np.linalg.norm(radial, axis=1)
        return (rho - self.major_radius) ** 2 + h**2 <= self.tube_radius**2

    def distance_to_point(self, p) -> float:
        d = np.asarray(p, dtype=float) - self.center
        h = float(d @ self.axis)
        rho = float(np.linalg.norm(d - h * self.axis))
        return float(np.hypot(rho - self.major_radius, h) - self.tube_radius)

    def to_dict(self) -> dict:
        return {
            "kind": "ring",
            "center": self.center.tolist(),
            "axis": self.axis.tolist(),
            "inner_radius": self.inner_radius,
            "outer_radius": self.outer_radius,
        }


@dataclass
class ScenarioSpec:
    """Parameters from which a concrete scenario is drawn."""

    extent: tuple[float, float, float] = (20.0, 20.0, 5.0)
    wall_count: int = 80
    ring_count: int = 20
    start: tuple[float, float, float] | None = None
    goal: tuple[float, float, float] | None = None
    name: str = "square-room"


SQUARE_ROOM = ScenarioSpec()
CORRIDOR = ScenarioSpec(extent=(3.0, 30.0, 5.0), wall_count=60, ring_count=10, name="corridor")

ARENA_PRESETS = {"square-room": SQUARE_ROOM, "corridor": CORRIDOR}


@dataclass
class Scenario:
    extent: np.ndarray
    wall_count: int
    ring_count: int
    rng_seed: int
    start: np.ndarray
    goal: np.ndarray
    walls: list[Wall] = field(default_factory=list)
    rings: list[Ring] = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=float)
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)

    @property
    def obstacles(self):
        return list(self.walls) + list(self.rings)


def _default_endpoints(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    ex, ey, _ = spec.extent
    if spec.start is not None and spec.goal is not None:
        return np.asarray(spec.start, float), np.asarray(spec.goal, float)
    if ey >= ex * 2:  # corridor-like: run the long way
        start = np.array([ex / 2.0, 1.0, 0.0])
        goal = np.array([ex / 2.0, ey - 1.0, 0.0])
    else:
        start = np.array([1.0, 1.0, 0.0])
        goal = np.array([ex - 1.0, ey - 1.0, 0.0])
    return start, goal


def _sample_wall(rng, extent, height_cap) -> Wall:
    axis = "x" if rng.random() < 0.5 else "y"
    span = extent[0] if axis == "x" else extent[1]
    width = float(rng.uniform(1.0, min(2.5, max(1.1, span))))
    # Mix of low walls (worth flying over) and tall ones (worth driving around).
    if rng.random() < 0.5:
        height = float(rng.uniform(0.8, 1.8))
    else:
        height = float(rng.uniform(2.2, min(3.2, height_cap)))
    thickness = float(rng.uniform(0.1, 0.2))
    cx = float(rng.uniform(0.5, extent[0] - 0.5))
    cy = float(rng.uniform(0.5, extent[1] - 0.5))
    return Wall(np.array([cx, cy, 0.0]), axis, width, height, thickness)


def _sample_ring(rng, extent) -> Ring:
    inner = float(rng.uniform(0.8, 1.2))
    tube = float(rng.uniform(0.1, 0.25))
    outer = inner + 2.0 * tube
    yaw = float(rng.uniform(0, 2 * np.pi))
    axis = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    cx = float(rng.uniform(outer, max(outer + 0.1, extent[0] - outer)))
    cy = float(rng.uniform(outer, max(outer + 0.1, extent[1] - outer)))
    cz = float(rng.uniform(outer, min(max(outer + 0.1, extent[2] - outer), 2.8)))
    return Ring(np.array([cx, cy, cz]), axis, inner, outer)


def generate_scenario(
    spec: ScenarioSpec,
    seed: int,
    *,
    inflation_radius: float = 0.3,
    check_resolution: float = 0.1,
    max_occupancy: float = 0.6,
    retries_per_obstacle: int = 80,
) -> Scenario:
    """Draw a deterministic obstacle layout from the spec and seed.

    Obstacles keep a clearance bubble around start and goal so both stay free
    after inflation; each placement gets a bounded retry budget.
    """
    extent = np.asarray(spec.extent, dtype=float)
    if np.any(extent <= 0):
        raise ValueError("extent must be positive")
    if spec.wall_count < 0 or spec.ring_count < 0:
        raise ValueError("obstacle counts must be >= 0")

    rng = np.random.default_rng(seed)
    start, goal = _default_endpoints(spec)
    clearance = inflation_radius + 0.5
    height_cap = max(2.6, extent[2] - 1.0)

    walls: list[Wall] = []
    rings: list[Ring] = []
    for kind, count in (("wall", spec.wall_count), ("ring", spec.ring_count)):
        for _ in range(count):
            for attempt in range(retries_per_obstacle + 1):
                if attempt == retries_per_obstacle:
                    raise PlacementExhausted(
                        f"could not place a {kind} clear of start/goal after {retries_per_obstacle} tries"
                    )
                obs = _sample_wall(rng, extent, height_cap) if kind == "wall" else _sample_ring(rng, extent)
                if obs.distance_to_point(start) > clearance and obs.distance_to_point(goal) > clearance:
                    (walls if kind == "wall" else rings).append(obs)
                    break

    scenario = Scenario(extent, spec.wall_count, spec.ring_count, int(seed), start, goal, walls, rings, spec.name)

    grid = rasterize(scenario, check_resolution, inflation_radius=inflation_radius)
    frac = grid.ground_truth.mean()
    if frac > max_occupancy:
        raise PlacementExhausted(f"rasterization occupies {frac:.0%} > {max_occupancy:.0%} of voxels")
    if grid.is_occupied(start, "ground_truth") or grid.is_occupied(goal, "ground_truth"):
        raise PlacementExhausted("start or goal blocked after inflation")
    return scenario


# ---------------------------------------------------------------------------
# Voxel grid


@dataclass
class VoxelGrid:
    origin: np.ndarray
    resolution: float
    dims: tuple[int, int, int]
    ground_truth: np.ndarray
    sensed: np.ndarray
    completed: np.ndarray
    inflation_radius: float = 0.3
    sensed_once: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self._dims_arr = np.asarray(self.dims, dtype=np.int64)

    @classmethod
    def empty(cls, origin, resolution, dims, inflation_radius=0.3) -> "VoxelGrid":
        shape = tuple(int(d) for d in dims)
        return cls(
            np.asarray(origin, dtype=float),
            float(resolution),
            shape,
            np.zeros(shape, dtype=bool),
            np.zeros(shape, dtype=bool),
            np.zeros(shape, dtype=bool),
            inflation_radius,
        )

    def layer(self, name: str) -> np.ndarray:
        if name not in LAYERS:
            raise ValueError(f"unknown layer {name!r}")
        return getattr(self, name)

    @property
    def extent(self) -> np.ndarray:
        return self._dims_arr * self.resolution

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def index_centers(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def in_bounds_indices(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return np.all((idx >= 0) & (idx < self._dims_arr), axis=-1)

    def contains_point(self, point) -> bool:
        idx = self.world_to_index(point)
        return bool(self.in_bounds_indices(idx)[0])

    def occupied_points(self, points: np.ndarray, layer: str = "completed") -> np.ndarray:
        """Occupancy of the voxels containing each point; out of bounds counts occupied."""
        arr = self.layer(layer)
        idx = self.world_to_index(points)
        inb = self.in_bounds_indices(idx)
        out = np.ones(idx.shape[0], dtype=bool)
        if np.any(inb):
            sel = idx[inb]
            out[inb] = arr[sel[:, 0], sel[:, 1], sel[:, 2]]
        return out

    def is_occupied(self, point, layer: str = "completed") -> bool:
        if layer not in ("ground_truth", "completed"):
            raise ValueError("is_occupied queries ground_truth or completed")
        return bool(self.occupied_points(np.asarray(point, dtype=float)[None, :], layer)[0])

    def copy(self, *, reset_observations: bool = False) -> "VoxelGrid":
        g = VoxelGrid(
            self.origin.copy(),
            self.resolution,
            self.dims,
            self.ground_truth.copy(),
            np.zeros_like(self.sensed) if reset_observations else self.sensed.copy(),
            np.zeros_like(self.completed) if reset_observations else self.completed.copy(),
            self.inflation_radius,
            False if reset_observations else self.sensed_once,
        )
        return g

    def dump_occupied(self, path, layers=LAYERS) -> None:
        """One line per occupied voxel: 'x y z layer' (voxel centers, meters)."""
        try:
            with open(path, "w") as fh:
                for name in layers:
                    idx = np.argwhere(self.layer(name))
                    centers = self.index_centers(idx)
                    for c in centers:
                        fh.write(f"{c[0]:.3f} {c[1]:.3f} {c[2]:.3f} {name}\n")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc


def rasterize(scenario: Scenario, resolution: float, *, inflation_radius: float = 0.3) -> VoxelGrid:
    """Fill the ground-truth layer and inflate it by the robot radius.

    Inflation is a Minkowski dilation with a Euclidean ball, computed through
    the distance transform of the raw occupancy.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    for obs in scenario.obstacles:
        if obs.min_dimension() < resolution:
            raise ResolutionTooCoarse(
                f"obstacle with min dimension {obs.min_dimension():.3f} m would vanish at {resolution} m"
            )

    dims = tuple(int(np.ceil(e / resolution - 1e-9)) for e in scenario.extent)
    grid = VoxelGrid.empty(np.zeros(3), resolution, dims, inflation_radius)
    raw = np.zeros(dims, dtype=bool)

    for wall in scenario.walls:
        lo, hi = wall.bounds()
        # Voxel i is filled iff its center (i + 0.5) * res falls inside [lo, hi].
        lo_i = np.maximum(np.ceil((lo - grid.origin) / resolution - 0.5 - 1e-9).astype(int), 0)
        hi_i = np.minimum(np.floor((hi - grid.origin) / resolution - 0.5 + 1e-9).astype(int), np.array(dims) - 1)
        if np.any(hi_i < lo_i):
            continue
        raw[lo_i[0] : hi_i[0] + 1, lo_i[1] : hi_i[1] + 1, lo_i[2] : hi_i[2] + 1] = True

    for ring in scenario.rings:
        lo, hi = ring.bounds()
        lo_i = np.maximum(grid.world_to_index(lo)[0], 0)
        hi_i = np.minimum(grid.world_to_index(hi)[0] + 1, np.array(dims))
        if np.any(hi_i <= lo_i):
            continue
        axes = [np.arange(lo_i[k], hi_i[k]) for k in range(3)]
        xx, yy, zz = np.meshgrid(*axes, indexing="ij")
        local = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
        centers = grid.index_centers(local)
        inside = ring.contains(centers)
        sel = local[inside]
        raw[sel[:, 0], sel[:, 1], sel[:, 2]] = True

    if inflation_radius > 0 and raw.any():
        dist = ndimage.distance_transform_edt(~raw)
        grid.ground_truth[:] = dist * resolution <= inflation_radius + 1e-9
    else:
        grid.ground_truth[:] = raw
    return grid


# ---------------------------------------------------------------------------
# Sensing


@dataclass
class SensorModel:
    """Simple depth-sensor frustum: yaw/pitch pointing, angular extents, range."""

    position: np.ndarray
    yaw: float = 0.0
    pitch: float = 0.0
    horizontal_fov: float = 1.5
    vertical_fov: float = 1.0
    max_range: float = 5.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        for fov in (self.horizontal_fov, self.vertical_fov):
            if not (0 < fov <= np.pi):
                raise ValueError("fov must lie in (0, pi]")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        forward = np.array([cp * cy, cp * sy, sp])
        right = np.array([-sy, cy, 0.0])
        up = np.cross(right, forward) * -1.0
        up /= np.linalg.norm(up)
        return forward, right, up

    def in_frustum(self, points: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(points) - self.position
        dist = np.linalg.norm(d, axis=1)
        forward, right, up = self.basis()
        f = d @ forward
        az = np.arctan2(d @ right, f)
        el = np.arctan2(d @ up, np.hypot(f, d @ right))
        ok = (dist <= self.max_range) & (dist > 1e-12)
        ok &= np.abs(az) <= self.horizontal_fov / 2.0
        ok &= np.abs(el) <= self.vertical_fov / 2.0
        return ok


def _visible_from(
    grid: VoxelGrid, origin: np.ndarray, targets_idx: np.ndarray, endpoints: np.ndarray | None = None
) -> np.ndarray:
    """First-hit visibility of target voxels from a common origin point.

    Amanatides-Woo traversal run in lockstep over all rays; a target is
    visible iff no ground-truth-occupied voxel is crossed strictly before it.
    Rays aim at each target's center unless explicit endpoints are given.
    """
    n = len(targets_idx)
    if n == 0:
        return np.zeros(0, dtype=bool)
    occ = grid.ground_truth
    res = grid.resolution
    start_idx = grid.world_to_index(origin)[0]
    if endpoints is None:
        endpoints = grid.index_centers(targets_idx)
    d = np.atleast_2d(endpoints) - origin

    visible = np.zeros(n, dtype=bool)
    at_start = np.all(targets_idx == start_idx, axis=1)
    visible[at_start] = True  # the sensor sees its own voxel
    active = ~at_start

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(d != 0, res / np.abs(d), np.inf)
        next_bound = grid.origin + (start_idx + (d > 0)) * res
        t_max = np.where(d != 0, (next_bound - origin) / d, np.inf)

    cur = np.tile(start_idx, (n, 1))
    max_steps = int(np.sum(grid.dims)) + 3
    for _ in range(max_steps):
        if not np.any(active):
            break
        ids = np.nonzero(active)[0]
        axis = np.argmin(t_max[ids], axis=1)
        rows = ids
        cur[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]

        c = cur[rows]
        inb = np.all((c >= 0) & (c < grid._dims_arr), axis=1)
        # Ray left the grid before reaching its target: not visible.
        active[rows[~inb]] = False
        rows = rows[inb]
        c = c[inb]
        if len(rows) == 0:
            continue
        reached = np.all(c == targets_idx[rows], axis=1)
        hit_rows = rows[reached]
        visible[hit_rows] = True
        active[hit_rows] = False
        rows = rows[~reached]
        c = c[~reached]
        if len(rows) == 0:
            continue
        blocked = occ[c[:, 0], c[:, 1], c[:, 2]]
        active[rows[blocked]] = False
    return visible


def segment_visible(grid: VoxelGrid, a, b, *, layer: str = "ground_truth") -> bool:
    """True iff the straight segment a->b crosses no occupied voxel before b's."""
    if layer != "ground_truth":
        raise ValueError("visibility is defined on the ground-truth layer")
    b = np.asarray(b, dtype=float)
    idx = grid.world_to_index(b)
    if not grid.in_bounds_indices(idx)[0]:
        return False
    return bool(_visible_from(grid, np.asarray(a, dtype=float), idx, endpoints=b[None, :])[0])


def sense(grid: VoxelGrid, sensor: SensorModel) -> int:
    """Mark occupied voxels visible from the sensor; returns the newly seen count.

    Only occupied voxels can enter the sensed layer, so the sensor never
    hallucinates; occluded voxels stay unknown.
    """
    if not grid.contains_point(sensor.position):
        raise ValueError("sensor must be inside grid bounds")
    occ_idx = np.argwhere(grid.ground_truth & ~grid.sensed)
    before = int(grid.sensed.sum())
    grid.sensed_once = True
    if len(occ_idx) == 0:
        return 0
    centers = grid.index_centers(occ_idx)
    cand = sensor.in_frustum(centers)
    occ_idx = occ_idx[cand]
    if len(occ_idx) == 0:
        return 0
    vis = _visible_from(grid, sensor.position, occ_idx)
    sel = occ_idx[vis]
    grid.sensed[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return int(grid.sensed.sum()) - before


def oracle_complete(grid: VoxelGrid, accuracy: float, seed: int) -> int:
    """Reveal occluded occupied voxels i.i.d. with the given probability.

    completed grows monotonically: it keeps everything previously completed,
    absorbs the sensed layer, and adds this round's reveals.  Returns the
    number of voxels newly added.
    """
    if not grid.sensed_once:
        raise RuntimeError("oracle_complete requires sense() to have run at least once")
    if not (0.0 <= accuracy <= 1.0):
        raise ValueError("accuracy must lie in [0, 1]")
    before = int(grid.completed.sum())
    grid.completed |= grid.sensed
    if accuracy > 0.0:
        occluded = np.argwhere(grid.ground_truth & ~grid.sensed & ~grid.completed)
        if len(occluded) > 0:
            rng = np.random.default_rng(seed)
            picks = rng.random(len(occluded)) < accuracy
            sel = occluded[picks]
            grid.completed[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return int(grid.completed.sum()) - before


# ---------------------------------------------------------------------------
# Scenario files


def save_scenario(scenario: Scenario, path) -> None:
    data = {
        "extent": scenario.extent.tolist(),
        "walls": scenario.wall_count,
        "rings": scenario.ring_count,
        "seed": scenario.rng_seed,
        "start": scenario.start.tolist(),
        "goal": scenario.goal.tolist(),
        "name": scenario.name,
        "obstacles": [o.to_dict() for o in scenario.obstacles],
    }
    try:
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_scenario(path) -> Scenario:
    """Load a scenario file; an explicit obstacle list overrides regeneration."""
    with open(path) as fh:
        data = json.load(fh)
    base = Scenario(
        np.asarray(data["extent"], dtype=float),
        int(data["walls"]),
        int(data["rings"]),
        int(data["seed"]),
        np.asarray(data["start"], dtype=float),
        np.asarray(data["goal"], dtype=float),
        name=data.get("name", "custom"),
    )
    obstacles = data.get("obstacles")
    if obstacles is None:
        spec = ScenarioSpec(
            tuple(base.extent), base.wall_count, base.ring_count, tuple(base.start), tuple(base.goal), base.name
        )
        return generate_scenario(spec, base.rng_seed)
    for od in obstacles:
        if od["kind"] == "wall":
            base.walls.append(
                Wall(np.asarray(od["position"], float), od["axis"], od["width"], od["height"], od["thickness"])
            )
        elif od["kind"] == "ring":
            base.rings.append(
                Ring(np.asarray(od["center"], float), np.asarray(od["axis"], float), od["inner_radius"], od["outer_radius"])
            )
        else:
            raise ValueError(f"unknown obstacle kind {od['kind']!r}")
    return base
