"""Energy-aware kinodynamic A* over constant-acceleration motion primitives.

States are (position, velocity, mode) with mode in {ground, aerial}.  Edges
are constant-acceleration segments drawn from a per-axis acceleration lattice
and a small set of durations; ground states additionally emit take-off
primitives and low, slow aerial states emit a landing primitive.  Every edge
pays (|a|^2 + rho_t) * tau plus a per-second energy rate that is higher when
any part of the swept segment rises above the ground threshold, which is what
steers the search toward driving and makes it fly only when the ground detour
costs more.

The closed set lives on a snapped lattice: positions at voxel (or configured
hash) resolution, velocities in fixed bins.  Child states are the snapped
representatives, so the search graph is a pure function of (start, goal,
grid, config) and an exhaustive uniform-cost search over the same successor
function must report the same optimal cost as A*.  The heuristic is the
straight-line travel time at v_max priced at the ground rate, shrunk by the
worst-case snap displacement per step; that keeps it consistent, so no
reopening is needed.

`successor_arrays` is the one source of truth for the graph; `expand` and
`successors` materialize primitive objects from it for inspection and for
independent searches over the same lattice.
"""

from __future__ import annotations

import functools
import heapq
from dataclasses import dataclass, fields

import numpy as np

from .bspline import BSplineTrajectory
from .errors import NoPathError, SearchTimeout
from .voxel_map import VoxelGrid

GROUND = "ground"
AERIAL = "aerial"

_KIND_NAMES = ("move", "takeoff", "land")
_SQRT3 = float(np.sqrt(3.0))


@dataclass
class RobotState:
    position: np.ndarray
    velocity: np.ndarray
    mode: str = GROUND

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)

    @classmethod
    def at_rest(cls, position, mode=GROUND) -> "RobotState":
        return cls(np.asarray(position, dtype=float), np.zeros(3), mode)


@dataclass
class MotionPrimitive:
    parent: RobotState
    acceleration: np.ndarray
    duration: float
    result: RobotState
    samples: np.ndarray  # swept positions, spacing <= voxel resolution
    edge_cost: float
    aerial: bool  # any swept sample above the ground threshold
    kind: str = "move"  # move | takeoff | land


@dataclass
class SearchConfig:
    v_max: float = 2.0
    a_max: float = 3.0
    durations: tuple = (0.25, 0.5)
    accel_values: tuple = (-3.0, 0.0, 3.0)
    rho_t: float = 1.0
    w_energy: float = 0.01
    e_drive: float = 251.45
    e_fly: float = 988.33
    ground_threshold: float = 0.3
    goal_tolerance: float = 0.5
    velocity_bin: float = 0.5
    ground_plane: float = 0.0
    land_vz_max: float = 0.3
    max_expansions: int = 200_000
    hash_resolution: float | None = None  # defaults to the grid resolution
    allow_flight: bool = True
    heuristic_weight: float = 1.0  # >1 trades optimality for speed

    def exact(self) -> bool:
        return self.heuristic_weight <= 1.0

    def __post_init__(self):
        self.durations = tuple(float(t) for t in self.durations)
        self.accel_values = tuple(float(a) for a in self.accel_values)
        self.validate()

    def validate(self):
        if min(self.v_max, self.a_max, self.rho_t, self.velocity_bin, self.goal_tolerance) <= 0:
            raise ValueError("v_max, a_max, rho_t, velocity_bin and goal_tolerance must be positive")
        if self.w_energy < 0:
            raise ValueError("w_energy must be nonnegative")
        if any(t <= 0 for t in self.durations):
            raise ValueError("durations must be positive")
        if self.e_fly <= self.e_drive or self.e_drive <= 0:
            raise ValueError("need e_fly > e_drive > 0")
        if max(abs(a) for a in self.accel_values) > self.a_max + 1e-9:
            raise ValueError("acceleration lattice exceeds a_max")
        if self.heuristic_weight < 1.0:
            raise ValueError("heuristic_weight must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        kwargs = dict(data)
        for key in ("durations", "accel_values"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**{k: v for k, v in kwargs.items() if k in known})


@functools.lru_cache(maxsize=128)
def _combo_cache(accel_values: tuple, aerial: bool, allow_flight: bool) -> np.ndarray:
    lat = np.asarray(accel_values)
    if aerial:
        ax, ay, az = np.meshgrid(lat, lat, lat, indexing="ij")
        out = np.stack([ax.ravel(), ay.ravel(), az.ravel()], axis=1)
    else:
        ax, ay = np.meshgrid(lat, lat, indexing="ij")
        out = np.stack([ax.ravel(), ay.ravel(), np.zeros(ax.size)], axis=1)
        pos = lat[lat > 0]
        if allow_flight and pos.size:
            axs, ays, azs = np.meshgrid(lat, lat, pos, indexing="ij")
            takeoff = np.stack([axs.ravel(), ays.ravel(), azs.ravel()], axis=1)
            out = np.vstack([out, takeoff])
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=256)
def _time_samples(tau: float, n_s: int) -> np.ndarray:
    tt = np.linspace(0.0, tau, n_s)
    tt.setflags(write=False)
    return tt


def _raw_successors(position, velocity, aerial: bool, config: SearchConfig, grid: VoxelGrid, layer: str, keep_samples: bool):
    """Vectorized primitive generation; the single definition of the graph edges."""
    p0 = position
    v0 = velocity
    plane = config.ground_plane
    res = grid.resolution
    combos = _combo_cache(config.accel_values, aerial, config.allow_flight)

    chunks = []
    for tau in config.durations:
        acc = combos
        n_land = 0
        if aerial and config.land_vz_max > 0:
            z_rel = p0[2] - plane
            if 0 < z_rel <= config.ground_threshold and abs(v0[2]) <= config.land_vz_max:
                az = -2.0 * (z_rel + v0[2] * tau) / tau**2
                if abs(az) <= config.a_max + 1e-9:
                    acc = np.vstack([acc, [[0.0, 0.0, az]]])
                    n_land = 1

        v1 = v0 + acc * tau
        p1 = p0 + v0 * tau + 0.5 * acc * tau**2

        bound = config.v_max * tau + 0.5 * _SQRT3 * config.a_max * tau**2
        n_s = int(np.ceil(bound / res)) + 2
        tt = _time_samples(tau, n_s)
        sweep = p0 + v0 * tt[None, :, None] + 0.5 * acc[:, None, :] * (tt**2)[None, :, None]

        ok = np.einsum("ij,ij->i", v1, v1) <= (config.v_max + 1e-9) ** 2
        is_land = np.zeros(len(acc), dtype=bool)
        if n_land:
            is_land[-n_land:] = True
        if aerial:
            ok &= sweep[:, :, 2].min(axis=1) >= plane - 1e-9
            ok &= is_land | (p1[:, 2] > plane + 1e-9)
        blocked = grid.occupied_points(sweep.reshape(-1, 3), layer).reshape(len(acc), n_s).any(axis=1)
        ok &= ~blocked
        if not ok.any():
            continue

        acc = acc[ok]
        v1 = v1[ok]
        p1 = p1[ok]
        is_land = is_land[ok]
        sweep_ok = sweep[ok]
        sweeps_aerial = sweep_ok[:, :, 2].max(axis=1) > plane + config.ground_threshold

        kind = np.zeros(len(acc), dtype=np.int8)
        if aerial:
            kind[is_land] = 2
            res_aerial = ~is_land
        else:
            kind[acc[:, 2] > 0] = 1
            res_aerial = acc[:, 2] > 0
        # Touchdown kills vertical velocity and pins the state to the plane.
        if n_land and is_land.any():
            p1[is_land, 2] = plane
            v1[is_land, 2] = 0.0

        a2 = np.einsum("ij,ij->i", acc, acc)
        rate = np.where(sweeps_aerial, config.e_fly, config.e_drive)
        cost = (a2 + config.rho_t + config.w_energy * rate) * tau

        chunks.append(
            dict(
                acc=acc,
                tau=np.full(len(acc), tau),
                end_pos=p1,
                end_vel=v1,
                end_aerial=res_aerial,
                sweep_aerial=sweeps_aerial,
                kind=kind,
                cost=cost,
                samples=sweep_ok if keep_samples else None,
            )
        )
    if not chunks:
        return None
    out = {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0] if k != "samples"}
    out["samples"] = [s for c in chunks if c["samples"] is not None for s in c["samples"]] if keep_samples else None
    return out


def _hash_resolution(config: SearchConfig, grid: VoxelGrid) -> float:
    return config.hash_resolution if config.hash_resolution is not None else grid.resolution


def lattice_key(state: RobotState, config: SearchConfig, grid: VoxelGrid) -> tuple:
    hres = _hash_resolution(config, grid)
    ip = np.floor((state.position - grid.origin) / hres).astype(np.int64)
    iv = np.floor(state.velocity / config.velocity_bin + 0.5).astype(np.int64)
    return (int(ip[0]), int(ip[1]), int(ip[2]), int(iv[0]), int(iv[1]), int(iv[2]), int(state.mode == AERIAL))


def canonical_state(key: tuple, config: SearchConfig, grid: VoxelGrid) -> RobotState:
    hres = _hash_resolution(config, grid)
    pos = grid.origin + (np.array(key[:3], dtype=float) + 0.5) * hres
    vel = np.array(key[3:6], dtype=float) * config.velocity_bin
    if not key[6]:
        pos[2] = config.ground_plane
        vel[2] = 0.0
        return RobotState(pos, vel, GROUND)
    return RobotState(pos, vel, AERIAL)


def successor_arrays(position, velocity, aerial: bool, config: SearchConfig, grid: VoxelGrid, layer: str = "completed"):
    """Snapped lattice edges as flat arrays: the graph a search explores.

    Returns None when the state has no collision-free successors, otherwise a
    dict with per-edge keys (n, 7) int64, canonical child positions and
    velocities, child modes, edge costs, and edge descriptors (acc, tau, kind).
    """
    raw = _raw_successors(np.asarray(position, float), np.asarray(velocity, float), aerial, config, grid, layer, False)
    if raw is None:
        return None
    hres = _hash_resolution(config, grid)
    ip = np.floor((raw["end_pos"] - grid.origin) / hres).astype(np.int64)
    iv = np.floor(raw["end_vel"] / config.velocity_bin + 0.5).astype(np.int64)
    canon_pos = grid.origin + (ip + 0.5) * hres
    canon_vel = iv * config.velocity_bin
    ground_rows = ~raw["end_aerial"]
    canon_pos[ground_rows, 2] = config.ground_plane
    canon_vel[ground_rows, 2] = 0.0

    ok = np.einsum("ij,ij->i", canon_vel, canon_vel) <= (config.v_max + 1e-9) ** 2
    if hres > grid.resolution + 1e-12:
        ok &= ~grid.occupied_points(canon_pos, layer)
    if not ok.any():
        return None

    keys = np.concatenate([ip[ok], iv[ok], raw["end_aerial"][ok].astype(np.int64)[:, None]], axis=1)
    return dict(
        keys=keys,
        canon_pos=canon_pos[ok],
        canon_vel=canon_vel[ok],
        child_aerial=raw["end_aerial"][ok],
        cost=raw["cost"][ok],
        acc=raw["acc"][ok],
        tau=raw["tau"][ok],
        kind=raw["kind"][ok],
        sweep_aerial=raw["sweep_aerial"][ok],
    )


def materialize_primitive(parent: RobotState, acc, tau: float, kind: str, config: SearchConfig, grid: VoxelGrid) -> MotionPrimitive:
    """Rebuild the full primitive (swept samples included) for one edge."""
    acc = np.asarray(acc, dtype=float)
    plane = config.ground_plane
    bound = config.v_max * tau + 0.5 * _SQRT3 * config.a_max * tau**2
    n_s = int(np.ceil(bound / grid.resolution)) + 2
    tt = _time_samples(float(tau), n_s)
    samples = parent.position + parent.velocity * tt[:, None] + 0.5 * acc * (tt**2)[:, None]
    p1 = samples[-1].copy()
    v1 = parent.velocity + acc * tau
    if kind == "land":
        p1[2] = plane
        v1 = np.array([v1[0], v1[1], 0.0])
        result = RobotState(p1, v1, GROUND)
    elif kind == "takeoff":
        result = RobotState(p1, v1, AERIAL)
    else:
        result = RobotState(p1, v1, parent.mode)
    aerial = bool(samples[:, 2].max() > plane + config.ground_threshold)
    prim = MotionPrimitive(parent, acc, float(tau), result, samples, 0.0, aerial, kind)
    prim.edge_cost = edge_cost(prim, config)
    return prim


def edge_cost(primitive: MotionPrimitive, config: SearchConfig) -> float:
    """(|a|^2 + rho_t) * tau plus the energy rate of the mode actually swept."""
    rate = config.e_fly if primitive.aerial else config.e_drive
    a2 = float(primitive.acceleration @ primitive.acceleration)
    return (a2 + config.rho_t + config.w_energy * rate) * primitive.duration


def expand(state: RobotState, config: SearchConfig, grid: VoxelGrid, layer: str = "completed"):
    """All collision-free primitives leaving `state`.

    One primitive per (acceleration combo x duration) whose swept samples are
    free and whose resulting speed respects v_max; ground states also try
    take-offs, and low aerial states with near-zero vertical speed try to land
    (constant vertical deceleration touching down exactly at duration's end).
    """
    raw = _raw_successors(state.position, state.velocity, state.mode == AERIAL, config, grid, layer, True)
    if raw is None:
        return []
    prims = []
    for i in range(len(raw["cost"])):
        kind = _KIND_NAMES[raw["kind"][i]]
        if kind == "land":
            result = RobotState(raw["end_pos"][i].copy(), raw["end_vel"][i].copy(), GROUND)
        else:
            result = RobotState(
                raw["end_pos"][i].copy(), raw["end_vel"][i].copy(), AERIAL if raw["end_aerial"][i] else GROUND
            )
        prims.append(
            MotionPrimitive(
                state,
                raw["acc"][i].copy(),
                float(raw["tau"][i]),
                result,
                raw["samples"][i],
                float(raw["cost"][i]),
                bool(raw["sweep_aerial"][i]),
                kind,
            )
        )
    return prims


def successors(state: RobotState, config: SearchConfig, grid: VoxelGrid, layer: str = "completed"):
    """Graph edges from a lattice node: (primitive, snapped child, child key).

    Children are snapped to canonical lattice states; a child is dropped when
    its snapped velocity leaves the limit or its snapped position lands in an
    occupied voxel (possible only when hashing coarser than the grid).
    """
    arrs = successor_arrays(state.position, state.velocity, state.mode == AERIAL, config, grid, layer)
    if arrs is None:
        return []
    out = []
    for i, key_row in enumerate(arrs["keys"].tolist()):
        prim = materialize_primitive(state, arrs["acc"][i], arrs["tau"][i], _KIND_NAMES[arrs["kind"][i]], config, grid)
        child = RobotState(arrs["canon_pos"][i].copy(), arrs["canon_vel"][i].copy(), AERIAL if arrs["child_aerial"][i] else GROUND)
        out.append((prim, child, tuple(key_row)))
    return out


@dataclass
class GuidancePath:
    states: list
    times: list
    primitives: list
    cost: float
    airborne_time: float
    expansions: int
    trace: list | None = None

    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.states])

    def dense_polyline(self) -> np.ndarray:
        if not self.primitives:
            return self.positions()
        return np.vstack([self.states[0].position[None, :]] + [p.samples[1:] for p in self.primitives])


def _heuristic_scale(config: SearchConfig, grid: VoxelGrid) -> float:
    # Per-step displacement can exceed v_max * tau by the snap radius; shrink
    # the heuristic accordingly so it never overestimates and stays consistent.
    # heuristic_weight > 1 re-inflates it deliberately (bounded suboptimality).
    snap = _SQRT3 / 2.0 * _hash_resolution(config, grid)
    kappa = 1.0 + snap / (config.v_max * min(config.durations))
    base = (config.rho_t + config.w_energy * config.e_drive) / (config.v_max * kappa)
    return base * config.heuristic_weight


def search(
    start: RobotState,
    goal,
    grid: VoxelGrid,
    config: SearchConfig,
    *,
    layer: str = "completed",
    collect_trace: bool = False,
) -> GuidancePath:
    """A* to a tolerance ball around the goal; minimal cost over the lattice.

    Ties break on fewer mode switches first, then on the lattice key, so the
    returned path is reproducible.  Raises NoPathError when the open set
    exhausts and SearchTimeout past the expansion budget.
    """
    goal = np.asarray(goal, dtype=float)
    hscale = _heuristic_scale(config, grid)
    tol = config.goal_tolerance

    key0 = lattice_key(start, config, grid)
    g_best = {key0: 0.0}
    # node -> (position, velocity, aerial)
    nodes = {key0: (start.position.copy(), start.velocity.copy(), start.mode == AERIAL)}
    switches = {key0: 0}
    parents: dict = {key0: None}
    d0 = float(np.linalg.norm(start.position - goal))
    heap = [(hscale * max(d0 - tol, 0.0), 0, key0, 0.0)]
    closed = set()
    expansions = 0
    trace = [] if collect_trace else None
    push = heapq.heappush
    pop = heapq.heappop

    while heap:
        f, sw, key, g = pop(heap)
        if key in closed or g > g_best.get(key, np.inf) + 1e-12:
            continue
        closed.add(key)
        pos, vel, aerial = nodes[key]

        if np.linalg.norm(pos - goal) <= tol:
            return _reconstruct(key, parents, nodes, g, config, grid, expansions, trace)

        expansions += 1
        if expansions > config.max_expansions:
            raise SearchTimeout(f"expansion budget {config.max_expansions} exceeded")
        if trace is not None:
            trace.append({"expansions": expansions, "frontier": len(heap), "g": g})

        arrs = successor_arrays(pos, vel, aerial, config, grid, layer)
        if arrs is None:
            continue
        costs = arrs["cost"]
        cpos = arrs["canon_pos"]
        cvel = arrs["canon_vel"]
        caer = arrs["child_aerial"]
        acc = arrs["acc"]
        tau = arrs["tau"]
        kind = arrs["kind"]
        d = cpos - goal
        hvals = np.sqrt(np.einsum("ij,ij->i", d, d)) - tol
        np.maximum(hvals, 0.0, out=hvals)
        hvals *= hscale
        sw_parent = switches[key]

        for i, ckey in enumerate(map(tuple, arrs["keys"].tolist())):
            if ckey in closed:
                continue
            g2 = g + costs[i]
            if g2 < g_best.get(ckey, np.inf) - 1e-12:
                g_best[ckey] = g2
                nodes[ckey] = (cpos[i].copy(), cvel[i].copy(), bool(caer[i]))
                switches[ckey] = sw_parent + (bool(caer[i]) != aerial)
                parents[ckey] = (key, (acc[i, 0], acc[i, 1], acc[i, 2]), float(tau[i]), int(kind[i]))
                push(heap, (g2 + hvals[i], switches[ckey], ckey, g2))

    raise NoPathError("open set exhausted before reaching the goal")


def _reconstruct(key, parents, nodes, cost, config, grid, expansions, trace) -> GuidancePath:
    chain = []
    while parents[key] is not None:
        pkey, acc, tau, kind = parents[key]
        chain.append((pkey, acc, tau, _KIND_NAMES[kind]))
        key = pkey
    chain.reverse()

    pos, vel, aerial = nodes[key]
    state = RobotState(pos.copy(), vel.copy(), AERIAL if aerial else GROUND)
    states = [state]
    times = [0.0]
    prims = []
    airborne = 0.0
    for pkey, acc, tau, kind in chain:
        ppos, pvel, paer = nodes[pkey]
        parent = RobotState(ppos.copy(), pvel.copy(), AERIAL if paer else GROUND)
        prim = materialize_primitive(parent, acc, tau, kind, config, grid)
        prims.append(prim)
        states.append(prim.result)
        times.append(times[-1] + tau)
        if prim.aerial:
            airborne += tau
    return GuidancePath(states, times, prims, cost, airborne, expansions, trace)


def extract_collision_segments(traj: BSplineTrajectory, grid: VoxelGrid, layer: str = "completed"):
    """Maximal runs of in-collision control points, padded one point each side.

    Runs whose padded ranges touch are merged; indices are clamped to the
    control-point range.
    """
    occ = grid.occupied_points(traj.control_points, layer)
    n = len(occ)
    segments = []
    i = 0
    while i < n:
        if occ[i]:
            j = i
            while j + 1 < n and occ[j + 1]:
                j += 1
            lo = max(i - 1, 0)
            hi = min(j + 1, n - 1)
            if segments and lo <= segments[-1][1]:
                segments[-1] = (segments[-1][0], hi)
            else:
                segments.append((lo, hi))
            i = j + 1
        else:
            i += 1
    return segments
