"""Lagrangian stochastic particle dispersion.

Each particle carries a velocity fluctuation ``u`` that follows a Langevin
equation with drift ``-u/tau_L`` (the homogeneous Gaussian special case)
and diagonal diffusion ``sqrt(2 sigma^2 / tau_L)``. Positions move with the
mean wind plus the fluctuation. Integration is Euler-Maruyama.

Arrays are stored component-major: positions and velocities have shape
``(3, n)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .meteo import DEFAULT_PERIOD, TurbulenceParams, WindRecord, record_index

FORWARD = "forward"
BACKWARD = "backward"
DIRECTIONS = (FORWARD, BACKWARD)

# Particles per independent random stream. Fixed so that results do not
# depend on how chunks are distributed over workers.
CHUNK_SIZE = 2500


@dataclass(frozen=True)
class DomainGrid:
    """Rectangular domain split into ``nx * ny`` full-height cells.

    Cell ``A_k`` (1-based) sits at row ``(k - 1) // nx + 1`` along y and
    column ``(k - 1) % nx + 1`` along x, with ``A1`` at the origin corner.
    """

    nx: int = 5
    ny: int = 5
    cell_dx: float = 300.0
    cell_dy: float = 200.0
    height: float = 1000.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValidationError("grid needs at least one cell per axis")
        if min(self.cell_dx, self.cell_dy, self.height) < 0:
            raise ValidationError("cell extents must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def width(self) -> float:
        return self.nx * self.cell_dx

    @property
    def depth(self) -> float:
        return self.ny * self.cell_dy

    @property
    def cell_volume(self) -> float:
        return self.cell_dx * self.cell_dy * self.height

    def check_cell(self, k: int) -> int:
        if isinstance(k, str):
            k = parse_cell_label(k)
        k = int(k)
        if not 1 <= k <= self.n_cells:
            raise DomainError(f"cell index {k} outside 1..{self.n_cells}")
        return k

    def row_col(self, k: int) -> tuple[int, int]:
        k = self.check_cell(k)
        return (k - 1) // self.nx + 1, (k - 1) % self.nx + 1

    def cell_from_row_col(self, row: int, col: int) -> int:
        if not (1 <= row <= self.ny and 1 <= col <= self.nx):
            raise DomainError(f"row/col ({row}, {col}) outside the grid")
        return self.nx * (row - 1) + col

    def cell_bounds(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of cell ``k`` as ``(3,)`` arrays."""
        row, col = self.row_col(k)
        lo = np.array([(col - 1) * self.cell_dx, (row - 1) * self.cell_dy, 0.0])
        hi = lo + np.array([self.cell_dx, self.cell_dy, self.height])
        return lo, hi

    def cell_of(self, x, y) -> np.ndarray:
        """1-based cell index for each horizontal position, 0 when outside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = (x >= 0) & (x < self.width) & (y >= 0) & (y < self.depth)
        col = np.floor(np.where(inside, x, 0.0) / self.cell_dx if self.cell_dx > 0 else 0.0)
        row = np.floor(np.where(inside, y, 0.0) / self.cell_dy if self.cell_dy > 0 else 0.0)
        k = (row.astype(np.int64) * self.nx + col.astype(np.int64) + 1)
        return np.where(inside, k, 0)


def cell_label(k: int) -> str:
    return f"A{int(k)}"


def parse_cell_label(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    text = str(label).strip()
    if text[:1] in ("A", "a"):
        text = text[1:]
    try:
        return int(text)
    except ValueError:
        raise DomainError(f"not a cell label: {label!r}") from None


@dataclass(frozen=True)
class SensorSpec:
    """Cubic detection volume of edge ``edge`` centred on ``(x, y, z)``."""

    x: float
    y: float
    z: float = 10.0
    edge: float = 0.1

    def __post_init__(self):
        if not self.edge > 0:
            raise ValidationError(f"sensor edge must be > 0, got {self.edge}")

    @property
    def volume(self) -> float:
        return self.edge**3

    def contains(self, x, y, z) -> np.ndarray:
        h = 0.5 * self.edge
        return (np.abs(x - self.x) <= h) & (np.abs(y - self.y) <= h) & (np.abs(z - self.z) <= h)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.array([self.x, self.y, self.z])
        return c - 0.5 * self.edge, c + 0.5 * self.edge


def sensor_label(i: int) -> str:
    return f"S{int(i)}"


REFERENCE_SENSOR_POSITIONS = ((400.0, 500.0), (600.0, 300.0), (800.0, 700.0),
                          (1000.0, 500.0), (1200.0, 300.0), (1400.0, 700.0))


def reference_sensors(edge: float = 0.1, z: float = 10.0) -> list[SensorSpec]:
    return [SensorSpec(x, y, z, edge) for x, y in REFERENCE_SENSOR_POSITIONS]


def check_sensors(grid: DomainGrid, sensors: Sequence[SensorSpec]) -> None:
    for i, s in enumerate(sensors, start=1):
        if not (0 <= s.x <= grid.width and 0 <= s.y <= grid.depth and 0 <= s.z <= grid.height):
            raise ValidationError(f"sensor {i} at ({s.x}, {s.y}, {s.z}) lies outside the domain")


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 1.0
    n_particles_per_source: int = 10_000
    duration: float = 3000.0
    direction: str = FORWARD
    seed: int = 42

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.n_particles_per_source < 1:
            raise ValidationError("n_particles_per_source must be >= 1")
        if self.duration < self.dt:
            raise ValidationError("duration must cover at least one time step")
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")

    @property
    def c_v(self) -> int:
        return 1 if self.direction == FORWARD else -1

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def check_timestep(self, params: TurbulenceParams) -> None:
        """Reject steps outside the inertial-subrange ordering ``dt << tau_L``."""
        limit = 0.1 * min(params.tau_L)
        if self.dt > limit:
            raise ValidationError(f"dt={self.dt} s exceeds 0.1 * min(tau_L) = {limit} s")


@dataclass(frozen=True)
class Particle:
    x: tuple[float, float, float]
    u: tuple[float, float, float] = (0.0, 0.0, 0.0)
    source_id: int = 0
    alive: bool = True


@dataclass
class ParticleEnsemble:
    """Struct-of-arrays particle state; ``x`` and ``u`` have shape ``(3, n)``."""

    x: np.ndarray
    u: np.ndarray
    source_id: np.ndarray
    alive: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3, -1)
        self.u = np.asarray(self.u, dtype=float).reshape(3, -1)
        n = self.x.shape[1]
        self.source_id = np.broadcast_to(np.asarray(self.source_id, dtype=np.int64), (n,)).copy()
        self.alive = np.broadcast_to(np.asarray(self.alive, dtype=bool), (n,)).copy()
        if self.u.shape[1] != n:
            raise ValidationError("x and u must describe the same number of particles")

    def __len__(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_particles(cls, particles: Sequence[Particle]) -> "ParticleEnsemble":
        if not particles:
            return cls(np.zeros((3, 0)), np.zeros((3, 0)), np.zeros(0), np.zeros(0, dtype=bool))
        return cls(
            np.array([p.x for p in particles], dtype=float).T,
            np.array([p.u for p in particles], dtype=float).T,
            np.array([p.source_id for p in particles]),
            np.array([p.alive for p in particles]),
        )

    def particles(self) -> list[Particle]:
        return [
            Particle(tuple(self.x[:, i].tolist()), tuple(self.u[:, i].tolist()),
                     int(self.source_id[i]), bool(self.alive[i]))
            for i in range(len(self))
        ]


def drift_coefficient(u, params: TurbulenceParams) -> np.ndarray:
    """Deterministic acceleration ``-u_i / tau_Li`` for fluctuation(s) ``u``.

    ``u`` may be a 3-vector or a ``(3, n)`` array.
    """
    u = np.asarray(u, dtype=float)
    tau = np.asarray(params.tau_L).reshape((3,) + (1,) * (u.ndim - 1))
    return -u / tau


def diffusion_coefficient(params: TurbulenceParams) -> np.ndarray:
    """Diagonal of ``b_ij = delta_ij sqrt(2 sigma_i^2 / tau_Li)``."""
    return np.sqrt(2.0 * np.asarray(params.sigma2) / np.asarray(params.tau_L))


def diffusion_tensor(params: TurbulenceParams) -> np.ndarray:
    """``B_ij = 0.5 b_ik b_jk``, i.e. ``diag(sigma_i^2 / tau_Li)``."""
    b = np.diag(diffusion_coefficient(params))
    return 0.5 * b @ b.T


def _em_update(x, u, wind_u, wind_v, tau, b, dt, c_v, xi, grid):
    """Advance ``(3, n)`` arrays in place; returns the in-domain mask (or None)."""
    sqdt = math.sqrt(dt)
    u += (-dt / tau) * u + (b * sqdt) * xi
    x[0] += (c_v * wind_u + u[0]) * dt
    x[1] += (c_v * wind_v + u[1]) * dt
    x[2] += u[2] * dt
    if grid is None:
        return None
    z, w = x[2], u[2]
    low = z < 0.0
    if low.any():
        z[low] = -z[low]
        w[low] = -w[low]
    high = z > grid.height
    if high.any():
        z[high] = 2.0 * grid.height - z[high]
        w[high] = -w[high]
    # a step longer than the column height cannot bounce back inside
    np.clip(z, 0.0, grid.height, out=z)
    return (x[0] >= 0.0) & (x[0] <= grid.width) & (x[1] >= 0.0) & (x[1] <= grid.depth)


def langevin_step(p, wind, params: TurbulenceParams, dt: float, c_v: int, rng=None,
                  grid: DomainGrid | None = None, xi=None):
    """One Euler-Maruyama step of the particle Langevin model.

    ``u' = u - u/tau dt + b sqrt(dt) xi`` and ``x' = x + (c_v U + u') dt``.
    The vertical mean wind is zero. With a ``grid`` the particle reflects at
    the ground and at the domain top (flipping ``w``) and is marked dead when
    it leaves the domain horizontally.

    ``p`` is a :class:`Particle` (a new one is returned) or a
    :class:`ParticleEnsemble`, which is advanced in place and returned. Only
    live members move. ``wind`` is a 2- or 3-vector, or ``(2|3, n)`` per
    particle. ``xi`` overrides the standard normal draws.
    """
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    single = isinstance(p, Particle)
    ens = ParticleEnsemble.from_particles([p]) if single else p
    wind = np.asarray(wind, dtype=float)
    n = len(ens)
    if xi is None:
        xi = rng.standard_normal((3, n))
    xi = np.asarray(xi, dtype=float).reshape(3, n)
    if wind.ndim == 1:
        wind = np.broadcast_to(wind[:2].reshape(2, 1), (2, n))
    tau = np.asarray(params.tau_L).reshape(3, 1)
    b = diffusion_coefficient(params).reshape(3, 1)

    if ens.alive.all():
        inside = _em_update(ens.x, ens.u, wind[0], wind[1], tau, b, dt, c_v, xi, grid)
        if inside is not None:
            ens.alive &= inside
    else:
        idx = np.flatnonzero(ens.alive)
        x, u = ens.x[:, idx], ens.u[:, idx]
        inside = _em_update(x, u, wind[0][idx], wind[1][idx], tau, b, dt, c_v, xi[:, idx], grid)
        ens.x[:, idx] = x
        ens.u[:, idx] = u
        if inside is not None:
            ens.alive[idx] = inside
    if single:
        return ens.particles()[0]
    return ens


def _release_in_box(lo, hi, n, rng, params: TurbulenceParams):
    lo = np.asarray(lo, dtype=float).reshape(3, 1)
    hi = np.asarray(hi, dtype=float).reshape(3, 1)
    x = lo + (hi - lo) * rng.random((3, n))
    u = params.sigma.reshape(3, 1) * rng.standard_normal((3, n))
    return x, u


def release_particles(grid: DomainGrid, source_cell, n: int, rng,
                      params: TurbulenceParams | None = None) -> ParticleEnsemble:
    """``n`` particles uniform over a cell with ``u ~ N(0, sigma^2)``."""
    k = grid.check_cell(source_cell)
    if n < 1:
        raise DomainError(f"need at least one particle, got {n}")
    lo, hi = grid.cell_bounds(k)
    x, u = _release_in_box(lo, hi, n, rng, params or TurbulenceParams())
    return ParticleEnsemble(x, u, np.full(n, k), np.ones(n, dtype=bool))


@dataclass
class DetectionCounts:
    """Particle-step detections per (receptor, source) pair.

    In forward mode releasers are source cells and ``released`` holds ``N_S,j``.
    In backward mode particles leave the receptors, ``released`` is keyed by
    receptor and ``counts[i, j]`` counts particle-steps spent inside cell ``j``.
    """

    direction: str
    dt: float
    duration: float
    receptor_ids: list[str]
    source_ids: list[str]
    counts: np.ndarray
    releaser_ids: list[str]
    released: np.ndarray
    sensor_edge: float | None = None
    per_particle: np.ndarray | None = field(default=None, repr=False)

    def released_by(self, ident: str) -> int:
        return int(self.released[self.releaser_ids.index(ident)])


def _chunk_plan(n_per_releaser: int) -> list[tuple[int, int]]:
    return [(a, min(a + CHUNK_SIZE, n_per_releaser)) for a in range(0, n_per_releaser, CHUNK_SIZE)]


def _chunk_seed(seed: int, direction: str, releaser: int, chunk: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(DIRECTIONS.index(direction), releaser, chunk))


def _run_chunk(task):
    (grid, sensors, records, params, config, period, releaser, r_col,
     start, stop, targets, track) = task
    rng = np.random.default_rng(_chunk_seed(config.seed, config.direction, releaser, start // CHUNK_SIZE))
    m = stop - start
    n_steps = config.n_steps
    N = config.n_particles_per_source
    if config.direction == FORWARD:
        lo, hi = grid.cell_bounds(releaser)
    else:
        lo, hi = sensors[releaser - 1].bounds()
    x, u = _release_in_box(lo, hi, m, rng, params)
    # continuous release: particle k starts at step floor(k * n_steps / N)
    release_step = (np.arange(start, stop, dtype=np.int64) * n_steps) // N
    alive = np.ones(m, dtype=bool)

    tau = np.asarray(params.tau_L).reshape(3, 1)
    b = diffusion_coefficient(params).reshape(3, 1)
    c_v = config.c_v
    dt = config.dt
    n_rows = len(sensors) if config.direction == FORWARD else 1
    n_cols = 1 if config.direction == FORWARD else len(targets)
    counts = np.zeros((n_rows, n_cols), dtype=np.int64)
    hits = np.zeros((n_rows, m), dtype=np.int64) if track else None
    target_col = None
    if config.direction == BACKWARD:
        target_col = np.full(grid.n_cells + 1, -1, dtype=np.int64)
        target_col[np.asarray(targets, dtype=np.int64)] = np.arange(len(targets))

    released_upto = 0
    for n in range(n_steps):
        xi = rng.standard_normal((3, m))
        while released_upto < m and release_step[released_upto] <= n:
            released_upto += 1
        idx = np.flatnonzero(alive[:released_upto])
        if idx.size == 0:
            if released_upto == m:
                break
            continue
        t = n * dt if c_v > 0 else config.duration - (n + 1) * dt
        rec = records[record_index(len(records), t, period)]
        xs, us = x[:, idx], u[:, idx]
        wu, wv = rec.components(xs[2])
        inside = _em_update(xs, us, wu, wv, tau, b, dt, c_v, xi[:, idx], grid)
        x[:, idx] = xs
        u[:, idx] = us
        alive[idx] = inside
        live = idx[inside]
        if live.size == 0:
            continue
        px, py, pz = x[0, live], x[1, live], x[2, live]
        if config.direction == FORWARD:
            for i, s in enumerate(sensors):
                hit = s.contains(px, py, pz)
                c = int(np.count_nonzero(hit))
                if c:
                    counts[i, 0] += c
                    if track:
                        hits[i, live[hit]] += 1
        else:
            cols = target_col[grid.cell_of(px, py)]
            cols = cols[cols >= 0]
            if cols.size:
                counts[0] += np.bincount(cols, minlength=n_cols)
    return r_col, start, counts, hits


def run_dispersion(grid: DomainGrid, sensors: Sequence[SensorSpec], records: Sequence[WindRecord],
                   params: TurbulenceParams, config: SimulationConfig, sources: Sequence[int] | None = None,
                   *, period: float = DEFAULT_PERIOD, workers: int = 1,
                   track_particles: bool = False) -> DetectionCounts:
    """Integrate every particle and count receptor detections.

    Forward mode releases ``n_particles_per_source`` particles continuously
    from each source cell in ``sources`` (all cells by default) and counts,
    after every step, the particles inside each sensor volume. Backward mode
    releases the same number from each sensor volume, reverses the mean wind
    and runs the wind records backwards in time, counting the particle-steps
    spent in each cell of ``sources``.

    Random streams are keyed by (seed, releaser, chunk) with a fixed chunk
    size, so the result is bit-identical for any ``workers`` value.
    ``track_particles`` keeps per-particle forward hit counts (``per_particle``,
    shape ``(n_sensors, n_sources * n_particles)``).
    """
    check_sensors(grid, sensors)
    if not records:
        raise ValidationError("no wind records")
    sources = [grid.check_cell(k) for k in (sources if sources is not None else range(1, grid.n_cells + 1))]
    N = config.n_particles_per_source
    forward = config.direction == FORWARD
    releasers = sources if forward else list(range(1, len(sensors) + 1))
    track = bool(track_particles and forward)

    tasks = [
        (grid, list(sensors), list(records), params, config, period, r, col, a, b, sources, track)
        for col, r in enumerate(releasers)
        for a, b in _chunk_plan(N)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]

    counts = np.zeros((len(sensors), len(sources)), dtype=np.int64)
    per_particle = np.zeros((len(sensors), len(releasers) * N), dtype=np.int64) if track else None
    for col, start, c, hits in results:
        if forward:
            counts[:, col] += c[:, 0]
            if track:
                per_particle[:, col * N + start: col * N + start + hits.shape[1]] = hits
        else:
            counts[col, :] += c[0]

    receptor_ids = [sensor_label(i) for i in range(1, len(sensors) + 1)]
    source_ids = [cell_label(k) for k in sources]
    edges = {s.edge for s in sensors}
    return DetectionCounts(
        direction=config.direction,
        dt=config.dt,
        duration=config.n_steps * config.dt,
        receptor_ids=receptor_ids,
        source_ids=source_ids,
        counts=counts,
        releaser_ids=source_ids if forward else receptor_ids,
        released=np.full(len(releasers), N, dtype=np.int64),
        sensor_edge=edges.pop() if len(edges) == 1 else None,
        per_particle=per_particle,
    )


def write_counts(counts: DetectionCounts, fh, header: Sequence[str] = ()) -> None:
    """Write counts as CSV rows ``sensor_id,source_id,count`` plus a totals block."""
    for line in header:
        fh.write(f"# {line}\n")
    fh.write(f"# direction: {counts.direction}\n")
    fh.write(f"# dt: {counts.dt!r}\n")
    fh.write(f"# duration: {counts.duration!r}\n")
    if counts.sensor_edge is not None:
        fh.write(f"# sensor_edge: {counts.sensor_edge!r}\n")
    fh.write("sensor_id,source_id,count\n")
    for i, r in enumerate(counts.receptor_ids):
        for j, s in enumerate(counts.source_ids):
            fh.write(f"{r},{s},{int(counts.counts[i, j])}\n")
    fh.write("\nreleaser_id,N_S\n")
    for r, n in zip(counts.releaser_ids, counts.released):
        fh.write(f"{r},{int(n)}\n")


def read_counts(fh) -> DetectionCounts:
    from .errors import ParseError

    meta: dict[str, str] = {}
    rows: list[tuple[str, str, int]] = []
    totals: list[tuple[str, int]] = []
    block = None
    for lineno, raw in enumerate(fh, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if ":" in line:
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            continue
        if line == "sensor_id,source_id,count":
            block = "rows"
            continue
        if line == "releaser_id,N_S":
            block = "totals"
            continue
        fields = [f.strip() for f in line.split(",")]
        try:
            if block == "rows" and len(fields) == 3:
                rows.append((fields[0], fields[1], int(fields[2])))
            elif block == "totals" and len(fields) == 2:
                totals.append((fields[0], int(fields[1])))
            else:
                raise ValueError("unexpected field count")
        except ValueError as exc:
            raise ParseError(str(exc), row=lineno) from None
    if "direction" not in meta or "dt" not in meta:
        raise ParseError("counts file lacks direction/dt header")
    receptor_ids = list(dict.fromkeys(r for r, _, _ in rows))
    source_ids = list(dict.fromkeys(s for _, s, _ in rows))
    counts = np.zeros((len(receptor_ids), len(source_ids)), dtype=np.int64)
    for r, s, c in rows:
        counts[receptor_ids.index(r), source_ids.index(s)] = c
    edge = meta.get("sensor_edge")
    return DetectionCounts(
        direction=meta["direction"],
        dt=float(meta["dt"]),
        duration=float(meta.get("duration", "nan")),
        receptor_ids=receptor_ids,
        source_ids=source_ids,
        counts=counts,
        releaser_ids=[r for r, _ in totals],
        released=np.array([n for _, n in totals], dtype=np.int64),
        sensor_edge=float(edge) if edge else None,
    )
