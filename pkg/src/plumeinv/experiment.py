"""End-to-end experiment: configuration, pipeline stages and comparison report.

Every stage reads its inputs from and writes its outputs to one directory.
Outputs are CSV text with ``#`` header comments that record the stage, the
configuration hash and the seed. Stages are pure functions of (inputs,
config), so reruns reproduce their files byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dispersion as dsp
from . import mlp
from . import regularized as reg
from . import source_receptor as sr
from .errors import DomainError, InconsistencyError, ValidationError
from .meteo import TurbulenceParams, load_meteorology

REFERENCE_ACTIVE_CELLS = {
    "A2": 10.0, "A3": 10.0, "A4": 10.0, "A7": 10.0, "A8": 10.0, "A9": 10.0,
    "A12": 20.0, "A13": 20.0, "A14": 20.0, "A17": 20.0, "A18": 20.0, "A19": 20.0,
}

STAGES = ("simulate", "matrix", "synth", "train", "invert", "compare")

COUNTS_FILE = "counts.csv"
MATRIX_FILE = "matrix.csv"
OBSERVATION_FILE = "observation.csv"
SET_FILES = {"train": "train.csv", "activation": "activation.csv", "generalization": "generalization.csv"}
REPORT_FILE = "report.csv"


@dataclass
class ExperimentConfig:
    """All knobs of the experiment. ``to_json``/``from_json`` give the file form."""

    seed: int = 42
    grid: dict = field(default_factory=lambda: {"nx": 5, "ny": 5, "cell_dx": 300.0, "cell_dy": 200.0,
                                                "height": 1000.0})
    sensors: list = field(default_factory=lambda: [list(p) for p in dsp.REFERENCE_SENSOR_POSITIONS])
    sensor_z: float = 10.0
    # forward-mode sampling box; the 0.1 m instrument volume records no hits at 1e4 particles per cell
    sensor_edge: float = 20.0
    backward_sensor_edge: float = 0.1
    active_cells: dict = field(default_factory=lambda: dict(REFERENCE_ACTIVE_CELLS))
    meteorology: str | None = None
    record_period: float = 600.0
    sigma2: list = field(default_factory=lambda: [0.5, 0.5, 0.25])
    tau_L: list = field(default_factory=lambda: [100.0, 100.0, 50.0])
    dt: float = 1.0
    particles: int = 10_000
    duration: float = 3000.0
    direction: str = dsp.FORWARD
    workers: int = 1
    noise: float = 0.05
    n_train: int = 50
    n_activation: int = 25
    n_generalization: int = 25
    rate_range: list = field(default_factory=lambda: [0.0, 30.0])
    sampler: str = sr.PERTURBED
    spread: float = 0.25
    topology: str = "6:15:30:12"
    eta: float = 0.1
    alpha: float = 0.5
    epochs: int = 20_000
    regularizer: str = reg.MAX_ENTROPY
    s_max: float = 30.0
    lam: float | None = None
    qn: dict = field(default_factory=dict)
    pso: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.particles < 1:
            raise ValidationError(f"particles must be >= 1, got {self.particles}")
        if self.noise < 0:
            raise ValidationError(f"noise must be >= 0, got {self.noise}")
        if self.direction not in dsp.DIRECTIONS:
            raise ValidationError(f"direction must be one of {dsp.DIRECTIONS}")
        if min(self.n_train, self.n_activation, self.n_generalization) < 0 or self.n_train < 1:
            raise ValidationError("need at least one training pair and non-negative set sizes")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        mlp.Topology.parse(self.topology)
        grid = self.make_grid()
        for label in self.active_cells:
            try:
                grid.check_cell(label)
            except DomainError as exc:
                raise ValidationError(f"active cell {label!r}: {exc}") from None
        if any(float(v) < 0 for v in self.active_cells.values()):
            raise ValidationError("active-cell emission rates must be >= 0")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    # -- derived objects ---------------------------------------------------
    def make_grid(self) -> dsp.DomainGrid:
        return dsp.DomainGrid(**self.grid)

    def make_sensors(self, direction: str | None = None) -> list[dsp.SensorSpec]:
        direction = direction or self.direction
        edge = self.sensor_edge if direction == dsp.FORWARD else self.backward_sensor_edge
        return [dsp.SensorSpec(float(x), float(y), self.sensor_z, edge) for x, y in self.sensors]

    def make_turbulence(self) -> TurbulenceParams:
        return TurbulenceParams(tuple(self.sigma2), tuple(self.tau_L))

    def make_simulation(self, direction: str | None = None) -> dsp.SimulationConfig:
        return dsp.SimulationConfig(self.dt, self.particles, self.duration, direction or self.direction,
                                    stage_seed(self.seed, "simulate"))

    @property
    def cell_ids(self) -> list[str]:
        return [dsp.cell_label(dsp.parse_cell_label(k)) for k in self.active_cells]

    @property
    def cell_indices(self) -> list[int]:
        return [dsp.parse_cell_label(k) for k in self.active_cells]

    @property
    def exact_rates(self) -> np.ndarray:
        return np.array([float(v) for v in self.active_cells.values()])

    def qn_config(self) -> reg.QnConfig:
        return reg.QnConfig(**{"initial_guess": 0.5 * sum(self.rate_range), **self.qn})

    def pso_config(self) -> reg.PsoConfig:
        opts = {"bounds": tuple(self.rate_range), "seed": stage_seed(self.seed, "pso"), **self.pso}
        opts["bounds"] = tuple(opts["bounds"])
        return reg.PsoConfig(**opts)

    def training_config(self) -> mlp.TrainingConfig:
        return mlp.TrainingConfig(self.eta, self.alpha, self.epochs, stage_seed(self.seed, "train"))


def stage_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage derived from the master seed."""
    names = ("simulate", "observation", "training-set", "init", "train", "pso")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(names.index(stage),))
    return int(seq.generate_state(1)[0])


def topology_tag(topology: str) -> str:
    return str(mlp.Topology.parse(topology)).replace(":", "-")


def _header(config: ExperimentConfig, stage: str, extra: Sequence[str] = ()) -> list[str]:
    return [f"plumeinv {stage}", f"config_hash: {config.config_hash}", f"seed: {config.seed}", *extra]


def _write(path: Path, writer, *args, **kwargs) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer(*args, fh, **kwargs)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the upstream stage first)")
    return path


# -- stages -----------------------------------------------------------------

def run_simulate(config: ExperimentConfig, out, direction: str | None = None) -> tuple[Path, dsp.DetectionCounts]:
    direction = direction or config.direction
    if config.meteorology is not None and not Path(config.meteorology).exists():
        raise FileNotFoundError(f"meteorology file not found: {config.meteorology}")
    records = load_meteorology(config.meteorology)
    sim = config.make_simulation(direction)
    sim.check_timestep(config.make_turbulence())
    counts = dsp.run_dispersion(config.make_grid(), config.make_sensors(direction), records,
                                config.make_turbulence(), sim, config.cell_indices,
                                period=config.record_period, workers=config.workers)
    path = _write(Path(out) / COUNTS_FILE, dsp.write_counts, counts, header=_header(config, "simulate"))
    return path, counts


def run_matrix(config: ExperimentConfig, out, direction: str | None = None) -> tuple[Path, sr.TransitionMatrix]:
    out = Path(out)
    with _require(out / COUNTS_FILE, "counts file").open(encoding="utf-8") as fh:
        counts = dsp.read_counts(fh)
    if direction is not None and direction != counts.direction:
        raise InconsistencyError(
            f"requested the {direction} formula but {COUNTS_FILE} holds {counts.direction} counts")
    if counts.direction == dsp.FORWARD:
        M = sr.build_matrix_forward(counts, config.make_grid(), config.make_sensors(dsp.FORWARD))
    else:
        M = sr.build_matrix_backward(counts)
    M = M.select_sources(config.cell_ids)
    path = _write(out / MATRIX_FILE, sr.write_matrix, M,
                  header=_header(config, "matrix", [f"direction: {counts.direction}"]))
    return path, M


def load_matrix(out) -> sr.TransitionMatrix:
    with _require(Path(out) / MATRIX_FILE, "matrix file").open(encoding="utf-8") as fh:
        return sr.read_matrix(fh)


def run_synth(config: ExperimentConfig, out) -> dict[str, Path]:
    out = Path(out)
    M = load_matrix(out)
    exact = sr.predict_concentrations(M, config.exact_rates)
    observed = sr.add_noise(exact, sr.NoiseModel(config.noise, stage_seed(config.seed, "observation")))
    paths = {"observation": _write(out / OBSERVATION_FILE, write_observation, exact, observed,
                                   header=_header(config, "synth", [f"noise: {config.noise!r}"]))}
    sizes = [config.n_train, config.n_activation, config.n_generalization]
    ts = sr.generate_training_set(
        M, sum(sizes), tuple(config.rate_range), sr.NoiseModel(config.noise, 0),
        seed=stage_seed(config.seed, "training-set"), sampler=config.sampler,
        reference=config.exact_rates, spread=config.spread)
    for name, part in zip(SET_FILES, ts.split(sizes)):
        paths[name] = _write(out / SET_FILES[name], sr.write_training_set, part,
                             header=_header(config, "synth", [f"set: {name}", f"noise: {config.noise!r}",
                                                              f"sampler: {config.sampler}"]))
    return paths


def write_observation(exact: sr.ObservationVector, observed: sr.ObservationVector, fh, header=()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    fh.write("receptor_id,exact,observed\n")
    ids = exact.receptor_ids or [dsp.sensor_label(i + 1) for i in range(len(exact))]
    for r, e, o in zip(ids, exact.concentrations, observed.concentrations):
        fh.write(f"{r},{float(e)!r},{float(o)!r}\n")


def load_observation(out) -> tuple[sr.ObservationVector, sr.ObservationVector]:
    ids, exact, observed = [], [], []
    with _require(Path(out) / OBSERVATION_FILE, "observation file").open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("receptor_id"):
                continue
            r, e, o = line.split(",")
            ids.append(r)
            exact.append(float(e))
            observed.append(float(o))
    return sr.ObservationVector(exact, ids), sr.ObservationVector(observed, ids)


def load_set(out, name: str) -> sr.TrainingSet:
    with _require(Path(out) / SET_FILES[name], f"{name} set").open(encoding="utf-8") as fh:
        return sr.read_training_set(fh)


def network_path(out, topology: str) -> Path:
    return Path(out) / f"network_{topology_tag(topology)}.txt"


def run_train(config: ExperimentConfig, out, topology: str | None = None) -> tuple[Path, mlp.MlpNetwork, mlp.TrainingHistory]:
    out = Path(out)
    topology = topology or config.topology
    training, activation = load_set(out, "train"), load_set(out, "activation")
    net0 = mlp.init_network(mlp.Topology.parse(topology), stage_seed(config.seed, "init"))
    net, history = mlp.train(net0, training, activation if len(activation) else None, config.training_config())
    tag = topology_tag(topology)
    header = _header(config, "train", [f"topology: {topology}", f"epochs: {config.epochs}"])
    path = _write(network_path(out, topology), mlp.write_network, net, header=header)
    _write(out / f"history_{tag}.csv", write_history, history, header=header)
    return path, net, history


def write_history(history: mlp.TrainingHistory, fh, header=()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    fh.write("epoch,train_sse,activation_sse\n")
    for k, sse in enumerate(history.train_sse, start=1):
        act = history.activation_sse[k - 1] if history.activation_sse else math.nan
        fh.write(f"{k},{sse!r},{act!r}\n")


def load_network(out, topology: str) -> mlp.MlpNetwork:
    path = network_path(out, topology)
    if not path.exists():
        raise ValidationError(f"no trained network for topology {topology} in {out}; run 'train' first")
    with path.open(encoding="utf-8") as fh:
        net, scaler = mlp.read_network(fh)
    if scaler is None or net.epochs_trained < 1:
        raise ValidationError(f"network {path} is untrained")
    return net


def estimate_path(out, solver: str) -> Path:
    return Path(out) / f"estimate_{solver}.csv"


def write_estimate(cells: Sequence[str], rates, fh, header=(), extra: Sequence[str] = ()) -> None:
    for line in [*header, *extra]:
        fh.write(f"# {line}\n")
    fh.write("cell,rate\n")
    for c, r in zip(cells, rates):
        fh.write(f"{c},{float(r)!r}\n")


def read_estimate(path) -> dict[str, float]:
    rates = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("cell,"):
                continue
            c, r = line.split(",")
            rates[c] = float(r)
    return rates


@dataclass
class SolverRun:
    name: str
    rates: np.ndarray
    seconds: float
    note: str = ""


def choose_lambda(config: ExperimentConfig, M: sr.TransitionMatrix, c_obs: sr.ObservationVector) -> float:
    if config.lam is not None:
        return float(config.lam)
    obj = reg.InverseObjective(M, c_obs, 0.0, config.regularizer, config.s_max)
    return reg.select_lambda(obj, config.noise, c_obs, config=config.qn_config())


def run_invert(config: ExperimentConfig, out, solvers: Sequence[str] = ("ann", "qn", "pso"),
               topology: str | None = None) -> list[SolverRun]:
    """Run the requested solvers on the noisy observation and write estimate files."""
    out = Path(out)
    topology = topology or config.topology
    M = load_matrix(out)
    _, observed = load_observation(out)
    cells = M.source_ids
    header = _header(config, "invert")
    runs = []
    if "ann" in solvers:
        net = load_network(out, topology)
        t0 = time.perf_counter()
        est = mlp.invert(net, net.scaler, observed)
        runs.append(SolverRun(f"ann_{topology_tag(topology)}", est.rates, time.perf_counter() - t0,
                              "extrapolated" if est.extrapolated else ""))
        gen = load_set(out, "generalization")
        if len(gen):
            G = np.clip(net.scaler.inverse_y(mlp.predict(net, net.scaler.transform_x(gen.C))), 0.0, None)
            _write(out / f"generalization_{topology_tag(topology)}.csv", sr.write_training_set,
                   sr.TrainingSet(G, gen.C, gen.source_ids, gen.receptor_ids),
                   header=[*header, "estimated emission rates for the generalization inputs"])
    if "qn" in solvers or "pso" in solvers:
        lam = choose_lambda(config, M, observed)
        obj = reg.InverseObjective(M, observed, lam, config.regularizer, config.s_max)
        if "qn" in solvers:
            t0 = time.perf_counter()
            est, diag = reg.quasi_newton_solve(obj, config.qn_config())
            runs.append(SolverRun("qn", est.rates, time.perf_counter() - t0, f"lambda {lam!r}; {diag.message}"))
            _write(out / "diagnostics_qn.csv", reg.write_diagnostics, diag, header=[*header, f"lambda: {lam!r}"])
        if "pso" in solvers:
            t0 = time.perf_counter()
            est, diag = reg.pso_solve(obj, config.pso_config())
            runs.append(SolverRun("pso", est.rates, time.perf_counter() - t0, f"lambda {lam!r}"))
            _write(out / "diagnostics_pso.csv", reg.write_diagnostics, diag, header=[*header, f"lambda: {lam!r}"])
    for run in runs:
        extra = [f"solver: {run.name}"] + ([f"note: {run.note}"] if run.note else [])
        _write(estimate_path(out, run.name), write_estimate, cells, run.rates, header=header, extra=extra)
    return runs


@dataclass
class InversionReport:
    """Side-by-side estimates per active cell and per-solver error metrics."""

    cells: list[str]
    exact: np.ndarray
    estimates: dict[str, np.ndarray]
    runtimes: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def max_relative_error(exact, est) -> float:
        return float(np.max(np.abs(np.asarray(est) - exact) / np.abs(exact)))

    @staticmethod
    def rms_error(exact, est) -> float:
        return float(np.sqrt(np.mean((np.asarray(est) - exact) ** 2)))

    @property
    def metrics(self) -> dict[str, tuple[float, float]]:
        return {name: (self.max_relative_error(self.exact, est), self.rms_error(self.exact, est))
                for name, est in self.estimates.items()}

    def write(self, fh, header=()) -> None:
        for line in header:
            fh.write(f"# {line}\n")
        names = list(self.estimates)
        fh.write("cell,exact," + ",".join(names) + "\n")
        for k, cell in enumerate(self.cells):
            vals = [self.exact[k]] + [self.estimates[n][k] for n in names]
            fh.write(cell + "," + ",".join(repr(float(v)) for v in vals) + "\n")
        fh.write("\nsolver,max_relative_error,rms_error\n")
        for name, (mre, rms) in self.metrics.items():
            fh.write(f"{name},{mre!r},{rms!r}\n")

    @classmethod
    def read(cls, fh) -> "InversionReport":
        lines = [l.strip() for l in fh if l.strip() and not l.startswith("#")]
        names = lines[0].split(",")[2:]
        cells, exact, est = [], [], {n: [] for n in names}
        for line in lines[1:]:
            if line.startswith("solver,"):
                break
            fields = line.split(",")
            cells.append(fields[0])
            exact.append(float(fields[1]))
            for n, v in zip(names, fields[2:]):
                est[n].append(float(v))
        return cls(cells, np.array(exact), {n: np.array(v) for n, v in est.items()})

    @staticmethod
    def read_metrics(fh) -> dict[str, tuple[float, float]]:
        metrics, on = {}, False
        for line in fh:
            line = line.strip()
            if line.startswith("solver,"):
                on = True
                continue
            if on and line:
                name, mre, rms = line.split(",")
                metrics[name] = (float(mre), float(rms))
        return metrics


def grid_values(grid: dsp.DomainGrid, cells: Sequence[str], rates) -> np.ndarray:
    """``(ny, nx)`` array of rates, row 1 (lowest y) first; inactive cells are 0."""
    values = np.zeros((grid.ny, grid.nx))
    for c, r in zip(cells, rates):
        row, col = grid.row_col(dsp.parse_cell_label(c))
        values[row - 1, col - 1] = r
    return values


def write_grid(values: np.ndarray, fh, header=()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    fh.write("# rows run from y = 0 upwards, columns from x = 0\n")
    for row in values:
        fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid(fh) -> np.ndarray:
    rows = [[float(v) for v in l.split(",")] for l in fh if l.strip() and not l.startswith("#")]
    return np.array(rows)


def run_compare(config: ExperimentConfig, out) -> InversionReport:
    """Collect every estimate file into the report and per-solver grid files."""
    out = Path(out)
    cells = config.cell_ids
    paths = sorted(out.glob("estimate_*.csv"), key=_solver_order)
    if not paths:
        raise FileNotFoundError(f"no estimate files in {out}; run 'invert' first")
    estimates = {}
    for p in paths:
        name = p.stem[len("estimate_"):]
        rates = read_estimate(p)
        missing = [c for c in cells if c not in rates]
        if missing:
            raise InconsistencyError(f"{p.name} lacks estimates for {missing}")
        estimates[name] = np.array([rates[c] for c in cells])
    report = InversionReport(cells, config.exact_rates, estimates)
    header = _header(config, "compare", [f"noise: {config.noise!r}"])
    _write(out / REPORT_FILE, report.write, header=header)
    grid = config.make_grid()
    _write(out / "grid_exact.csv", write_grid, grid_values(grid, cells, report.exact), header=header)
    for name, rates in estimates.items():
        _write(out / f"grid_{name}.csv", write_grid, grid_values(grid, cells, rates), header=header)
    return report


def _solver_order(path: Path):
    name = path.stem[len("estimate_"):]
    rank = {"qn": 0, "pso": 1}.get(name, 2)
    return rank, name


def run_all(config: ExperimentConfig, out, topologies: Sequence[str] | None = None) -> InversionReport:
    """simulate -> matrix -> synth -> train (each topology) -> invert -> compare."""
    topologies = list(topologies or [config.topology])
    run_simulate(config, out)
    run_matrix(config, out)
    run_synth(config, out)
    for k, topo in enumerate(topologies):
        run_train(config, out, topo)
        run_invert(config, out, ("ann",) if k else ("ann", "qn", "pso"), topo)
    return run_compare(config, out)
