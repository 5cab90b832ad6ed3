"""Source-receptor transition matrices, forward predictions and synthetic data.

``C_i = sum_j M_ij S_j`` with ``S`` in g m^-3 s^-1, ``C`` in g m^-3 and
``M`` in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dispersion import BACKWARD, FORWARD, DetectionCounts, DomainGrid, SensorSpec
from .errors import InconsistencyError, ParseError, ValidationError

DEFAULT_RATE_RANGE = (0.0, 30.0)
UNIFORM = "uniform"
PERTURBED = "perturbed"
SAMPLERS = (UNIFORM, PERTURBED)


@dataclass
class TransitionMatrix:
    entries: np.ndarray
    receptor_ids: list[str]
    source_ids: list[str]

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2:
            raise ValidationError("transition matrix must be two-dimensional")
        if self.entries.shape != (len(self.receptor_ids), len(self.source_ids)):
            raise ValidationError(
                f"matrix shape {self.entries.shape} does not match "
                f"{len(self.receptor_ids)} receptors x {len(self.source_ids)} sources"
            )
        if np.any(self.entries < 0) or not np.all(np.isfinite(self.entries)):
            raise ValidationError("transition matrix entries must be finite and >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def select_sources(self, source_ids: Sequence[str]) -> "TransitionMatrix":
        missing = [s for s in source_ids if s not in self.source_ids]
        if missing:
            raise InconsistencyError(f"matrix has no column for {missing}")
        cols = [self.source_ids.index(s) for s in source_ids]
        return TransitionMatrix(self.entries[:, cols], list(self.receptor_ids), list(source_ids))


@dataclass
class EmissionVector:
    rates: np.ndarray
    source_ids: list[str] | None = None
    extrapolated: bool = False

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float).reshape(-1)
        if np.any(self.rates < 0):
            raise ValidationError("emission rates must be >= 0")

    def __len__(self) -> int:
        return self.rates.size


@dataclass
class ObservationVector:
    concentrations: np.ndarray
    receptor_ids: list[str] | None = None

    def __post_init__(self):
        self.concentrations = np.asarray(self.concentrations, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return self.concentrations.size


@dataclass(frozen=True)
class NoiseModel:
    """Relative Gaussian noise ``I = I_exact (1 + sigma mu)``, ``mu ~ N(0, 1)``."""

    sigma: float = 0.0
    seed: int = 0
    clamp: bool = True

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError(f"noise sigma must be >= 0, got {self.sigma}")


def _check_counts_direction(counts: DetectionCounts, expected: str) -> None:
    if counts.direction != expected:
        raise InconsistencyError(
            f"counts come from a {counts.direction} run; the {expected} formula does not apply"
        )


def _normalise(counts: np.ndarray, released: np.ndarray, ids: Sequence[str], axis: int) -> np.ndarray:
    released = np.asarray(released, dtype=float)
    detected = counts.sum(axis=axis) > 0
    bad = (released <= 0) & detected
    if bad.any():
        names = [ids[i] for i in np.flatnonzero(bad)]
        raise InconsistencyError(f"detections recorded for releasers with no particles: {names}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(released > 0, 1.0 / released, 0.0)


def build_matrix_forward(counts: DetectionCounts, grid: DomainGrid, sensors: Sequence[SensorSpec],
                         dt: float | None = None) -> TransitionMatrix:
    """``M_ij = (V_S,j / V_R,i) (dt / N_S,j) N_R,i,j`` from forward-run counts."""
    _check_counts_direction(counts, FORWARD)
    dt = counts.dt if dt is None else dt
    if len(sensors) != len(counts.receptor_ids):
        raise InconsistencyError("sensor list and counts disagree on the number of receptors")
    n_s = np.array([counts.released_by(s) for s in counts.source_ids], dtype=float)
    inv_n = _normalise(counts.counts, n_s, counts.source_ids, axis=0)
    v_r = np.array([s.volume for s in sensors], dtype=float)
    entries = (grid.cell_volume / v_r)[:, None] * (dt * inv_n)[None, :] * counts.counts
    return TransitionMatrix(entries, list(counts.receptor_ids), list(counts.source_ids))


def build_matrix_backward(counts: DetectionCounts, dt: float | None = None) -> TransitionMatrix:
    """``M_ij = (dt / N_i) N_S,i,j`` from backward-run counts.

    ``N_i`` is the number of particles released backwards from receptor ``i``
    and ``N_S,i,j`` the particle-steps they spent inside source cell ``j``.
    """
    _check_counts_direction(counts, BACKWARD)
    dt = counts.dt if dt is None else dt
    n_r = np.array([counts.released_by(r) for r in counts.receptor_ids], dtype=float)
    inv_n = _normalise(counts.counts, n_r, counts.receptor_ids, axis=1)
    entries = (dt * inv_n)[:, None] * counts.counts
    return TransitionMatrix(entries, list(counts.receptor_ids), list(counts.source_ids))


def predict_concentrations(M: TransitionMatrix, S) -> ObservationVector:
    rates = S.rates if isinstance(S, EmissionVector) else np.asarray(S, dtype=float)
    if rates.shape != (M.shape[1],):
        raise ValidationError(f"emission vector of length {rates.size} does not fit a {M.shape} matrix")
    return ObservationVector(M.entries @ rates, list(M.receptor_ids))


def add_noise(exact, model: NoiseModel, rng=None, mu=None) -> ObservationVector:
    """Multiply each component by ``1 + sigma mu`` with a fresh normal ``mu``.

    ``mu`` pins the draws (a scalar or one value per component). Negative
    results are clamped to zero unless ``model.clamp`` is off.
    """
    obs = exact if isinstance(exact, ObservationVector) else ObservationVector(exact)
    c = obs.concentrations
    if model.sigma == 0:
        return ObservationVector(c.copy(), obs.receptor_ids)
    if mu is None:
        rng = np.random.default_rng(model.seed) if rng is None else rng
        mu = rng.standard_normal(c.shape)
    noisy = c * (1.0 + model.sigma * np.broadcast_to(np.asarray(mu, dtype=float), c.shape))
    if model.clamp:
        noisy = np.maximum(noisy, 0.0)
    return ObservationVector(noisy, obs.receptor_ids)


@dataclass
class TrainingSet:
    """Paired emission vectors (rows of ``S``) and noisy concentrations (rows of ``C``)."""

    S: np.ndarray
    C: np.ndarray
    source_ids: list[str] = field(default_factory=list)
    receptor_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.S.shape[0] != self.C.shape[0]:
            raise ValidationError("S and C must have the same number of rows")

    def __len__(self) -> int:
        return self.S.shape[0]

    def __iter__(self):
        for s, c in zip(self.S, self.C):
            yield EmissionVector(s, self.source_ids), ObservationVector(c, self.receptor_ids)

    def subset(self, index) -> "TrainingSet":
        return TrainingSet(self.S[index], self.C[index], list(self.source_ids), list(self.receptor_ids))

    def split(self, sizes: Sequence[int]) -> list["TrainingSet"]:
        """Consecutive disjoint blocks of the given sizes (which must cover the set)."""
        if sum(sizes) != len(self) or any(n < 0 for n in sizes):
            raise ValidationError(f"split sizes {list(sizes)} do not partition {len(self)} pairs")
        edges = np.cumsum([0, *sizes])
        return [self.subset(slice(a, b)) for a, b in zip(edges[:-1], edges[1:])]


def sample_emissions(n: int, n_sources: int, rate_range, rng, sampler: str = UNIFORM,
                     reference=None, spread: float = 0.25) -> np.ndarray:
    """Draw ``n`` emission vectors.

    ``uniform`` draws each component independently in ``rate_range``.
    ``perturbed`` multiplies a ``reference`` vector by ``1 + spread * mu``
    per component and clips the result to ``rate_range``.
    """
    lo, hi = (float(v) for v in rate_range)
    if not (0 <= lo < hi):
        raise ValidationError(f"rate range must satisfy 0 <= min < max, got {rate_range}")
    if sampler == UNIFORM:
        return rng.uniform(lo, hi, size=(n, n_sources))
    if sampler == PERTURBED:
        if reference is None:
            raise ValidationError("the perturbed sampler needs a reference emission vector")
        ref = np.asarray(reference, dtype=float).reshape(1, n_sources)
        return np.clip(ref * (1.0 + spread * rng.standard_normal((n, n_sources))), lo, hi)
    raise ValidationError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")


def generate_training_set(M: TransitionMatrix, n_pairs: int, rate_range=DEFAULT_RATE_RANGE,
                          model: NoiseModel = NoiseModel(), *, seed: int | None = None,
                          rates=None, sampler: str = UNIFORM, reference=None,
                          spread: float = 0.25) -> TrainingSet:
    """Emission/concentration pairs ``(S, add_noise(M S))``.

    Every pair owns a random stream spawned from ``seed`` (defaults to the
    noise seed), so pair ``k`` does not depend on how many pairs are drawn
    after it. ``rates`` supplies the emission vectors directly.
    """
    if n_pairs < 1:
        raise ValidationError(f"n_pairs must be >= 1, got {n_pairs}")
    lo, hi = (float(v) for v in rate_range)
    if not (0 <= lo < hi):
        raise ValidationError(f"rate range must satisfy 0 <= min < max, got {rate_range}")
    root = np.random.SeedSequence(model.seed if seed is None else seed)
    streams = [np.random.default_rng(s) for s in root.spawn(n_pairs)]
    n_src = M.shape[1]
    if rates is not None:
        S = np.broadcast_to(np.asarray(rates, dtype=float), (n_pairs, n_src)).copy()
    else:
        S = np.vstack([sample_emissions(1, n_src, (lo, hi), g, sampler, reference, spread) for g in streams])
    C = np.empty((n_pairs, M.shape[0]))
    for k, g in enumerate(streams):
        exact = predict_concentrations(M, S[k])
        C[k] = add_noise(exact, model, rng=g).concentrations
    return TrainingSet(S, C, list(M.source_ids), list(M.receptor_ids))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrix(M: TransitionMatrix, fh, header: Sequence[str] = ()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    fh.write("receptor_id," + ",".join(M.source_ids) + "\n")
    for r, row in zip(M.receptor_ids, M.entries):
        fh.write(r + "," + ",".join(_fmt(v) for v in row) + "\n")


def _data_lines(fh):
    for lineno, raw in enumerate(fh, start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def read_header_meta(fh) -> dict[str, str]:
    meta = {}
    for raw in fh:
        line = raw.strip()
        if line.startswith("#") and ":" in line:
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
    return meta


def read_matrix(fh) -> TransitionMatrix:
    lines = list(_data_lines(fh))
    if not lines:
        raise ParseError("empty matrix file")
    source_ids = lines[0][1].split(",")[1:]
    receptor_ids, rows = [], []
    for lineno, line in lines[1:]:
        fields = line.split(",")
        if len(fields) != len(source_ids) + 1:
            raise ParseError(f"expected {len(source_ids) + 1} fields", row=lineno)
        receptor_ids.append(fields[0])
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), row=lineno) from None
    entries = np.array(rows, dtype=float).reshape(len(receptor_ids), len(source_ids))
    return TransitionMatrix(entries, receptor_ids, source_ids)


def write_training_set(ts: TrainingSet, fh, header: Sequence[str] = ()) -> None:
    """One row per pair: emission columns then concentration columns."""
    for line in header:
        fh.write(f"# {line}\n")
    cols = [f"S_{s}" for s in ts.source_ids] + [f"C_{r}" for r in ts.receptor_ids]
    fh.write(",".join(cols) + "\n")
    for s, c in zip(ts.S, ts.C):
        fh.write(",".join(_fmt(v) for v in np.concatenate([s, c])) + "\n")


def read_training_set(fh) -> TrainingSet:
    lines = list(_data_lines(fh))
    if not lines:
        raise ParseError("empty training-set file")
    cols = lines[0][1].split(",")
    source_ids = [c[2:] for c in cols if c.startswith("S_")]
    receptor_ids = [c[2:] for c in cols if c.startswith("C_")]
    if len(source_ids) + len(receptor_ids) != len(cols):
        raise ParseError("columns must be named S_<source> or C_<receptor>", row=lines[0][0])
    rows = []
    for lineno, line in lines[1:]:
        try:
            values = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise ParseError(str(exc), row=lineno) from None
        if len(values) != len(cols):
            raise ParseError(f"expected {len(cols)} fields", row=lineno)
        rows.append(values)
    data = np.array(rows, dtype=float).reshape(len(rows), len(cols))
    ns = len(source_ids)
    return TrainingSet(data[:, :ns], data[:, ns:], source_ids, receptor_ids)
