"""Mean wind records and prescribed turbulence statistics.

Wind is piecewise constant in time (one record per averaging period) and
interpolated linearly in ``ln z`` between measurement heights, clamped
outside the measured range. Turbulence is homogeneous and stationary.
"""

from __future__ import annotations

import io
import math
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ParseError, ValidationError

DEFAULT_HEIGHTS = (10.0, 120.0, 200.0)
DEFAULT_PERIOD = 600.0
BUNDLED_METEOROLOGY = "copenhagen_1978-10-19.csv"

_TIME_RE = re.compile(r"^(\d{1,2}):(\d{2})$")


@dataclass(frozen=True)
class WindRecord:
    """Mean wind observed at several heights over one averaging period.

    ``directions`` follow the meteorological convention: degrees clockwise
    from north, giving the direction the wind blows *from*.
    """

    time_label: str
    speeds: tuple[float, ...]
    directions: tuple[float, ...]
    heights: tuple[float, ...] = DEFAULT_HEIGHTS

    def __post_init__(self):
        speeds = tuple(float(s) for s in self.speeds)
        directions = tuple(float(d) for d in self.directions)
        heights = tuple(float(h) for h in self.heights)
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "heights", heights)
        n = len(heights)
        if n < 1 or len(speeds) != n or len(directions) != n:
            raise ValidationError(
                f"record {self.time_label!r}: speeds, directions and heights "
                f"must have equal length >= 1 (got {len(speeds)}, {len(directions)}, {n})"
            )
        if any(not math.isfinite(s) or s < 0 for s in speeds):
            raise ValidationError(f"record {self.time_label!r}: speeds must be >= 0, got {speeds}")
        if any(not (0.0 <= d < 360.0) for d in directions):
            raise ValidationError(
                f"record {self.time_label!r}: directions must lie in [0, 360), got {directions}"
            )
        if any(h <= 0 for h in heights) or any(b <= a for a, b in zip(heights, heights[1:])):
            raise ValidationError(
                f"record {self.time_label!r}: heights must be positive and strictly increasing, got {heights}"
            )

    @property
    def minutes(self) -> int:
        m = _TIME_RE.match(self.time_label)
        if m is None:
            return 0
        return int(m.group(1)) * 60 + int(m.group(2))

    def _unwrapped_directions(self) -> np.ndarray:
        # consecutive levels joined along the shorter arc
        d = np.asarray(self.directions, dtype=float)
        steps = (np.diff(d) + 180.0) % 360.0 - 180.0
        return np.concatenate(([d[0]], d[0] + np.cumsum(steps)))

    def speed_direction(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated speed and direction at height(s) ``z``.

        Heights at or below zero are treated as lying below the lowest level.
        """
        z = np.asarray(z, dtype=float)
        logh = np.log(self.heights)
        logz = np.log(np.maximum(z, self.heights[0]))
        speed = np.interp(logz, logh, self.speeds)
        direction = np.interp(logz, logh, self._unwrapped_directions()) % 360.0
        return speed, direction

    def components(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Horizontal wind components (u eastward, v northward) at ``z``."""
        speed, direction = self.speed_direction(z)
        rad = np.deg2rad(direction)
        return -speed * np.sin(rad), -speed * np.cos(rad)


@dataclass(frozen=True)
class TurbulenceParams:
    """Velocity variances (m^2/s^2) and Lagrangian time scales (s) for u, v, w."""

    sigma2: tuple[float, float, float] = (0.5, 0.5, 0.25)
    tau_L: tuple[float, float, float] = (100.0, 100.0, 50.0)

    def __post_init__(self):
        sigma2 = tuple(float(s) for s in self.sigma2)
        tau_L = tuple(float(t) for t in self.tau_L)
        if len(sigma2) != 3 or len(tau_L) != 3:
            raise ValidationError("sigma2 and tau_L need exactly three components (u, v, w)")
        if any(not math.isfinite(s) or s < 0 for s in sigma2):
            raise ValidationError(f"sigma2 must be >= 0, got {sigma2}")
        if any(not math.isfinite(t) or t <= 0 for t in tau_L):
            raise ValidationError(f"tau_L must be > 0, got {tau_L}")
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "tau_L", tau_L)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.sigma2))


def _parse_time(label: str, row: int) -> str:
    m = _TIME_RE.match(label)
    if m is None or int(m.group(1)) > 23 or int(m.group(2)) > 59:
        raise ParseError(f"bad time {label!r}, expected h:m", row=row, column=1)
    return f"{int(m.group(1)):02d}:{m.group(2)}"


def _split_fields(line: str) -> list[str]:
    if ";" in line:
        fields = [f.replace(",", ".") for f in line.split(";")]
    elif "\t" in line:
        fields = [f.replace(",", ".") for f in line.split("\t")]
    else:
        fields = line.split(",")
    return [f.strip() for f in fields]


def parse_meteorology(lines: Iterable[str], heights: Sequence[float] | None = None) -> list[WindRecord]:
    """Parse delimited wind rows into records sorted by time.

    Each data row holds a time label followed by one speed per height and
    then one direction per height. A ``# heights: ...`` comment overrides the
    default heights unless ``heights`` is given explicitly. A header row whose
    first field is not a time label is skipped.
    """
    found_heights = None
    rows: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*heights\s*:\s*(.+)$", line, flags=re.IGNORECASE)
            if m:
                try:
                    found_heights = tuple(float(h) for h in _split_fields(m.group(1)) if h)
                except ValueError as exc:
                    raise ParseError(f"bad heights comment: {exc}", row=lineno) from None
            continue
        fields = _split_fields(line)
        if not rows and not _TIME_RE.match(fields[0]):
            continue  # header
        rows.append((lineno, fields))

    hs = tuple(float(h) for h in (heights or found_heights or DEFAULT_HEIGHTS))
    if any(b <= a for a, b in zip(hs, hs[1:])):
        raise ValidationError(f"heights must be strictly increasing, got {hs}")
    n = len(hs)

    records = []
    for lineno, fields in rows:
        if len(fields) != 1 + 2 * n:
            raise ParseError(f"expected {1 + 2 * n} fields, found {len(fields)}", row=lineno)
        label = _parse_time(fields[0], lineno)
        values = []
        for col, text in enumerate(fields[1:], start=2):
            try:
                values.append(float(text))
            except ValueError:
                raise ParseError(f"not a number: {text!r}", row=lineno, column=col) from None
        try:
            rec = WindRecord(label, tuple(values[:n]), tuple(values[n:]), hs)
        except ValidationError as exc:
            raise ValidationError(f"row {lineno}: {exc}") from None
        records.append(rec)
    records.sort(key=lambda r: r.minutes)
    return records


def load_meteorology(source=None, heights: Sequence[float] | None = None) -> list[WindRecord]:
    """Load wind records from a path, an open text stream, or the bundled table.

    Passing ``None`` loads the bundled Copenhagen table. Strings containing a
    newline are parsed as literal text.
    """
    if source is None:
        text = resources.files("plumeinv.data").joinpath(BUNDLED_METEOROLOGY).read_text()
        return parse_meteorology(io.StringIO(text), heights)
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return parse_meteorology(source, heights)
    if isinstance(source, str) and "\n" in source:
        return parse_meteorology(io.StringIO(source), heights)
    if isinstance(source, str) and source == "":
        return []
    path = Path(os.fspath(source))
    with path.open(encoding="utf-8") as fh:
        return parse_meteorology(fh, heights)


def record_index(n_records: int, t: float, period: float = DEFAULT_PERIOD) -> int:
    """Index of the record governing elapsed time ``t`` (clamped to the table)."""
    k = int(math.floor(t / period)) if t > 0 else 0
    return min(max(k, 0), n_records - 1)


def record_at(records: Sequence[WindRecord], t: float, period: float = DEFAULT_PERIOD) -> WindRecord:
    if not records:
        raise ValidationError("no wind records")
    return records[record_index(len(records), t, period)]


def mean_wind_at(
    records: Sequence[WindRecord], z: float, t: float, period: float = DEFAULT_PERIOD
) -> tuple[float, float, float]:
    """Mean wind vector (u, v, w) in m/s at height ``z`` and elapsed time ``t``."""
    if not z > 0:
        raise DomainError(f"height must be > 0, got {z}")
    u, v = record_at(records, t, period).components(z)
    return float(u), float(v), 0.0


def turbulence_at(params: TurbulenceParams, z: float) -> TurbulenceParams:
    """Turbulence statistics at height ``z``; the field is homogeneous."""
    return params
