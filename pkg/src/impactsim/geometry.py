"""Sensor layout, resistive-trace grid and the broken-trace resistance model.

Coordinates are metres in the plane of a sheet, origin at one corner of the
active area.  Both layers share the same (x, y) frame; the bottom layer sits
``layer_separation_h`` below the top one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TOP, BOTTOM = 0, 1
SUBGRIDS = ("A", "B")


class GeometryError(ValueError):
    """Raised for points or holes that fall outside the active area."""


class _OpenCircuit:
    """Sentinel returned when every trace of a subgrid is severed."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OPEN_CIRCUIT"

    def __reduce__(self):
        return (_OpenCircuit, ())


OPEN_CIRCUIT = _OpenCircuit()


def _corner_sensors(width, height, inset):
    return (
        (inset, inset),
        (width - inset, inset),
        (width - inset, height - inset),
        (inset, height - inset),
    )


@dataclass(frozen=True)
class SensorGeometry:
    """Dual-layer sensor frame.

    ``sensor_positions[layer]`` holds four corner sensors ordered
    counter-clockwise starting at the origin corner, so sensors 0-1 and 0-3
    form the two orthogonal baselines used by the multilateration solver.
    """

    layer_separation_h: float = 0.15
    active_area: tuple[float, float] = (0.5, 0.5)
    sensor_inset: float = 0.04
    sensor_positions: tuple = None
    wave_speed_per_layer: tuple[float, float] = (2360.0, 1900.0)
    piezo_position: tuple = ((0.13, 0.31), (0.34, 0.16))

    def __post_init__(self):
        if self.sensor_positions is None:
            s = _corner_sensors(*self.active_area, self.sensor_inset)
            object.__setattr__(self, "sensor_positions", (s, s))
        if self.layer_separation_h <= 0:
            raise ValueError("layer separation must be positive")
        if len(self.sensor_positions) != 2:
            raise ValueError("expected sensor positions for two layers")
        for layer in self.sensor_positions:
            if len(layer) != 4:
                raise ValueError("each layer needs exactly 4 sensors")
            for p in layer:
                if not self.contains(p):
                    raise GeometryError(f"sensor {p} outside active area")
        if any(c <= 0 for c in self.wave_speed_per_layer):
            raise ValueError("wave speeds must be positive")

    def contains(self, point, margin=0.0):
        x, y = point
        w, h = self.active_area
        return -margin <= x <= w + margin and -margin <= y <= h + margin

    def sensors(self, layer) -> np.ndarray:
        return np.asarray(self.sensor_positions[layer], dtype=float)

    def distances(self, layer, point) -> np.ndarray:
        return np.hypot(*(self.sensors(layer) - np.asarray(point, float)).T)


@dataclass(frozen=True)
class GridLayout:
    """Resistive grid printed on the top sheet: four quadrants, each split into
    two interleaved subgrids (A on even trace indices, B on odd).

    ``break_model`` selects how a severed trace changes subgrid resistance:
    ``"parallel"`` uses the parallel-resistor law, ``"empirical"`` adds a
    fixed ``ohms_per_break`` per severed trace on top of the nominal value.
    """

    quadrants: int = 4
    traces_per_quadrant: int = 1640
    traces_per_subgrid: int = 820
    trace_width: float = 75e-6
    trace_gap: float = 75e-6
    trace_length: float = 0.25
    trace_resistance: float = 330e3
    sheet_resistivity: float = 100.0
    tcr: float = 20e-6
    quadrant_size: float = 0.25
    break_model: str = "parallel"
    ohms_per_break: float = 0.7
    # holes narrower than this only nick a trace
    min_sever_diameter: float = 50e-6

    def __post_init__(self):
        if self.traces_per_quadrant != 2 * self.traces_per_subgrid:
            raise ValueError("traces_per_quadrant must be 2 * traces_per_subgrid")
        if self.traces_per_quadrant * self.pitch > self.quadrant_size + 1e-12:
            raise ValueError("traces do not fit in a quadrant")
        if self.break_model not in ("parallel", "empirical"):
            raise ValueError(f"unknown break model {self.break_model!r}")

    @property
    def pitch(self) -> float:
        return self.trace_width + self.trace_gap

    @property
    def nominal_subgrid_resistance(self) -> float:
        return self.trace_resistance / self.traces_per_subgrid

    @property
    def margin(self) -> float:
        return 0.5 * (self.quadrant_size - self.traces_per_quadrant * self.pitch)

    def quadrant_origin(self, q):
        # 0: lower-left, 1: lower-right, 2: upper-right, 3: upper-left
        ox = (0.0, 1.0, 1.0, 0.0)[q] * self.quadrant_size
        oy = (0.0, 0.0, 1.0, 1.0)[q] * self.quadrant_size
        return ox, oy

    def trace_centers(self, q) -> np.ndarray:
        ox, _ = self.quadrant_origin(q)
        i = np.arange(self.traces_per_quadrant)
        return ox + self.margin + (i + 0.5) * self.pitch


@dataclass
class BreakState:
    """Severed-trace counts keyed by ``(quadrant, subgrid)``."""

    broken_per_subgrid: dict = field(default_factory=dict)
    partial_breaks: int = 0

    def __post_init__(self):
        for q in range(4):
            for g in SUBGRIDS:
                self.broken_per_subgrid.setdefault((q, g), 0)

    def count(self, quadrant, subgrid) -> int:
        return self.broken_per_subgrid[(quadrant, subgrid)]

    @property
    def total(self) -> int:
        return sum(self.broken_per_subgrid.values())

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.broken_per_subgrid[(q, g)] for q in range(4) for g in SUBGRIDS]
        )

    def validate(self, layout: GridLayout):
        for key, n in self.broken_per_subgrid.items():
            if not 0 <= n <= layout.traces_per_subgrid:
                raise ValueError(f"break count {n} out of range for {key}")


def subgrid_resistance(layout: GridLayout, n_broken, temp_delta=0.0):
    """Resistance of one 820-trace subgrid with ``n_broken`` traces severed.

    Returns ``OPEN_CIRCUIT`` when no trace is left intact.
    """
    n = int(n_broken)
    total = layout.traces_per_subgrid
    if n < 0 or n > total:
        raise ValueError(f"n_broken={n} outside [0, {total}]")
    if n == total:
        return OPEN_CIRCUIT
    thermal = 1.0 + layout.tcr * temp_delta
    if layout.break_model == "empirical":
        return (layout.nominal_subgrid_resistance + n * layout.ohms_per_break) * thermal
    return layout.trace_resistance / (total - n) * thermal


def breaks_from_resistance(layout: GridLayout, resistance, temp_delta=0.0) -> float:
    """Inverse of :func:`subgrid_resistance`; returns a real-valued count."""
    if resistance is OPEN_CIRCUIT or not math.isfinite(resistance):
        return float(layout.traces_per_subgrid)
    r = resistance / (1.0 + layout.tcr * temp_delta)
    if layout.break_model == "empirical":
        return (r - layout.nominal_subgrid_resistance) / layout.ohms_per_break
    return layout.traces_per_subgrid - layout.trace_resistance / r


def quadrant_of(layout: GridLayout, point) -> int:
    x, y = point
    right = x >= layout.quadrant_size
    upper = y >= layout.quadrant_size
    return {(False, False): 0, (True, False): 1, (True, True): 2, (False, True): 3}[
        (bool(right), bool(upper))
    ]


def traces_intersected(layout: GridLayout, hole_center, hole_diameter) -> BreakState:
    """Count traces severed by a circular hole.

    A trace counts as broken when the hole covers at least half of its width
    and the hole is at least ``min_sever_diameter`` across; smaller overlaps
    are tallied as partial breaks, which the readout cannot resolve.
    """
    cx, cy = map(float, hole_center)
    d = float(hole_diameter)
    if d < 0:
        raise ValueError("hole diameter must be non-negative")
    side = 2 * layout.quadrant_size
    if not (0.0 <= cx <= side and 0.0 <= cy <= side):
        raise GeometryError(f"hole center {hole_center} outside active area")
    state = BreakState()
    if d == 0:
        return state
    r = 0.5 * d
    half_w = 0.5 * layout.trace_width
    tol = 1e-12
    for q in range(layout.quadrants):
        ox, oy = layout.quadrant_origin(q)
        # traces run along y over the full quadrant height
        if cy + r <= oy or cy - r >= oy + layout.trace_length:
            continue
        if cx + r <= ox or cx - r >= ox + layout.quadrant_size:
            continue
        centers = layout.trace_centers(q)
        lo = np.maximum(cx - r, centers - half_w)
        hi = np.minimum(cx + r, centers + half_w)
        overlap = hi - lo
        full = overlap >= half_w - tol
        if d < layout.min_sever_diameter:
            full[:] = False
        partial = (overlap > tol) & ~full
        idx = np.nonzero(full)[0]
        state.broken_per_subgrid[(q, "A")] += int(np.count_nonzero(idx % 2 == 0))
        state.broken_per_subgrid[(q, "B")] += int(np.count_nonzero(idx % 2 == 1))
        state.partial_breaks += int(np.count_nonzero(partial))
    return state
