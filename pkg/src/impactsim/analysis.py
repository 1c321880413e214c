"""Inverse pipeline: arrival times, impact location, trajectory and size.

Arrival times come from the integrated-energy detector: the squared record is
integrated, the mean background power measured over the leading noise window
is removed, and the arrival is where the corrected integral first reaches a
fixed fraction of its maximum.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .geometry import OPEN_CIRCUIT, GridLayout, breaks_from_resistance


class NoSignalError(RuntimeError):
    """Record contains no energy above the background."""


class SingularGeometryError(ValueError):
    """Usable sensors are collinear (or the range system is degenerate)."""


class CausalityError(ValueError):
    """The lower sheet was hit before the upper one."""


class BelowThresholdError(RuntimeError):
    """Resistance change below single-trace resolution."""


# --- arrival-time detection ---------------------------------------------------

@dataclass(frozen=True)
class ArrivalParams:
    threshold: float = 0.15  # fraction of E_max
    noise_window_fraction: float = 0.10
    interpolate: bool = True
    # seconds after the noise window within which E_max is sought; None = whole record
    search_window: float | None = None
    # E_max must exceed this many standard deviations of the noise-only
    # integral over the search span
    detect_sigma: float = 2.0
    crossing: str = "first"  # or "last": final upward crossing before E_max
    # optional (low, high) Hz zero-phase band-pass applied before squaring
    band: tuple | None = None
    band_order: int = 4

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 < self.noise_window_fraction < 1:
            raise ValueError("noise window fraction must lie in (0, 1)")
        if self.crossing not in ("first", "last"):
            raise ValueError("crossing must be 'first' or 'last'")
        if self.band is not None and not 0 < self.band[0] < self.band[1]:
            raise ValueError("band must be (low, high) with 0 < low < high")


# Settings used by the end-to-end pipeline: E_max is sought within 1.2 ms of
# the noise window (long enough for the slowest oblique transit plus the
# farthest sensor), the crossing is the final rise before E_max, which keeps
# noise excursions ahead of a weak arrival from firing early, and the record is
# band-limited around the impact transient to shed out-of-band noise.
PIPELINE_ARRIVAL = ArrivalParams(search_window=1.2e-3, crossing="last", band=(30e3, 100e3))
# The calibration burst sits at 20 kHz, below the impact band.
CALIBRATION_ARRIVAL = ArrivalParams(search_window=1.2e-3, crossing="last")


@dataclass
class EnergyTrace:
    e: np.ndarray  # instantaneous energy v^2
    e_sum: np.ndarray  # running integral at sample edges, len(e) + 1
    noise_power: float  # mean background energy per unit time
    E: np.ndarray  # noise-corrected integral, len(e) + 1
    E_max: float
    peak_index: int
    noise_samples: int
    t0: float
    sample_period: float
    threshold: float
    search_stop: int

    @property
    def noise_window_length(self) -> float:
        return self.noise_samples * self.sample_period

    @property
    def edge_times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.E)) * self.sample_period


def _volts(rec):
    v = getattr(rec, "volts", None)
    if v is None:
        v = np.asarray(rec.samples, dtype=float)
    return np.asarray(v, dtype=float)


@functools.lru_cache(maxsize=32)
def _bandpass_sos(order, band, fs):
    return butter(order, band, "bandpass", fs=fs, output="sos")


def energy_trace(rec, params: ArrivalParams = ArrivalParams()) -> EnergyTrace:
    """Build the noise-corrected integrated energy of a record.

    Each sample's energy is held over its sample period, so ``e_sum[k]`` is the
    energy accumulated up to the start of sample ``k``.
    """
    v = _volts(rec)
    ts = rec.sample_period
    n = len(v)
    if params.band is not None:
        sos = _bandpass_sos(params.band_order, tuple(params.band), 1.0 / ts)
        v = sosfiltfilt(sos, v)
    n_noise = max(1, int(round(params.noise_window_fraction * n)))
    if n_noise >= n:
        raise ValueError("record too short for its noise window")
    e = v * v
    e_sum = np.concatenate(([0.0], np.cumsum(e))) * ts
    noise_power = e_sum[n_noise] / (n_noise * ts)
    E = e_sum - noise_power * ts * np.arange(n + 1)
    stop = n
    if params.search_window is not None:
        stop = min(n, n_noise + int(math.ceil(params.search_window / ts)))
    seg = E[n_noise : stop + 1]
    k = int(np.argmax(seg)) + n_noise
    return EnergyTrace(e, e_sum, noise_power, E, float(E[k]), k, n_noise,
                       rec.t0, ts, params.threshold, stop)


@dataclass(frozen=True)
class Arrival:
    time: float
    significance: float  # E_max in units of the noise-only integral's spread


def detect_arrival(rec, params: ArrivalParams = ArrivalParams()) -> Arrival:
    """Threshold crossing plus a detection significance, without judging it."""
    tr = energy_trace(rec, params)
    span = max(tr.search_stop - tr.noise_samples, 1)
    spread = tr.noise_power * tr.sample_period * math.sqrt(2.0 * span)
    if tr.E_max <= 0:
        return Arrival(math.nan, 0.0)
    z = tr.E_max / spread if spread > 0 else math.inf
    level = params.threshold * tr.E_max
    seg = tr.E[tr.noise_samples : tr.peak_index + 1]
    above = seg >= level
    if params.crossing == "first":
        j = int(np.argmax(above))
    else:
        below = np.nonzero(~above)[0]
        j = int(below[-1]) + 1 if below.size else 0
    k = tr.noise_samples + j
    if k == tr.noise_samples or not params.interpolate:
        return Arrival(tr.t0 + k * tr.sample_period, z)
    e0, e1 = tr.E[k - 1], tr.E[k]
    frac = (level - e0) / (e1 - e0) if e1 != e0 else 1.0
    return Arrival(tr.t0 + (k - 1 + frac) * tr.sample_period, z)


def energy_arrival_time(rec, params: ArrivalParams = ArrivalParams()) -> float:
    """Arrival time of the acoustic energy in ``rec`` (seconds).

    Raises :class:`NoSignalError` when the corrected integral never rises
    meaningfully above the background.
    """
    a = detect_arrival(rec, params)
    if not a.significance > params.detect_sigma:
        raise NoSignalError("integrated energy does not exceed the background")
    return a.time


# --- multilateration -----------------------------------------------------------

@dataclass
class Lateration:
    position: tuple[float, float]
    residual: float
    hit_time: float
    refined: bool
    candidates: int = 1


def _pick_reference(arrivals, finite):
    order = np.argsort(np.where(finite, arrivals, np.inf))
    for k in order:
        if not finite[k]:
            continue
        a, b = (k - 1) % 4, (k + 1) % 4
        if finite[a] and finite[b]:
            return int(k), a, b
    raise SingularGeometryError("no sensor has both orthogonal neighbours")


def _range_residuals(p, sensors, ranges_diff, ref):
    d = np.hypot(*(sensors - p).T)
    return d - d[ref] - ranges_diff


def multilaterate(arrivals, sensor_positions, wave_speed, area=None, weights=None) -> Lateration:
    """Closed-form planar TDOA fix from four corner sensors.

    A corner sensor and its two orthogonal neighbours give two linear equations
    in (x, y, r), r being the range to the corner.  Substituting back into
    r^2 = |p - s_ref|^2 leaves a quadratic in r.  A fourth arrival, when
    present, resolves ambiguous roots, provides the consistency residual and
    drives a single Gauss-Newton refinement over all range differences.

    Optional per-sensor ``weights`` (inverse arrival variances, any scale)
    weight the refinement and the hit-time average.
    """
    t = np.asarray(arrivals, dtype=float)
    s = np.asarray(sensor_positions, dtype=float)
    if s.shape != (4, 2) or t.shape != (4,):
        raise ValueError("expected four sensors and four arrival times")
    finite = np.isfinite(t)
    if finite.sum() < 3:
        raise SingularGeometryError("need at least three arrival times")
    ref, a, b = _pick_reference(t, finite)
    c = float(wave_speed)
    dd = c * (t - t[ref])  # range differences relative to the reference

    s0 = s[ref]
    M = 2.0 * np.array([s[a] - s0, s[b] - s0])
    if abs(np.linalg.det(M)) < 1e-12 * max(1.0, np.abs(M).max() ** 2):
        raise SingularGeometryError("reference sensors are collinear")
    u = np.array([s[i] @ s[i] - s0 @ s0 - dd[i] ** 2 for i in (a, b)])
    w = np.array([2.0 * dd[i] for i in (a, b)])
    P = np.linalg.solve(M, u)
    Q = -np.linalg.solve(M, w)
    g = P - s0
    qa, qb, qc = Q @ Q - 1.0, 2.0 * (Q @ g), g @ g
    if abs(qa) < 1e-12:
        roots = [-qc / qb] if qb != 0 else []
    else:
        disc = qb * qb - 4 * qa * qc
        if disc < 0:
            disc = 0.0  # noisy arrivals: take the closest real point
        sq = math.sqrt(disc)
        roots = [(-qb - sq) / (2 * qa), (-qb + sq) / (2 * qa)]
    cands = []
    for r in roots:
        if r < 0 or any(r + dd[i] < -1e-9 for i in range(4) if finite[i]):
            continue
        cands.append(P + r * Q)
    if not cands:
        # fall back on the root of smallest magnitude
        r = min(roots, key=abs) if roots else 0.0
        cands = [P + max(r, 0.0) * Q]

    fourth = [i for i in range(4) if finite[i] and i not in (ref, a, b)]

    def score(p):
        inside = True
        if area is not None:
            inside = -1e-3 <= p[0] <= area[0] + 1e-3 and -1e-3 <= p[1] <= area[1] + 1e-3
        res = abs(_range_residuals(p, s, dd, ref)[fourth[0]]) if fourth else 0.0
        return (not inside, res)

    best = min(cands, key=score)
    residual = abs(_range_residuals(best, s, dd, ref)[fourth[0]]) if fourth else 0.0

    refined = False
    p = best.copy()
    if fourth:
        idx = [i for i in range(4) if i != ref and finite[i]]
        f = _range_residuals(p, s, dd, ref)[idx]
        unit = (p - s) / np.maximum(np.hypot(*(p - s).T), 1e-12)[:, None]
        J = unit[idx] - unit[ref]
        if weights is not None:
            wv = np.asarray(weights, dtype=float)
            row = 1.0 / np.sqrt(1.0 / wv[idx] + 1.0 / wv[ref])
            J, f = J * row[:, None], f * row
        step, *_ = np.linalg.lstsq(J, -f, rcond=None)
        p = p + step
        refined = True

    dist = np.hypot(*(s - p).T)
    wt = np.ones(4) if weights is None else np.asarray(weights, dtype=float)
    hit = float(np.average(t[finite] - dist[finite] / c, weights=wt[finite]))
    return Lateration((float(p[0]), float(p[1])), float(residual), hit, refined, len(cands))


# --- dual-layer solution ---------------------------------------------------------

@dataclass
class LayerHit:
    layer: int
    position: tuple[float, float]
    hit_time: float
    arrivals: tuple = ()
    residual: float = 0.0
    extrapolated: bool = False


@dataclass
class ImpactSolution:
    L_p: float
    theta_x: float  # degrees
    theta_y: float
    c_p: float
    top: LayerHit
    bottom: LayerHit
    size_estimate: float | None = None

    def to_dict(self) -> dict:
        return {
            "L_p": self.L_p,
            "theta_x": self.theta_x,
            "theta_y": self.theta_y,
            "c_p": self.c_p,
            "size_estimate": self.size_estimate,
            "x1": self.top.position[0],
            "y1": self.top.position[1],
            "t1": self.top.hit_time,
            "x2": self.bottom.position[0],
            "y2": self.bottom.position[1],
            "t2": self.bottom.hit_time,
        }


def solve_impact(top: LayerHit, bottom: LayerHit, h: float) -> ImpactSolution:
    """Path length, arrival angles and speed from the two layer hits."""
    dt = bottom.hit_time - top.hit_time
    if not dt > 0:
        raise CausalityError(f"non-positive transit time {dt:.3e} s")
    dx = bottom.position[0] - top.position[0]
    dy = bottom.position[1] - top.position[1]
    L_p = math.sqrt(dx * dx + dy * dy + h * h)
    return ImpactSolution(
        L_p=L_p,
        theta_x=math.degrees(math.atan(dx / h)),
        theta_y=math.degrees(math.atan(dy / h)),
        c_p=L_p / dt,
        top=top,
        bottom=bottom,
    )


OFF_SHEET_MARGIN = 0.01  # metres a fix may stray past the sheet edge


def locate_layer(layer, arrivals, geom, significance=None, max_residual=None) -> LayerHit:
    """Fix one layer.

    When the fourth sensor disagrees by more than ``max_residual`` metres, or
    the fix lands off the sheet, each channel is dropped in turn (least
    significant first) and the first fix that lands on the sheet is kept.
    """
    arrivals = np.asarray(arrivals, dtype=float)
    sensors = geom.sensors(layer)
    c = geom.wave_speed_per_layer[layer]
    w = None
    if significance is not None:
        z = np.nan_to_num(np.asarray(significance, float), posinf=1e6)
        w = np.clip(z, 1e-3, 1e6) ** 2
    lat = multilaterate(arrivals, sensors, c, geom.active_area, w)
    suspect = not geom.contains(lat.position, OFF_SHEET_MARGIN) or (
        max_residual is not None and lat.residual > max_residual)
    if suspect and significance is not None and np.isfinite(arrivals).sum() == 4:
        for drop in np.argsort(z):
            trimmed = arrivals.copy()
            trimmed[drop] = np.nan
            try:
                alt = multilaterate(trimmed, sensors, c, geom.active_area, w)
            except SingularGeometryError:
                continue
            if geom.contains(alt.position, OFF_SHEET_MARGIN):
                lat = alt
                break
    return LayerHit(layer, lat.position, lat.hit_time, tuple(float(a) for a in arrivals),
                    lat.residual, not geom.contains(lat.position))


def layer_arrivals(capture, params: ArrivalParams = ArrivalParams()):
    """Per-channel arrivals and significances.

    Channels below the detection significance are blanked (NaN), except that
    each layer keeps its three most significant channels so the fix remains
    determined.
    """
    found = [detect_arrival(rec, params) for rec in capture]
    t = np.array([a.time for a in found])
    z = np.array([a.significance for a in found])
    out = t.copy()
    for lo in range(0, len(capture), 4):
        zz = z[lo : lo + 4]
        keep = zz > params.detect_sigma
        if keep.sum() < 3:
            keep = np.zeros(4, bool)
            keep[np.argsort(zz)[-3:]] = True
        out[lo : lo + 4][~keep] = np.nan
    return out, z


def analyze_capture(capture, geom, params: ArrivalParams = PIPELINE_ARRIVAL, max_residual=0.01):
    """Arrival detection and dual-layer solve on an 8-channel capture."""
    arrivals, z = layer_arrivals(capture, params)
    top = locate_layer(0, arrivals[:4], geom, z[:4], max_residual)
    bottom = locate_layer(1, arrivals[4:], geom, z[4:], max_residual)
    return solve_impact(top, bottom, geom.layer_separation_h), arrivals


# --- size from grid readout -------------------------------------------------------

@dataclass
class SizeEstimate:
    diameter: float
    n_breaks: int
    lower: float
    upper: float
    per_subgrid: dict = field(default_factory=dict)


MIN_DETECTABLE_DIAMETER = 50e-6


def grid_temperature(gm, cfg=None) -> float:
    from .acquisition import RgsConfig, counts_to_thermistor

    cfg = cfg or RgsConfig()
    return float(np.mean(counts_to_thermistor(gm.thermistor_counts[:4], cfg)))


def estimate_size(gm, layout: GridLayout, baseline=None, temp_delta=None, reference_temp=25.0) -> SizeEstimate:
    """Particle diameter from the number of severed traces.

    Break counts come from inverting the subgrid resistance law on each
    subgrid; with a ``baseline`` measurement the pre-existing breaks are
    subtracted.  The estimate is ``n * pitch``; the range ``[(n-1), (n+1)] *
    pitch`` (floored at 50 um) bounds the hole diameter.
    """
    if temp_delta is None:
        temp_delta = grid_temperature(gm) - reference_temp

    def counts(m, dT):
        out = {}
        for q, reading in enumerate(m.quadrants):
            for g, r in (("A", reading.r_a), ("B", reading.r_b)):
                if reading.open_circuit or not math.isfinite(r):
                    out[(q, g)] = float(layout.traces_per_subgrid)
                else:
                    out[(q, g)] = breaks_from_resistance(layout, r, dT)
        return out

    now = counts(gm, temp_delta)
    if baseline is not None:
        before = counts(baseline, grid_temperature(baseline) - reference_temp)
        now = {k: now[k] - before[k] for k in now}
    per = {k: max(0, int(round(v))) for k, v in now.items()}
    n = sum(per.values())
    if n == 0:
        raise BelowThresholdError("resistance change below single-trace resolution")
    pitch = layout.pitch
    return SizeEstimate(
        diameter=n * pitch,
        n_breaks=n,
        lower=max((n - 1) * pitch, MIN_DETECTABLE_DIAMETER),
        upper=(n + 1) * pitch,
        per_subgrid=per,
    )


# --- log-log regression -----------------------------------------------------------

@dataclass
class RegressionStats:
    slope: float
    intercept: float
    r_squared: float
    f_statistic: float
    p_value: float
    n: int

    def to_dict(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "f_statistic": self.f_statistic,
            "p_value": self.p_value,
            "n": self.n,
        }


def _betacf(a, b, x, max_iter=300, eps=1e-15):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a, b, x) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1) / (a + b + 2):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f, d1, d2) -> float:
    """Upper tail probability of the F(d1, d2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_regularized(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))


def regress_loglinear(x, y) -> RegressionStats:
    """Ordinary least squares of log10(y) on log10(x) with an F test on the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length 1-D series")
    if len(x) < 3:
        raise ValueError("need at least three points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-domain regression needs positive values")
    lx, ly = np.log10(x), np.log10(y)
    mx, my = lx.mean(), ly.mean()
    sxx = float(((lx - mx) ** 2).sum())
    if sxx == 0:
        raise ValueError("zero variance in x: slope undefined")
    sxy = float(((lx - mx) * (ly - my)).sum())
    syy = float(((ly - my) ** 2).sum())
    slope = sxy / sxx
    intercept = my - slope * mx
    n = len(x)
    if syy == 0:
        return RegressionStats(0.0, float(my), 0.0, 0.0, 1.0, n)
    ss_res = max(syy - slope * sxy, 0.0)
    r2 = min(max(1.0 - ss_res / syy, 0.0), 1.0)
    df = n - 2
    if ss_res == 0:
        f, p = math.inf, 0.0
    elif df == 0:
        f, p = math.nan, math.nan
    else:
        f = (syy - ss_res) / (ss_res / df)
        p = f_sf(f, 1, df)
    return RegressionStats(float(slope), float(intercept), float(r2), float(f), float(p), n)
